"""Command-line entry point: one subcommand per pipeline stage.

Configuration is layered: built-in defaults < JSON config file <
``MAD_<SECTION>_<KEY>`` environment variables < ``--set section.key=value``
flags. Every run writes ``<workspace>/runs/<run_id>/manifest.json``.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numeric error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
import uuid
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

from madbench import __version__
from madbench.errors import ConfigError, DataError, MadError, NumericError

log = logging.getLogger("madbench")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "model": {"architecture_id": "small_cnn", "width": None},
    "train": {"epochs": 10, "batch_size": 32, "learning_rate": 0.05, "optimizer": "sgd", "momentum": 0.9, "seed": 0},
    "gen": {"batch": 128, "seed": 0, "min_per_class": 5, "grouping": None, "jobs": None, "name": "mad", "margin_tol": 1e-4},
    "meta": {},
    "at": {"epochs": 5, "batch_size": 32, "learning_rate": 0.05, "optimizer": "sgd", "momentum": 0.9, "seed": 0,
           "mix_clean": True, "pregen_ratio": 0.5, "inner_attack": 18},
    "eval": {"roles": ["test_learned", "test_new"], "attack_ids": None, "finetune_steps": None, "seed": 0},
}


def _meta_defaults():
    from madbench.meta_at import MetaParams

    return MetaParams().to_dict()


# --------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object of sections")
    return raw


def _merge(base: dict, layer: dict, origin: str) -> None:
    for section, values in layer.items():
        if section not in base:
            raise ConfigError(f"{origin}: unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: section {section!r} must be an object")
        for key, value in values.items():
            if key not in base[section]:
                raise ConfigError(f"{origin}: unknown field {section}.{key}")
            base[section][key] = value


def _env_layer(environ) -> dict:
    layer = {}
    for name, value in environ.items():
        if not name.startswith("MAD_"):
            continue
        section, _, key = name[4:].partition("_")
        section, key = section.lower(), key.lower()
        if section not in DEFAULTS or not key:
            continue
        layer.setdefault(section, {})[key] = _parse_value(value)
    return layer


def _flag_layer(assignments) -> dict:
    layer = {}
    for item in assignments or []:
        target, sep, value = item.partition("=")
        section, dot, key = target.partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        layer.setdefault(section, {})[key] = _parse_value(value)
    return layer


def resolve_config(config_path=None, assignments=None, environ=None) -> dict:
    """Defaults < file < environment < flags, with unknown keys rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    cfg["meta"] = _meta_defaults()
    if config_path:
        _merge(cfg, _read_config_file(config_path), str(config_path))
    env = os.environ if environ is None else environ
    _merge(cfg, _env_layer(env), "environment")
    _merge(cfg, _flag_layer(assignments), "--set")
    return cfg


def _build(kind, values: dict, where: str):
    try:
        return kind(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _train_config(section: dict):
    from madbench.core_model import TrainConfig

    names = {f.name for f in fields(TrainConfig)}
    return _build(TrainConfig, {k: v for k, v in section.items() if k in names}, "train")


def _meta_params(section: dict):
    from madbench.meta_at import MetaParams

    return MetaParams.from_dict(section)


def _at_config(section: dict):
    from madbench.attacks import AttackSpec, default_spec
    from madbench.baseline_at import ATConfig

    values = dict(section)
    inner = values.pop("inner_attack")
    if isinstance(inner, int):
        inner = default_spec(inner)
    elif isinstance(inner, dict):
        inner = AttackSpec.from_dict(inner)
    else:
        raise ConfigError("at.inner_attack must be an attack id or an attack spec object")
    return _build(ATConfig, dict(values, inner_attack=inner), "at")


# --------------------------------------------------------------------------
# run registry


_VOLATILE_KEYS = {"ot_hours", "ot_total_hours", "edsr", "started", "finished", "timestamps"}
_VOLATILE_COLUMNS = {"ot_hours", "edsr"}


def _strip_volatile(obj):
    if isinstance(obj, dict):
        return {k: _strip_volatile(v) for k, v in obj.items() if k not in _VOLATILE_KEYS}
    if isinstance(obj, list):
        return [_strip_volatile(v) for v in obj]
    return obj


def _canonical_bytes(path: Path):
    """File content with wall-clock fields removed; None for files left out of the hash."""
    suffix = path.suffix
    if suffix == ".png":
        return None
    if suffix == ".json":
        return json.dumps(_strip_volatile(json.loads(path.read_text(encoding="utf-8"))), sort_keys=True).encode()
    if suffix == ".jsonl":
        lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        return json.dumps(_strip_volatile(lines), sort_keys=True).encode()
    if suffix == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            return b""
        keep = [i for i, name in enumerate(rows[0]) if name not in _VOLATILE_COLUMNS]
        return "\n".join(",".join(row[i] for i in keep) for row in rows).encode()
    return path.read_bytes()


def content_hash(paths) -> str:
    """SHA-256 over output files in path order, ignoring OT and timestamps."""
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            data = _canonical_bytes(f)
            if data is None:
                continue
            h.update(f.name.encode() + b"\0")
            h.update(hashlib.sha256(data).digest())
    return h.hexdigest()


class Run:
    """One registry entry; the manifest is written when the command finishes."""

    def __init__(self, workspace, command: str, run_id=None):
        self.workspace = Path(workspace)
        self.command = command
        self.run_id = run_id or f"{command}-{uuid.uuid4().hex[:8]}"
        self.dir = self.workspace / "runs" / self.run_id
        self.started = datetime.now(timezone.utc).isoformat()
        self.inputs, self.outputs = {}, {}

    def output_dir(self, out=None, sub=None) -> Path:
        """``out`` if given, else the run directory (or ``sub`` inside it)."""
        path = Path(out) if out else (self.dir / sub if sub else self.dir)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def finish(self, config: dict, seed) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "run_id": self.run_id,
            "command": self.command,
            "madbench_version": __version__,
            "seed": seed,
            "config": config,
            "inputs": {k: str(v) for k, v in self.inputs.items()},
            "outputs": {k: str(v) for k, v in self.outputs.items()},
            "content_hash": content_hash([Path(v) for v in self.outputs.values()]),
            "timestamps": {"started": self.started, "finished": datetime.now(timezone.utc).isoformat()},
        }
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return path


def _checkpoint_id(path) -> str:
    from madbench.core_model import load_checkpoint

    return load_checkpoint(path).digest()


# --------------------------------------------------------------------------
# commands


def cmd_make_data(args, cfg, run):
    from madbench.data import mnist_subset, save_images

    (xtr, ytr), (xte, yte) = mnist_subset(args.train_per_class, args.test_per_class, seed=args.seed)
    out = run.output_dir(args.out)
    run.outputs["train"] = save_images(out / "train.npz", xtr.numpy(), ytr.numpy())
    run.outputs["test"] = save_images(out / "test.npz", xte.numpy(), yte.numpy())
    print(f"wrote {len(ytr)} training and {len(yte)} test images to {out}")
    return args.seed


def cmd_train_clean(args, cfg, run):
    from madbench import core_model as cm
    from madbench.data import load_images

    x, y = load_images(args.data)
    run.inputs["data"] = args.data
    train = _train_config(cfg["train"])
    n = int(y.max()) + 1 if args.num_classes is None else args.num_classes
    spec = cm.ModelSpec(cfg["model"]["architecture_id"], tuple(x.shape[1:]), n, cfg["model"]["width"])
    model = cm.train_clean(cm.build_model(spec, train.seed), x, y, train)
    out = run.output_dir(args.out)
    run.outputs["checkpoint"] = cm.save_checkpoint(model, out / "model.ckpt")
    summary = {"train_accuracy": cm.evaluate_accuracy(model, x, y)}
    if args.test:
        xt, yt = load_images(args.test)
        run.inputs["test"] = args.test
        summary["test_accuracy"] = cm.evaluate_accuracy(model, xt, yt)
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    run.outputs["summary"] = out / "train_summary.json"
    print(" ".join(f"{k}={v:.2f}%" for k, v in summary.items()))
    return train.seed


def _load_suite(ref: str):
    from madbench.attacks import builtin_suite, load_suite

    if ref.startswith("builtin:"):
        return builtin_suite(ref.split(":", 1)[1])
    if not Path(ref).exists():
        raise DataError(f"suite file {ref} does not exist")
    return load_suite(ref)


def cmd_gen_mad(args, cfg, run):
    from madbench import core_model as cm
    from madbench import mad_dataset as md
    from madbench.data import load_images

    g = cfg["gen"]
    reference = cm.load_checkpoint(args.checkpoint)
    x, y = load_images(args.data)
    suite = _load_suite(args.suite)
    run.inputs.update(checkpoint=args.checkpoint, data=args.data, suite=args.suite)
    jobs = g["jobs"] or os.cpu_count() or 1
    ds = md.generate_mad(reference, x, y, suite, batch=g["batch"], seed=g["seed"], name=g["name"],
                         reference_checkpoint_id=reference.digest(), jobs=jobs, margin_tol=g["margin_tol"])
    raw_counts = {a: s.counts(ds.num_classes) for a, s in ds.attacks.items()}
    ds = md.filter_and_balance(ds, g["min_per_class"], seed=g["seed"])
    ds = md.split_3_1_1(ds, seed=g["seed"])
    grouping = g["grouping"]
    if grouping is not None:
        grouping = {int(k): int(v) for k, v in grouping.items()}
    else:
        grouping = md.default_grouping(ds.attack_ids)
    ds = md.assign_groups(ds, {a: grp for a, grp in grouping.items() if a in ds.attacks})
    # the store has its own manifest.json, so it cannot share the run directory
    out = run.output_dir(args.out, "mad")
    md.save_mad(ds, out)
    run.outputs["dataset"] = out

    names = {s.attack_id: s.name for s in suite}
    rows = []
    for a, counts in sorted(raw_counts.items()):
        kept = len(ds.attacks[a].classes[0]) if a in ds.attacks else 0
        rows.append([a, names.get(a, ""), sum(counts), kept, ds.group_of(a) if a in ds.attacks else "", *counts])
    header = ["attack_id", "name", "successes", "kept_per_class", "group", *[f"class_{c}" for c in range(ds.num_classes)]]
    with open(out / "success_counts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    run.outputs["success_counts"] = out / "success_counts.csv"
    print(f"{'id':>4} {'attack':<10} {'successes':>10} {'kept/class':>10} {'group':>6}")
    for r in rows:
        print(f"{r[0]:>4} {r[1]:<10} {r[2]:>10} {r[3]:>10} {str(r[4]):>6}")
    for entry in ds.skipped:
        print(f"skipped attack {entry['attack_id']} ({entry['name']}): not implemented")
    for a, why in ds.removed.items():
        print(f"removed attack {a}: {why}")
    return g["seed"]


def cmd_validate_mad(args, cfg, run):
    from madbench import core_model as cm
    from madbench import mad_dataset as md

    ds = md.load_mad(args.dir)
    reference = cm.load_checkpoint(args.checkpoint) if args.checkpoint else None
    run.inputs["dataset"] = args.dir
    problems = md.validate_mad(ds, reference)
    for p in problems:
        print(f"problem: {p}")
    if problems:
        raise DataError(f"{len(problems)} problem(s) in {args.dir}")
    print(f"{args.dir}: ok ({len(ds.attacks)} attacks)")
    return None


def cmd_meta_train(args, cfg, run):
    from madbench import core_model as cm
    from madbench import mad_dataset as md
    from madbench.meta_at import meta_train

    params = _meta_params(cfg["meta"])
    model = cm.load_checkpoint(args.checkpoint)
    ds = md.load_mad(args.mad)
    run.inputs.update(checkpoint=args.checkpoint, dataset=args.mad)
    out = run.output_dir(args.out)
    resume = (out / "trainer_state.json").exists()
    if resume:
        print(f"resuming run {run.run_id} from {out / 'last.ckpt'}")
    best, run_log = meta_train(model, ds, params, seed=args.seed, out_dir=out, resume=resume)
    for name in ("best_val.ckpt", "last.ckpt", "log.jsonl", "summary.json"):
        run.outputs[name] = out / name
    print(f"best epoch {run_log.best_epoch}, stop reason {run_log.stop_reason}")
    return args.seed


def cmd_at_train(args, cfg, run):
    from madbench import core_model as cm
    from madbench import mad_dataset as md
    from madbench.baseline_at import at_train

    at_cfg = _at_config(cfg["at"])
    model = cm.load_checkpoint(args.checkpoint)
    ds = md.load_mad(args.mad)
    run.inputs.update(checkpoint=args.checkpoint, dataset=args.mad)
    t0 = time.perf_counter()
    trained = at_train(model, ds, at_cfg)
    trained.training_meta["train_hours"] = (time.perf_counter() - t0) / 3600
    out = run.output_dir(args.out)
    run.outputs["checkpoint"] = cm.save_checkpoint(trained, out / "model.ckpt")
    return at_cfg.seed


def cmd_evaluate(args, cfg, run):
    from madbench import core_model as cm
    from madbench import mad_dataset as md
    from madbench.evaluation import evaluate_defense
    from madbench.metrics import build_report, export_report

    e = cfg["eval"]
    params = _meta_params(cfg["meta"])
    defended = cm.load_checkpoint(args.checkpoint)
    reference = cm.load_checkpoint(args.reference)
    ds = md.load_mad(args.mad)
    run.inputs.update(checkpoint=args.checkpoint, reference=args.reference, dataset=args.mad)
    steps = 0 if args.no_finetune else e["finetune_steps"]
    extra = defended.training_meta.get("train_hours", 0.0) if args.no_finetune else 0.0
    records, clean_cas = evaluate_defense(defended, reference, ds, params, roles=tuple(e["roles"]),
                                          attack_ids=e["attack_ids"], finetune_steps=steps,
                                          extra_ot_hours=extra, seed=e["seed"])
    if not records:
        raise DataError("no attack in the requested roles to evaluate")
    report = build_report(records, min(clean_cas), dataset=ds.name, method=args.method)
    out = run.output_dir(args.out)
    run.outputs["records"] = export_report(report, out / "records.json")
    for r in records:
        print(f"attack {r.attack_id:>3} ({r.role:<7}) CA {r.ca_attacked:6.2f} -> {r.ca_defended:6.2f}  "
              f"DSR {100 * r.dsr:7.2f}%  EDSR {100 * r.edsr:7.2f}%")
    return e["seed"]


def cmd_report(args, cfg, run):
    from madbench.metrics import export_report, load_reports
    from madbench.plotting import plot_dsr_by_attack, plot_edsr_curves

    reports = []
    for path in args.records:
        if not Path(path).exists():
            raise DataError(f"records file {path} does not exist")
        reports.extend(load_reports(path))
        run.inputs[f"records_{len(run.inputs)}"] = path
    out = run.output_dir(args.out)
    run.outputs["report_json"] = export_report(reports, out / "report.json", "json")
    run.outputs["report_csv"] = export_report(reports, out / "report.csv", "csv")
    if not args.no_plots:
        run.outputs["edsr_plot"] = plot_edsr_curves(reports, out / "edsr_curves.png")
        run.outputs["dsr_plot"] = plot_dsr_by_attack(reports, out / "dsr_by_attack.png")
    for rep in reports:
        agg = rep.aggregates["all"]
        print(f"{rep.method:<12} DSR {100 * agg['dsr']:7.2f}%  EDSR {100 * agg['edsr']:7.2f}%  "
              f"OT {agg['ot_hours']:.6f} h  CCA {rep.ccadefended:.2f}%")
    return None


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madbench", description="Meta adversarial defense benchmark")
    parser.add_argument("--version", action="version", version=f"madbench {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with sections model/train/gen/meta/at/eval")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--workspace", default=".", help="directory holding the runs/ registry")
    common.add_argument("--run-id", help="registry id; reusing a meta-train id resumes it")
    common.add_argument("--out", help="output directory (default: the run directory)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", parents=[common], help="write the bundled MNIST subset as .npz files")
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train-clean", parents=[common], help="train the reference model")
    p.add_argument("--data", required=True, help=".npz with x (N,C,H,W) and y")
    p.add_argument("--test", help="optional held-out .npz for test accuracy")
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_train_clean)

    p = sub.add_parser("gen-mad", parents=[common], help="attack a clean set and build a MAD store")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True, help="suite JSON path or builtin:mad_m / builtin:mad_c")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_gen_mad)

    p = sub.add_parser("validate-mad", parents=[common], help="check a MAD store's invariants")
    p.add_argument("--dir", required=True)
    p.add_argument("--checkpoint", help="reference model, enables the zero-CA check")
    p.set_defaults(func=cmd_validate_mad)

    p = sub.add_parser("meta-train", parents=[common], help="meta-adversarial training")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mad", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("at-train", parents=[common], help="adversarial-training baseline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mad", required=True)
    p.set_defaults(func=cmd_at_train)

    p = sub.add_parser("evaluate", parents=[common], help="fine-tune and score per evaluation attack")
    p.add_argument("--checkpoint", required=True, help="defended model")
    p.add_argument("--reference", required=True, help="clean reference model")
    p.add_argument("--mad", required=True)
    p.add_argument("--method", default="meta_at")
    p.add_argument("--no-finetune", action="store_true", help="score as-is; OT is the recorded training time")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="merge records into report.json/csv and plots")
    p.add_argument("--records", nargs="+", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, OSError, MadError)):
        return EXIT_DATA
    raise exc


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.set, environ)
        run = Run(args.workspace, args.command, args.run_id)
        seed = args.func(args, cfg, run)
        manifest = run.finish(cfg, seed)
        print(f"run {run.run_id}: {manifest}")
        return EXIT_OK
    except (MadError, OSError) as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
