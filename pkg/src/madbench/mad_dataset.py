"""Attacked datasets: generation, balancing, splits, roles and episode sampling.

A :class:`MadDataset` keeps, for every attack, the successful adversarial
examples grouped by true class, plus a pool of clean examples from the same
source set. Every store carries its own split codes (train/val/test) once
:func:`split_3_1_1` has run.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import torch

from madbench import core_model as cm
from madbench.attacks.registry import ATTACK_TABLE, AttackSpec, run_attack
from madbench.errors import (
    AttackNotImplementedError,
    ChecksumError,
    ConfigError,
    CorruptFileError,
    DataError,
    FormatVersionError,
    GenerationError,
    SamplingError,
    StorageError,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
UNSPLIT = -1
CLEAN = -1  # origin tag for clean examples inside episodes
ROLES = ("meta_train", "meta_val", "meta_finetune_new", "test_learned", "test_new")
EVAL_ROLES = ("meta_val", "meta_finetune_new", "test_learned", "test_new")
DEFAULT_ROLES = {
    "meta_train": (1, 2),
    "meta_val": (4, 5),
    "meta_finetune_new": (7, 8),
    "test_learned": (3, 6),
    "test_new": (9,),
}
FORMAT_VERSION = 1


def default_grouping(attack_ids=None) -> dict:
    """Nine groups of consecutive attack-table ids (0-3 -> 1, ..., 27-29 -> 9)."""
    ids = ATTACK_TABLE.keys() if attack_ids is None else attack_ids
    return {int(i): 1 + (int(i) * 9) // 30 for i in ids}


@dataclass
class ClassStore:
    images: torch.Tensor
    source_index: np.ndarray
    split: np.ndarray

    @classmethod
    def build(cls, images, source_index):
        n = len(source_index)
        return cls(images, np.asarray(source_index, dtype=np.int64), np.full(n, UNSPLIT, dtype=np.int8))

    def __len__(self):
        return len(self.source_index)

    def subset(self, idx) -> "ClassStore":
        idx = np.asarray(idx, dtype=np.int64)
        return ClassStore(self.images[torch.from_numpy(idx)], self.source_index[idx], self.split[idx])

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS.index(split))


@dataclass
class AttackStore:
    spec: AttackSpec
    classes: dict
    group: Optional[int] = None

    def counts(self, num_classes) -> list:
        return [len(self.classes[c]) if c in self.classes else 0 for c in range(num_classes)]

    def images_and_labels(self, split: Optional[str] = None):
        xs, ys = [], []
        for c in sorted(self.classes):
            store = self.classes[c]
            idx = np.arange(len(store)) if split is None else store.indices(split)
            xs.append(store.images[torch.from_numpy(idx)])
            ys.append(torch.full((len(idx),), c, dtype=torch.long))
        return torch.cat(xs), torch.cat(ys)


@dataclass
class SplitAssignment:
    role_of_group: dict

    def __post_init__(self):
        clean = {}
        seen = {}
        for role, groups in self.role_of_group.items():
            if role not in ROLES:
                raise ConfigError(f"unknown role {role!r}; expected one of {', '.join(ROLES)}")
            groups = tuple(int(g) for g in ([groups] if isinstance(groups, int) else groups))
            for g in groups:
                if g in seen and seen[g] != role:
                    raise ConfigError(f"group {g} is assigned to both {seen[g]} and {role}")
                seen[g] = role
            clean[role] = groups
        self.role_of_group = clean

    def role_of(self, group: int) -> Optional[str]:
        for role, groups in self.role_of_group.items():
            if group in groups:
                return role
        return None


@dataclass
class Episode:
    support_x: torch.Tensor
    support_y: torch.Tensor
    support_origin: np.ndarray
    support_source: np.ndarray
    query_x: torch.Tensor
    query_y: torch.Tensor
    query_origin: np.ndarray
    query_source: np.ndarray
    attacks_S: tuple
    attacks_Q: tuple

    @property
    def S(self):
        return self.support_x, self.support_y

    @property
    def Q(self):
        return self.query_x, self.query_y

    def keys(self, which: str) -> set:
        origin = self.support_origin if which == "S" else self.query_origin
        source = self.support_source if which == "S" else self.query_source
        return set(zip(origin.tolist(), source.tolist()))


@dataclass
class MadDataset:
    name: str
    num_classes: int
    input_shape: tuple
    reference_checkpoint_id: str
    cca: float
    attacks: dict
    clean: dict
    removed: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    grouping: dict = field(default_factory=dict)
    roles: Optional[SplitAssignment] = None

    @property
    def removed_attacks(self) -> list:
        return sorted(self.removed)

    @property
    def attack_ids(self) -> list:
        return sorted(self.attacks)

    def copy(self) -> "MadDataset":
        # tensors are never mutated in place, so a shallow copy of stores suffices
        out = copy.copy(self)
        out.attacks = {a: AttackStore(s.spec, dict(s.classes), s.group) for a, s in self.attacks.items()}
        out.clean = dict(self.clean)
        out.removed = dict(self.removed)
        out.skipped = list(self.skipped)
        out.grouping = dict(self.grouping)
        return out

    def group_of(self, attack_id: int) -> Optional[int]:
        return self.grouping.get(int(attack_id))

    def role_of_attack(self, attack_id: int) -> Optional[str]:
        if self.roles is None:
            return None
        g = self.group_of(attack_id)
        return None if g is None else self.roles.role_of(g)

    def attacks_for_role(self, role: str) -> list:
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}")
        return [a for a in self.attack_ids if self.role_of_attack(a) == role]

    def attacks_in_groups(self, groups) -> list:
        groups = set(int(g) for g in groups)
        return [a for a in self.attack_ids if self.group_of(a) in groups]

    def split_of(self, attack_id, cls: int, position: int) -> str:
        store = self.clean[cls] if attack_id in (None, "clean", CLEAN) else self.attacks[attack_id].classes[cls]
        code = int(store.split[position])
        if code == UNSPLIT:
            raise DataError("dataset has not been split yet")
        return SPLITS[code]

    def clean_images_and_labels(self, split: Optional[str] = None):
        return AttackStore(None, self.clean).images_and_labels(split)

    def pool(self, attack_ids, split: Optional[str] = None):
        """Concatenated adversarial images and labels for the given attacks."""
        xs, ys = [], []
        for a in attack_ids:
            x, y = self.attacks[a].images_and_labels(split)
            xs.append(x)
            ys.append(y)
        if not xs:
            c, h, w = self.input_shape
            return torch.empty(0, c, h, w), torch.empty(0, dtype=torch.long)
        return torch.cat(xs), torch.cat(ys)


# --------------------------------------------------------------------------
# construction


def _group_by_class(images, labels, sources, num_classes) -> dict:
    out = {}
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            out[c] = ClassStore.build(images[mask].contiguous(), sources[mask.numpy()])
    return out


def _misclassified_with_margin(model, x, y, margin_tol):
    logits = cm.predict_logits(model, x)
    onehot = torch.nn.functional.one_hot(y, logits.shape[1]).to(torch.bool)
    other = logits.masked_fill(onehot, -float("inf")).amax(dim=1)
    return (other - logits[onehot]) > margin_tol


def _attack_all(reference, x, y, spec, batch, seed, margin_tol):
    keep_x, keep_y, keep_src = [], [], []
    for b, start in enumerate(range(0, len(x), batch)):
        xb, yb = x[start:start + batch], y[start:start + batch]
        outcome = run_attack(spec, reference, xb, yb, seed=seed, batch_index=b)
        mask = outcome.success_mask
        keep_x.append(outcome.x_adv[mask].to(torch.float32))
        keep_y.append(yb[mask])
        keep_src.append(np.arange(start, start + len(xb))[mask.numpy()])
    xa, ya, src = torch.cat(keep_x), torch.cat(keep_y), np.concatenate(keep_src)
    if len(xa):
        # margin guards the zero-CA invariant against batch-dependent rounding
        ok = _misclassified_with_margin(reference, xa, ya, margin_tol)
        xa, ya, src = xa[ok], ya[ok], src[ok.numpy()]
    return xa, ya, src


def generate_mad(
    reference: cm.ModelState,
    x: torch.Tensor,
    y: torch.Tensor,
    suite,
    batch: int = 128,
    seed: int = 0,
    name: str = "mad",
    reference_checkpoint_id: Optional[str] = None,
    jobs: int = 1,
    margin_tol: float = 1e-4,
) -> MadDataset:
    """Attack every clean example with every implemented suite entry and keep the successes.

    Unimplemented attacks are skipped and listed in ``dataset.skipped``.
    """
    if not suite:
        raise ConfigError("attack suite is empty")
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    x = x.to(torch.float32)
    cca = cm.evaluate_accuracy(reference, x, y)
    if cca <= 0:
        raise GenerationError("reference model has zero clean accuracy on the source set")
    n = reference.spec.num_classes
    runnable, skipped = [], []
    for spec in suite:
        if spec.implemented:
            runnable.append(spec)
        elif spec.attack_id in ATTACK_TABLE:
            msg = str(AttackNotImplementedError(spec.attack_id, spec.name))
            warnings.warn(msg)
            skipped.append({"attack_id": spec.attack_id, "name": spec.name, "reason": msg})
        else:
            raise ConfigError(f"unknown attack id {spec.attack_id}")
    if not runnable:
        raise ConfigError("no attack in the suite is implemented")

    def work(spec):
        return spec, _attack_all(reference, x, y, spec, batch, seed, margin_tol)

    if jobs > 1 and len(runnable) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, runnable))
    else:
        results = [work(s) for s in runnable]

    attacks = {}
    total = 0
    for spec, (xa, ya, src) in results:
        log.info("attack %d (%s): %d successful of %d", spec.attack_id, spec.name, len(xa), len(x))
        total += len(xa)
        attacks[spec.attack_id] = AttackStore(spec, _group_by_class(xa, ya, src, n))
    if total == 0:
        raise GenerationError("no attack produced a single successful adversarial example")
    return MadDataset(
        name=name,
        num_classes=n,
        input_shape=tuple(reference.spec.input_shape),
        reference_checkpoint_id=reference_checkpoint_id or reference.digest(),
        cca=cca,
        attacks=attacks,
        clean=_group_by_class(x, y, np.arange(len(x)), n),
        skipped=skipped,
    )


def _subsample(store: ClassStore, m: int, seed_words) -> ClassStore:
    if len(store) == m:
        return store
    rng = np.random.default_rng(np.random.SeedSequence(seed_words))
    return store.subset(np.sort(rng.choice(len(store), m, replace=False)))


def filter_and_balance(dataset: MadDataset, min_per_class: int, seed: int = 0) -> MadDataset:
    """Drop attacks that are too thin in any class and equalize per-class counts."""
    if min_per_class < 1:
        raise ConfigError("min_per_class must be >= 1")
    out = dataset.copy()
    n = dataset.num_classes
    for a in dataset.attack_ids:
        store = out.attacks[a]
        m = min(store.counts(n))
        if m < min_per_class:
            log.info("removing attack %d: smallest class has %d examples", a, m)
            out.removed[a] = store.spec
            del out.attacks[a]
            continue
        store.classes = {c: _subsample(store.classes[c], m, [seed, a, c]) for c in range(n)}
    if not out.attacks:
        raise GenerationError(f"every attack has fewer than {min_per_class} examples in some class")
    m = min(len(out.clean.get(c, ())) for c in range(n))
    if m < min_per_class:
        raise GenerationError(f"clean pool has only {m} examples in some class")
    out.clean = {c: _subsample(out.clean[c], m, [seed, 10**6, c]) for c in range(n)}
    return out


def split_counts(c: int) -> tuple:
    """(train, val, test) sizes for ``c`` examples; the remainder goes to train."""
    fifth = c // 5
    return c - 2 * fifth, fifth, fifth


def _split_store(store: ClassStore, seed_words) -> ClassStore:
    c = len(store)
    if c < 5:
        raise ConfigError(f"cannot split {c} examples 3:1:1; filter with min_per_class >= 5 first")
    _, n_val, n_test = split_counts(c)
    perm = np.random.default_rng(np.random.SeedSequence(seed_words)).permutation(c)
    split = np.zeros(c, dtype=np.int8)
    split[perm[:n_test]] = 2
    split[perm[n_test:n_test + n_val]] = 1
    return ClassStore(store.images, store.source_index, split)


def split_3_1_1(dataset: MadDataset, seed: int = 0) -> MadDataset:
    n = dataset.num_classes
    for a in dataset.attack_ids:
        if len(set(dataset.attacks[a].counts(n))) != 1:
            raise ConfigError(f"attack {a} is not balanced; run filter_and_balance first")
    out = dataset.copy()
    for a, store in out.attacks.items():
        store.classes = {c: _split_store(s, [seed, a, c, 1]) for c, s in store.classes.items()}
    out.clean = {c: _split_store(s, [seed, 10**6, c, 1]) for c, s in out.clean.items()}
    return out


def assign_groups(dataset: MadDataset, grouping: dict, roles: Optional[SplitAssignment] = None) -> MadDataset:
    grouping = {int(k): int(v) for k, v in grouping.items()}
    missing = [a for a in dataset.attack_ids if a not in grouping]
    if missing:
        raise ConfigError(f"attacks missing from grouping: {missing}")
    if roles is None:
        roles = SplitAssignment(dict(DEFAULT_ROLES))
    elif not isinstance(roles, SplitAssignment):
        roles = SplitAssignment(dict(roles))
    out = dataset.copy()
    out.grouping = grouping
    out.roles = roles
    for a, store in out.attacks.items():
        store.group = grouping[a]
    return out


# --------------------------------------------------------------------------
# episodes


def _draw(store: ClassStore, split: str, quotas, rng, where: str):
    idx = store.indices(split)
    need = sum(quotas)
    if len(idx) < need:
        raise SamplingError(f"{where}: needs {need} examples in the {split} split, has {len(idx)}")
    perm = rng.permutation(idx)
    out, start = [], 0
    for q in quotas:
        out.append(perm[start:start + q])
        start += q
    return out


def _assemble(parts, num_classes, input_shape):
    if not parts:
        c, h, w = input_shape
        return torch.empty(0, c, h, w), torch.empty(0, dtype=torch.long), np.empty(0, np.int64), np.empty(0, np.int64)
    xs, ys, origin, source = [], [], [], []
    for tag, cls, store, idx in parts:
        xs.append(store.images[torch.from_numpy(idx)])
        ys.append(torch.full((len(idx),), cls, dtype=torch.long))
        origin.append(np.full(len(idx), tag, dtype=np.int64))
        source.append(store.source_index[idx])
    return torch.cat(xs), torch.cat(ys), np.concatenate(origin), np.concatenate(source)


def _build_episode(dataset, attacks_S, attacks_Q, k, m, s_split, q_split, rng) -> Episode:
    n = dataset.num_classes
    same = s_split == q_split
    s_parts, q_parts = [], []
    sources = [(a, dataset.attacks[a].classes) for a in attacks_S] + [(CLEAN, dataset.clean)]
    for tag, classes in sources:
        in_q = tag == CLEAN or tag in attacks_Q
        for c in range(n):
            if c not in classes:
                raise SamplingError(f"attack {tag}, class {c}: no examples")
            where = f"{'clean' if tag == CLEAN else f'attack {tag}'}, class {c}"
            store = classes[c]
            if same:
                quotas = (k, m) if in_q else (k,)
                picks = _draw(store, s_split, quotas, rng, where)
                s_idx, q_idx = picks[0], picks[1] if in_q else None
            else:
                (s_idx,) = _draw(store, s_split, (k,), rng, where)
                q_idx = _draw(store, q_split, (m,), rng, where)[0] if in_q else None
            s_parts.append((tag, c, store, s_idx))
            if in_q:
                q_parts.append((tag, c, store, q_idx))
    sx, sy, so, ss = _assemble(s_parts, n, dataset.input_shape)
    qx, qy, qo, qs = _assemble(q_parts, n, dataset.input_shape)
    return Episode(sx, sy, so, ss, qx, qy, qo, qs, tuple(attacks_S), tuple(attacks_Q))


def sample_train_episode(dataset: MadDataset, params, rng: np.random.Generator) -> Episode:
    """One mini-AT task: ``ways`` attacks in S, ``query_ways`` of them in Q.

    S holds ``shot_k`` examples per class per attack plus ``shot_k`` clean
    examples per class; Q holds ``query_m`` per class per query attack plus
    ``query_m`` clean per class, all from the train split.
    """
    pool = dataset.attacks_for_role("meta_train")
    A, AQ = int(params.ways), int(params.query_ways)
    if not 1 <= AQ <= A:
        raise ConfigError("query_ways must lie in [1, ways]")
    if len(pool) < A:
        raise SamplingError(f"meta_train role has {len(pool)} attacks, episode needs {A}")
    chosen = [int(a) for a in rng.choice(pool, A, replace=False)]
    in_q = [int(a) for a in rng.choice(chosen, AQ, replace=False)]
    return _build_episode(dataset, chosen, in_q, int(params.shot_k), int(params.query_m), "train", "train", rng)


def sample_eval_task(dataset: MadDataset, attack_id: int, params, rng: np.random.Generator) -> Episode:
    """Few-shot task for one attack: S' from the train split, Q' from val (meta_val) or test."""
    K, M = int(params.test_shot_K), int(params.test_query_M)
    if K < 1 or M < 1:
        raise ConfigError("test shot K and query M must be >= 1")
    if attack_id not in dataset.attacks:
        raise ConfigError(f"attack {attack_id} is not in dataset {dataset.name}")
    role = dataset.role_of_attack(attack_id)
    if role not in EVAL_ROLES:
        raise ConfigError(f"attack {attack_id} has role {role!r}, not an evaluation role")
    q_split = "val" if role == "meta_val" else "test"
    return _build_episode(dataset, [attack_id], [attack_id], K, M, "train", q_split, rng)


# --------------------------------------------------------------------------
# storage
#
# <dir>/manifest.json               see MANIFEST_SCHEMA
# <dir>/attack_<id>/class_<c>.f32   raw little-endian float32, shape (count, C, H, W)
# <dir>/clean/class_<c>.f32         same for the clean pool
# Per-example source indices and split codes (0 train, 1 val, 2 test, -1
# unsplit) live in the manifest next to each blob's sha256.

_CLASS_RECORD = {
    "type": "object",
    "required": ["count", "source_index", "split", "sha256"],
    "properties": {
        "count": {"type": "integer", "minimum": 0},
        "source_index": {"type": "array", "items": {"type": "integer"}},
        "split": {"type": "array", "items": {"enum": [-1, 0, 1, 2]}},
        "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "split_counts": {"type": "object"},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": [
        "format_version", "name", "num_classes", "input_shape", "reference_checkpoint_id",
        "cca", "attacks", "clean", "skipped", "grouping", "roles",
    ],
    "properties": {
        "format_version": {"type": "integer"},
        "name": {"type": "string"},
        "num_classes": {"type": "integer", "minimum": 2},
        "input_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "reference_checkpoint_id": {"type": "string"},
        "cca": {"type": "number", "minimum": 0, "maximum": 100},
        "attacks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["attack_id", "spec", "removed", "group", "classes"],
                "properties": {
                    "attack_id": {"type": "integer"},
                    "spec": {"type": "object"},
                    "removed": {"type": "boolean"},
                    "group": {"type": ["integer", "null"]},
                    "classes": {"type": "object", "additionalProperties": _CLASS_RECORD},
                },
            },
        },
        "clean": {"type": "object", "additionalProperties": _CLASS_RECORD},
        "skipped": {"type": "array"},
        "grouping": {"type": "object", "additionalProperties": {"type": "integer"}},
        "roles": {"type": ["object", "null"], "additionalProperties": {"type": "array", "items": {"type": "integer"}}},
    },
}


def _write_classes(classes: dict, folder: Path) -> dict:
    folder.mkdir(parents=True, exist_ok=True)
    records = {}
    for c in sorted(classes):
        store = classes[c]
        raw = store.images.to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()
        (folder / f"class_{c}.f32").write_bytes(raw)
        records[str(c)] = {
            "count": len(store),
            "source_index": store.source_index.tolist(),
            "split": store.split.astype(int).tolist(),
            "sha256": hashlib.sha256(raw).hexdigest(),
            "split_counts": {s: int((store.split == i).sum()) for i, s in enumerate(SPLITS)},
        }
    return records


def save_mad(dataset: MadDataset, directory) -> Path:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        attacks = []
        for a in dataset.attack_ids:
            store = dataset.attacks[a]
            attacks.append({
                "attack_id": a,
                "spec": store.spec.to_dict(),
                "removed": False,
                "group": store.group,
                "classes": _write_classes(store.classes, d / f"attack_{a}"),
            })
        for a, spec in sorted(dataset.removed.items()):
            attacks.append({
                "attack_id": a, "spec": spec.to_dict(), "removed": True,
                "group": dataset.grouping.get(a), "classes": {},
            })
        manifest = {
            "format_version": FORMAT_VERSION,
            "name": dataset.name,
            "num_classes": dataset.num_classes,
            "input_shape": list(dataset.input_shape),
            "reference_checkpoint_id": dataset.reference_checkpoint_id,
            "cca": dataset.cca,
            "attacks": attacks,
            "clean": _write_classes(dataset.clean, d / "clean"),
            "skipped": dataset.skipped,
            "grouping": {str(k): v for k, v in sorted(dataset.grouping.items())},
            "roles": None if dataset.roles is None else {r: list(g) for r, g in dataset.roles.role_of_group.items()},
        }
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {d}: {exc}") from exc
    return d


def _read_classes(records: dict, folder: Path, shape) -> dict:
    classes = {}
    for key, rec in records.items():
        path = folder / f"class_{key}.f32"
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise StorageError(f"missing blob {path}: {exc}") from exc
        if hashlib.sha256(raw).hexdigest() != rec["sha256"]:
            raise ChecksumError(f"{path}: checksum mismatch")
        count = rec["count"]
        if len(raw) != count * int(np.prod(shape)) * 4:
            raise CorruptFileError(f"{path}: size does not match {count} examples of shape {tuple(shape)}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(count, *shape)
        classes[int(key)] = ClassStore(
            torch.from_numpy(arr.copy()),
            np.asarray(rec["source_index"], dtype=np.int64),
            np.asarray(rec["split"], dtype=np.int8),
        )
    return classes


def load_mad(directory) -> MadDataset:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise StorageError(f"cannot read {d / 'manifest.json'}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{d / 'manifest.json'}: {exc}") from exc
    version = manifest.get("format_version") if isinstance(manifest, dict) else None
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{d}: manifest format_version {version!r}, expected {FORMAT_VERSION}")
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise CorruptFileError(f"{d / 'manifest.json'}: schema violation: {exc.message}") from exc
    shape = tuple(manifest["input_shape"])
    attacks, removed = {}, {}
    for rec in manifest["attacks"]:
        spec = AttackSpec.from_dict(rec["spec"])
        if rec["removed"]:
            removed[rec["attack_id"]] = spec
        else:
            attacks[rec["attack_id"]] = AttackStore(
                spec, _read_classes(rec["classes"], d / f"attack_{rec['attack_id']}", shape), rec["group"]
            )
    roles = manifest["roles"]
    return MadDataset(
        name=manifest["name"],
        num_classes=manifest["num_classes"],
        input_shape=shape,
        reference_checkpoint_id=manifest["reference_checkpoint_id"],
        cca=manifest["cca"],
        attacks=attacks,
        clean=_read_classes(manifest["clean"], d / "clean", shape),
        removed=removed,
        skipped=manifest["skipped"],
        grouping={int(k): v for k, v in manifest["grouping"].items()},
        roles=None if roles is None else SplitAssignment(roles),
    )


def validate_mad(dataset: MadDataset, reference: Optional[cm.ModelState] = None) -> list:
    """Structural self-check; returns a list of problems (empty when valid)."""
    problems = []
    n = dataset.num_classes
    for a in dataset.attack_ids:
        store = dataset.attacks[a]
        counts = store.counts(n)
        if len(set(counts)) != 1:
            problems.append(f"attack {a}: unbalanced class counts {counts}")
        for c, cs in store.classes.items():
            if (cs.split == UNSPLIT).any():
                problems.append(f"attack {a}, class {c}: unsplit examples")
                continue
            want = split_counts(len(cs))
            got = tuple(int((cs.split == i).sum()) for i in range(3))
            if got != want:
                problems.append(f"attack {a}, class {c}: split sizes {got}, expected {want}")
        if reference is not None:
            x, y = store.images_and_labels()
            ca = cm.evaluate_accuracy(reference, x, y)
            if ca != 0.0:
                problems.append(f"attack {a}: reference model scores CA {ca:.4f}% on retained examples")
    if dataset.roles is not None:
        for a in dataset.attack_ids:
            if a not in dataset.grouping:
                problems.append(f"attack {a}: no group")
    return problems
