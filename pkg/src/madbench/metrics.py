"""Defense scoring: CA, DSR, OT and EDSR, per attack and aggregated.

DSR and EDSR are kept as fractions in memory and in ``report.json``; the
CSV export renders them in percent, like the accuracies.

``report.csv`` columns, in order::

    dataset, method, attack_id, role, cca, ca_attacked, ca_defended, ot_hours, dsr, edsr
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from madbench.errors import DataError, IntegrityError, MetricDomainError, StorageError, UndefinedMetricError

CSV_COLUMNS = ("dataset", "method", "attack_id", "role", "cca", "ca_attacked", "ca_defended", "ot_hours", "dsr", "edsr")
RECORD_ROLES = ("learned", "new")
TOLERANCE = 1e-9


def compute_dsr(ca_defended: float, ca_attacked: float, cca: float) -> float:
    """(CA_defended - CA_attacked) / (CCA - CA_attacked); may exceed 1."""
    if not cca > ca_attacked:
        raise UndefinedMetricError(f"DSR undefined: CCA {cca} is not above attacked CA {ca_attacked}")
    return (ca_defended - ca_attacked) / (cca - ca_attacked)


def compute_edsr(dsr: float, ot_hours: float) -> float:
    """DSR discounted by operating time in hours: DSR * exp(-OT)."""
    if not ot_hours >= 0:
        raise MetricDomainError(f"operating time must be >= 0 hours, got {ot_hours}")
    return dsr * math.exp(-ot_hours)


@dataclass
class DefenseRecord:
    attack_id: int
    role: str
    cca: float
    ca_attacked: float
    ca_defended: float
    ot_hours: float
    dsr: Optional[float] = None
    edsr: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in RECORD_ROLES:
            raise DataError(f"record role must be one of {RECORD_ROLES}, got {self.role!r}")
        if self.dsr is None:
            self.dsr = compute_dsr(self.ca_defended, self.ca_attacked, self.cca)
        if self.edsr is None:
            self.edsr = compute_edsr(self.dsr, self.ot_hours)

    def check(self) -> None:
        dsr = compute_dsr(self.ca_defended, self.ca_attacked, self.cca)
        edsr = compute_edsr(dsr, self.ot_hours)
        if abs(dsr - self.dsr) > TOLERANCE or abs(edsr - self.edsr) > TOLERANCE:
            raise IntegrityError(
                f"attack {self.attack_id}: stored dsr/edsr ({self.dsr}, {self.edsr}) "
                f"disagree with recomputed ({dsr}, {edsr})"
            )


@dataclass
class DefenseReport:
    dataset: str
    method: str
    records: list
    ccadefended: float
    aggregates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "method": self.method,
            "ccadefended": self.ccadefended,
            "aggregates": self.aggregates,
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseReport":
        records = [DefenseRecord(**r) for r in d["records"]]
        return cls(d["dataset"], d["method"], records, d["ccadefended"], d.get("aggregates", {}))


_AGG_FIELDS = ("ca_defended", "ot_hours", "dsr", "edsr")


def _mean(values):
    return math.fsum(values) / len(values)


def build_report(records, ccadefended: float, dataset: str = "", method: str = "") -> DefenseReport:
    if not records:
        raise DataError("a report needs at least one record")
    for r in records:
        r.check()
    aggregates = {}
    for role in ("all",) + RECORD_ROLES:
        part = [r for r in records if role == "all" or r.role == role]
        if part:
            aggregates[role] = {f: _mean([getattr(r, f) for r in part]) for f in _AGG_FIELDS}
            aggregates[role]["count"] = len(part)
    return DefenseReport(dataset, method, list(records), ccadefended, aggregates)


def export_report(reports, path, fmt: str = "json") -> Path:
    """Write one or more reports as ``json`` or ``csv``."""
    if isinstance(reports, DefenseReport):
        reports = [reports]
    if not reports or any(not r.records for r in reports):
        raise DataError("cannot export an empty report")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            path.write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n", encoding="utf-8")
        elif fmt == "csv":
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(CSV_COLUMNS)
                for rep in reports:
                    for r in rep.records:
                        w.writerow([
                            rep.dataset, rep.method, r.attack_id, r.role,
                            f"{r.cca:.4f}", f"{r.ca_attacked:.4f}", f"{r.ca_defended:.4f}",
                            f"{r.ot_hours:.8f}", f"{100 * r.dsr:.4f}", f"{100 * r.edsr:.4f}",
                        ])
        else:
            raise DataError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise StorageError(f"cannot write report {path}: {exc}") from exc
    return path


def load_reports(path) -> list:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, dict):
        raw = [raw]
    return [DefenseReport.from_dict(d) for d in raw]
