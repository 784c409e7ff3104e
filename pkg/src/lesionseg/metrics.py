"""Overlap and surface-distance evaluation of binary lesion masks.

Empty-mask conventions: DSC is 1 when both masks are empty, PPV is 1 for an
empty prediction, sensitivity is 1 for an empty gold standard, and the
Hausdorff distance of a pair with an empty side is reported as ``hd_max``.
Records carry flags whenever one of these conventions was used.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import Mask

HD_MAX = 200.0
_SIX = ndimage.generate_binary_structure(3, 1)


def _as_bool(mask) -> np.ndarray:
    return mask.data if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)


def _pair(pred, gold) -> tuple[np.ndarray, np.ndarray]:
    p, g = _as_bool(pred), _as_bool(gold)
    if p.shape != g.shape:
        raise ValueError(f"geometry mismatch: prediction {p.shape} vs gold {g.shape}")
    if isinstance(pred, Mask) and isinstance(gold, Mask) and not np.allclose(pred.spacing, gold.spacing):
        raise ValueError(f"geometry mismatch: spacing {pred.spacing} vs {gold.spacing}")
    return p, g


def dsc(pred, gold) -> float:
    p, g = _pair(pred, gold)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / total


def ppv(pred, gold) -> float:
    p, g = _pair(pred, gold)
    n = int(p.sum())
    return 1.0 if n == 0 else int(np.count_nonzero(p & g)) / n


def sensitivity(pred, gold) -> float:
    p, g = _pair(pred, gold)
    n = int(g.sum())
    return 1.0 if n == 0 else int(np.count_nonzero(p & g)) / n


def surface(mask) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask.

    Voxels beyond the grid count as outside.
    """
    m = _as_bool(mask)
    return m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)


def hausdorff(pred, gold, hd_max: float = HD_MAX) -> float:
    """Symmetric Hausdorff distance between mask surfaces, in voxel units."""
    p, g = _pair(pred, gold)
    if not p.any() or not g.any():
        return float(hd_max)
    sp = np.argwhere(surface(p))
    sg = np.argwhere(surface(g))
    d_pg, _ = cKDTree(sg).query(sp)
    d_gp, _ = cKDTree(sp).query(sg)
    return float(max(d_pg.max(), d_gp.max()))


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    ppv: float
    sensitivity: float
    hd: float
    flags: tuple[str, ...] = ()


@dataclass
class EvaluationReport:
    records: list[CaseMetrics]
    aggregate: dict[str, tuple[float, float]] = field(default_factory=dict)

    METRICS = ("dsc", "ppv", "sensitivity", "hd")
    COLUMNS = ("case_id", "dsc", "ppv", "sensitivity", "hd", "flags")

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate(self.records)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.records:
            writer.writerow([r.case_id, repr(r.dsc), repr(r.ppv), repr(r.sensitivity), repr(r.hd), ";".join(r.flags)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text_or_path) -> "EvaluationReport":
        text = str(text_or_path)
        if "\n" not in text and Path(text).exists():
            text = Path(text).read_text()
        rows = list(csv.DictReader(io.StringIO(text)))
        records = [
            CaseMetrics(row["case_id"], float(row["dsc"]), float(row["ppv"]), float(row["sensitivity"]),
                        float(row["hd"]), tuple(f for f in row["flags"].split(";") if f))
            for row in rows
        ]
        return cls(records)

    def to_dict(self) -> dict:
        return {
            "records": [{**asdict(r), "flags": list(r.flags)} for r in self.records],
            "aggregate": {k: {"mean": m, "std": s} for k, (m, s) in self.aggregate.items()},
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def mean(self, metric: str) -> float:
        return self.aggregate[metric][0]


def aggregate(records: Sequence[CaseMetrics]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation of every metric."""
    out = {}
    for name in EvaluationReport.METRICS:
        values = np.array([getattr(r, name) for r in records], dtype=np.float64)
        out[name] = (float(values.mean()), float(values.std())) if len(values) else (float("nan"), float("nan"))
    return out


def evaluate_case(case_id: str, pred, gold, hd_max: float = HD_MAX) -> CaseMetrics:
    p, g = _pair(pred, gold)
    flags = []
    if not p.any():
        flags.append("empty_pred")
    if not g.any():
        flags.append("empty_gold")
    if flags:
        flags.append("hd_sentinel")
    return CaseMetrics(case_id, dsc(p, g), ppv(p, g), sensitivity(p, g), hausdorff(p, g, hd_max), tuple(flags))


def evaluate_cases(preds: Sequence, golds: Sequence, case_ids: Sequence[str] | None = None,
                   hd_max: float = HD_MAX) -> EvaluationReport:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} gold masks")
    if case_ids is None:
        case_ids = [f"case{i}" for i in range(len(preds))]
    if len(case_ids) != len(preds):
        raise ValueError("case_ids length does not match predictions")
    return EvaluationReport([evaluate_case(c, p, g, hd_max) for c, p, g in zip(case_ids, preds, golds)])
