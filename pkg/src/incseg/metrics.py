"""Dice, average symmetric surface distance and retention reporting."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

UNDEFINED = float("nan")
REPORT_FIELDS = ["method", "case", "class", "dice_percent", "assd_mm", "n_volumes"]


class MetricError(ValueError):
    pass


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.all((a == 0) | (a == 1)):
            raise MetricError(f"{name} is not a binary mask")
        a = a.astype(bool)
    return a


def dice(pred, gt) -> float:
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch: {p.shape} vs {g.shape}")
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face-neighbour (outside counts as background)."""
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure, border_value=0)


def assd(pred, gt, spacing: Sequence[float] | None = None) -> float:
    """Average symmetric surface distance in physical units; NaN if a surface is empty."""
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch: {p.shape} vs {g.shape}")
    spacing = tuple(float(s) for s in (spacing or (1.0,) * p.ndim))
    if len(spacing) != p.ndim:
        raise MetricError(f"spacing {spacing} does not match {p.ndim}D masks")
    sp, sg = surface(p), surface(g)
    if not sp.any() or not sg.any():
        return UNDEFINED
    to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return float(0.5 * (to_g[sp].mean() + to_p[sg].mean()))


@dataclass
class EvalReport:
    method: str
    case: str
    dice: dict[str, float] = field(default_factory=dict)       # percent
    assd: dict[str, float] = field(default_factory=dict)       # mm, NaN = undefined
    n_volumes: dict[str, int] = field(default_factory=dict)
    per_volume: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for c, v in self.dice.items():
            if not 0.0 <= v <= 100.0:
                raise MetricError(f"dice for {c} out of range: {v}")

    def rows(self) -> list[dict]:
        return [
            {
                "method": self.method,
                "case": self.case,
                "class": c,
                "dice_percent": self.dice[c],
                "assd_mm": self.assd.get(c, UNDEFINED),
                "n_volumes": self.n_volumes.get(c, 0),
            }
            for c in self.dice
        ]


def aggregate(method: str, case: str, per_volume: list[dict]) -> EvalReport:
    """Average per-volume rows (class, dice in [0,1], assd) into a report; undefined ASSD is skipped."""
    rep = EvalReport(method, case, per_volume=list(per_volume))
    classes = list(dict.fromkeys(r["class"] for r in per_volume))
    for c in classes:
        rows = [r for r in per_volume if r["class"] == c]
        rep.dice[c] = 100.0 * float(np.mean([r["dice"] for r in rows]))
        finite = [r["assd"] for r in rows if not math.isnan(r["assd"])]
        rep.assd[c] = float(np.mean(finite)) if finite else UNDEFINED
        rep.n_volumes[c] = len(rows)
    return rep


def write_report_csv(reports: Sequence[EvalReport], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({**row, "assd_mm": "undefined" if math.isnan(row["assd_mm"]) else repr(row["assd_mm"]),
                            "dice_percent": repr(row["dice_percent"])})


def read_report_csv(path: str | Path) -> list[EvalReport]:
    reports: dict[tuple[str, str], EvalReport] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["method"], row["case"])
            rep = reports.setdefault(key, EvalReport(*key))
            c = row["class"]
            rep.dice[c] = float(row["dice_percent"])
            rep.assd[c] = UNDEFINED if row["assd_mm"] == "undefined" else float(row["assd_mm"])
            rep.n_volumes[c] = int(row["n_volumes"])
    return list(reports.values())


@dataclass
class RetentionReport:
    deltas: dict[str, dict[str, float]]   # method -> class -> dice delta (points)
    ranking: list[tuple[str, float]]      # methods by mean old-class dice after, best first


def retention_report(before: EvalReport, after: EvalReport | Sequence[EvalReport], old_classes) -> RetentionReport:
    """Old-class Dice change from ``before`` to each ``after`` report, plus a method ranking."""
    afters = [after] if isinstance(after, EvalReport) else list(after)
    old = list(old_classes)
    deltas, scores = {}, []
    for rep in afters:
        missing = [c for c in old if c not in rep.dice or c not in before.dice]
        if missing:
            raise MetricError(f"classes {missing} missing from {rep.method} or the baseline report")
        deltas[rep.method] = {c: rep.dice[c] - before.dice[c] for c in old}
        scores.append((rep.method, float(np.mean([rep.dice[c] for c in old]))))
    scores.sort(key=lambda t: -t[1])
    return RetentionReport(deltas, scores)
