"""Segmentation losses and evaluation metrics (Dice, HD95, containment violations)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError, NumericalError

REGIONS = ("WT", "TC", "ET")
SMOOTH = 1e-5


def _check_shapes(*masks):
    shape = np.shape(masks[0])
    for m in masks[1:]:
        if np.shape(m) != shape:
            raise ValueError(f"mask shapes differ: {shape} vs {np.shape(m)}")


def dice(pred, gt) -> float:
    _check_shapes(pred, gt)
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def surface(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour that is background or off-grid."""
    m = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(m.ndim, 1)
    eroded = ndimage.binary_erosion(m, structure=structure, border_value=0)
    return m & ~eroded


def max_distance(shape, spacing=1.0) -> float:
    """Largest distance between two voxel centres in the grid (the empty-mask sentinel)."""
    sp = np.broadcast_to(np.asarray(spacing, dtype=float), (len(shape),))
    return float(math.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(shape, sp))))


def _directed(src_surface, dst_surface, spacing):
    # EDT of the complement gives, at each voxel, the distance to the nearest dst surface voxel
    dist = ndimage.distance_transform_edt(~dst_surface, sampling=spacing)
    return dist[src_surface]


def surface_distances(pred, gt, spacing=1.0) -> np.ndarray:
    """Pooled directed nearest-surface distances, pred->gt then gt->pred."""
    sp = tuple(np.broadcast_to(np.asarray(spacing, dtype=float), (np.ndim(pred),)))
    sp_ = surface(pred)
    sg = surface(gt)
    return np.concatenate([_directed(sp_, sg, sp), _directed(sg, sp_, sp)])


def hd95(pred, gt, spacing=1.0) -> float:
    """95th percentile (linear interpolation) of pooled symmetric surface distances.

    Both empty gives 0.0; exactly one empty gives ``max_distance(shape)``.
    """
    _check_shapes(pred, gt)
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return max_distance(p.shape, spacing)
    return float(np.percentile(surface_distances(p, g, spacing), 95))


def containment_violation(pred_wt, pred_tc, pred_et) -> float:
    _check_shapes(pred_wt, pred_tc, pred_et)
    wt, tc, et = (np.asarray(m, dtype=bool) for m in (pred_wt, pred_tc, pred_et))
    denom = int(et.sum()) + int(tc.sum())
    if denom == 0:
        return 0.0
    return (int((et & ~tc).sum()) + int((tc & ~wt).sum())) / denom


# ---------------------------------------------------------------------------
# training loss


@dataclass
class LossConfig:
    dice_weight: float = 1.0
    bce_weight: float = 1.0
    branch_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # "batch" pools voxels of the whole batch into one soft Dice. Per-sample
    # Dice is flat on an empty target, so false positives in cases without a
    # sub-region would only be penalised by the (voxel-averaged) BCE term.
    dice_reduction: str = "batch"

    def __post_init__(self):
        if self.dice_reduction not in ("batch", "sample"):
            raise ConfigError(f"dice_reduction must be 'batch' or 'sample', got {self.dice_reduction!r}", "dice_reduction")


def soft_dice_loss(prob, target, smooth=SMOOTH, reduction="batch"):
    """``1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)``.

    Sums run over the whole batch for ``reduction="batch"``; for ``"sample"``
    each sample gets its own ratio and the losses are averaged.
    """
    if reduction == "batch":
        inter = (prob * target).sum()
        denom = prob.sum() + target.sum()
        return 1 - (2 * inter + smooth) / (denom + smooth)
    dims = tuple(range(1, prob.dim()))
    inter = (prob * target).sum(dim=dims)
    denom = prob.sum(dim=dims) + target.sum(dim=dims)
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


def segmentation_loss(output, labels, cfg: LossConfig | None = None, batch_id=None):
    """Dice + BCE summed over the three branches; returns ``(total, {branch: term})``."""
    cfg = cfg or LossConfig()
    labels = labels.to(output.y_WT.dtype)
    terms = {}
    total = 0
    for i, (name, y) in enumerate(zip(REGIONS, (output.y_WT, output.y_TC, output.y_ET))):
        if not torch.isfinite(y).all():
            raise NumericalError(f"non-finite {name} logits in batch {batch_id}")
        g = labels[:, i : i + 1]
        term = cfg.dice_weight * soft_dice_loss(torch.sigmoid(y), g, reduction=cfg.dice_reduction) + cfg.bce_weight * F.binary_cross_entropy_with_logits(y, g)
        terms[name] = term
        total = total + cfg.branch_weights[i] * term
    return total, terms


# ---------------------------------------------------------------------------
# reports


@dataclass
class CaseMetrics:
    case_id: str
    dice: dict
    hd95: dict
    violation_rate: float
    empty_flags: dict  # region -> "both" | "pred" | "gt" | ""

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "dice": self.dice,
            "hd95": self.hd95,
            "violation_rate": self.violation_rate,
            "empty_flags": self.empty_flags,
        }


def evaluate_case(case_id: str, pred: np.ndarray, gt: np.ndarray, spacing=1.0) -> CaseMetrics:
    """``pred`` and ``gt`` are binary ``[3, D, H, W]`` in WT, TC, ET order."""
    _check_shapes(pred, gt)
    d, h, flags = {}, {}, {}
    for i, r in enumerate(REGIONS):
        p, g = pred[i].astype(bool), gt[i].astype(bool)
        d[r] = dice(p, g)
        h[r] = hd95(p, g, spacing)
        flags[r] = "both" if not (p.any() or g.any()) else "pred" if not p.any() else "gt" if not g.any() else ""
    return CaseMetrics(case_id, d, h, containment_violation(pred[0], pred[1], pred[2]), flags)


@dataclass
class MetricReport:
    cases: list = field(default_factory=list)
    spacing: float = 1.0

    def mean(self, metric: str, region: str) -> float:
        return float(np.mean([getattr(c, metric)[region] for c in self.cases]))

    @property
    def dice(self) -> dict:
        return {r: self.mean("dice", r) for r in REGIONS}

    @property
    def hd95(self) -> dict:
        return {r: self.mean("hd95", r) for r in REGIONS}

    @property
    def mean_dice(self) -> float:
        return sum(self.dice.values()) / 3

    @property
    def mean_hd95(self) -> float:
        return sum(self.hd95.values()) / 3

    @property
    def violation_rate(self) -> float:
        return float(np.mean([c.violation_rate for c in self.cases]))

    def aggregate(self) -> dict:
        return {
            "num_cases": len(self.cases),
            "dice": {**self.dice, "avg": self.mean_dice},
            "hd95": {**self.hd95, "avg": self.mean_hd95},
            "violation_rate": self.violation_rate,
            "hd95_sentinel_cases": sum(1 for c in self.cases for r in REGIONS if c.empty_flags[r] in ("pred", "gt")),
            "spacing": self.spacing,
            "hd95_empty_convention": "both empty -> 0; one empty -> max in-grid distance (flagged)",
        }

    def summary_row(self) -> str:
        """Dice ET/WT/TC/Avg then HD95 ET/WT/TC/Avg; Dice as percentages."""
        d, h = self.dice, self.hd95
        cells = [100 * d["ET"], 100 * d["WT"], 100 * d["TC"], 100 * self.mean_dice, h["ET"], h["WT"], h["TC"], self.mean_hd95]
        header = "Dice ET | Dice WT | Dice TC | Dice Avg | HD95 ET | HD95 WT | HD95 TC | HD95 Avg"
        return header + "\n" + " | ".join(f"{c:7.2f}" for c in cells)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath = out / "metrics.json"
        jpath.write_text(
            json.dumps({"cases": [c.to_dict() for c in self.cases], "aggregate": self.aggregate()}, indent=1),
            encoding="utf-8",
        )
        cpath = out / "metrics.csv"
        with cpath.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id"] + [f"dice_{r.lower()}" for r in REGIONS] + [f"hd95_{r.lower()}" for r in REGIONS] + ["violation_rate", "empty_flags"])
            for c in self.cases:
                flags = ";".join(f"{r}:{c.empty_flags[r]}" for r in REGIONS if c.empty_flags[r])
                w.writerow([c.case_id] + [c.dice[r] for r in REGIONS] + [c.hd95[r] for r in REGIONS] + [c.violation_rate, flags])
        return jpath, cpath
