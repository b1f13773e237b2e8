"""Dice + cross-entropy training loss and surface-distance evaluation metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError
from .tensor import Tensor, check_finite_input, make_output

DICE_EPS = 1e-5


def dice_ce_loss(logits: Tensor, labels, eps: float = DICE_EPS) -> Tensor:
    """0.5 * soft dice loss + 0.5 * mean cross-entropy.

    Soft dice is averaged over all C classes, background included.
    ``labels`` is an integer array shaped (B, W, H, Z).
    """
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if logits.ndim < 3:
        raise DimensionError(f"logits must be (B, C, ...), got {logits.shape}")
    B, C = logits.shape[:2]
    if labels.shape != (B,) + logits.shape[2:]:
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C}), found range [{labels.min()}, {labels.max()}]")
    check_finite_input("dice_ce_loss", logits)
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    p = np.exp(logp)
    onehot = np.moveaxis(np.eye(C, dtype=logits.dtype)[labels], -1, 1)
    red = (0,) + tuple(range(2, logits.ndim))
    n_vox = labels.size

    inter = (p * onehot).sum(axis=red)
    denom = p.sum(axis=red) + onehot.sum(axis=red) + eps
    dice = (2.0 * inter + eps) / denom
    soft_dice = 1.0 - dice.mean()
    ce = -(logp * onehot).sum() / n_vox
    loss = 0.5 * soft_dice + 0.5 * ce

    def vjp(g):
        shape = (1, C) + (1,) * (logits.ndim - 2)
        # d(dice_c)/dp = (2 g_c * denom - (2 inter + eps)) / denom^2
        ddice_dp = ((2.0 * onehot * denom.reshape(shape) - (2.0 * inter + eps).reshape(shape))
                    / (denom ** 2).reshape(shape))
        dl_dp = -0.5 * ddice_dp / C
        dl_dz = p * (dl_dp - (dl_dp * p).sum(axis=1, keepdims=True))
        dl_dz += 0.5 * (p - onehot) / n_vox
        return ((g * dl_dz).astype(logits.dtype, copy=False),)

    out = np.asarray(loss, dtype=logits.dtype).reshape(())
    return make_output(out, (logits,), vjp, "dice_ce_loss")


def dice_score(pred, truth, class_id: int) -> float:
    """2|A and B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    a = pred == class_id
    b = truth == class_id
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (n, 3) of foreground voxels with a 6-connected background neighbour.

    Voxels on the volume faces count as touching background.
    """
    m = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    core = m[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for axis in range(3):
        for shift in (-1, 1):
            sl = [slice(1, -1)] * 3
            sl[axis] = slice(1 + shift, m.shape[axis] - 1 + shift)
            interior &= m[tuple(sl)]
    return np.argwhere(core & ~interior)


def _nearest_distances(src: np.ndarray, dst: np.ndarray, spacing, chunk: int = 2048) -> np.ndarray:
    """Exact Euclidean distance from each ``src`` point to its nearest ``dst`` point."""
    sp = np.asarray(spacing, dtype=np.float64)
    s = src.astype(np.float64)
    d = dst.astype(np.float64)
    best = np.empty(len(s))
    for start in range(0, len(s), chunk):
        blk = s[start:start + chunk]
        dx = (blk[:, None, 0] - d[None, :, 0]) * sp[0]
        dy = (blk[:, None, 1] - d[None, :, 1]) * sp[1]
        dz = (blk[:, None, 2] - d[None, :, 2]) * sp[2]
        best[start:start + chunk] = (dx * dx + dy * dy + dz * dz).min(axis=1)
    return np.sqrt(best)


def _surface_distances(pred_mask, truth_mask, spacing):
    pred_mask = np.asarray(pred_mask, dtype=bool)
    truth_mask = np.asarray(truth_mask, dtype=bool)
    if pred_mask.shape != truth_mask.shape:
        raise DimensionError(f"shape mismatch: {pred_mask.shape} vs {truth_mask.shape}")
    if not pred_mask.any() or not truth_mask.any():
        return None
    sa, sb = surface_voxels(pred_mask), surface_voxels(truth_mask)
    return _nearest_distances(sa, sb, spacing), _nearest_distances(sb, sa, spacing)


def hausdorff_distance(pred_mask, truth_mask, spacing=(1.0, 1.0, 1.0),
                       percentile: Optional[float] = None) -> Optional[float]:
    """Symmetric Hausdorff distance between mask boundaries in physical units.

    Returns None when either mask is empty.  ``percentile=95`` gives HD95
    (the percentile of each directed distance set, then the max).
    """
    d = _surface_distances(pred_mask, truth_mask, spacing)
    if d is None:
        return None
    if percentile is None:
        return float(max(d[0].max(), d[1].max()))
    return float(max(np.percentile(d[0], percentile), np.percentile(d[1], percentile)))


def average_surface_distance(pred_mask, truth_mask, spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    """Mean nearest-opposite-surface distance pooled over both boundaries."""
    d = _surface_distances(pred_mask, truth_mask, spacing)
    if d is None:
        return None
    n = len(d[0]) + len(d[1])
    return math.fsum(d[0].tolist() + d[1].tolist()) / n


@dataclass
class ClassMetrics:
    class_id: int
    dsc: float
    hd: Optional[float]
    asd: Optional[float]


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


@dataclass
class MetricsReport:
    """Per-class and mean foreground metrics for one or more volumes."""

    per_class: List[ClassMetrics] = field(default_factory=list)
    mean_dsc: Optional[float] = None
    mean_hd: Optional[float] = None
    mean_asd: Optional[float] = None
    volume_id: str = ""

    def class_ids(self) -> List[int]:
        return [c.class_id for c in self.per_class]

    def to_rows(self) -> List[dict]:
        rows = [{"class": str(c.class_id), "dsc": c.dsc, "hd": c.hd, "asd": c.asd}
                for c in self.per_class]
        rows.append({"class": "mean", "dsc": self.mean_dsc, "hd": self.mean_hd,
                     "asd": self.mean_asd})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dsc", "hd", "asd"])
        for r in self.to_rows():
            w.writerow([r["class"]] + [_fmt(r[k]) for k in ("dsc", "hd", "asd")])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, volume_id: str = "") -> "MetricsReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        rep = cls(volume_id=volume_id)
        for r in rows:
            vals = [None if r[k] in ("", "NA") else float(r[k]) for k in ("dsc", "hd", "asd")]
            if r["class"] == "mean":
                rep.mean_dsc, rep.mean_hd, rep.mean_asd = vals
            else:
                rep.per_class.append(ClassMetrics(int(r["class"]), *vals))
        return rep


def _fmt(v: Optional[float], digits: int = 6) -> str:
    return "NA" if v is None else f"{v:.{digits}f}"


def evaluate_volume(pred, truth, spacing=(1.0, 1.0, 1.0), num_classes: Optional[int] = None,
                    volume_id: str = "", hd_percentile: Optional[float] = None) -> MetricsReport:
    """Metrics for each foreground class; classes absent from both volumes are skipped.

    DSC means run over classes present in either volume; HD/ASD means over
    classes where both masks are non-empty.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), truth.max(initial=0))) + 1
    rep = MetricsReport(volume_id=volume_id)
    for c in range(1, num_classes):
        a, b = pred == c, truth == c
        if not a.any() and not b.any():
            continue
        rep.per_class.append(ClassMetrics(
            c, dice_score(pred, truth, c),
            hausdorff_distance(a, b, spacing, hd_percentile),
            average_surface_distance(a, b, spacing)))
    rep.mean_dsc = _mean(c.dsc for c in rep.per_class)
    rep.mean_hd = _mean(c.hd for c in rep.per_class)
    rep.mean_asd = _mean(c.asd for c in rep.per_class)
    return rep


def aggregate_reports(reports: Sequence[MetricsReport], volume_id: str = "aggregate") -> MetricsReport:
    """Per-class values averaged over volumes; mean row = mean of per-volume means."""
    ids = sorted({c for r in reports for c in r.class_ids()})
    agg = MetricsReport(volume_id=volume_id)
    for cid in ids:
        rows = [c for r in reports for c in r.per_class if c.class_id == cid]
        agg.per_class.append(ClassMetrics(cid, _mean(c.dsc for c in rows),
                                          _mean(c.hd for c in rows), _mean(c.asd for c in rows)))
    agg.mean_dsc = _mean(r.mean_dsc for r in reports)
    agg.mean_hd = _mean(r.mean_hd for r in reports)
    agg.mean_asd = _mean(r.mean_asd for r in reports)
    return agg


def format_table(reports: Sequence[MetricsReport], class_names: Optional[dict] = None) -> str:
    """Plain-text table: Volume, Mean DSC, Mean HD, Mean ASD, then DSC per class."""
    ids = sorted({c for r in reports for c in r.class_ids()})
    names = class_names or {}
    header = ["Volume", "Mean DSC", "Mean HD", "Mean ASD"] + [
        f"DSC {names.get(c, c)}" for c in ids]
    body = []
    for r in reports:
        by_id = {c.class_id: c for c in r.per_class}
        body.append([r.volume_id, _fmt(r.mean_dsc, 4), _fmt(r.mean_hd, 4), _fmt(r.mean_asd, 4)]
                    + [_fmt(by_id[c].dsc, 4) if c in by_id else "NA" for c in ids])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt_row = lambda row: " | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
    lines = [fmt_row(header), "-+-".join("-" * w for w in widths)]
    lines += [fmt_row(row) for row in body]
    return "\n".join(lines) + "\n"
