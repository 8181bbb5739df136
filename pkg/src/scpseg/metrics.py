"""Segmentation metrics: voxel-wise Dice, lesion-wise detection scores over
connected components, and a paired two-tailed t-test.

Lesion counting follows the overlap convention: a ground-truth lesion counts
as found if it shares at least one pixel with any predicted lesion, and a
predicted lesion counts as a true detection if it shares at least one pixel
with any ground-truth lesion. The two counts differ on asymmetric masks, so
both are kept:

    L-TPR  = tpr_count      / gl_count      (ground-truth side)
    L-PPV  = tpr_pred_count / pl_count      (prediction side)
    L-F1   = harmonic mean of L-TPR and L-PPV
    L-Dice = tpr_count / (gl_count + pl_count)

L-Dice is computed without the conventional factor 2 by default; passing
``ldice_doubled=True`` enables the factor-2 variant (capped at 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Connectivity",
    "LesionComponent",
    "LesionMetricsReport",
    "TTestResult",
    "StatisticsError",
    "dice",
    "connected_components",
    "lesion_metrics",
    "paired_ttest",
    "student_t_sf",
    "write_metrics_csv",
    "CSV_HEADER",
]

CSV_HEADER = "case,dice,l_dice,l_tpr,l_ppv,l_f1,tpr,gl,pl"


class StatisticsError(ValueError):
    """Raised when a statistical test's preconditions fail."""


class Connectivity(Enum):
    FOUR = 4
    EIGHT = 8


@dataclass(frozen=True)
class LesionComponent:
    """One connected foreground region; pixels are (row, col) pairs in scan order."""

    pixels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True)
class LesionMetricsReport:
    dice: float
    l_dice: float
    l_tpr: float
    l_ppv: float
    l_f1: float
    tpr_count: int
    gl_count: int
    pl_count: int
    tpr_pred_count: int


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    n: int


def _as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    return arr != 0


def dice(pred, gt) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    p, g = _as_mask(pred), _as_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"dice shape mismatch: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


_OFFSETS = {
    Connectivity.FOUR: ((-1, 0), (1, 0), (0, -1), (0, 1)),
    Connectivity.EIGHT: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


def label_components(mask, connectivity: Connectivity = Connectivity.EIGHT) -> tuple[np.ndarray, int]:
    """Label maximal connected foreground sets 1..n in row-major discovery order."""
    m = _as_mask(mask)
    h, w = m.shape
    labels = np.zeros((h, w), dtype=np.int32)
    offsets = _OFFSETS[connectivity]
    count = 0
    for i in range(h):
        for j in range(w):
            if not m[i, j] or labels[i, j]:
                continue
            count += 1
            stack = [(i, j)]
            labels[i, j] = count
            while stack:
                ci, cj = stack.pop()
                for di, dj in offsets:
                    ni, nj = ci + di, cj + dj
                    if 0 <= ni < h and 0 <= nj < w and m[ni, nj] and not labels[ni, nj]:
                        labels[ni, nj] = count
                        stack.append((ni, nj))
    return labels, count


def connected_components(mask, connectivity: Connectivity = Connectivity.EIGHT) -> list[LesionComponent]:
    labels, count = label_components(mask, connectivity)
    comps = []
    for lab in range(1, count + 1):
        pix = np.argwhere(labels == lab)
        comps.append(LesionComponent(pixels=pix))
    return comps


def lesion_metrics(
    pred,
    gt,
    connectivity: Connectivity = Connectivity.EIGHT,
    ldice_doubled: bool = False,
) -> LesionMetricsReport:
    p, g = _as_mask(pred), _as_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"lesion_metrics shape mismatch: {p.shape} vs {g.shape}")
    labels_g, gl = label_components(g, connectivity)
    labels_p, pl = label_components(p, connectivity)
    # A component is "hit" iff any of its pixels is foreground on the other side.
    tpr = len(np.unique(labels_g[p & (labels_g > 0)]))
    tpr_pred = len(np.unique(labels_p[g & (labels_p > 0)]))

    l_tpr = tpr / gl if gl else 1.0
    l_ppv = tpr_pred / pl if pl else 1.0
    l_f1 = 2 * l_tpr * l_ppv / (l_tpr + l_ppv) if (l_tpr + l_ppv) > 0 else 0.0
    if gl + pl:
        l_dice = (2 if ldice_doubled else 1) * tpr / (gl + pl)
        l_dice = min(l_dice, 1.0)
    else:
        l_dice = 1.0
    return LesionMetricsReport(
        dice=dice(p, g),
        l_dice=l_dice,
        l_tpr=l_tpr,
        l_ppv=l_ppv,
        l_f1=l_f1,
        tpr_count=tpr,
        gl_count=gl,
        pl_count=pl,
        tpr_pred_count=tpr_pred,
    )


# ---------------------------------------------------------------------------
# paired t-test via the regularized incomplete beta function
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    # Lentz's continued fraction for the incomplete beta function.
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            return h
    raise StatisticsError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), accurate to ~1e-12."""
    if x < 0.0 or x > 1.0:
        raise StatisticsError(f"betainc x must be in [0,1], got {x}")
    if x == 0.0 or x == 1.0:
        return float(x)
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, dof: int) -> float:
    """One-sided survival P(T > t) of Student's t with ``dof`` degrees of freedom."""
    if dof < 1:
        raise StatisticsError(f"degrees of freedom must be >= 1, got {dof}")
    x = dof / (dof + t * t)
    half = 0.5 * betainc_regularized(dof / 2.0, 0.5, x)
    return half if t >= 0 else 1.0 - half


def paired_ttest(a, b) -> TTestResult:
    """Two-tailed paired t-test on aligned samples."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1:
        raise StatisticsError(f"paired samples must be equal-length vectors, got {av.shape} vs {bv.shape}")
    n = av.size
    if n < 2:
        raise StatisticsError(f"paired t-test needs n >= 2, got n={n}")
    d = av - bv
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise StatisticsError("paired t-test undefined: differences have zero variance")
    t = float(d.mean()) / (sd / math.sqrt(n))
    p = 2.0 * student_t_sf(abs(t), n - 1)
    return TTestResult(t_statistic=t, p_value=min(p, 1.0), n=n)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_metrics_csv(path, reports: list[LesionMetricsReport], case_ids=None) -> None:
    """One row per case, fractions as six-decimal fixed point, counts as integers."""
    if case_ids is None:
        case_ids = list(range(len(reports)))
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for cid, r in zip(case_ids, reports):
            f.write(
                f"{cid},{r.dice:.6f},{r.l_dice:.6f},{r.l_tpr:.6f},{r.l_ppv:.6f},{r.l_f1:.6f},"
                f"{r.tpr_count},{r.gl_count},{r.pl_count}\n"
            )
