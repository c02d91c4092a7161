"""Similarity and evaluation metrics: Pearson correlation, NMI, Dice, OLS regression.

NMI uses the Studholme normalization (H(A)+H(B)) / H(A,B), which lies in [1, 2]
whenever the joint entropy is positive; 1 means independence, 2 identical
discretizations.  Entropies use natural logs (the base cancels in the ratio)
and intensities are binned by per-image min-max over co-valid pixels, so
padding and affine intensity rescaling do not move bin assignments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateX,
    InsufficientContrast,
    LabelAbsentEverywhere,
    NoOverlap,
    ZeroVariance,
)
from .imgvol import Image2D, LabelMap2D, require_same_dims

DEFAULT_BINS = 64


def correlation_coefficient(a, b, mask_a=None, mask_b=None) -> float:
    """Pearson correlation over co-valid pixels of two equal-size blocks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("blocks must have equal shape")
    valid = np.ones(a.shape, dtype=bool)
    if mask_a is not None:
        valid &= np.asarray(mask_a, dtype=bool)
    if mask_b is not None:
        valid &= np.asarray(mask_b, dtype=bool)
    av = a[valid]
    bv = b[valid]
    if av.size < 2:
        raise ValueError("need at least 2 co-valid pixels")
    ac = av - av.mean()
    bc = bv - bv.mean()
    va = float(ac @ ac)
    vb = float(bc @ bc)
    if va == 0.0 or vb == 0.0:
        raise ZeroVariance("a block is constant over the co-valid pixels")
    return float(ac @ bc) / math.sqrt(va * vb)


@dataclass(eq=False)
class JointHistogram:
    """Joint bin counts of two images over their co-valid pixels."""

    bins: int
    counts: np.ndarray  # (bins, bins) int64; axis 0 = image A, axis 1 = image B

    def __post_init__(self):
        self.counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.bins, self.bins) or np.any(self.counts < 0):
            raise ValueError("counts must be a non-negative (bins, bins) grid")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def marginal_a(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def marginal_b(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _bin_indices(values: np.ndarray, bins: int) -> np.ndarray:
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.intp)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.intp)
    return np.minimum(idx, bins - 1)  # the max value maps to the top bin


def joint_histogram(a: Image2D, b: Image2D, bins: int = DEFAULT_BINS) -> JointHistogram:
    require_same_dims(a, b)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    valid = a.mask & b.mask
    if not valid.any():
        raise NoOverlap("images share no co-valid pixels")
    ia = _bin_indices(a.data[valid], bins)
    ib = _bin_indices(b.data[valid], bins)
    counts = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    return JointHistogram(bins, counts)


def _entropy(counts: np.ndarray, n: int) -> float:
    nz = counts[counts > 0]
    if nz.size == 0:
        return 0.0
    p = nz / n
    # fsum keeps the sum correctly rounded, so H(A,A) == H(A) holds exactly
    return -math.fsum((p * np.log(p)).tolist())


def nmi_from_histogram(hist: JointHistogram) -> float:
    n = hist.n
    h_joint = _entropy(hist.counts.ravel(), n)
    if h_joint == 0.0:
        raise InsufficientContrast("both images are constant on the overlap")
    h_a = _entropy(hist.marginal_a, n)
    h_b = _entropy(hist.marginal_b, n)
    return (h_a + h_b) / h_joint


def nmi(a: Image2D, b: Image2D, bins: int = DEFAULT_BINS) -> float:
    """Normalized mutual information (H(A)+H(B))/H(A,B) over co-valid pixels."""
    return nmi_from_histogram(joint_histogram(a, b, bins))


# --- segmentation overlap ----------------------------------------------------------

def dice(a: LabelMap2D, b: LabelMap2D, label: int) -> float:
    """2|A_l n B_l| / (|A_l| + |B_l|) for one region identifier."""
    require_same_dims(a, b)
    in_a = a.labels == label
    in_b = b.labels == label
    na = int(in_a.sum())
    nb = int(in_b.sum())
    if na + nb == 0:
        raise LabelAbsentEverywhere(f"label {label} is absent from both maps")
    return 2.0 * int((in_a & in_b).sum()) / (na + nb)


@dataclass(frozen=True)
class MeanDice:
    score: float
    per_label: dict[int, float]
    absent_labels: tuple[int, ...]


def mean_dice(a: LabelMap2D, b: LabelMap2D, labels) -> MeanDice:
    """Unweighted mean Dice over the given labels; absent-everywhere labels are excluded and reported."""
    per: dict[int, float] = {}
    absent: list[int] = []
    for label in labels:
        try:
            per[label] = dice(a, b, label)
        except LabelAbsentEverywhere:
            absent.append(label)
    if not per:
        raise LabelAbsentEverywhere("none of the requested labels is present in either map")
    return MeanDice(sum(per.values()) / len(per), per, tuple(absent))


# --- linear regression --------------------------------------------------------------

@dataclass(frozen=True)
class RegressionFit:
    """Ordinary least-squares line y = a*x + b with its coefficient of determination."""

    a: float
    b: float
    r2: float

    def predict(self, x):
        return self.a * np.asarray(x, dtype=float) + self.b


def linear_regression(pairs) -> RegressionFit:
    pts = np.asarray(list(pairs), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need at least 2 (x, y) pairs")
    x = pts[:, 0]
    y = pts[:, 1]
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise DegenerateX("all x values are equal")
    a = float(xc @ y) / sxx
    b = float(y.mean()) - a * float(x.mean())
    res = y - (a * x + b)
    ss_res = float(res @ res)
    yc = y - y.mean()
    ss_tot = float(yc @ yc)
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res <= 1e-30 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return RegressionFit(a, b, r2)
