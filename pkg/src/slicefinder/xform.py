"""Linear 2D transforms: rigid/affine maps, estimation from point pairs, warping.

Transforms act on pixel coordinates ``p = (x, y)`` of images that already share
a common grid: ``T(p) = matrix @ p + translation``.  ``warp_image`` uses backward
mapping: ``out(p) = img(invert(T)(p))``, so warping an image by ``T`` moves its
content the way ``T`` moves points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, MissingFile, SingularTransform

RIGID = "rigid"
AFFINE = "affine"

# Registration-level guard against unrealistic deformations: |log|det|| <= log 4.
MAX_ABS_LOG_DET = math.log(4.0)

_ORTHO_TOL = 1e-9


@dataclass(eq=False)
class LinearTransform2D:
    """A rigid or affine map of 2D pixel coordinates.

    ``kind`` is ``"rigid"`` when the linear part is a pure rotation (checked at
    construction to 1e-9), ``"affine"`` otherwise.  The determinant guard on
    affine maps is enforced by the registration loop, not the constructor, so
    degenerate transforms can still be built and fed to ``invert`` for its
    error path.
    """

    kind: str
    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(2, 2).copy()
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(2).copy()
        if self.kind not in (RIGID, AFFINE):
            raise ValueError(f"unknown transform kind: {self.kind!r}")
        if not (np.all(np.isfinite(self.matrix)) and np.all(np.isfinite(self.translation))):
            raise ValueError("transform parameters must be finite")
        if self.kind == RIGID:
            err = np.abs(self.matrix.T @ self.matrix - np.eye(2)).max()
            if err > _ORTHO_TOL or abs(np.linalg.det(self.matrix) - 1.0) > _ORTHO_TOL:
                raise ValueError("rigid transform requires an orthonormal, det=+1 matrix")
        self.matrix.setflags(write=False)
        self.translation.setflags(write=False)

    @classmethod
    def identity(cls, kind: str = RIGID) -> "LinearTransform2D":
        return cls(kind, np.eye(2), np.zeros(2))

    @classmethod
    def rigid(cls, angle_deg: float, translation=(0.0, 0.0)) -> "LinearTransform2D":
        a = math.radians(angle_deg)
        c, s = math.cos(a), math.sin(a)
        return cls(RIGID, np.array([[c, -s], [s, c]]), np.asarray(translation, dtype=float))

    @classmethod
    def affine(cls, matrix, translation=(0.0, 0.0)) -> "LinearTransform2D":
        return cls(AFFINE, np.asarray(matrix, dtype=float), np.asarray(translation, dtype=float))

    @property
    def angle_deg(self) -> float:
        """Rotation angle for rigid transforms (undefined meaning for affine)."""
        return math.degrees(math.atan2(self.matrix[1, 0], self.matrix[0, 0]))

    def apply(self, points) -> np.ndarray:
        """Apply to one (2,) point or an (N, 2) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix.T + self.translation

    def det(self) -> float:
        return float(np.linalg.det(self.matrix))

    def deformation_in_bounds(self) -> bool:
        """True when |log|det|| <= log 4 (the excessive-deformation guard)."""
        d = abs(self.det())
        return d > 0.0 and abs(math.log(d)) <= MAX_ABS_LOG_DET + 1e-12


def apply_point(t: LinearTransform2D, p) -> np.ndarray:
    return t.apply(p)


def compose(a: LinearTransform2D, b: LinearTransform2D) -> LinearTransform2D:
    """Transform applying ``b`` first, then ``a``."""
    kind = RIGID if (a.kind == RIGID and b.kind == RIGID) else AFFINE
    return LinearTransform2D(kind, a.matrix @ b.matrix, a.matrix @ b.translation + a.translation)


def invert(t: LinearTransform2D) -> LinearTransform2D:
    if t.kind == RIGID:
        m = t.matrix.T  # orthonormal inverse
    else:
        det = t.det()
        if abs(det) < 1e-300:
            raise SingularTransform("transform matrix is singular")
        m = np.array([[t.matrix[1, 1], -t.matrix[0, 1]],
                      [-t.matrix[1, 0], t.matrix[0, 0]]]) / det
    return LinearTransform2D(t.kind, m, -m @ t.translation)


@dataclass(eq=False)
class Correspondence:
    """A matched point pair: ref_point in the reference frame, flt_point in the floating frame."""

    ref_point: np.ndarray
    flt_point: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.ref_point = np.asarray(self.ref_point, dtype=np.float64).reshape(2)
        self.flt_point = np.asarray(self.flt_point, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(self.ref_point)) and np.all(np.isfinite(self.flt_point))):
            raise ValueError("correspondence points must be finite")
        if not (0.0 <= self.weight <= 1.0):
            raise ValueError("weight must lie in [0, 1]")


def _stack_pairs(pairs):
    ref = np.array([c.ref_point for c in pairs], dtype=np.float64)
    flt = np.array([c.flt_point for c in pairs], dtype=np.float64)
    w = np.array([c.weight for c in pairs], dtype=np.float64)
    if w.sum() <= 0.0:
        # all-zero confidences carry no direction; fall back to uniform
        w = np.ones_like(w)
    return ref, flt, w


def rigid_from_correspondences(pairs) -> LinearTransform2D:
    """Weighted Procrustes fit of a rigid map minimizing sum w |T(ref) - flt|^2."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise DegenerateConfiguration("rigid fit needs at least 2 correspondences")
    ref, flt, w = _stack_pairs(pairs)
    if np.allclose(ref, ref[0], atol=1e-12):
        raise DegenerateConfiguration("rigid fit needs non-collocated reference points")
    wsum = w.sum()
    mu_r = (w[:, None] * ref).sum(axis=0) / wsum
    mu_f = (w[:, None] * flt).sum(axis=0) / wsum
    rc = ref - mu_r
    fc = flt - mu_f
    # cross-covariance C = sum_i w_i flt_c,i ref_c,i^T ; optimal rotation from atan2
    c = (w[:, None, None] * fc[:, :, None] * rc[:, None, :]).sum(axis=0)
    alpha = math.atan2(c[1, 0] - c[0, 1], c[0, 0] + c[1, 1])
    ca, sa = math.cos(alpha), math.sin(alpha)
    rot = np.array([[ca, -sa], [sa, ca]])
    return LinearTransform2D(RIGID, rot, mu_f - rot @ mu_r)


def affine_from_correspondences(pairs) -> LinearTransform2D:
    """Weighted least-squares 2x3 affine fit via normal equations.

    Coordinates are centered and scaled before solving so conditioning does not
    depend on image size; the result is mapped back to pixel coordinates.
    """
    pairs = list(pairs)
    if len(pairs) < 3:
        raise DegenerateConfiguration("affine fit needs at least 3 correspondences")
    ref, flt, w = _stack_pairs(pairs)
    wsum = w.sum()
    mu_r = (w[:, None] * ref).sum(axis=0) / wsum
    rc = ref - mu_r
    scale = math.sqrt(float((w * (rc ** 2).sum(axis=1)).sum() / wsum))
    if scale <= 0.0:
        raise DegenerateConfiguration("affine fit needs non-collocated reference points")
    rn = rc / scale

    x = np.column_stack([rn, np.ones(len(pairs))])
    xtw = x.T * w
    gram = xtw @ x
    if abs(np.linalg.det(gram)) < 1e-12 * (np.abs(gram).max() ** 3 + 1e-300):
        raise DegenerateConfiguration("reference points are collinear")
    theta = np.linalg.solve(gram, xtw @ flt)  # (3, 2): rows: coef x, coef y, intercept

    a_n = theta[:2].T  # linear part in the normalized frame
    t_n = theta[2]
    matrix = a_n / scale
    translation = t_n - matrix @ mu_r
    return LinearTransform2D(AFFINE, matrix, translation)


# --- warping ------------------------------------------------------------------

def bilinear_sample(data: np.ndarray, mask: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Masked bilinear sampling at fractional pixel coordinates.

    Returns (values, valid).  A sample is valid when it lies inside the pixel
    grid and every source pixel with nonzero interpolation weight is valid.
    Invalid samples get value 0.
    """
    h, w_ = data.shape
    inside = (xs >= 0.0) & (xs <= w_ - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    xc = np.clip(xs, 0.0, w_ - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w_ - 2 if w_ > 1 else 0).astype(np.intp)
    y0 = np.minimum(np.floor(yc), h - 2 if h > 1 else 0).astype(np.intp)
    x1 = np.minimum(x0 + 1, w_ - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    values = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    m00 = mask[y0, x0]
    m01 = mask[y0, x1]
    m10 = mask[y1, x0]
    m11 = mask[y1, x1]
    valid = inside \
        & ((w00 == 0.0) | m00) & ((w01 == 0.0) | m01) \
        & ((w10 == 0.0) | m10) & ((w11 == 0.0) | m11)
    values = np.where(valid, values, 0.0)
    return values, valid


def warp_image(img, t: LinearTransform2D):
    """Backward-warp ``img`` by ``t``: output pixel p samples the input at invert(t)(p)."""
    from .imgvol import Image2D  # local import to avoid a cycle

    inv = invert(t)
    h, w = img.data.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = inv.matrix[0, 0] * xs + inv.matrix[0, 1] * ys + inv.translation[0]
    sy = inv.matrix[1, 0] * xs + inv.matrix[1, 1] * ys + inv.translation[1]
    values, valid = bilinear_sample(img.data, img.mask, sx, sy)
    return Image2D(values, img.spacing_um, valid)


def warp_labels(labels, t: LinearTransform2D):
    """Backward-warp a label map by nearest-neighbor sampling; outside maps to 0."""
    from .imgvol import LabelMap2D

    inv = invert(t)
    h, w = labels.labels.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = inv.matrix[0, 0] * xs + inv.matrix[0, 1] * ys + inv.translation[0]
    sy = inv.matrix[1, 0] * xs + inv.matrix[1, 1] * ys + inv.translation[1]
    xi = np.rint(sx).astype(np.intp)
    yi = np.rint(sy).astype(np.intp)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros_like(labels.labels)
    out[inside] = labels.labels[yi[inside], xi[inside]]
    return LabelMap2D(out, region_names=labels.region_names)


# --- serialization --------------------------------------------------------------

def transform_to_csv_line(t: LinearTransform2D) -> str:
    """One CSV line: kind, row-major 2x2 matrix, translation; 17 significant digits."""
    vals = [t.matrix[0, 0], t.matrix[0, 1], t.matrix[1, 0], t.matrix[1, 1],
            t.translation[0], t.translation[1]]
    return ",".join([t.kind] + [format(v, ".17g") for v in vals])


def transform_from_csv_line(line: str) -> LinearTransform2D:
    parts = line.strip().split(",")
    if len(parts) != 7:
        raise ValueError(f"expected 7 CSV fields for a transform, got {len(parts)}")
    kind = parts[0].strip()
    v = [float(p) for p in parts[1:]]
    return LinearTransform2D(kind, np.array([[v[0], v[1]], [v[2], v[3]]]), np.array([v[4], v[5]]))


def save_transform(t: LinearTransform2D, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(transform_to_csv_line(t) + "\n")


def load_transform(path) -> LinearTransform2D:
    try:
        with open(path, "r", encoding="ascii") as fh:
            return transform_from_csv_line(fh.readline())
    except FileNotFoundError as exc:
        raise MissingFile(str(path)) from exc
