"""Multi-resolution block-matching registration of 2D images.

The engine tiles the reference image into small blocks, finds for each block
the integer displacement of the floating image maximizing the Pearson
correlation coefficient, robustly fits a rigid or affine transform to the
displacement field with least-trimmed-squares, and iterates coarse to fine
over an image pyramid.  Subpixel precision comes from the fit over many
blocks, not from subpixel search, which keeps the whole pipeline exactly
deterministic: ordered block iteration, fixed displacement ordering
(magnitude, then (dy, dx)), stable residual ranking.

Default parameters suit ~450x300 px slices on a 25 um grid; for much smaller
images pass a denser ``block_stride`` so coarse pyramid levels still produce
enough correspondences for the affine model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateConfiguration,
    DimMismatch,
    ExcessiveDeformation,
    NoValidBlocks,
    TooManyLevels,
)
from .imgvol import Image2D
from .xform import (
    AFFINE,
    RIGID,
    Correspondence,
    LinearTransform2D,
    affine_from_correspondences,
    compose,
    invert,
    rigid_from_correspondences,
    warp_image,
)

MIN_COARSE_DIM = 16
_LTS_MAX_ROUNDS = 10
# an update moving no image corner by more than this is treated as converged
_CONVERGED_PX = 0.02


@dataclass(frozen=True)
class BlockMatchParams:
    pyramid_levels: int = 3
    block_size: int = 8
    block_stride: int = 8
    search_radius: int = 4
    variance_keep_fraction: float = 0.5
    lts_keep_fraction: float = 0.5
    iterations_per_level: int = 4

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.block_size < 4:
            raise ValueError("block_size must be >= 4")
        if self.block_stride < 1:
            raise ValueError("block_stride must be >= 1")
        if self.search_radius < 1:
            raise ValueError("search_radius must be >= 1")
        for name in ("variance_keep_fraction", "lts_keep_fraction"):
            f = getattr(self, name)
            if not (0.0 < f <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be >= 1")


@dataclass(eq=False)
class RegistrationResult:
    transform: LinearTransform2D
    correspondences_used: tuple[int, ...]  # per pyramid level, coarse to fine
    converged: bool
    residual_rms: float


# --- pyramid -----------------------------------------------------------------------

def build_pyramid(img: Image2D, levels: int) -> list[Image2D]:
    """Level 0 = input; each next level averages valid pixels over 2x2 tiles."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = img.data.shape
    for _ in range(levels - 1):
        h //= 2
        w //= 2
    if min(h, w) < MIN_COARSE_DIM:
        raise TooManyLevels(
            f"coarsest level would be {w}x{h}; needs >= {MIN_COARSE_DIM} px per dim")

    out = [img]
    for _ in range(levels - 1):
        cur = out[-1]
        h2 = (cur.data.shape[0] // 2) * 2
        w2 = (cur.data.shape[1] // 2) * 2
        d = cur.data[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2)
        m = cur.mask[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2)
        cnt = m.sum(axis=(1, 3))
        vals = (d * m).sum(axis=(1, 3)) / np.maximum(cnt, 1)
        out.append(Image2D(vals, cur.spacing_um * 2.0, cnt >= 1))
    return out


# --- block search ------------------------------------------------------------------

def _displacement_order(radius: int) -> np.ndarray:
    """All integer (dy, dx) within the search square, smallest magnitude first, then (dy, dx)."""
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    dy = dy.ravel()
    dx = dx.ravel()
    order = np.lexsort((dx, dy, dy * dy + dx * dx))
    return np.stack([dy[order], dx[order]], axis=1)


def match_blocks(ref: Image2D, flt: Image2D, params: BlockMatchParams) -> list[Correspondence]:
    """Exhaustive per-block integer-displacement search maximizing correlation.

    The reference is tiled by block_size/block_stride; blocks that are mostly
    invalid, constant, or in the lower half of the variance ranking are skipped.
    Each emitted correspondence pairs a block center with center + best
    displacement, weighted by max(0, best correlation).
    """
    if ref.data.shape != flt.data.shape:
        raise DimMismatch("reference and floating images must share dims")
    h, w = ref.data.shape
    bs = params.block_size
    stride = params.block_stride
    radius = params.search_radius
    if h < bs or w < bs:
        raise NoValidBlocks(f"image {w}x{h} smaller than one {bs}px block")

    ys0 = np.arange(0, h - bs + 1, stride)
    xs0 = np.arange(0, w - bs + 1, stride)
    oy, ox = np.meshgrid(ys0, xs0, indexing="ij")
    oy = oy.ravel()
    ox = ox.ravel()

    rview_d = sliding_window_view(ref.data, (bs, bs))
    rview_m = sliding_window_view(ref.mask, (bs, bs))
    rblocks = rview_d[oy, ox].reshape(len(oy), bs * bs)
    rmasks = rview_m[oy, ox].reshape(len(oy), bs * bs)

    nvalid = rmasks.sum(axis=1)
    rsum = (rblocks * rmasks).sum(axis=1)
    rsq = (rblocks * rblocks * rmasks).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        variance = rsq / np.maximum(nvalid, 1) - (rsum / np.maximum(nvalid, 1)) ** 2
    usable = (2 * nvalid >= bs * bs) & (nvalid >= 2) & (variance > 0.0)
    if not usable.any():
        raise NoValidBlocks("all blocks are constant or mostly invalid")

    cand = np.flatnonzero(usable)
    keep_n = max(1, math.ceil(params.variance_keep_fraction * len(cand)))
    ranked = cand[np.lexsort((cand, -variance[cand]))]
    kept = np.sort(ranked[:keep_n])

    # pad the floating image with an invalid border so every displaced window is in bounds
    fpad = np.zeros((h + 2 * radius, w + 2 * radius), dtype=np.float64)
    mpad = np.zeros((h + 2 * radius, w + 2 * radius), dtype=bool)
    fpad[radius:radius + h, radius:radius + w] = flt.data
    mpad[radius:radius + h, radius:radius + w] = flt.mask
    fview = sliding_window_view(fpad, (bs, bs))
    mview = sliding_window_view(mpad, (bs, bs))

    ky = oy[kept]
    kx = ox[kept]
    kref = rblocks[kept]
    kmask = rmasks[kept]

    best_cc = np.full(len(kept), -np.inf)
    best_dy = np.zeros(len(kept), dtype=np.int64)
    best_dx = np.zeros(len(kept), dtype=np.int64)
    for dy, dx in _displacement_order(radius):
        win = fview[ky + radius + dy, kx + radius + dx].reshape(len(kept), bs * bs)
        wmask = mview[ky + radius + dy, kx + radius + dx].reshape(len(kept), bs * bs)
        m = kmask & wmask
        n = m.sum(axis=1)
        a = kref * m
        b = win * m
        sa = a.sum(axis=1)
        sb = b.sum(axis=1)
        saa = (a * kref).sum(axis=1)
        sbb = (b * win).sum(axis=1)
        sab = (a * win).sum(axis=1)
        var_a = n * saa - sa * sa
        var_b = n * sbb - sb * sb
        ok = (n >= 2) & (var_a > 0.0) & (var_b > 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            cc = (n * sab - sa * sb) / np.sqrt(var_a * var_b)
        cc = np.where(ok, cc, -np.inf)
        better = cc > best_cc  # strict: earlier (smaller) displacements win ties
        best_cc[better] = cc[better]
        best_dy[better] = dy
        best_dx[better] = dx

    found = best_cc > -np.inf
    if not found.any():
        raise NoValidBlocks("no block admits a defined correlation at any displacement")

    half = (bs - 1) / 2.0
    corrs = []
    for i in np.flatnonzero(found):
        cx_ = kx[i] + half
        cy_ = ky[i] + half
        weight = min(1.0, max(0.0, float(best_cc[i])))
        corrs.append(Correspondence((cx_, cy_), (cx_ + best_dx[i], cy_ + best_dy[i]), weight))
    return corrs


# --- robust estimation ---------------------------------------------------------------

def _fit(corrs, kind: str) -> LinearTransform2D:
    if kind == RIGID:
        return rigid_from_correspondences(corrs)
    if kind == AFFINE:
        return affine_from_correspondences(corrs)
    raise ValueError(f"unknown transform kind {kind!r}")


def _lts_fit(corrs, kind: str, keep: float):
    """LTS loop; returns (transform, kept indices, rms residual on the kept set)."""
    n = len(corrs)
    min_pairs = 2 if kind == RIGID else 3
    if n < min_pairs:
        raise DegenerateConfiguration(f"{kind} fit needs >= {min_pairs} correspondences")
    k = max(min_pairs, math.ceil(keep * n))

    ref = np.array([c.ref_point for c in corrs])
    flt = np.array([c.flt_point for c in corrs])
    current = _fit(corrs, kind)
    kept_prev: np.ndarray | None = None
    kept = np.arange(n)
    for _ in range(_LTS_MAX_ROUNDS):
        res = np.linalg.norm(ref @ current.matrix.T + current.translation - flt, axis=1)
        kept = np.sort(np.lexsort((np.arange(n), res))[:k])
        if kept_prev is not None and np.array_equal(kept, kept_prev):
            break
        current = _fit([corrs[i] for i in kept], kind)
        kept_prev = kept
    res_kept = np.linalg.norm(ref[kept] @ current.matrix.T + current.translation - flt[kept], axis=1)
    return current, kept, float(np.sqrt((res_kept ** 2).mean()))


def estimate_transform_lts(corrs, kind: str, keep: float) -> LinearTransform2D:
    """Least-trimmed-squares fit: repeatedly keep the best ceil(keep*n) residuals and refit."""
    transform, _, _ = _lts_fit(list(corrs), kind, keep)
    return transform


# --- multiresolution driver -----------------------------------------------------------

def _shift_level(t: LinearTransform2D, finer: bool) -> LinearTransform2D:
    """Re-express a transform one pyramid level finer/coarser.

    Coarse pixel centers sit at fine coordinate 2c + 0.5, so conjugating by that
    similarity leaves the linear part unchanged and maps the translation.
    """
    o = np.array([0.5, 0.5])
    i_m = np.eye(2) - t.matrix
    if finer:
        translation = 2.0 * t.translation + i_m @ o
    else:
        translation = (t.translation - i_m @ o) / 2.0
    return LinearTransform2D(t.kind, t.matrix, translation)


def _to_level(t: LinearTransform2D, level: int) -> LinearTransform2D:
    for _ in range(level):
        t = _shift_level(t, finer=False)
    return t


def _corner_motion(t: LinearTransform2D, w: int, h: int) -> float:
    corners = np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])
    return float(np.linalg.norm(t.apply(corners) - corners, axis=1).max())


def register(ref: Image2D, flt: Image2D, kind: str,
             params: BlockMatchParams = BlockMatchParams(),
             init: LinearTransform2D | None = None) -> RegistrationResult:
    """Coarse-to-fine block-matching registration.

    Returns a transform T such that ``warp_image(flt, T)`` aligns the floating
    image onto the reference.  The affine model with no explicit ``init`` first
    runs a rigid registration and refines from there; affine updates violating
    the |log|det|| <= log 4 deformation guard raise instead of being clamped.
    """
    if ref.data.shape != flt.data.shape:
        raise DimMismatch("reference and floating images must share dims")
    if kind not in (RIGID, AFFINE):
        raise ValueError(f"unknown transform kind {kind!r}")
    if kind == AFFINE and init is None:
        init = register(ref, flt, RIGID, params).transform

    ref_pyr = build_pyramid(ref, params.pyramid_levels)
    flt_pyr = build_pyramid(flt, params.pyramid_levels)

    current = _to_level(init, params.pyramid_levels - 1) if init is not None \
        else LinearTransform2D.identity()
    counts: list[int] = []
    residual = math.inf
    converged = False

    for level in range(params.pyramid_levels - 1, -1, -1):
        rl = ref_pyr[level]
        fl = flt_pyr[level]
        h, w = rl.data.shape
        finest = level == 0
        best_residual = math.inf
        best_transform = current
        level_count = 0
        for _ in range(params.iterations_per_level):
            warped = warp_image(fl, current)
            corrs = match_blocks(rl, warped, params)
            level_count = len(corrs)
            fit, _, fit_rms = _lts_fit(corrs, kind, params.lts_keep_fraction)
            if fit_rms > best_residual:
                current = best_transform  # keep the best iterate: monotone refinement
                break
            best_residual = fit_rms
            best_transform = current
            update = invert(fit)
            candidate = compose(update, current)
            if kind == AFFINE and not candidate.deformation_in_bounds():
                raise ExcessiveDeformation(
                    f"affine determinant {candidate.det():.4g} breaches the deformation guard")
            current = candidate
            best_transform = current
            if _corner_motion(update, w, h) < _CONVERGED_PX:
                converged = True
                break
        counts.append(level_count)
        if finest:
            residual = best_residual
        if level > 0:
            current = _shift_level(current, finer=True)

    if not math.isfinite(residual):
        residual = 0.0
    return RegistrationResult(current, tuple(counts), converged, residual)
