"""Deterministic synthetic brain-like volume for desk-scale verification.

The phantom superposes four closed-form components so that any voxel value can
be recomputed analytically from :class:`PhantomParams`:

    rho(x,y,z)   = sqrt(((x-cx)/(ax*g(z)))^2 + ((y-cy)/(ay*g(z)))^2)
    g(z)         = radius_min + radius_span * sin(pi*(z+0.5)/nz)
    ramp(z)      = ramp_lo + (ramp_hi-ramp_lo) * z/(nz-1)
    shell(rho)   = shell_amp * exp(-(rho-1)^2 / (2*shell_sigma^2)),
                   truncated to 0 where |rho-1| > 3*shell_sigma
    inside(rho)  = clip((1 - 3*shell_sigma - rho)/interior_taper, 0, 1)
    texture(x,y) = tex_amp/sqrt(K) * sum_k cos(2*pi*(fx_k*x + fy_k*y) + phase_k)
    blob_i(x,y,z)= blob_amp * exp(-((x-bx_i(z))^2+(y-by_i(z))^2)/(2*blob_sigma^2))
                   with centers drifting linearly in z

    value = ramp(z) + shell(rho) + inside(rho) * (texture(x,y) + blob_1 + blob_2)

The elliptic shell radius varies with z, the two interior blobs drift linearly
with z in opposite in-plane directions, and the z ramp keeps slice means
strictly increasing; together these make any two slices at |dz| >= 2
distinguishable while the in-plane texture gives block matching something to
lock onto.  Outside the shell band (rho > 1 + 3*shell_sigma) the value is
exactly ramp(z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimsTooSmall
from .imgvol import Image2D, LabelMap2D, Volume3D, extract_coronal_slice
from .xform import LinearTransform2D, warp_image

PHANTOM_MIN_DIM = 32
PHANTOM_SPACING_UM = 25.0

PHANTOM_REGION_NAMES = {
    1: "shell",
    2: "sector_west",
    3: "sector_south",
    4: "sector_east",
    5: "sector_north",
    6: "core",
}

# interior sector boundaries (degrees, atan2 convention), deliberately unequal
_SECTOR_EDGES_DEG = (-180.0, -60.0, 20.0, 120.0, 180.0)

_N_TEXTURE_WAVES = 16


@dataclass(frozen=True)
class PhantomParams:
    """All coefficients of the phantom's closed form (see module docstring)."""

    nx: int
    ny: int
    nz: int
    ramp_lo: float
    ramp_hi: float
    semi_x: float
    semi_y: float
    radius_min: float
    radius_span: float
    shell_amp: float
    shell_sigma: float
    interior_taper: float
    blob_amp: float
    blob_sigma: float
    blob1_base: tuple[float, float]
    blob2_base: tuple[float, float]
    blob_drift: tuple[float, float]  # px per slice; blob2 drifts along the perpendicular
    tex_amp: float
    tex_fx: tuple[float, ...]
    tex_fy: tuple[float, ...]
    tex_phase: tuple[float, ...]

    @property
    def center(self) -> tuple[float, float]:
        return (self.nx - 1) / 2.0, (self.ny - 1) / 2.0

    @classmethod
    def from_seed(cls, nx: int, ny: int, nz: int, seed: int) -> "PhantomParams":
        if min(nx, ny, nz) < PHANTOM_MIN_DIM:
            raise DimsTooSmall(f"phantom dims must each be >= {PHANTOM_MIN_DIM}")
        rng = np.random.default_rng(seed)
        semi = 0.42 * min(nx, ny)
        # texture wavelengths ~7..30 px, random orientation
        freqs = rng.uniform(0.033, 0.15, size=_N_TEXTURE_WAVES)
        angles = rng.uniform(0.0, 2.0 * math.pi, size=_N_TEXTURE_WAVES)
        phases = rng.uniform(0.0, 2.0 * math.pi, size=_N_TEXTURE_WAVES)
        drift_angle = rng.uniform(0.0, 2.0 * math.pi)
        # total in-plane blob travel ~ half the deep-interior radius at the volume ends
        travel = 0.25 * semi * 0.55
        drift = (travel / max(1, nz - 1) * 2.0 * math.cos(drift_angle),
                 travel / max(1, nz - 1) * 2.0 * math.sin(drift_angle))
        base1 = (float(rng.uniform(-0.08, 0.08) * semi), float(rng.uniform(-0.08, 0.08) * semi))
        base2 = (float(rng.uniform(-0.08, 0.08) * semi), float(rng.uniform(-0.08, 0.08) * semi))
        return cls(
            nx=nx, ny=ny, nz=nz,
            ramp_lo=0.2, ramp_hi=1.2,
            semi_x=0.42 * nx, semi_y=0.42 * ny,
            radius_min=0.55, radius_span=0.45,
            shell_amp=1.0, shell_sigma=0.05, interior_taper=0.10,
            blob_amp=0.9, blob_sigma=max(2.0, 0.045 * min(nx, ny)),
            blob1_base=base1, blob2_base=base2, blob_drift=drift,
            tex_amp=0.35,
            tex_fx=tuple(freqs * np.cos(angles)),
            tex_fy=tuple(freqs * np.sin(angles)),
            tex_phase=tuple(phases),
        )

    def radius_factor(self, z) -> np.ndarray:
        return self.radius_min + self.radius_span * np.sin(math.pi * (np.asarray(z, dtype=float) + 0.5) / self.nz)

    def ramp(self, z) -> np.ndarray:
        return self.ramp_lo + (self.ramp_hi - self.ramp_lo) * np.asarray(z, dtype=float) / (self.nz - 1)

    def blob_centers(self, z) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
        cx, cy = self.center
        dz = np.asarray(z, dtype=float) - (self.nz - 1) / 2.0
        dx, dy = self.blob_drift
        b1 = (cx + self.blob1_base[0] + dx * dz, cy + self.blob1_base[1] + dy * dz)
        # second blob drifts along the perpendicular direction
        b2 = (cx + self.blob2_base[0] - dy * dz, cy + self.blob2_base[1] + dx * dz)
        return b1, b2


def _normalized_radius(params: PhantomParams, x, y, z):
    cx, cy = params.center
    g = params.radius_factor(z)
    return np.sqrt(((x - cx) / (params.semi_x * g)) ** 2 + ((y - cy) / (params.semi_y * g)) ** 2)


def _texture(params: PhantomParams, x, y):
    out = np.zeros(np.broadcast(x, y).shape, dtype=np.float64)
    for fx, fy, ph in zip(params.tex_fx, params.tex_fy, params.tex_phase):
        out += np.cos(2.0 * math.pi * (fx * x + fy * y) + ph)
    return params.tex_amp / math.sqrt(len(params.tex_fx)) * out


def phantom_values(params: PhantomParams, x, y, z) -> np.ndarray:
    """Evaluate the phantom's closed form at (broadcastable) voxel coordinates."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    rho = _normalized_radius(params, x, y, z)
    band = 3.0 * params.shell_sigma
    shell = np.where(np.abs(rho - 1.0) <= band,
                     params.shell_amp * np.exp(-((rho - 1.0) ** 2) / (2.0 * params.shell_sigma ** 2)),
                     0.0)
    inside = np.clip((1.0 - band - rho) / params.interior_taper, 0.0, 1.0)
    (b1x, b1y), (b2x, b2y) = params.blob_centers(z)
    two_sig2 = 2.0 * params.blob_sigma ** 2
    blobs = params.blob_amp * (np.exp(-((x - b1x) ** 2 + (y - b1y) ** 2) / two_sig2)
                               + np.exp(-((x - b2x) ** 2 + (y - b2y) ** 2) / two_sig2))
    return params.ramp(z) + shell + inside * (_texture(params, x, y) + blobs)


def phantom_label_values(params: PhantomParams, x, y, z) -> np.ndarray:
    """Region identifiers of the analytic phantom segmentation at voxel coordinates."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    rho = _normalized_radius(params, x, y, z)
    band = 3.0 * params.shell_sigma
    labels = np.zeros(rho.shape, dtype=np.int32)
    labels[np.abs(rho - 1.0) <= band] = 1

    interior = rho < 1.0 - band
    cx, cy = params.center
    theta = np.degrees(np.arctan2(y - cy, x - cx))
    for i in range(4):
        sector = interior & (theta >= _SECTOR_EDGES_DEG[i]) & (theta < _SECTOR_EDGES_DEG[i + 1])
        labels[sector] = 2 + i

    (b1x, b1y), _ = params.blob_centers(z)
    core = interior & (((x - b1x) ** 2 + (y - b1y) ** 2) <= (2.0 * params.blob_sigma) ** 2)
    labels[core] = 6
    return labels


def _grid(params: PhantomParams):
    zs, ys, xs = np.mgrid[0:params.nz, 0:params.ny, 0:params.nx].astype(np.float64)
    return xs, ys, zs


def make_phantom(nx: int, ny: int, nz: int, seed: int) -> Volume3D:
    """Deterministic synthetic volume at 25 um isotropic spacing."""
    params = PhantomParams.from_seed(nx, ny, nz, seed)
    xs, ys, zs = _grid(params)
    data = phantom_values(params, xs, ys, zs)
    return Volume3D(data, (PHANTOM_SPACING_UM,) * 3)


def make_phantom_labels(nx: int, ny: int, nz: int, seed: int) -> Volume3D:
    """Analytic region labels for the same phantom, stored as an integer-valued volume."""
    params = PhantomParams.from_seed(nx, ny, nz, seed)
    xs, ys, zs = _grid(params)
    labels = phantom_label_values(params, xs, ys, zs)
    return Volume3D(labels.astype(np.float64), (PHANTOM_SPACING_UM,) * 3)


def label_slice(label_vol: Volume3D, z: int) -> LabelMap2D:
    img = extract_coronal_slice(label_vol, z)
    return LabelMap2D(np.rint(img.data).astype(np.int32), region_names=dict(PHANTOM_REGION_NAMES))


def perturb_volume(vol: Volume3D, max_angle_deg: float, max_shift_px: float,
                   noise_frac: float, seed: int) -> Volume3D:
    """Apply an independent random rigid move + Gaussian noise to every coronal slice.

    Stand-in for an "experimental" acquisition of the template: slice z is warped
    by a rigid transform with |angle| <= max_angle_deg and |shift| <= max_shift_px
    (uniform), then perturbed by noise with sigma = noise_frac * global dynamic
    range.  Pixels warped in from outside stay 0.
    """
    rng = np.random.default_rng(seed)
    nx, ny, nz = vol.dims
    span = float(vol.data.max() - vol.data.min())
    out = np.empty_like(vol.data)
    for z in range(nz):
        angle = rng.uniform(-max_angle_deg, max_angle_deg)
        shift = rng.uniform(-max_shift_px, max_shift_px, size=2)
        warped = warp_image(extract_coronal_slice(vol, z), LinearTransform2D.rigid(angle, shift))
        noise = rng.normal(0.0, noise_frac * span, size=warped.data.shape) if noise_frac > 0 else 0.0
        out[z] = warped.data + noise
    return Volume3D(out, vol.spacing_um)
