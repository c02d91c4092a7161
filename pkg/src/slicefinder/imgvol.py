"""2D images, 3D volumes, label maps: representation, file I/O, resampling, tilt.

Axis convention (used everywhere in this package): x = left-right,
y = infero-superior, z = antero-posterior.  Coronal slices are (x, y) planes at
fixed z.  ``Volume3D.data`` is indexed ``[z, y, x]`` (x fastest in memory) and
``Image2D.data`` is indexed ``[y, x]``.

All rasters hold float64 internally regardless of the on-disk dtype, and are
immutable after construction (arrays are flagged read-only), so they can be
shared freely across worker processes.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AnisotropicSlice,
    AnisotropicVolume,
    DimMismatch,
    EmptyOutput,
    IndexOutOfRange,
    MalformedHeader,
    MalformedImage,
    MissingFile,
    SizeMismatch,
)
from .xform import bilinear_sample

VOLUME_DTYPES = {"uint8": np.uint8, "uint16": np.uint16, "float32": np.float32}


@dataclass(eq=False)
class Image2D:
    """A 2D scalar raster with isotropic pixel spacing and a validity mask."""

    data: np.ndarray
    spacing_um: float = 1.0
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.size == 0:
            raise ValueError("image data must be a non-empty 2D array")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image values must be finite")
        self.spacing_um = float(self.spacing_um)
        if not (self.spacing_um > 0.0 and math.isfinite(self.spacing_um)):
            raise ValueError("spacing_um must be positive and finite")
        if self.mask is None:
            self.mask = np.ones(self.data.shape, dtype=bool)
        else:
            self.mask = np.ascontiguousarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape:
                raise ValueError("mask shape must match data shape")
        self.data.setflags(write=False)
        self.mask.setflags(write=False)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(eq=False)
class Volume3D:
    """A 3D scalar raster; ``data[z, y, x]`` with per-axis spacing (sx, sy, sz) in um."""

    data: np.ndarray
    spacing_um: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.size == 0:
            raise ValueError("volume data must be a non-empty 3D array")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume values must be finite")
        self.spacing_um = tuple(float(s) for s in self.spacing_um)
        if len(self.spacing_um) != 3 or any(not (s > 0.0 and math.isfinite(s)) for s in self.spacing_um):
            raise ValueError("all spacings must be positive and finite")
        self.data.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz)."""
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    def voxel(self, x: int, y: int, z: int) -> float:
        return float(self.data[z, y, x])


@dataclass(frozen=True)
class TiltSpec:
    """Cutting-plane rotations: theta about the left-right (x) axis, phi about the infero-superior (y) axis."""

    theta_deg: float = 0.0
    phi_deg: float = 0.0

    def __post_init__(self):
        for a in (self.theta_deg, self.phi_deg):
            if not math.isfinite(a) or abs(a) > 45.0:
                raise ValueError("tilt angles must be finite and at most 45 degrees in magnitude")


@dataclass(eq=False)
class LabelMap2D:
    """Integer region identifiers on a 2D grid; 0 is background."""

    labels: np.ndarray
    region_names: dict[int, str] | None = None

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2 or self.labels.size == 0:
            raise ValueError("label grid must be a non-empty 2D array")
        if self.labels.min() < 0:
            raise ValueError("label identifiers must be non-negative")
        self.labels.setflags(write=False)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


# --- slicing / resampling / field of view --------------------------------------

def extract_coronal_slice(vol: Volume3D, z: int) -> Image2D:
    """The (x, y) plane at index z, as an all-valid image with spacing sx (= sy)."""
    nx, ny, nz = vol.dims
    if not (0 <= z < nz):
        raise IndexOutOfRange(f"slice index {z} outside [0, {nz})")
    sx, sy, _ = vol.spacing_um
    if sx != sy:
        raise AnisotropicSlice(f"in-plane spacings differ: sx={sx} sy={sy}")
    return Image2D(vol.data[z], sx)


def resample_isotropic(img: Image2D, target_spacing_um: float) -> Image2D:
    """Bilinear resample onto a grid with the given spacing.

    Output dims are round(dim * spacing / target) (half away from zero).  Pixel
    centers are aligned: output pixel i samples the source at
    (i + 0.5) * target/spacing - 0.5, clamped to the source extent.  A resampled
    pixel is valid iff every source pixel contributing nonzero weight is valid.
    """
    if not (target_spacing_um > 0.0):
        raise ValueError("target_spacing_um must be positive")
    h, w = img.data.shape
    ratio = img.spacing_um / target_spacing_um
    out_w = int(math.floor(w * ratio + 0.5))
    out_h = int(math.floor(h * ratio + 0.5))
    if out_w < 1 or out_h < 1:
        raise EmptyOutput("target spacing too coarse: a dimension rounds to zero")
    step = target_spacing_um / img.spacing_um
    xs = (np.arange(out_w) + 0.5) * step - 0.5
    ys = (np.arange(out_h) + 0.5) * step - 0.5
    gx, gy = np.meshgrid(xs, ys)
    values, valid = bilinear_sample(img.data, img.mask, np.clip(gx, 0.0, w - 1.0),
                                    np.clip(gy, 0.0, h - 1.0))
    return Image2D(values, target_spacing_um, valid)


def adjust_fov(img: Image2D, target_w: int, target_h: int) -> Image2D:
    """Center the image content on a target_w x target_h canvas.

    Padded pixels are 0 and invalid; cropping removes symmetric margins with the
    extra pixel taken from the high side when the margin is odd.
    """
    if target_w < 1 or target_h < 1:
        raise ValueError("target dims must be positive")
    data = np.zeros((target_h, target_w), dtype=np.float64)
    mask = np.zeros((target_h, target_w), dtype=bool)

    def spans(cur: int, target: int):
        if target >= cur:
            off = (target - cur) // 2
            return slice(0, cur), slice(off, off + cur)
        off = (cur - target) // 2
        return slice(off, off + target), slice(0, target)

    src_y, dst_y = spans(img.height, target_h)
    src_x, dst_x = spans(img.width, target_w)
    data[dst_y, dst_x] = img.data[src_y, src_x]
    mask[dst_y, dst_x] = img.mask[src_y, src_x]
    return Image2D(data, img.spacing_um, mask)


# --- tilt simulation -------------------------------------------------------------

def _tilt_rotation(tilt: TiltSpec) -> np.ndarray:
    """R = Ry(phi) @ Rx(theta), right-handed, acting on (x, y, z) column vectors."""
    th = math.radians(tilt.theta_deg)
    ph = math.radians(tilt.phi_deg)
    rx = np.array([[1.0, 0.0, 0.0],
                   [0.0, math.cos(th), -math.sin(th)],
                   [0.0, math.sin(th), math.cos(th)]])
    ry = np.array([[math.cos(ph), 0.0, math.sin(ph)],
                   [0.0, 1.0, 0.0],
                   [-math.sin(ph), 0.0, math.cos(ph)]])
    return ry @ rx


def simulate_tilt(vol: Volume3D, tilt: TiltSpec, interpolation: str = "trilinear") -> Volume3D:
    """Re-sample the volume as if it had been rotated by the tilt about its center.

    Output voxel p takes the value of the input at R^-1 (p - c) + c with c the
    volume center; sample points outside the input get 0.  ``interpolation`` is
    "trilinear" for intensity data or "nearest" for label volumes.
    """
    sx, sy, sz = vol.spacing_um
    if not (sx == sy == sz):
        raise AnisotropicVolume("tilt simulation requires an isotropic volume")
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if tilt.theta_deg == 0.0 and tilt.phi_deg == 0.0:
        return Volume3D(vol.data, vol.spacing_um)

    nz, ny, nx = vol.data.shape
    rinv = _tilt_rotation(tilt).T
    c = np.array([(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0])
    zs, ys, xs = np.mgrid[0:nz, 0:ny, 0:nx].astype(np.float64)
    px = xs - c[0]
    py = ys - c[1]
    pz = zs - c[2]
    qx = rinv[0, 0] * px + rinv[0, 1] * py + rinv[0, 2] * pz + c[0]
    qy = rinv[1, 0] * px + rinv[1, 1] * py + rinv[1, 2] * pz + c[1]
    qz = rinv[2, 0] * px + rinv[2, 1] * py + rinv[2, 2] * pz + c[2]

    if interpolation == "nearest":
        xi = np.rint(qx).astype(np.intp)
        yi = np.rint(qy).astype(np.intp)
        zi = np.rint(qz).astype(np.intp)
        inside = (xi >= 0) & (xi < nx) & (yi >= 0) & (yi < ny) & (zi >= 0) & (zi < nz)
        out = np.zeros_like(vol.data)
        out[inside] = vol.data[zi[inside], yi[inside], xi[inside]]
        return Volume3D(out, vol.spacing_um)

    inside = (qx >= 0.0) & (qx <= nx - 1.0) & (qy >= 0.0) & (qy <= ny - 1.0) \
        & (qz >= 0.0) & (qz <= nz - 1.0)
    x0 = np.clip(np.floor(qx), 0, nx - 2 if nx > 1 else 0).astype(np.intp)
    y0 = np.clip(np.floor(qy), 0, ny - 2 if ny > 1 else 0).astype(np.intp)
    z0 = np.clip(np.floor(qz), 0, nz - 2 if nz > 1 else 0).astype(np.intp)
    fx = np.clip(qx, 0.0, nx - 1.0) - x0
    fy = np.clip(qy, 0.0, ny - 1.0) - y0
    fz = np.clip(qz, 0.0, nz - 1.0) - z0
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)

    d = vol.data
    out = np.zeros(d.shape, dtype=np.float64)
    for (wz, zi) in (((1.0 - fz), z0), (fz, z1)):
        for (wy, yi) in (((1.0 - fy), y0), (fy, y1)):
            for (wx, xi) in (((1.0 - fx), x0), (fx, x1)):
                out += wz * wy * wx * d[zi, yi, xi]
    out[~inside] = 0.0
    return Volume3D(out, vol.spacing_um)


# --- volume file format ------------------------------------------------------------
#
# Text header, one `key: value` per line; keys: dims (3 ints), spacing_um
# (3 floats), dtype (uint8|uint16|float32), byte_order (little), data_file
# (path relative to the header).  Raw binary is x-fastest, little-endian.

_HEADER_KEYS = {"dims", "spacing_um", "dtype", "byte_order", "data_file"}


def _parse_header(path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="ascii").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise MalformedHeader(f"{path}:{lineno}: expected 'key: value'")
        key, value = line.split(":", 1)
        key = key.strip()
        if key not in _HEADER_KEYS:
            raise MalformedHeader(f"{path}:{lineno}: unknown key {key!r}")
        if key in entries:
            raise MalformedHeader(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = value.strip()
    missing = _HEADER_KEYS - entries.keys()
    if missing:
        raise MalformedHeader(f"{path}: missing keys {sorted(missing)}")
    return entries


def load_volume(header_path) -> Volume3D:
    """Load a volume from its text header + raw binary payload."""
    header_path = Path(header_path)
    if not header_path.is_file():
        raise MissingFile(str(header_path))
    entries = _parse_header(header_path)

    try:
        dims = tuple(int(tok) for tok in entries["dims"].split())
        spacing = tuple(float(tok) for tok in entries["spacing_um"].split())
    except ValueError as exc:
        raise MalformedHeader(f"{header_path}: {exc}") from exc
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise MalformedHeader(f"{header_path}: dims must be 3 positive ints, got {entries['dims']!r}")
    if len(spacing) != 3 or any(not (s > 0.0 and math.isfinite(s)) for s in spacing):
        raise MalformedHeader(f"{header_path}: spacing_um must be 3 positive floats")
    if entries["dtype"] not in VOLUME_DTYPES:
        raise MalformedHeader(f"{header_path}: unsupported dtype {entries['dtype']!r}")
    if entries["byte_order"] != "little":
        raise MalformedHeader(f"{header_path}: unsupported byte_order {entries['byte_order']!r}")

    dtype = np.dtype(VOLUME_DTYPES[entries["dtype"]]).newbyteorder("<")
    nx, ny, nz = dims
    raw_path = header_path.parent / entries["data_file"]
    if not raw_path.is_file():
        raise MissingFile(str(raw_path))
    raw = raw_path.read_bytes()
    expected = nx * ny * nz * dtype.itemsize
    if len(raw) != expected:
        raise SizeMismatch(f"{raw_path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(nz, ny, nx)
    return Volume3D(data.astype(np.float64), spacing)


def save_volume(vol: Volume3D, header_path, dtype: str = "float32", data_file: str | None = None) -> None:
    """Write header + raw pair. Integer dtypes require integral in-range values."""
    if dtype not in VOLUME_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    header_path = Path(header_path)
    if data_file is None:
        data_file = header_path.stem + ".raw"
    np_dtype = np.dtype(VOLUME_DTYPES[dtype]).newbyteorder("<")
    if dtype != "float32":
        info = np.iinfo(np_dtype.base)
        if np.any(vol.data != np.rint(vol.data)) or vol.data.min() < info.min or vol.data.max() > info.max:
            raise ValueError(f"volume values do not fit dtype {dtype} losslessly")
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing_um
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(
        f"dims: {nx} {ny} {nz}\n"
        f"spacing_um: {sx:.17g} {sy:.17g} {sz:.17g}\n"
        f"dtype: {dtype}\n"
        "byte_order: little\n"
        f"data_file: {data_file}\n",
        encoding="ascii",
    )
    (header_path.parent / data_file).write_bytes(vol.data.astype(np_dtype).tobytes())


# --- PGM-based image / label formats -------------------------------------------------
#
# Images are P5 PGM (maxval 255 or 65535; 16-bit values big-endian per the PGM
# convention).  Saving scales float values to 16-bit min-max and records the
# scale plus spacing in a `<image>.hdr` sidecar; a mask PGM is written only when
# some pixel is invalid.  Label maps are P5 maxval 65535 with identifiers stored
# verbatim and an optional `id,name` CSV sidecar.

def _read_pgm(path: Path) -> tuple[np.ndarray, int]:
    if not path.is_file():
        raise MissingFile(str(path))
    blob = path.read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None:
        raise MalformedImage(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if w <= 0 or h <= 0 or maxval <= 0 or maxval > 65535:
        raise MalformedImage(f"{path}: bad PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = w * h * dtype.itemsize
    payload = blob[m.end():]
    if len(payload) != expected:
        raise MalformedImage(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(np.int64), maxval


def _write_pgm(path: Path, values: np.ndarray, maxval: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = values.shape
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(values.astype(dtype).tobytes())


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".hdr")


def _mask_path(path: Path) -> Path:
    return path.with_name(path.stem + ".mask.pgm")


def save_image(img: Image2D, path) -> None:
    path = Path(path)
    lo = float(img.data.min())
    hi = float(img.data.max())
    if hi > lo:
        scaled = np.rint((img.data - lo) / (hi - lo) * 65535.0).astype(np.int64)
    else:
        scaled = np.zeros(img.data.shape, dtype=np.int64)
    _write_pgm(path, scaled, 65535)
    lines = [
        f"spacing_um: {img.spacing_um:.17g}",
        f"scale_min: {lo:.17g}",
        f"scale_max: {hi:.17g}",
    ]
    if not img.mask.all():
        mask_file = _mask_path(path)
        _write_pgm(mask_file, img.mask.astype(np.int64) * 255, 255)
        lines.append(f"mask_file: {mask_file.name}")
    _sidecar_path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_image(path) -> Image2D:
    path = Path(path)
    values, maxval = _read_pgm(path)
    sidecar = _sidecar_path(path)
    spacing = 1.0
    mask = None
    data = values.astype(np.float64)
    if sidecar.is_file():
        entries: dict[str, str] = {}
        for raw in sidecar.read_text(encoding="ascii").splitlines():
            line = raw.strip()
            if not line or ":" not in line:
                continue
            key, value = line.split(":", 1)
            entries[key.strip()] = value.strip()
        try:
            spacing = float(entries.get("spacing_um", "1.0"))
            lo = float(entries.get("scale_min", "0.0"))
            hi = float(entries.get("scale_max", str(maxval)))
        except ValueError as exc:
            raise MalformedImage(f"{sidecar}: {exc}") from exc
        data = values.astype(np.float64) / maxval * (hi - lo) + lo
        if "mask_file" in entries:
            mask_values, _ = _read_pgm(path.parent / entries["mask_file"])
            if mask_values.shape != values.shape:
                raise MalformedImage(f"{sidecar}: mask dims differ from image dims")
            mask = mask_values > 0
    return Image2D(data, spacing, mask)


def save_labels(lab: LabelMap2D, path) -> None:
    path = Path(path)
    if lab.labels.max(initial=0) > 65535:
        raise ValueError("label identifiers above 65535 cannot be stored")
    _write_pgm(path, lab.labels.astype(np.int64), 65535)
    if lab.region_names:
        names_path = path.with_name(path.stem + ".names.csv")
        with open(names_path, "w", encoding="utf-8") as fh:
            fh.write("id,name\n")
            for ident in sorted(lab.region_names):
                fh.write(f"{ident},{lab.region_names[ident]}\n")


def load_labels(path) -> LabelMap2D:
    path = Path(path)
    values, _ = _read_pgm(path)
    names_path = path.with_name(path.stem + ".names.csv")
    names = None
    if names_path.is_file():
        names = {}
        lines = names_path.read_text(encoding="utf-8").splitlines()
        for line in lines[1:]:
            if not line.strip():
                continue
            ident, name = line.split(",", 1)
            names[int(ident)] = name
    return LabelMap2D(values, region_names=names)


def require_same_dims(a: Image2D | LabelMap2D, b: Image2D | LabelMap2D) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise DimMismatch(f"dims differ: {a.width}x{a.height} vs {b.width}x{b.height}")
