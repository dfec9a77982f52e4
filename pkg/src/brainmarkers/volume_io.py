"""Volumes, label maps, NIfTI-1 I/O, phantoms and cropping.

All geometry is voxel space scaled by ``pixdim``; the header affine is parsed
but never applied. Voxel ``(i, j, k)`` has its centre at
``((i + .5) * sx, (j + .5) * sy, (k + .5) * sz)`` mm.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, SpecError, UnsupportedFormatError, ValidationError

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> (numpy little-endian dtype, bitpix)
DATATYPES = {
    2: (np.dtype("<u1"), 8),
    4: (np.dtype("<i2"), 16),
    16: (np.dtype("<f4"), 32),
}
INTEGER_CODES = (2, 4)
_CODE_FOR_DTYPE = {np.dtype(v[0]).newbyteorder("="): k for k, v in DATATYPES.items()}

HEMISPHERES = ("left", "right", "none")
REGION_TABLE_HEADER = ["label_id", "name", "hemisphere", "is_cortical", "is_gray_matter"]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _check_geometry(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValidationError(f"dims must be 3 positive integers, got {dims}")
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValidationError(f"spacing must be 3 positive reals, got {spacing}")
    return dims, spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar 3D image with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got shape {data.shape}")
        _, spacing = _check_geometry(data.shape, self.spacing)
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))


@dataclass(frozen=True)
class Region:
    label_id: int
    name: str
    hemisphere: str = "none"
    is_cortical: bool = False
    is_gray_matter: bool = False


@dataclass(frozen=True, eq=False)
class LabelMap:
    labels: np.ndarray
    regions: tuple[Region, ...]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValidationError(f"label data must be 3D, got shape {labels.shape}")
        if labels.dtype.kind not in "iu":
            raise ValidationError(f"label data must be integer typed, got {labels.dtype}")
        _, spacing = _check_geometry(labels.shape, self.spacing)
        regions = tuple(self.regions)
        validate_region_table(regions)
        present = np.unique(labels)
        known = {r.label_id for r in regions}
        unknown = [int(v) for v in present if v != 0 and int(v) not in known]
        if unknown:
            raise ValidationError(f"label ids missing from region table: {unknown}")
        object.__setattr__(self, "labels", _freeze(labels.astype(np.int32, copy=False)))
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)

    def mask(self, label_ids) -> np.ndarray:
        return np.isin(self.labels, np.asarray(list(label_ids), dtype=np.int64))

    def check_matches(self, volume: Volume):
        if self.dims != volume.dims or not np.allclose(self.spacing, volume.spacing):
            raise ValidationError(
                f"label map geometry {self.dims}/{self.spacing} does not match "
                f"volume {volume.dims}/{volume.spacing}"
            )


def validate_region_table(regions: Sequence[Region]):
    seen = set()
    for r in regions:
        if r.label_id in seen:
            raise ValidationError(f"duplicate label id {r.label_id} in region table")
        if r.label_id <= 0:
            raise ValidationError(f"region label ids must be positive, got {r.label_id}")
        if r.hemisphere not in HEMISPHERES:
            raise ValidationError(f"bad hemisphere {r.hemisphere!r} for label {r.label_id}")
        seen.add(r.label_id)
    names = [r.name for r in regions]
    if len(set(names)) != len(names):
        raise ValidationError("region names must be unique")


# ---------------------------------------------------------------- NIfTI-1


@dataclass
class NiftiHeader:
    dim: tuple
    pixdim: tuple
    datatype: int
    bitpix: int
    vox_offset: float
    scl_slope: float
    scl_inter: float
    qform_code: int = 0
    sform_code: int = 0
    srow: np.ndarray = field(default_factory=lambda: np.zeros((3, 4)))


def parse_nifti_header(raw: bytes) -> NiftiHeader:
    if raw[:2] == b"\x1f\x8b":
        raise UnsupportedFormatError("gzip-compressed NIfTI is not supported; decompress first", 0)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)", len(raw))
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise UnsupportedFormatError("big-endian NIfTI is not supported", 0)
        if sizeof_hdr == 540:
            raise UnsupportedFormatError("NIfTI-2 is not supported", 0)
        raise FormatError(f"sizeof_hdr is {sizeof_hdr}, expected 348", 0)
    magic = raw[344:348]
    if magic != b"n+1\x00":
        if magic == b"ni1\x00":
            raise UnsupportedFormatError("two-file (.hdr/.img) NIfTI is not supported", 344)
        raise FormatError(f"bad magic {magic!r}", 344)
    dim = struct.unpack_from("<8h", raw, 40)
    if not 3 <= dim[0] <= 7:
        raise FormatError(f"dim[0]={dim[0]} is not a 3D-7D image", 40)
    if any(d <= 0 for d in dim[1:4]):
        raise FormatError(f"dims {dim[1:4]} contain a non-positive axis", 42)
    if any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise UnsupportedFormatError(f"only 3D volumes are supported, dim={dim}", 48)
    datatype, bitpix = struct.unpack_from("<hh", raw, 70)
    if datatype not in DATATYPES:
        raise UnsupportedFormatError(f"unsupported NIfTI datatype code {datatype}", 70)
    if bitpix != DATATYPES[datatype][1]:
        raise FormatError(f"bitpix {bitpix} inconsistent with datatype {datatype}", 72)
    pixdim = struct.unpack_from("<8f", raw, 76)
    if any(not np.isfinite(p) or p <= 0 for p in pixdim[1:4]):
        raise FormatError(f"pixdim {pixdim[1:4]} must be positive", 80)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    if vox_offset < HEADER_SIZE:
        raise FormatError(f"vox_offset {vox_offset} lies inside the header", 108)
    scl_slope, scl_inter = struct.unpack_from("<ff", raw, 112)
    qform_code, sform_code = struct.unpack_from("<hh", raw, 252)
    srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=np.float64).reshape(3, 4)
    return NiftiHeader(dim, pixdim, datatype, bitpix, vox_offset, scl_slope, scl_inter,
                       qform_code, sform_code, srow)


def _read_nifti_array(path) -> tuple[NiftiHeader, np.ndarray]:
    raw = Path(path).read_bytes()
    hdr = parse_nifti_header(raw)
    shape = tuple(int(d) for d in hdr.dim[1:4])
    dtype = DATATYPES[hdr.datatype][0]
    start = int(hdr.vox_offset)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < start + nbytes:
        raise FormatError(f"truncated voxel data: need {nbytes} bytes from offset {start}", len(raw))
    arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=start)
    return hdr, arr.reshape(shape, order="F")


def read_nifti(path) -> Volume:
    hdr, arr = _read_nifti_array(path)
    data = arr.astype(np.float64)
    # scl_slope == 0 means "no scaling" per the NIfTI-1 definition
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        data = data * float(hdr.scl_slope) + float(hdr.scl_inter)
    return Volume(data, tuple(float(p) for p in hdr.pixdim[1:4]))


def _pack_header(shape, spacing, datatype, scl_slope=0.0, scl_inter=0.0) -> bytes:
    buf = bytearray(VOX_OFFSET)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<hh", buf, 70, datatype, DATATYPES[datatype][1])
    struct.pack_into("<8f", buf, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", buf, 108, float(VOX_OFFSET))
    struct.pack_into("<ff", buf, 112, scl_slope, scl_inter)
    struct.pack_into("<B", buf, 123, 2)  # xyzt_units: mm
    struct.pack_into("<hh", buf, 252, 0, 1)
    sx, sy, sz = spacing
    struct.pack_into("<12f", buf, 280, sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0)
    buf[344:348] = b"n+1\x00"
    return bytes(buf)


def write_nifti_array(path, arr: np.ndarray, spacing, dtype=None, scl_slope=0.0, scl_inter=0.0):
    arr = np.asarray(arr)
    dtype = np.dtype(dtype or arr.dtype).newbyteorder("=")
    if dtype not in _CODE_FOR_DTYPE:
        raise UnsupportedFormatError(f"cannot write dtype {dtype}; use uint8, int16 or float32")
    code = _CODE_FOR_DTYPE[dtype]
    le = DATATYPES[code][0]
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise ValidationError(f"values out of range for {dtype}")
    out = arr.astype(le).tobytes(order="F")
    Path(path).write_bytes(_pack_header(arr.shape, spacing, code, scl_slope, scl_inter) + out)


def write_nifti(path, v: Volume, dtype="float32"):
    """Write ``v`` as uncompressed single-file NIfTI-1.

    float32 storage is exact for any data already representable in float32
    (phantoms are generated that way), so write→read is bit-identical.
    """
    write_nifti_array(path, v.data, v.spacing, dtype=dtype)


# ------------------------------------------------------------ label maps


def _parse_flag(value, row_no, column):
    if value not in ("0", "1"):
        raise ValidationError(f"region table row {row_no}: {column} must be 0 or 1, got {value!r}")
    return value == "1"


def read_region_table(path) -> tuple[Region, ...]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != REGION_TABLE_HEADER:
            raise ValidationError(
                f"region table header must be {','.join(REGION_TABLE_HEADER)}, got {header}"
            )
        regions = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValidationError(f"region table row {row_no}: expected 5 fields, got {len(row)}")
            label_id, name, hemi, cort, gm = (c.strip() for c in row)
            try:
                lid = int(label_id)
            except ValueError:
                raise ValidationError(f"region table row {row_no}: bad label_id {label_id!r}") from None
            regions.append(Region(lid, name, hemi, _parse_flag(cort, row_no, "is_cortical"),
                                  _parse_flag(gm, row_no, "is_gray_matter")))
    validate_region_table(regions)
    return tuple(regions)


def write_region_table(path, regions: Sequence[Region]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGION_TABLE_HEADER)
        for r in regions:
            w.writerow([r.label_id, r.name, r.hemisphere, int(r.is_cortical), int(r.is_gray_matter)])


def read_labelmap(path, region_table_path) -> LabelMap:
    hdr, arr = _read_nifti_array(path)
    if hdr.datatype not in INTEGER_CODES:
        raise FormatError(f"label map must be integer typed, got datatype {hdr.datatype}", 70)
    regions = read_region_table(region_table_path)
    return LabelMap(arr.astype(np.int32), regions, tuple(float(p) for p in hdr.pixdim[1:4]))


def write_labelmap(path, lm: LabelMap):
    dtype = "uint8" if lm.labels.max(initial=0) < 256 else "int16"
    write_nifti_array(path, lm.labels, lm.spacing, dtype=dtype)


# -------------------------------------------------------------- cropping


def crop_centered(v: Volume, center, size) -> Volume:
    """Crop of shape ``size`` whose index ``size // 2`` lands on ``center``.

    Voxels outside the source are zero.
    """
    center = np.asarray(center, dtype=np.int64)
    size = np.asarray(size, dtype=np.int64)
    if size.shape != (3,) or np.any(size <= 0):
        raise ValueError(f"crop size must be 3 positive integers, got {size}")
    return Volume(crop_array(v.data, center, size), v.spacing)


def crop_array(a: np.ndarray, center, size, fill=0) -> np.ndarray:
    center = np.asarray(center, dtype=np.int64)
    size = np.asarray(size, dtype=np.int64)
    start = center - size // 2
    out = np.full(tuple(size), fill, dtype=a.dtype)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + size, a.shape)
    if np.any(src_hi <= src_lo):
        return out
    dst_lo = src_lo - start
    dst_hi = dst_lo + (src_hi - src_lo)
    out[tuple(slice(lo, hi) for lo, hi in zip(dst_lo, dst_hi))] = a[
        tuple(slice(lo, hi) for lo, hi in zip(src_lo, src_hi))
    ]
    return out


# -------------------------------------------------------------- phantoms

SHAPE_KINDS = ("ellipsoid", "slab", "box")


@dataclass(frozen=True)
class Shape:
    """One rasterised primitive.

    ellipsoid: ``center_mm``, ``semi_axes_mm``
    box:       ``min_mm``, ``max_mm`` (inclusive)
    slab:      ``point_mm``, ``normal``, ``thickness_mm`` (unbounded within the grid)
    """

    kind: str
    label_id: int
    intensity: float
    params: dict
    texture_sd: float = 0.0
    merge: bool = False


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shapes: tuple[Shape, ...] = ()
    noise_sd: float = 0.0
    background: float = 0.0
    regions: tuple[Region, ...] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        try:
            shapes = tuple(
                Shape(
                    kind=s["kind"],
                    label_id=int(s["label"]),
                    intensity=float(s.get("intensity", 0.0)),
                    params={k: v for k, v in s.items()
                            if k not in ("kind", "label", "intensity", "texture_sd", "merge")},
                    texture_sd=float(s.get("texture_sd", 0.0)),
                    merge=bool(s.get("merge", False)),
                )
                for s in d.get("shapes", [])
            )
            regions = None
            if d.get("regions") is not None:
                regions = tuple(
                    Region(int(r["label_id"]), str(r["name"]), r.get("hemisphere", "none"),
                           bool(r.get("is_cortical", False)), bool(r.get("is_gray_matter", False)))
                    for r in d["regions"]
                )
            return cls(
                dims=tuple(int(x) for x in d["dims"]),
                spacing=tuple(float(x) for x in d.get("spacing", (1.0, 1.0, 1.0))),
                shapes=shapes,
                noise_sd=float(d.get("noise_sd", 0.0)),
                background=float(d.get("background", 0.0)),
                regions=regions,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"invalid phantom spec: {exc!r}") from exc

    def to_dict(self) -> dict:
        out = {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "noise_sd": self.noise_sd,
            "background": self.background,
            "shapes": [
                {"kind": s.kind, "label": s.label_id, "intensity": s.intensity,
                 "texture_sd": s.texture_sd, "merge": s.merge, **s.params}
                for s in self.shapes
            ],
        }
        if self.regions is not None:
            out["regions"] = [
                {"label_id": r.label_id, "name": r.name, "hemisphere": r.hemisphere,
                 "is_cortical": r.is_cortical, "is_gray_matter": r.is_gray_matter}
                for r in self.regions
            ]
        return out


def load_phantom_spec(path) -> PhantomSpec:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return PhantomSpec.from_dict(d)


def voxel_centers(dims, spacing):
    """Open-grid voxel-centre coordinates (mm) along each axis."""
    return tuple(
        ((np.arange(n) + 0.5) * s).reshape([-1 if a == ax else 1 for a in range(3)])
        for ax, (n, s) in enumerate(zip(dims, spacing))
    )


def _vec3(params, key):
    try:
        v = np.asarray(params[key], dtype=np.float64)
    except KeyError:
        raise SpecError(f"shape is missing parameter {key!r}") from None
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise SpecError(f"{key} must be 3 finite reals")
    return v


def shape_mask(shape: Shape, dims, spacing) -> np.ndarray:
    """Centre-of-voxel membership test for one primitive."""
    extent = np.asarray(dims) * np.asarray(spacing)
    x, y, z = voxel_centers(dims, spacing)
    p = shape.params
    if shape.kind == "ellipsoid":
        c, r = _vec3(p, "center_mm"), _vec3(p, "semi_axes_mm")
        if np.any(r <= 0):
            raise SpecError("ellipsoid semi-axes must be positive")
        if np.any(c - r < 0) or np.any(c + r > extent):
            raise SpecError(f"ellipsoid at {c.tolist()} with semi-axes {r.tolist()} leaves the grid")
        return ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0
    if shape.kind == "box":
        lo, hi = _vec3(p, "min_mm"), _vec3(p, "max_mm")
        if np.any(hi < lo):
            raise SpecError("box max_mm must be >= min_mm")
        if np.any(lo < 0) or np.any(hi > extent):
            raise SpecError(f"box {lo.tolist()}..{hi.tolist()} leaves the grid")
        return (x >= lo[0]) & (x <= hi[0]) & (y >= lo[1]) & (y <= hi[1]) & (z >= lo[2]) & (z <= hi[2])
    if shape.kind == "slab":
        q, n = _vec3(p, "point_mm"), _vec3(p, "normal")
        t = float(p.get("thickness_mm", 0.0))
        if t <= 0 or np.linalg.norm(n) == 0:
            raise SpecError("slab needs positive thickness_mm and a nonzero normal")
        if np.any(q < 0) or np.any(q > extent):
            raise SpecError(f"slab anchor {q.tolist()} lies outside the grid")
        n = n / np.linalg.norm(n)
        d = n[0] * (x - q[0]) + n[1] * (y - q[1]) + n[2] * (z - q[2])
        return np.abs(d) <= t / 2.0
    raise SpecError(f"unknown shape kind {shape.kind!r}; expected one of {SHAPE_KINDS}")


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[Volume, LabelMap]:
    """Rasterise ``spec`` into a (volume, label map) pair.

    Later shapes overwrite earlier ones. Noise (global ``noise_sd`` and
    per-shape ``texture_sd``) is Gaussian, drawn from ``seed``; intensities
    are clipped to [0, 255] and rounded to float32.
    """
    dims, spacing = _check_geometry(spec.dims, spec.spacing)
    seen = set()
    for s in spec.shapes:
        if s.label_id <= 0:
            raise SpecError(f"shape label ids must be nonzero positive, got {s.label_id}")
        if s.label_id in seen and not s.merge:
            raise SpecError(f"label id {s.label_id} reused without merge=true")
        seen.add(s.label_id)

    rng = np.random.default_rng(seed)
    data = np.full(dims, spec.background, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.int32)
    for s in spec.shapes:
        m = shape_mask(s, dims, spacing)
        data[m] = s.intensity
        labels[m] = s.label_id
        if s.texture_sd > 0:
            data[m] += rng.normal(0.0, s.texture_sd, size=int(m.sum()))
    if spec.noise_sd > 0:
        data += rng.normal(0.0, spec.noise_sd, size=dims)
    data = np.clip(data, 0.0, 255.0).astype(np.float32).astype(np.float64)

    if spec.regions is not None:
        regions = spec.regions
    else:
        regions = tuple(Region(lid, f"label_{lid}") for lid in sorted(seen))
    return Volume(data, spacing), LabelMap(labels, regions, spacing)
