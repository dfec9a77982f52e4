"""Shape radiomics: 6-connected components and the 11-feature region vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _accel
from .errors import DegenerateInputError
from .volume_io import LabelMap

FEATURE_NAMES = (
    "vol", "surf",
    "cx", "cy", "cz",
    "euler_z", "euler_y", "euler_x",
    "axis1", "axis2", "axis3",
)
N_FEATURES = len(FEATURE_NAMES)
VOLUME_FEATURES = ("vol",)


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    component_ids: np.ndarray
    component_count: int
    component_sizes: tuple[int, ...]


@dataclass(frozen=True)
class RegionRadiomics:
    label_id: int
    volume_voxels: int
    volume_mm3: float
    surface_area_mm2: float
    centroid_mm: tuple[float, float, float]
    orientation_euler_deg: tuple[float, float, float]
    principal_axis_lengths_mm: tuple[float, float, float]
    missing: bool = False

    def vector(self) -> np.ndarray:
        return np.array(
            [self.volume_mm3, self.surface_area_mm2, *self.centroid_mm,
             *self.orientation_euler_deg, *self.principal_axis_lengths_mm],
            dtype=np.float64,
        )

    @classmethod
    def empty(cls, label_id: int) -> "RegionRadiomics":
        z3 = (0.0, 0.0, 0.0)
        return cls(label_id, 0, 0.0, 0.0, z3, z3, z3, missing=True)


# ------------------------------------------------------------ labelling


@_accel.njit
def _flood_label_kernel(mask):
    nx, ny, nz = mask.shape
    ids = np.zeros(mask.shape, dtype=np.int32)
    stack = np.empty(mask.size, dtype=np.int64)
    nyz = ny * nz
    count = 0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if not mask[i, j, k] or ids[i, j, k] != 0:
                    continue
                count += 1
                ids[i, j, k] = count
                top = 0
                stack[0] = i * nyz + j * nz + k
                top = 1
                while top > 0:
                    top -= 1
                    flat = stack[top]
                    a = flat // nyz
                    b = (flat // nz) % ny
                    c = flat % nz
                    for d in range(6):
                        x, y, z = a, b, c
                        if d == 0:
                            x = a - 1
                        elif d == 1:
                            x = a + 1
                        elif d == 2:
                            y = b - 1
                        elif d == 3:
                            y = b + 1
                        elif d == 4:
                            z = c - 1
                        else:
                            z = c + 1
                        if x < 0 or y < 0 or z < 0 or x >= nx or y >= ny or z >= nz:
                            continue
                        if mask[x, y, z] and ids[x, y, z] == 0:
                            ids[x, y, z] = count
                            stack[top] = x * nyz + y * nz + z
                            top += 1
    return ids, count


def _label_numpy(mask):
    raw, count = ndimage.label(mask, structure=ndimage.generate_binary_structure(3, 1))
    if count == 0:
        return raw.astype(np.int32), 0
    # renumber by first voxel in C scan order
    flat = raw.ravel()
    vals, first = np.unique(flat, return_index=True)
    keep = vals > 0
    vals, first = vals[keep], first[keep]
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[vals[np.argsort(first, kind="stable")]] = np.arange(1, count + 1, dtype=np.int32)
    return remap[raw], int(count)


def connected_components(mask) -> ComponentLabeling:
    """Face-connected (6-neighbour) components of a binary grid.

    Ids are assigned 1..n in the C-order scan position of each component's
    first voxel.
    """
    mask = np.ascontiguousarray(np.asarray(mask, dtype=bool))
    if mask.ndim != 3 or min(mask.shape) <= 0:
        raise ValueError(f"mask must be a non-empty 3D grid, got shape {mask.shape}")
    if _accel.use_numba():
        ids, count = _flood_label_kernel(mask)
    else:
        ids, count = _label_numpy(mask)
    sizes = np.bincount(ids.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(ids, int(count), tuple(int(s) for s in sizes))


# ------------------------------------------------------------ properties


def exposed_face_area(mask: np.ndarray, spacing) -> float:
    """Area of voxel faces adjacent to background or to the array border."""
    m = mask.astype(np.int8)
    sx, sy, sz = spacing
    face_area = (sy * sz, sx * sz, sx * sy)
    total = 0.0
    for ax in range(3):
        padded = np.pad(m, [(1, 1) if a == ax else (0, 0) for a in range(3)])
        n_faces = int(np.abs(np.diff(padded, axis=ax)).sum())
        total += n_faces * face_area[ax]
    return total


def _complete_basis(vecs, lams):
    """Replace eigenvectors of zero eigenvalues by a deterministic completion."""
    tol = 1e-12 * max(float(lams[0]), 1.0)
    good = [vecs[:, i] for i in range(3) if lams[i] > tol]
    basis = list(good)
    for e in np.eye(3):
        if len(basis) == 3:
            break
        v = e.copy()
        for b in basis:
            v -= np.dot(v, b) * b
        n = np.linalg.norm(v)
        if n > 1e-6:
            basis.append(v / n)
    return np.column_stack(basis)


def euler_zyx_deg(r: np.ndarray) -> tuple[float, float, float]:
    """Intrinsic Z-Y-X angles (yaw, pitch, roll) of a rotation matrix, degrees."""
    pitch = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    if abs(r[2, 0]) < 1.0 - 1e-12:
        yaw = np.arctan2(r[1, 0], r[0, 0])
        roll = np.arctan2(r[2, 1], r[2, 2])
    else:  # gimbal lock: fold roll into yaw
        yaw = np.arctan2(-r[0, 1], r[1, 1])
        roll = 0.0
    return tuple(float(np.degrees(a)) + 0.0 for a in (yaw, pitch, roll))


def principal_axes(points_mm: np.ndarray):
    """Axis lengths (descending) and rotation of a voxel-centre cloud.

    Lengths are ``2 * sqrt(5 * eigenvalue)`` of the population covariance,
    i.e. full axes of the solid ellipsoid with the same second moments.
    """
    if len(points_mm) < 2:
        return np.zeros(3), np.eye(3)
    cov = np.cov(points_mm, rowvar=False, bias=True)
    lams, vecs = np.linalg.eigh(cov)
    order = np.argsort(-lams, kind="stable")
    lams = np.clip(lams[order], 0.0, None)
    vecs = vecs[:, order]
    vecs = _complete_basis(vecs, lams)
    for i in range(3):
        col = vecs[:, i]
        if col[np.argmax(np.abs(col))] < 0:
            vecs[:, i] = -col
    if np.linalg.det(vecs) < 0:
        vecs[:, 2] = -vecs[:, 2]
    return 2.0 * np.sqrt(5.0 * lams), vecs


def component_properties(labeling: ComponentLabeling, component_id: int, spacing) -> RegionRadiomics:
    if not 1 <= component_id <= labeling.component_count:
        raise ValueError(
            f"component id {component_id} outside 1..{labeling.component_count}"
        )
    mask = labeling.component_ids == component_id
    return mask_properties(mask, spacing, label_id=component_id)


def mask_properties(mask: np.ndarray, spacing, label_id: int = 0) -> RegionRadiomics:
    spacing = tuple(float(s) for s in spacing)
    idx = np.argwhere(mask)
    n = len(idx)
    if n == 0:
        return RegionRadiomics.empty(label_id)
    # crop to bounding box before counting faces
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    sub = mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    pts = (idx + 0.5) * np.asarray(spacing)
    lengths, rot = principal_axes(pts)
    return RegionRadiomics(
        label_id=int(label_id),
        volume_voxels=n,
        volume_mm3=n * float(np.prod(spacing)),
        surface_area_mm2=exposed_face_area(sub, spacing),
        centroid_mm=tuple(float(c) for c in pts.mean(axis=0)),
        orientation_euler_deg=euler_zyx_deg(rot),
        principal_axis_lengths_mm=tuple(float(x) for x in lengths),
    )


def largest_component(mask: np.ndarray) -> np.ndarray:
    lab = connected_components(mask)
    if lab.component_count == 0:
        return np.zeros_like(mask, dtype=bool)
    # argmax returns the first (smallest id) on ties
    best = int(np.argmax(lab.component_sizes)) + 1
    return lab.component_ids == best


def region_radiomics(lm: LabelMap) -> dict[int, RegionRadiomics]:
    """One :class:`RegionRadiomics` per region-table entry, in table order.

    Each region is summarised by its largest 6-connected component. Regions
    with no voxels come back zeroed with ``missing=True``.
    """
    if not lm.regions:
        raise ValueError("region table is empty")
    out = {}
    for r in lm.regions:
        mask = lm.labels == r.label_id
        idx = np.nonzero(mask)
        if len(idx[0]) == 0:
            out[r.label_id] = RegionRadiomics.empty(r.label_id)
            continue
        lo = [int(a.min()) for a in idx]
        hi = [int(a.max()) + 1 for a in idx]
        sub = mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        big = largest_component(sub)
        props = mask_properties(big, lm.spacing, label_id=r.label_id)
        # shift centroid back from bounding-box to full-grid coordinates
        offset = np.asarray(lo) * np.asarray(lm.spacing)
        props = RegionRadiomics(
            props.label_id, props.volume_voxels, props.volume_mm3, props.surface_area_mm2,
            tuple(float(c) for c in np.asarray(props.centroid_mm) + offset),
            props.orientation_euler_deg, props.principal_axis_lengths_mm,
        )
        out[r.label_id] = props
    return out


def radiomics_block(lm: LabelMap) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Flatten :func:`region_radiomics` into (values, column names, missing flags)."""
    rad = region_radiomics(lm)
    values = np.concatenate([rad[r.label_id].vector() for r in lm.regions])
    missing = np.array([rad[r.label_id].missing for r in lm.regions])
    return values, radiomics_column_names(lm.regions), missing


def radiomics_column_names(regions) -> list[str]:
    return [f"{r.name}_{f}" for r in regions for f in FEATURE_NAMES]


def intracranial_volume(lm: LabelMap) -> float:
    n = int(np.count_nonzero(lm.labels))
    if n == 0:
        raise DegenerateInputError("label map has no foreground voxels; intracranial volume is 0")
    return n * lm.voxel_volume
