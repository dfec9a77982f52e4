"""Cortical thickness as the minimum line integral of the gray-matter mask.

For every skeleton voxel a segment of half-length ``sphere_radius`` is laid
through the voxel centre along each direction of a hemisphere lattice. The
mask is trilinearly interpolated at midpoint samples ``1 / upsampling_scale``
mm apart; ``step * sum(samples)`` is the chord length inside gray matter,
and the minimum over directions is the thickness.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _accel
from .volume_io import LabelMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThicknessParams:
    sphere_radius: float = 8.0
    angle_step: float = 9.0
    upsampling_scale: int = 5

    def __post_init__(self):
        if self.sphere_radius <= 0:
            raise ValueError("sphere_radius must be positive")
        if not 0 < self.angle_step <= 90:
            raise ValueError("angle_step must lie in (0, 90]")
        if self.upsampling_scale < 1:
            raise ValueError("upsampling_scale must be >= 1")


@dataclass(frozen=True, eq=False)
class ThicknessMap:
    values: np.ndarray  # mm on skeleton voxels, NaN elsewhere
    skeleton: np.ndarray


def direction_set(angle_step: float) -> np.ndarray:
    """Unit directions covering the upper hemisphere, no antipodal pairs.

    Polar angles 0, step, ..., 90. The pole is one direction; interior rings
    get ``round(360 sin(phi) / step)`` azimuths over a full turn; the equator
    gets ``180 / step`` azimuths over a half turn.
    """
    if not 0 < angle_step <= 90:
        raise ValueError(f"angle_step must lie in (0, 90], got {angle_step}")
    n_polar = int(math.floor(90.0 / angle_step + 1e-9))
    dirs = [(0.0, 0.0, 1.0)]
    for i in range(1, n_polar + 1):
        phi = math.radians(i * angle_step)
        if abs(i * angle_step - 90.0) < 1e-9:
            n_az = max(1, int(math.floor(180.0 / angle_step + 1e-9)))
            span = 180.0
        else:
            n_az = max(1, int(round(360.0 * math.sin(phi) / angle_step)))
            span = 360.0
        for j in range(n_az):
            psi = math.radians(j * span / n_az)
            dirs.append((math.sin(phi) * math.cos(psi), math.sin(phi) * math.sin(psi), math.cos(phi)))
    d = np.array(dirs, dtype=np.float64)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # exact zeros rather than 6e-17 residue from cos(90 deg)
    d[np.abs(d) < 1e-15] = 0.0
    return d


def sample_offsets(params: ThicknessParams) -> np.ndarray:
    """Midpoint sample positions (mm) along a segment centred at 0."""
    n = int(round(2.0 * params.sphere_radius * params.upsampling_scale))
    step = 1.0 / params.upsampling_scale
    return (np.arange(n) + 0.5) * step - params.sphere_radius


@_accel.njit
def _trilinear(mask, x, y, z):
    # coordinates clamp to the grid: the mask is edge-replicated outside
    nx, ny, nz = mask.shape
    x = min(max(x, 0.0), nx - 1.0)
    y = min(max(y, 0.0), ny - 1.0)
    z = min(max(z, 0.0), nz - 1.0)
    x0 = min(int(math.floor(x)), nx - 2) if nx > 1 else 0
    y0 = min(int(math.floor(y)), ny - 2) if ny > 1 else 0
    z0 = min(int(math.floor(z)), nz - 2) if nz > 1 else 0
    fx, fy, fz = x - x0, y - y0, z - z0
    acc = 0.0
    for a in range(2):
        wx = fx if a else 1.0 - fx
        if wx == 0.0:
            continue
        for b in range(2):
            wy = fy if b else 1.0 - fy
            if wy == 0.0:
                continue
            for c in range(2):
                wz = fz if c else 1.0 - fz
                if wz == 0.0:
                    continue
                if mask[x0 + a, y0 + b, z0 + c]:
                    acc += wx * wy * wz
    return acc


@_accel.njit
def _thickness_kernel(mask, points, dirs_vox, offsets, step):
    n_pts = points.shape[0]
    out = np.empty(n_pts)
    for p in range(n_pts):
        best = np.inf
        for d in range(dirs_vox.shape[0]):
            s = 0.0
            for o in range(offsets.shape[0]):
                t = offsets[o]
                s += _trilinear(mask,
                                points[p, 0] + t * dirs_vox[d, 0],
                                points[p, 1] + t * dirs_vox[d, 1],
                                points[p, 2] + t * dirs_vox[d, 2])
            s *= step
            if s < best:
                best = s
        out[p] = best
    return out


def _thickness_numpy(mask, points, dirs_vox, offsets, step, chunk=64):
    m = mask.astype(np.float64)
    out = np.empty(len(points))
    # (directions, samples, 3) displacement in voxel units
    disp = offsets[None, :, None] * dirs_vox[:, None, :]
    hi = np.asarray(mask.shape, dtype=np.float64) - 1.0
    for lo in range(0, len(points), chunk):
        pts = points[lo:lo + chunk]
        coords = pts[:, None, None, :] + disp[None]  # (P, D, S, 3)
        coords = np.clip(coords, 0.0, hi)
        vals = ndimage.map_coordinates(m, coords.reshape(-1, 3).T, order=1, mode="nearest")
        integ = vals.reshape(coords.shape[:3]).sum(axis=2) * step
        out[lo:lo + chunk] = integ.min(axis=1)
    return out


def line_integral_thickness(gm_mask, skeleton, params: ThicknessParams = ThicknessParams(),
                            spacing=(1.0, 1.0, 1.0)) -> ThicknessMap:
    gm = np.ascontiguousarray(np.asarray(gm_mask, dtype=bool))
    skel = np.asarray(skeleton, dtype=bool)
    if gm.shape != skel.shape:
        raise ValueError(f"mask shape {gm.shape} != skeleton shape {skel.shape}")
    values = np.full(gm.shape, np.nan)
    idx = np.argwhere(skel)
    if len(idx) == 0:
        log.warning("empty skeleton; thickness map is empty")
        return ThicknessMap(values, skel.copy())
    spacing = np.asarray(spacing, dtype=np.float64)
    # samples are laid out in mm, interpolated in index space
    dirs_vox = direction_set(params.angle_step) / spacing[None, :]
    offsets = sample_offsets(params)
    step = 1.0 / params.upsampling_scale
    points = idx.astype(np.float64)
    if _accel.use_numba():
        th = _thickness_kernel(gm, points, np.ascontiguousarray(dirs_vox), offsets, step)
    else:
        th = _thickness_numpy(gm, points, dirs_vox, offsets, step)
    values[tuple(idx.T)] = np.clip(th, 0.0, 2.0 * params.sphere_radius)
    return ThicknessMap(values, skel.copy())


# 13 neighbour offsets, one per antipodal pair
_NEIGHBOURS = [
    (a, b, c)
    for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
    if (a, b, c) > (0, 0, 0)
]


def skeletonize(region_mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Ridge voxels of the Euclidean distance transform.

    For each voxel the dominant direction is the neighbour axis (of 13)
    along which the distance field changes fastest per mm; the voxel is kept
    if its distance is >= both neighbours along that axis. Outside the
    array the distance field is edge-replicated.
    """
    mask = np.asarray(region_mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    spacing = np.asarray(spacing, dtype=np.float64)
    dist = ndimage.distance_transform_edt(mask, sampling=spacing)
    p = np.pad(dist, 1, mode="edge")
    n = mask.shape
    best_rate = np.full(n, -1.0)
    is_max = np.zeros(n, dtype=bool)
    for off in _NEIGHBOURS:
        length = float(np.linalg.norm(np.asarray(off) * spacing))
        fwd = p[1 + off[0]:1 + off[0] + n[0], 1 + off[1]:1 + off[1] + n[1], 1 + off[2]:1 + off[2] + n[2]]
        bwd = p[1 - off[0]:1 - off[0] + n[0], 1 - off[1]:1 - off[1] + n[1], 1 - off[2]:1 - off[2] + n[2]]
        rate = (np.abs(fwd - dist) + np.abs(dist - bwd)) / length
        better = rate > best_rate
        best_rate[better] = rate[better]
        is_max[better] = (dist >= fwd)[better] & (dist >= bwd)[better]
    return is_max & mask


def hemisphere_masks(lm: LabelMap):
    """Gray-matter mask and cortical mask per hemisphere."""
    out = {}
    for hemi in ("left", "right"):
        gm_ids = [r.label_id for r in lm.regions if r.hemisphere == hemi and r.is_gray_matter]
        cx_ids = [r.label_id for r in lm.regions if r.hemisphere == hemi and r.is_cortical]
        out[hemi] = (lm.mask(gm_ids), lm.mask(cx_ids))
    return out


def thickness_map(lm: LabelMap, params: ThicknessParams = ThicknessParams()) -> ThicknessMap:
    """Per-hemisphere skeleton of the cortex, thickness over the hemisphere's gray matter."""
    values = np.full(lm.dims, np.nan)
    skel_all = np.zeros(lm.dims, dtype=bool)
    for hemi, (gm, cortex) in hemisphere_masks(lm).items():
        if not cortex.any():
            continue
        skel = skeletonize(cortex, lm.spacing) & gm
        tm = line_integral_thickness(gm, skel, params, lm.spacing)
        values[skel] = tm.values[skel]
        skel_all |= skel
    return ThicknessMap(values, skel_all)


def region_thickness_stats(tm: ThicknessMap, lm: LabelMap):
    """Mean and population stddev per cortical region, in region-table order.

    Returns ``(values, names, missing)`` with ``values`` laid out as
    ``[r0_mean, r0_std, r1_mean, ...]``.
    """
    cortical = [r for r in lm.regions if r.is_cortical]
    values = np.zeros(2 * len(cortical))
    missing = np.zeros(len(cortical), dtype=bool)
    on_skel = tm.skeleton & np.isfinite(tm.values)
    for i, r in enumerate(cortical):
        sel = on_skel & (lm.labels == r.label_id)
        # argwhere order is C order, so the reduction order is fixed
        t = tm.values[sel]
        if t.size == 0:
            missing[i] = True
            continue
        values[2 * i] = t.mean()
        values[2 * i + 1] = t.std()
    return values, thickness_column_names(lm.regions), missing


def thickness_column_names(regions) -> list[str]:
    return [f"{r.name}_{s}" for r in regions if r.is_cortical for s in ("thk_mean", "thk_std")]
