"""Hippocampal texture maps and ECDF-quantile features.

Every filter runs slice-wise on axial slices (``data[:, :, k]``) with
replicate padding. Inside a slice, ``x`` is array axis 0 and ``y`` is axis 1;
orientation angles are measured from +x towards +y.

Stack layout (90 maps): original, 3 local statistics, 16 Gabor magnitudes,
40 steered Gaussian derivatives, 30 Hessian-derived maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft

from . import _accel
from .errors import ConfigurationError, DegenerateInputError
from .volume_io import LabelMap, Volume, crop_array

DEFAULT_HIPPOCAMPUS = ("Left-Hippocampus", "Right-Hippocampus")


@dataclass(frozen=True)
class TextureParams:
    l_min: float = 4.0 / math.sqrt(2.0)
    l_max: float = 128.0
    wavelength_exponents: tuple[int, ...] = (0, 1, 2, 3)
    orientations_deg: tuple[int, ...] = (0, 45, 90, 135)
    scales: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    stat_window: int = 3
    entropy_window: int = 9
    entropy_bins: int = 256
    n_probabilities: int = 300
    min_probability: float = 1e-4
    gabor_bandwidth: float = 1.0
    gabor_aspect: float = 0.5
    crop_size: int = 96

    def __post_init__(self):
        if any(w > self.l_max for w in self.wavelengths):
            raise ConfigurationError(f"Gabor wavelengths {self.wavelengths} exceed l_max={self.l_max}")
        for w in (self.stat_window, self.entropy_window):
            if w < 1 or w % 2 == 0:
                raise ConfigurationError(f"window sizes must be odd, got {w}")
        if self.n_probabilities < 2:
            raise ConfigurationError("need at least 2 probabilities")

    @property
    def wavelengths(self) -> tuple[float, ...]:
        return tuple(2.0**e * self.l_min for e in self.wavelength_exponents)

    @property
    def n_maps(self) -> int:
        n_o, n_s = len(self.orientations_deg), len(self.scales)
        return 1 + 3 + len(self.wavelength_exponents) * n_o + 2 * n_s * n_o + 6 * n_s

    def map_names(self) -> list[str]:
        names = ["original", "local_range", "local_std", "local_entropy"]
        names += [f"gabor_w{e}_o{o:03d}" for e in self.wavelength_exponents for o in self.orientations_deg]
        for s in self.scales:
            names += [f"steer{order}_s{s:g}_o{o:03d}" for order in (1, 2) for o in self.orientations_deg]
        for s in self.scales:
            names += [f"{m}_s{s:g}" for m in HESSIAN_MAPS]
        return names


HESSIAN_MAPS = ("gradmag", "hess_eig1", "hess_eig2", "log", "gauss_curv", "hess_frob")


@dataclass(frozen=True, eq=False)
class TextureMapStack:
    """Named maps over a crop. ``maps[m]`` has the crop's x/y shape and one
    z-plane per entry of ``slices``."""

    names: tuple[str, ...]
    maps: np.ndarray
    slices: tuple[int, ...]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.maps[self.names.index(name)]


@dataclass(frozen=True, eq=False)
class TextureFeatures:
    values: np.ndarray
    names: list[str] = field(default_factory=list)


def _as_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def _to_slices(a: np.ndarray) -> np.ndarray:
    """(nx, ny, nz) -> contiguous (nz, nx, ny)."""
    return np.ascontiguousarray(np.moveaxis(a, 2, 0))


def _from_slices(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(a, 0, 2))


# ---------------------------------------------------------- 1D kernels


def gaussian_window_radius(sigma: float) -> int:
    """Half-width of the ``2 * ceil(2 sigma) + 1`` window."""
    return int(math.ceil(2.0 * sigma - 1e-12))


def gaussian_kernels(sigma: float):
    """Sampled 1D smoothing, first- and second-derivative kernels.

    Correlation taps for offsets ``-r..r``. The smoothing kernel sums to 1;
    the derivative kernels are moment-normalised (sum t*k = 1 and
    sum t^2/2*k = 1 with zero sum) so that they return exact slopes and
    curvatures on linear and quadratic signals despite truncation.
    """
    r = gaussian_window_radius(sigma)
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    smooth = g / g.sum()
    d1 = t * g
    d1 /= np.sum(t * d1)
    pos = np.arange(1, r + 1, dtype=np.float64)
    gp = np.exp(-(pos**2) / (2.0 * sigma**2))
    e = (pos**2 / sigma**2 - 1.0) * gp / sigma**2
    e /= np.sum(e * pos**2)
    d2 = np.concatenate([e[::-1], [-2.0 * e.sum()], e])
    return smooth, d1, d2


# ---------------------------------------------------- separable passes


def _edge_pad(a, r, axis):
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    return np.pad(a, pad, mode="edge")


def _shift(p, r, t, axis, n):
    idx = [slice(None)] * p.ndim
    idx[axis] = slice(r + t, r + t + n)
    return p[tuple(idx)]


def correlate_1d(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Replicate-padded correlation with an arbitrary odd-length kernel."""
    r = len(kernel) // 2
    n = a.shape[axis]
    p = _edge_pad(a, r, axis)
    out = np.zeros_like(a)
    for t in range(-r, r + 1):
        out += kernel[t + r] * _shift(p, r, t, axis, n)
    return out


def odd_difference_1d(a, kernel, axis):
    """Correlation with an antisymmetric kernel as sum of k_t (f[x+t] - f[x-t]).

    Exactly zero on constant input.
    """
    r = len(kernel) // 2
    n = a.shape[axis]
    p = _edge_pad(a, r, axis)
    out = np.zeros_like(a)
    for t in range(1, r + 1):
        out += kernel[r + t] * (_shift(p, r, t, axis, n) - _shift(p, r, -t, axis, n))
    return out


def even_difference_1d(a, kernel, axis):
    """Zero-sum symmetric kernel as sum of k_t (f[x+t] + f[x-t] - 2 f[x])."""
    r = len(kernel) // 2
    n = a.shape[axis]
    p = _edge_pad(a, r, axis)
    out = np.zeros_like(a)
    for t in range(1, r + 1):
        out += kernel[r + t] * ((_shift(p, r, t, axis, n) - a) + (_shift(p, r, -t, axis, n) - a))
    return out


def derivative_basis(slices: np.ndarray, sigma: float) -> dict[str, np.ndarray]:
    """Gx, Gy, Gxx, Gxy, Gyy on a (nz, nx, ny) slice stack."""
    g, d1, d2 = gaussian_kernels(sigma)
    sx = correlate_1d(slices, g, axis=1)
    sy = correlate_1d(slices, g, axis=2)
    dy = odd_difference_1d(slices, d1, axis=2)
    return {
        "Gx": odd_difference_1d(sy, d1, axis=1),
        "Gy": odd_difference_1d(sx, d1, axis=2),
        "Gxx": even_difference_1d(sy, d2, axis=1),
        "Gyy": even_difference_1d(sx, d2, axis=2),
        "Gxy": odd_difference_1d(dy, d1, axis=1),
    }


# ------------------------------------------------------ local statistics


def _entropy_table(window: int) -> np.ndarray:
    n = window * window
    c = np.arange(n + 1, dtype=np.float64) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(c > 0, -c * np.log2(c), 0.0)
    return t


def intensity_bins(slices: np.ndarray, n_bins: int = 256) -> np.ndarray:
    """Equal-width bins over [0, 255]; out-of-range values clamp to the end bins."""
    b = np.floor(slices * (n_bins / 255.0))
    return np.clip(b, 0, n_bins - 1).astype(np.int32)


@_accel.njit
def _entropy_kernel(bins, window, n_bins, table):
    nz, nx, ny = bins.shape
    r = window // 2
    out = np.zeros((nz, nx, ny))
    counts = np.zeros(n_bins, dtype=np.int32)
    for k in range(nz):
        for i in range(nx):
            for j in range(ny):
                for a in range(-r, r + 1):
                    ii = min(max(i + a, 0), nx - 1)
                    for b in range(-r, r + 1):
                        jj = min(max(j + b, 0), ny - 1)
                        counts[bins[k, ii, jj]] += 1
                h = 0.0
                for a in range(-r, r + 1):
                    ii = min(max(i + a, 0), nx - 1)
                    for b in range(-r, r + 1):
                        jj = min(max(j + b, 0), ny - 1)
                        c = counts[bins[k, ii, jj]]
                        if c > 0:
                            h += table[c]
                            counts[bins[k, ii, jj]] = 0
                out[k, i, j] = h
    return out


def _entropy_numpy(bins, window, n_bins, table):
    r = window // 2
    nz, nx, ny = bins.shape
    out = np.empty((nz, nx, ny))
    for k in range(nz):
        p = np.pad(bins[k], r, mode="edge")
        win = sliding_window_view(p, (window, window)).reshape(nx * ny, window * window)
        offs = (np.arange(nx * ny, dtype=np.int64) * n_bins)[:, None]
        counts = np.bincount((win + offs).ravel(), minlength=nx * ny * n_bins).reshape(nx * ny, n_bins)
        out[k] = table[counts].sum(axis=1).reshape(nx, ny)
    return out


def local_entropy_slices(slices: np.ndarray, window: int = 9, n_bins: int = 256) -> np.ndarray:
    bins = np.ascontiguousarray(intensity_bins(slices, n_bins))
    table = _entropy_table(window)
    if _accel.use_numba():
        return _entropy_kernel(bins, window, n_bins, table)
    return _entropy_numpy(bins, window, n_bins, table)


def _window_view(slices, window):
    r = window // 2
    p = np.pad(slices, ((0, 0), (r, r), (r, r)), mode="edge")
    return sliding_window_view(p, (window, window), axis=(1, 2))


def local_statistics_slices(slices, params: TextureParams = TextureParams()):
    win = _window_view(slices, params.stat_window)
    rng = win.max(axis=(-2, -1)) - win.min(axis=(-2, -1))
    mean = win.mean(axis=(-2, -1), keepdims=True)
    std = np.sqrt(np.mean((win - mean) ** 2, axis=(-2, -1)))
    ent = local_entropy_slices(slices, params.entropy_window, params.entropy_bins)
    return {"local_range": rng, "local_std": std, "local_entropy": ent}


def local_statistics(crop, params: TextureParams = TextureParams()) -> dict[str, np.ndarray]:
    """Local range and population stddev (3x3) and Shannon entropy in bits (9x9)."""
    s = local_statistics_slices(_to_slices(_as_array(crop)), params)
    return {k: _from_slices(v) for k, v in s.items()}


# ------------------------------------------------------------- Gabor


def gabor_sigma(wavelength: float, bandwidth: float = 1.0) -> float:
    """Envelope sigma along the carrier for a given octave bandwidth."""
    b = 2.0**bandwidth
    return wavelength / math.pi * math.sqrt(math.log(2.0) / 2.0) * (b + 1.0) / (b - 1.0)


def gabor_kernel(wavelength: float, theta_deg: float, bandwidth: float = 1.0,
                 aspect: float = 0.5) -> np.ndarray:
    """Complex Gabor kernel indexed ``[x, y]``; envelope normalised to unit sum."""
    sx = gabor_sigma(wavelength, bandwidth)
    sy = sx / aspect
    r = int(math.ceil(3.0 * max(sx, sy)))
    t = np.arange(-r, r + 1, dtype=np.float64)
    x, y = t[:, None], t[None, :]
    th = math.radians(theta_deg)
    xr = x * math.cos(th) + y * math.sin(th)
    yr = -x * math.sin(th) + y * math.cos(th)
    env = np.exp(-0.5 * (xr**2 / sx**2 + yr**2 / sy**2))
    env /= env.sum()
    return env * np.exp(2j * math.pi * xr / wavelength)


def gabor_slices(slices: np.ndarray, params: TextureParams = TextureParams()) -> dict[str, np.ndarray]:
    nz, nx, ny = slices.shape
    out = {}
    for e, lam in zip(params.wavelength_exponents, params.wavelengths):
        kernels = [gabor_kernel(lam, o, params.gabor_bandwidth, params.gabor_aspect)
                   for o in params.orientations_deg]
        r = kernels[0].shape[0] // 2
        p = np.pad(slices, ((0, 0), (r, r), (r, r)), mode="edge")
        # correlation = convolution with the flipped kernel; keep the 'valid' part
        shape = [sfft.next_fast_len(p.shape[1] + 2 * r, real=False),
                 sfft.next_fast_len(p.shape[2] + 2 * r, real=False)]
        fp = sfft.fft2(p, s=shape, axes=(1, 2))
        for o, k in zip(params.orientations_deg, kernels):
            fk = sfft.fft2(k[::-1, ::-1], s=shape)
            full = sfft.ifft2(fp * fk[None], axes=(1, 2))
            resp = full[:, 2 * r:2 * r + nx, 2 * r:2 * r + ny]
            out[f"gabor_w{e}_o{o:03d}"] = np.abs(resp)
    return out


def gabor_bank(crop, params: TextureParams = TextureParams()) -> dict[str, np.ndarray]:
    """Magnitudes of 4 wavelengths x 4 orientations of complex Gabor responses."""
    s = gabor_slices(_to_slices(_as_array(crop)), params)
    return {k: _from_slices(v) for k, v in s.items()}


# ----------------------------------------------- Gaussian derivatives


def steer_first(basis, theta_deg):
    c, s = math.cos(math.radians(theta_deg)), math.sin(math.radians(theta_deg))
    return c * basis["Gx"] + s * basis["Gy"]


def steer_second(basis, theta_deg):
    c, s = math.cos(math.radians(theta_deg)), math.sin(math.radians(theta_deg))
    return c * c * basis["Gxx"] + 2.0 * c * s * basis["Gxy"] + s * s * basis["Gyy"]


def _steered_maps(basis, sigma, params):
    out = {}
    for order, steer in ((1, steer_first), (2, steer_second)):
        for o in params.orientations_deg:
            out[f"steer{order}_s{sigma:g}_o{o:03d}"] = steer(basis, o)
    return out


def _hessian_maps(basis, sigma):
    gx, gy, gxx, gxy, gyy = (basis[k] for k in ("Gx", "Gy", "Gxx", "Gxy", "Gyy"))
    half_tr = 0.5 * (gxx + gyy)
    disc = np.sqrt((0.5 * (gxx - gyy)) ** 2 + gxy**2)
    s = f"{sigma:g}"
    return {
        f"gradmag_s{s}": np.sqrt(gx**2 + gy**2),
        f"hess_eig1_s{s}": half_tr + disc,
        f"hess_eig2_s{s}": half_tr - disc,
        f"log_s{s}": gxx + gyy,
        f"gauss_curv_s{s}": gxx * gyy - gxy**2,
        f"hess_frob_s{s}": np.sqrt(gxx**2 + 2.0 * gxy**2 + gyy**2),
    }


def steerable_derivatives(crop, params: TextureParams = TextureParams()) -> dict[str, np.ndarray]:
    """First/second-order derivatives steered to each orientation, per scale."""
    sl = _to_slices(_as_array(crop))
    out = {}
    for sigma in params.scales:
        out.update(_steered_maps(derivative_basis(sl, sigma), sigma, params))
    return {k: _from_slices(v) for k, v in out.items()}


def hessian_features(crop, params: TextureParams = TextureParams()) -> dict[str, np.ndarray]:
    """Gradient magnitude, Hessian eigenvalues (descending), LoG, determinant
    and Frobenius norm, per scale."""
    sl = _to_slices(_as_array(crop))
    out = {}
    for sigma in params.scales:
        out.update(_hessian_maps(derivative_basis(sl, sigma), sigma))
    return {k: _from_slices(v) for k, v in out.items()}


# --------------------------------------------------------------- stack


def build_texture_stack(crop, params: TextureParams = TextureParams(), slices=None) -> TextureMapStack:
    """All maps over ``crop``; restrict to axial planes ``slices`` if given.

    Filtering is per-plane, so restricting planes gives the same values as
    computing the full stack and indexing it.
    """
    data = _as_array(crop)
    if slices is None:
        slices = tuple(range(data.shape[2]))
    slices = tuple(int(s) for s in slices)
    sl = _to_slices(data[:, :, list(slices)])
    maps = {"original": sl.copy()}
    maps.update(local_statistics_slices(sl, params))
    maps.update(gabor_slices(sl, params))
    for sigma in params.scales:
        maps.update(_steered_maps(derivative_basis(sl, sigma), sigma, params))
    for sigma in params.scales:
        maps.update(_hessian_maps(derivative_basis(sl, sigma), sigma))
    names = params.map_names()
    stack = np.stack([_from_slices(maps[n]) for n in names])
    if not np.all(np.isfinite(stack)):
        raise DegenerateInputError("texture maps contain non-finite values")
    return TextureMapStack(tuple(names), stack, slices)


# ---------------------------------------------------------------- ECDF


def probability_grid(n: int, params: TextureParams = TextureParams()) -> np.ndarray:
    """Log-spaced probabilities from ``max(1/n, min_probability)`` to 1."""
    p0 = max(1.0 / n, params.min_probability)
    p = 10.0 ** np.linspace(math.log10(p0), 0.0, params.n_probabilities)
    p[-1] = 1.0
    return p


def nearest_rank_quantiles(values: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Empirical quantiles by nearest rank ``ceil(p * N)`` (1-based)."""
    s = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = len(s)
    # guard against p*N landing a hair above an integer
    rank = np.ceil(np.asarray(probs) * n - 1e-9).astype(np.int64)
    return s[np.clip(rank, 1, n) - 1]


def ecdf_quantiles(map_, mask, params: TextureParams = TextureParams()) -> np.ndarray:
    vals = np.asarray(map_)[np.asarray(mask, dtype=bool)]
    if vals.size < 2:
        raise DegenerateInputError(f"mask selects {vals.size} voxels; need at least 2")
    return nearest_rank_quantiles(vals, probability_grid(vals.size, params))


def texture_column_names(params: TextureParams = TextureParams()) -> list[str]:
    return [f"{m}_q{k}" for m in params.map_names() for k in range(params.n_probabilities)]


def hippocampus_center(lm: LabelMap, names=DEFAULT_HIPPOCAMPUS):
    ids = []
    for n in names:
        try:
            ids.append(lm.region(n).label_id)
        except KeyError:
            pass
    if not ids:
        raise ConfigurationError(f"none of the hippocampus regions {list(names)} is in the region table")
    mask = lm.mask(ids)
    if not mask.any():
        raise ConfigurationError(f"hippocampus labels {ids} have no voxels")
    center = np.floor(np.argwhere(mask).mean(axis=0) + 0.5).astype(np.int64)
    return center, ids


def hippocampal_texture_features(v: Volume, lm: LabelMap, params: TextureParams = TextureParams(),
                                 hippocampus_names=DEFAULT_HIPPOCAMPUS) -> TextureFeatures:
    """Crop around the hippocampi, build the map stack, and take 300 ECDF
    quantiles of each map inside the hippocampus mask."""
    lm.check_matches(v)
    center, ids = hippocampus_center(lm, hippocampus_names)
    size = (params.crop_size,) * 3
    crop = crop_array(v.data, center, size)
    mask = np.isin(crop_array(lm.labels, center, size), ids)
    planes = tuple(int(k) for k in np.nonzero(mask.any(axis=(0, 1)))[0])
    stack = build_texture_stack(crop, params, slices=planes)
    m = mask[:, :, list(planes)]
    n = int(m.sum())
    if n < 2:
        raise DegenerateInputError(f"hippocampus mask has {n} voxels inside the crop")
    probs = probability_grid(n, params)
    values = np.concatenate([nearest_rank_quantiles(stack.maps[i][m], probs)
                             for i in range(len(stack.names))])
    return TextureFeatures(values, texture_column_names(params))
