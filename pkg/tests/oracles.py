"""Slow, independent reference implementations used only by the tests.

Nothing here imports the package's numerical code: kernels, labelings and
statistics are rebuilt from their definitions with plain loops.
"""

import math
from collections import deque

import numpy as np


# --------------------------------------------------------- components


def flood_fill_labels(mask):
    """6-connected BFS labelling; ids in C-order of each component's first voxel."""
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros(mask.shape, dtype=np.int64)
    nxt = 0
    nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    for start in zip(*np.nonzero(mask)):
        if out[start]:
            continue
        nxt += 1
        out[start] = nxt
        q = deque([start])
        while q:
            i, j, k = q.popleft()
            for di, dj, dk in nbrs:
                a, b, c = i + di, j + dj, k + dk
                if (0 <= a < mask.shape[0] and 0 <= b < mask.shape[1] and 0 <= c < mask.shape[2]
                        and mask[a, b, c] and not out[a, b, c]):
                    out[a, b, c] = nxt
                    q.append((a, b, c))
    return out, nxt


def exposed_faces(mask):
    mask = np.asarray(mask, dtype=bool)
    n = 0
    for i, j, k in zip(*np.nonzero(mask)):
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = i + d[0], j + d[1], k + d[2]
            inside = 0 <= a < mask.shape[0] and 0 <= b < mask.shape[1] and 0 <= c < mask.shape[2]
            if not inside or not mask[a, b, c]:
                n += 1
    return n


def ellipsoid_count(center, semi, dims):
    """Brute-force count of voxel centres inside an axis-aligned ellipsoid (1 mm grid)."""
    n = 0
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                x, y, z = i + 0.5 - center[0], j + 0.5 - center[1], k + 0.5 - center[2]
                if (x / semi[0]) ** 2 + (y / semi[1]) ** 2 + (z / semi[2]) ** 2 <= 1.0:
                    n += 1
    return n


# ---------------------------------------------------------- filtering


def gauss_taps(sigma):
    """Smoothing, first- and second-derivative taps on 2*ceil(2 sigma)+1 points,
    normalised by their moments (sum 1; sum t*k = 1; sum t^2/2*k = 1, zero sum)."""
    r = math.ceil(2 * sigma - 1e-12)
    t = np.arange(-r, r + 1, dtype=float)
    g = np.exp(-t * t / (2 * sigma * sigma))
    smooth = g / g.sum()
    d1 = t * g
    d1 = d1 / np.dot(t, d1)
    d2 = (t * t / sigma**2 - 1) * g / sigma**2
    d2 = d2 - d2.sum() * (t == 0)  # force zero sum through the centre tap
    d2 = d2 / np.dot(t * t / 2, d2)
    return smooth, d1, d2


def correlate2d_direct(img, kernel):
    """Naive replicate-padded 2D correlation, ``kernel`` indexed [dx, dy]."""
    img = np.asarray(img)
    rx, ry = kernel.shape[0] // 2, kernel.shape[1] // 2
    p = np.pad(img, ((rx, rx), (ry, ry)), mode="edge")
    out = np.zeros(img.shape, dtype=np.result_type(img, kernel))
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] = np.sum(p[i:i + 2 * rx + 1, j:j + 2 * ry + 1] * kernel)
    return out


def derivative_maps(img, sigma):
    s, d1, d2 = gauss_taps(sigma)
    k = {
        "Gx": np.outer(d1, s), "Gy": np.outer(s, d1),
        "Gxx": np.outer(d2, s), "Gyy": np.outer(s, d2), "Gxy": np.outer(d1, d1),
    }
    return {n: correlate2d_direct(img, kk) for n, kk in k.items()}


def gabor_taps(wavelength, theta_deg, bandwidth=1.0, aspect=0.5):
    b = 2.0**bandwidth
    sx = wavelength / math.pi * math.sqrt(math.log(2) / 2) * (b + 1) / (b - 1)
    sy = sx / aspect
    r = math.ceil(3 * max(sx, sy))
    th = math.radians(theta_deg)
    k = np.zeros((2 * r + 1, 2 * r + 1), dtype=complex)
    for a in range(-r, r + 1):
        for c in range(-r, r + 1):
            xr = a * math.cos(th) + c * math.sin(th)
            yr = -a * math.sin(th) + c * math.cos(th)
            k[a + r, c + r] = math.exp(-0.5 * (xr**2 / sx**2 + yr**2 / sy**2)) * complex(
                math.cos(2 * math.pi * xr / wavelength), math.sin(2 * math.pi * xr / wavelength))
    env = np.abs(k)
    return k / env.sum()


def local_stats_direct(img, stat_window=3, ent_window=9):
    """Range, population std and 256-bin entropy (bits) per pixel."""
    r, re = stat_window // 2, ent_window // 2
    p = np.pad(img, r, mode="edge")
    pe = np.pad(img, re, mode="edge")
    rng = np.zeros(img.shape)
    std = np.zeros(img.shape)
    ent = np.zeros(img.shape)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            w = p[i:i + stat_window, j:j + stat_window]
            rng[i, j] = w.max() - w.min()
            std[i, j] = math.sqrt(np.mean((w - w.mean()) ** 2))
            we = pe[i:i + ent_window, j:j + ent_window].ravel()
            hist, _ = np.histogram(we, bins=256, range=(0.0, 255.0))
            q = hist[hist > 0] / we.size
            ent[i, j] = -np.sum(q * np.log2(q))
    return rng, std, ent


# -------------------------------------------------------- statistics


def ecdf_full_sort(values, probs):
    """Smallest value whose empirical CDF reaches p (tolerance 1e-12)."""
    s = sorted(float(v) for v in values)
    n = len(s)
    out = []
    for p in probs:
        for i in range(1, n + 1):
            if i / n >= p - 1e-12:
                out.append(s[i - 1])
                break
    return np.array(out)


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    acc = 0.0
    for a in pos:
        for b in neg:
            acc += 1.0 if a > b else 0.5 if a == b else 0.0
    return acc / (len(pos) * len(neg))


def best_stump_accuracy(x, y):
    """Best training accuracy of any single-threshold rule on one feature."""
    xs = np.unique(x)
    best = 0.0
    cuts = np.concatenate([[xs[0] - 1], (xs[:-1] + xs[1:]) / 2, [xs[-1] + 1]])
    for c in cuts:
        for sign in (1, -1):
            pred = (sign * (x - c) > 0).astype(int)
            best = max(best, float(np.mean(pred == y)))
    return best
