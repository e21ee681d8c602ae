"""Independent reference computations the library is checked against.

Each oracle recomputes a quantity from its textbook definition with plain
loops or dense tables rather than the vectorised code paths under test.
"""
import itertools

import numpy as np


def direct_mi(region_ids, bins):
    """I(R;B) in bits from the joint contingency table of (region, bin) over in-mask voxels."""
    inside = bins >= 0
    r, b = region_ids[inside], bins[inside]
    joint = np.zeros((r.max() + 1, b.max() + 1))
    np.add.at(joint, (r, b), 1.0)
    joint /= joint.sum()
    pr = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (pr @ pb)[nz])))


def cut_gain_oracle(model, region, axis, plane):
    """Gain as MI after the cut minus MI before, with everything outside the region as one block."""
    ids = np.zeros(model.bins.shape, np.int64)
    ids[region.slices()] = 1
    before = direct_mi(ids, model.bins)
    sl = list(region.slices())
    sl[axis] = slice(plane, region.hi[axis] + 1)
    ids[tuple(sl)] = 2
    return direct_mi(ids, model.bins) - before


def exhaustive_best(model, region, min_extent):
    best = None
    for axis in range(3):
        for plane in range(region.lo[axis] + min_extent, region.hi[axis] - min_extent + 2):
            ids_a = model.bins[region.slices()]
            k = plane - region.lo[axis]
            left = np.take(ids_a, range(k), axis=axis)
            right = np.take(ids_a, range(k, ids_a.shape[axis]), axis=axis)
            if not (left >= 0).any() or not (right >= 0).any():
                continue
            g = cut_gain_oracle(model, region, axis, plane)
            if best is None or g > best[2] + 1e-12:
                best = (axis, plane, g)
    return best


def lda_decision(Xa, Xb, X):
    """Closed-form two-class Fisher LDA: w = Sw^-1 (mA - mB), threshold at the projected midpoint."""
    ma, mb = Xa.mean(0), Xb.mean(0)
    sw = (Xa - ma).T @ (Xa - ma) + (Xb - mb).T @ (Xb - mb)
    w = np.linalg.solve(sw, ma - mb)
    return X @ w >= w @ (ma + mb) / 2


def gaussian_pair(rng, n=100, d=3):
    cov = rng.normal(size=(d, d))
    cov = cov @ cov.T + 0.1 * np.eye(d)
    L = np.linalg.cholesky(cov)
    Xa = rng.normal(size=(n, d)) @ L.T + rng.normal(size=d)
    Xb = rng.normal(size=(n, d)) @ L.T + rng.normal(size=d)
    return Xa, Xb


def energy_oracle(x, a, b, w, beta):
    """Site-by-site loop over the disagreement + Potts energy."""
    n, m = x.shape
    e = 0.0
    for i in range(n):
        for j in range(m):
            e += w * (int(x[i, j] != a[i, j]) + int(x[i, j] != b[i, j]))
            if i + 1 < n:
                e += beta * int(x[i, j] != x[i + 1, j])
            if j + 1 < m:
                e += beta * int(x[i, j] != x[i, j + 1])
    return e


def exhaustive_map(obs, p, labels):
    fixed = obs.clamp_mask()
    base = obs.initial()
    free = np.argwhere(~fixed)
    best = np.inf
    for combo in itertools.product(labels, repeat=len(free)):
        x = base.copy()
        x[tuple(free.T)] = combo
        best = min(best, energy_oracle(x, obs.obs_a, obs.obs_b, p.w, p.beta))
    return best


def ssim_oracle(x, y, L, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """SSIM at every pixel from explicit zero-padded windows and two-pass moments."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    h = size // 2
    xp = np.pad(x, h)
    yp = np.pad(y, h)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    out = np.empty(x.shape)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            wx = xp[i:i + size, j:j + size]
            wy = yp[i:i + size, j:j + size]
            mx, my = np.sum(w * wx), np.sum(w * wy)
            vx = np.sum(w * (wx - mx) ** 2)
            vy = np.sum(w * (wy - my) ** 2)
            cxy = np.sum(w * (wx - mx) * (wy - my))
            out[i, j] = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return out
