"""Stitching of overlapping subdomain labelings by simulated annealing.

Each overlap strip is estimated as the minimiser of

    E = w * sum_s ([x_s != a_s] + [x_s != b_s]) + beta * sum_<s,t> [x_s != x_t]

over 4-neighbour pairs, with the outermost line on each side clamped to the
observation coming from that side.
"""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .errors import DimensionError, ValidationError
from .volume import BG, LabelVolume

UNLABELED = -1


@dataclass
class EnergyParams:
    w: float = 1.0
    beta: float = 0.7

    def __post_init__(self):
        if not self.w > 0 or self.beta < 0:
            raise ValidationError("need w > 0 and beta >= 0")


@dataclass
class AnnealSchedule:
    t0: float = 2.0
    c: float = 0.95
    max_sweeps: int = 200
    stall_sweeps: int = 3
    seed: object = 0

    def __post_init__(self):
        if not 0 < self.c < 1 or not self.t0 > 0 or self.max_sweeps < 1 or self.stall_sweeps < 1:
            raise ValidationError("invalid annealing schedule")


@dataclass
class OverlapObservation:
    """Two observed labelings of one overlap strip.

    ``axis`` is the thin direction: 1 for an ``nrows x 4`` strip between
    left/right neighbours, 0 for a ``4 x ncols`` strip between upper/lower
    ones. ``clamp_a``/``clamp_b`` index the lines along ``axis`` pinned to
    ``obs_a``/``obs_b``.
    """

    obs_a: np.ndarray
    obs_b: np.ndarray
    axis: int = 1
    clamp_a: int = 0
    clamp_b: int = -1

    def __post_init__(self):
        self.obs_a = np.asarray(self.obs_a, dtype=np.int64)
        self.obs_b = np.asarray(self.obs_b, dtype=np.int64)
        if self.obs_a.ndim != 2 or self.obs_a.shape != self.obs_b.shape:
            raise DimensionError("observations must be equally shaped 2D grids")
        if self.axis not in (0, 1):
            raise ValidationError("axis must be 0 or 1")
        t = self.thickness
        if t < 2:
            raise DimensionError("overlap strip must be at least two lines thick")
        self.clamp_a %= t
        self.clamp_b %= t
        if self.clamp_a == self.clamp_b or {self.clamp_a, self.clamp_b} != {0, t - 1}:
            raise ValidationError("clamped lines must be the two outermost lines")

    @property
    def thickness(self) -> int:
        return self.obs_a.shape[self.axis]

    @property
    def orientation(self) -> str:
        return "horizontal" if self.axis == 1 else "vertical"

    def clamp_mask(self) -> np.ndarray:
        fixed = np.zeros(self.obs_a.shape, dtype=bool)
        idx = [slice(None), slice(None)]
        for line in (self.clamp_a, self.clamp_b):
            idx[self.axis] = line
            fixed[tuple(idx)] = True
        return fixed

    def initial(self) -> np.ndarray:
        """obs_a everywhere except the b-side clamp line."""
        cfg = self.obs_a.copy()
        idx = [slice(None), slice(None)]
        idx[self.axis] = self.clamp_b
        cfg[tuple(idx)] = self.obs_b[tuple(idx)]
        return cfg


def energy(config, obs: OverlapObservation, p: EnergyParams = None) -> float:
    p = p or EnergyParams()
    x = np.asarray(config)
    if x.shape != obs.obs_a.shape:
        raise DimensionError(f"config shape {x.shape} != observation shape {obs.obs_a.shape}")
    data = np.count_nonzero(x != obs.obs_a) + np.count_nonzero(x != obs.obs_b)
    potts = np.count_nonzero(x[1:, :] != x[:-1, :]) + np.count_nonzero(x[:, 1:] != x[:, :-1])
    return p.w * data + p.beta * potts


def sa_map_estimate(obs: OverlapObservation, p: EnergyParams = None,
                    sched: AnnealSchedule = None) -> np.ndarray:
    """Single-site Metropolis annealing in raster order; returns the best configuration seen."""
    p = p or EnergyParams()
    sched = sched or AnnealSchedule()
    if np.array_equal(obs.obs_a, obs.obs_b):
        return obs.obs_a.copy()
    config = obs.initial()
    nrows, ncols = config.shape
    fixed = obs.clamp_mask()
    sites = [(i, j) for i in range(nrows) for j in range(ncols) if not fixed[i, j]]
    # labels outside both observations never lower the energy; ordering them by
    # first appearance makes the run equivariant under any relabeling
    seen = np.concatenate([obs.obs_a.ravel(), obs.obs_b.ravel()])
    _, first = np.unique(seen, return_index=True)
    candidates = [int(v) for v in seen[np.sort(first)]]
    if not sites or len(candidates) < 2:
        return config
    x = config.tolist()
    a = obs.obs_a.tolist()
    b = obs.obs_b.tolist()
    w, beta = p.w, p.beta
    n_cand = len(candidates)
    cur = energy(config, obs, p)
    best_e, best = cur, config.copy()
    rng = np.random.default_rng(sched.seed)
    temp = sched.t0
    stall = 0
    for _ in range(sched.max_sweeps):
        picks = rng.integers(0, n_cand - 1, size=len(sites)).tolist()
        draws = rng.random(len(sites)).tolist()
        accepted = 0
        for (i, j), pick, u in zip(sites, picks, draws):
            old = x[i][j]
            new = candidates[pick]
            if new == old:  # draw among the other n_cand - 1 labels
                new = candidates[n_cand - 1]
            d_data = ((new != a[i][j]) + (new != b[i][j])) - ((old != a[i][j]) + (old != b[i][j]))
            d_potts = 0
            for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if 0 <= ni < nrows and 0 <= nj < ncols:
                    nb = x[ni][nj]
                    d_potts += (new != nb) - (old != nb)
            delta = w * d_data + beta * d_potts
            if delta <= 0 or u < math.exp(-delta / temp):
                x[i][j] = new
                cur += delta
                accepted += 1
                if cur < best_e - 1e-12:
                    best_e = cur
                    best = np.array(x, dtype=np.int64)
        temp *= sched.c
        stall = stall + 1 if accepted == 0 else 0
        if stall >= sched.stall_sweeps:
            break
    return best


# ------------------------------------------------------------- slice assembly

def _strip_observation(canvas_part, incoming_part, p_rect, r_rect):
    """Build the observation for the intersection of placed rect P and incoming rect R."""
    h, wdt = canvas_part.shape
    if wdt < h:
        axis = 1
    elif h < wdt:
        axis = 0
    else:
        dr = abs((p_rect[0] + p_rect[1]) - (r_rect[0] + r_rect[1]))
        dc = abs((p_rect[2] + p_rect[3]) - (r_rect[2] + r_rect[3]))
        axis = 1 if dc >= dr else 0
    p_center = p_rect[2 * axis] + p_rect[2 * axis + 1]
    r_center = r_rect[2 * axis] + r_rect[2 * axis + 1]
    if p_center <= r_center:
        clamp_a, clamp_b = 0, -1
    else:
        clamp_a, clamp_b = -1, 0
    return OverlapObservation(canvas_part, incoming_part, axis, clamp_a, clamp_b)


def stitch_slice(subimages, z: int, params: EnergyParams = None, sched: AnnealSchedule = None,
                 mask_slice: np.ndarray = None, shape: Tuple[int, int] = None,
                 stats: list = None) -> np.ndarray:
    """Fuse the axial slice ``z`` of overlapping subdomain labelings.

    ``subimages`` holds ``(Subdomain, labels)`` pairs, ``labels`` shaped like
    the subdomain's overlap box. Rectangles are fused top-left first; each
    overlap with the growing canvas is resolved by annealing (canvas as the
    first observation, incoming labels as the second).
    """
    params = params or EnergyParams()
    sched = sched or AnnealSchedule()
    rects = []
    for sub, labels in subimages:
        box = sub.overlap_box
        if not box.lo[2] <= z <= box.hi[2]:
            continue
        lab2d = np.asarray(labels)[:, :, z - box.lo[2]].astype(np.int64)
        rects.append(((box.lo[0], box.hi[0], box.lo[1], box.hi[1]), sub.id, lab2d))
    if not rects:
        raise ValidationError(f"no subimage intersects slice {z}")
    rects.sort(key=lambda r: (r[0][0], r[0][2], r[1]))
    if shape is None:
        shape = mask_slice.shape if mask_slice is not None else (
            max(r[0][1] for r in rects) + 1, max(r[0][3] for r in rects) + 1)
    canvas = np.full(shape, UNLABELED, dtype=np.int64)
    placed = []
    n_strip = 0
    base = [int(s) for s in np.atleast_1d(sched.seed)]
    for rect, sub_id, lab in rects:
        r0, r1, c0, c1 = rect
        view = canvas[r0:r1 + 1, c0:c1 + 1]
        free = view == UNLABELED
        view[free] = lab[free]
        for prect in placed:
            i0, i1 = max(r0, prect[0]), min(r1, prect[1])
            j0, j1 = max(c0, prect[2]), min(c1, prect[3])
            if i1 < i0 or j1 < j0:
                continue
            cpart = canvas[i0:i1 + 1, j0:j1 + 1]
            ipart = lab[i0 - r0:i1 - r0 + 1, j0 - c0:j1 - c0 + 1]
            if np.array_equal(cpart, ipart):
                continue
            if min(cpart.shape) < 2:
                continue  # a single shared line keeps the canvas labels
            obs = _strip_observation(cpart, ipart, prect, rect)
            strip_sched = dataclasses.replace(sched, seed=base + [z, n_strip])
            n_strip += 1
            fused = sa_map_estimate(obs, params, strip_sched)
            if stats is not None:
                stats.append({"z": z, "strip": [i0, i1, j0, j1], "orientation": obs.orientation,
                              "disagreements": int(np.count_nonzero(cpart != ipart)),
                              "energy_init": energy(obs.initial(), obs, params),
                              "energy_final": energy(fused, obs, params)})
            canvas[i0:i1 + 1, j0:j1 + 1] = fused
        placed.append(rect)
    gap = canvas == UNLABELED
    if mask_slice is not None:
        if np.any(gap & mask_slice):
            raise ValidationError(f"slice {z}: in-mask pixels not covered by any subimage")
        canvas[gap] = BG
    elif gap.any():
        raise ValidationError(f"slice {z}: pixels not covered by any subimage")
    return canvas


def assemble_volume(classified: Dict[int, np.ndarray], tree, mask=None, params: EnergyParams = None,
                    sched: AnnealSchedule = None, threads: int = 1,
                    seam_stats: list = None) -> LabelVolume:
    """Stitch every axial slice from the leaves whose core spans it.

    Leaves are chosen by core z-range so that, within a slice, rectangles meet
    only along thin x/y strips.
    """
    sched = sched or AnnealSchedule()
    dims = tuple(tree.dims)
    missing = [s.id for s in tree.leaves if s.id not in classified]
    if missing:
        raise ValidationError(f"leaves {missing} have no classification")
    mask_data = mask.data if mask is not None else None
    base = [int(s) for s in np.atleast_1d(sched.seed)]

    def one_slice(z):
        subs = [(s, classified[s.id]) for s in tree.leaves
                if s.core_box.lo[2] <= z <= s.core_box.hi[2]]
        local = []
        grid = stitch_slice(subs, z, params, dataclasses.replace(sched, seed=base),
                            None if mask_data is None else mask_data[:, :, z],
                            dims[:2], local)
        return grid, local

    out = np.zeros(dims, dtype=np.uint8)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_slice, range(dims[2])))
    else:
        results = [one_slice(z) for z in range(dims[2])]
    for z, (grid, local) in enumerate(results):
        out[:, :, z] = grid
        if seam_stats is not None:
            seam_stats.extend(local)
    if mask_data is not None:
        out[~mask_data] = BG
    return LabelVolume(out, getattr(mask, "voxel_size", (1.0, 1.0, 1.0)))
