"""Binary space partitioning of a volume by greedy mutual-information gain.

Only in-mask voxels enter any probability. A region's information about the
intensity histogram is accumulated from integer bin counts, and the gain of a
cut is ``p(r) * JS(p(b|r1), p(b|r2))`` weighted by the children's mask shares,
which equals the increase of I(R; B).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DegenerateError, ValidationError
from .phantom import cnr as _cnr
from .volume import GM, WM, BrainMask, Box, LabelVolume, ScalarVolume

# gains closer than this are treated as ties (resolved by axis, then plane)
TIE_TOL = 1e-12


@dataclass
class PartitionParams:
    bin_count: int = 64
    max_regions: int = 48
    min_gain_bits: float = 1e-3
    min_extent: int = 8
    margin: int = 2

    def __post_init__(self):
        if self.bin_count < 2:
            raise ValidationError("bin_count must be >= 2")
        if self.max_regions < 1:
            raise ValidationError("max_regions must be >= 1")
        if self.margin < 0 or self.min_extent <= 2 * self.margin:
            raise ValidationError("min_extent must exceed 2 * margin")


@dataclass
class HistogramModel:
    bin_count: int
    bin_edges: np.ndarray
    bins: np.ndarray          # per-voxel bin index, -1 outside the mask
    global_counts: np.ndarray
    total: int

    @property
    def global_probs(self) -> np.ndarray:
        return self.global_counts / self.total

    def region_counts(self, box: Box) -> np.ndarray:
        b = self.bins[box.slices()]
        return np.bincount(b[b >= 0], minlength=self.bin_count)

    def region_probs(self, box: Box):
        """Return ``(p(r), p(b|r))`` for a box."""
        counts = self.region_counts(box)
        n = counts.sum()
        if n == 0:
            return 0.0, np.zeros(self.bin_count)
        return n / self.total, counts / n


def build_histogram(t1w: ScalarVolume, mask: BrainMask, bins: int) -> HistogramModel:
    """Equal-width bins over the in-mask intensity range; the maximum goes to the last bin."""
    if bins < 2:
        raise ValidationError("need at least two bins")
    m = mask.data
    values = t1w.data[m].astype(np.float64)
    if values.size == 0:
        raise DegenerateError("empty mask")
    lo, hi = values.min(), values.max()
    if not hi > lo:
        raise DegenerateError("image is constant inside the mask")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    per_voxel = np.full(m.shape, -1, dtype=np.int64)
    per_voxel[m] = idx
    counts = np.bincount(idx, minlength=bins)
    return HistogramModel(bins, edges, per_voxel, counts, int(values.size))


def _nlogn(c):
    c = np.asarray(c, dtype=np.float64)
    out = np.zeros_like(c)
    pos = c > 0
    out[pos] = c[pos] * np.log2(c[pos])
    return out


def region_mi(model: HistogramModel, regions: Sequence[Box]) -> float:
    """I(R; B) in bits for a set of disjoint boxes covering the mask."""
    cover = np.zeros(model.bins.shape, dtype=np.int32)
    for box in regions:
        cover[box.slices()] += 1
    if cover.max() > 1:
        raise ValidationError("regions overlap")
    if np.any((cover == 0) & (model.bins >= 0)):
        raise ValidationError("regions do not cover the mask")
    pb = model.global_probs
    total = 0.0
    for box in regions:
        pr, pbr = model.region_probs(box)
        if pr == 0:
            continue
        nz = pbr > 0
        total += pr * float(np.sum(pbr[nz] * np.log2(pbr[nz] / pb[nz])))
    return total


def _split_children(box: Box, axis: int, plane: int):
    """Children of a cut placed just before voxel index ``plane`` along ``axis``."""
    hi1 = list(box.hi)
    hi1[axis] = plane - 1
    lo2 = list(box.lo)
    lo2[axis] = plane
    return Box(box.lo, tuple(hi1)), Box(tuple(lo2), box.hi)


def _gain_from_counts(c1, c2, total):
    """Vectorised MI gain (bits) for child count arrays shaped (..., bins)."""
    c = c1 + c2
    n1 = c1.sum(axis=-1)
    n2 = c2.sum(axis=-1)
    n = n1 + n2
    h = lambda cnt, tot: _nlogn(tot) - _nlogn(cnt).sum(axis=-1)  # noqa: E731  n*H in bits
    return (h(c, n) - h(c1, n1) - h(c2, n2)) / total


def split_gain(model: HistogramModel, region: Box, axis: int, plane: int) -> float:
    if not region.lo[axis] < plane <= region.hi[axis]:
        raise ValidationError(f"plane {plane} does not cut {region} on axis {axis}")
    a, b = _split_children(region, axis, plane)
    c1, c2 = model.region_counts(a), model.region_counts(b)
    if c1.sum() == 0 or c2.sum() == 0:
        raise DegenerateError("cut leaves a child without in-mask voxels")
    return float(_gain_from_counts(c1, c2, model.total))


def _axis_gains(model: HistogramModel, region: Box, axis: int, min_extent: int):
    """All admissible planes on one axis and their gains via a cumulative slice sweep."""
    length = region.shape[axis]
    if length < 2 * min_extent:
        return np.empty(0, dtype=np.int64), np.empty(0)
    b = np.moveaxis(model.bins[region.slices()], axis, 0).reshape(length, -1)
    sl_idx = np.broadcast_to(np.arange(length)[:, None], b.shape)
    inside = b >= 0
    flat = sl_idx[inside] * model.bin_count + b[inside]
    per_slice = np.bincount(flat, minlength=length * model.bin_count).reshape(length, model.bin_count)
    cum = np.cumsum(per_slice, axis=0)
    total_counts = cum[-1]
    # cut before offset k: left = slices [0, k)
    ks = np.arange(min_extent, length - min_extent + 1)
    left = cum[ks - 1]
    right = total_counts[None, :] - left
    ok = (left.sum(axis=1) > 0) & (right.sum(axis=1) > 0)
    ks, left, right = ks[ok], left[ok], right[ok]
    gains = _gain_from_counts(left.astype(np.float64), right.astype(np.float64), model.total)
    return ks + region.lo[axis], gains


def best_split(model: HistogramModel, region: Box, params: PartitionParams):
    """Exhaustive search over admissible cuts; returns ``(axis, plane, gain)`` or None."""
    best = None
    for axis in range(3):
        planes, gains = _axis_gains(model, region, axis, params.min_extent)
        for plane, gain in zip(planes, gains):
            if best is None or gain > best[2] + TIE_TOL:
                best = (axis, int(plane), float(gain))
    if best is None or best[2] < params.min_gain_bits:
        return None
    return best


@dataclass
class Subdomain:
    id: int
    core_box: Box
    overlap_box: Box
    mean_intensity: Optional[float] = None
    cnr: Optional[float] = None

    def to_dict(self):
        return {"id": self.id, "core_box": self.core_box.to_list(),
                "overlap_box": self.overlap_box.to_list(),
                "mean": self.mean_intensity, "cnr": self.cnr}


@dataclass
class PartitionNode:
    box: Box
    axis: Optional[int] = None
    plane: Optional[int] = None
    gain: float = 0.0
    children: List["PartitionNode"] = field(default_factory=list)
    leaf: Optional[Subdomain] = None

    @property
    def is_leaf(self):
        return not self.children

    def to_dict(self):
        d = {"box": self.box.to_list()}
        if self.children:
            d.update(axis=self.axis, plane=self.plane, gain=self.gain,
                     children=[c.to_dict() for c in self.children])
        else:
            d["leaf"] = self.leaf.id if self.leaf is not None else None
        return d


@dataclass
class PartitionTree:
    root: PartitionNode
    leaves: List[Subdomain]
    dims: tuple
    margin: int
    split_gains: List[float] = field(default_factory=list)  # in acceptance order

    @property
    def total_mi(self) -> float:
        return float(sum(n.gain for n in self.internal_nodes()))

    def internal_nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.children:
                yield node
                stack.extend(reversed(node.children))

    def to_dict(self):
        return {"dims": list(self.dims), "margin": self.margin, "total_mi": self.total_mi,
                "split_gains": self.split_gains,
                "tree": self.root.to_dict(), "leaves": [s.to_dict() for s in self.leaves]}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_dict(cls, data) -> "PartitionTree":
        leaves = {d["id"]: Subdomain(d["id"], Box.from_list(d["core_box"]),
                                     Box.from_list(d["overlap_box"]), d.get("mean"), d.get("cnr"))
                  for d in data["leaves"]}

        def build(d):
            node = PartitionNode(Box.from_list(d["box"]))
            if "children" in d:
                node.axis, node.plane, node.gain = d["axis"], d["plane"], d["gain"]
                node.children = [build(c) for c in d["children"]]
            else:
                node.leaf = leaves[d["leaf"]]
            return node

        return cls(build(data["tree"]), [leaves[i] for i in sorted(leaves)],
                   tuple(data["dims"]), data["margin"], list(data.get("split_gains", [])))

    @classmethod
    def from_json(cls, path) -> "PartitionTree":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def expand_box(core: Box, dims, margin: int) -> Box:
    """Grow a core box by ``margin`` on every face that is not on the volume border."""
    lo = tuple(l - margin if l > 0 else l for l in core.lo)
    hi = tuple(h + margin if h < d - 1 else h for h, d in zip(core.hi, dims))
    lo = tuple(max(0, l) for l in lo)
    hi = tuple(min(d - 1, h) for h, d in zip(hi, dims))
    return Box(lo, hi)


def partition_volume(t1w: ScalarVolume, mask: BrainMask, params: PartitionParams = None) -> PartitionTree:
    """Greedy best-first BSP: always split the leaf with the largest admissible gain."""
    params = params or PartitionParams()
    model = build_histogram(t1w, mask, params.bin_count)
    dims = t1w.dims
    root = PartitionNode(Box.full(dims))
    leaves = [root]
    candidates = {id(root): best_split(model, root.box, params)}
    split_order = []
    while len(leaves) < params.max_regions:
        chosen, best = None, None
        for node in leaves:  # leaves kept in creation order: ties go to the older leaf
            cand = candidates[id(node)]
            if cand is not None and (best is None or cand[2] > best[2] + TIE_TOL):
                chosen, best = node, cand
        if chosen is None:
            break
        axis, plane, gain = best
        chosen.axis, chosen.plane, chosen.gain = axis, plane, gain
        a, b = _split_children(chosen.box, axis, plane)
        chosen.children = [PartitionNode(a), PartitionNode(b)]
        split_order.append(gain)
        i = leaves.index(chosen)
        leaves[i:i + 1] = chosen.children
        del candidates[id(chosen)]
        for child in chosen.children:
            candidates[id(child)] = best_split(model, child.box, params)

    # ids follow a left-first depth traversal
    subdomains = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.children:
            stack.extend(reversed(node.children))
            continue
        sub = Subdomain(len(subdomains), node.box, expand_box(node.box, dims, params.margin))
        node.leaf = sub
        subdomains.append(sub)
    return PartitionTree(root, subdomains, tuple(dims), params.margin, split_order)


def subdomain_stats(t1w: ScalarVolume, labels: LabelVolume, sub: Subdomain, mask: BrainMask = None,
                    min_class_voxels: int = 10):
    """In-mask T1w mean over the core box and the GM/WM CNR (None if a class is scarce).

    Raises InfiniteCnr when both classes are noiseless but distinct.
    """
    sl = sub.core_box.slices()
    m = mask.data[sl] if mask is not None else labels.data[sl] != 0
    if not m.any():
        raise DegenerateError(f"subdomain {sub.id} holds no brain voxels")
    vals = t1w.data[sl].astype(np.float64)
    mean = float(vals[m].mean())
    lab = labels.data[sl]
    gm = vals[(lab == GM) & m]
    wm = vals[(lab == WM) & m]
    if gm.size < min_class_voxels or wm.size < min_class_voxels:
        return mean, None
    try:
        value = _cnr(gm.mean(), wm.mean(), gm.std(), wm.std())
    except DegenerateError:
        value = 0.0
    return mean, value
