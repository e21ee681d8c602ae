"""Synthetic multi-channel brain phantoms with ground-truth labels."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from .errors import DegenerateError, DimensionError, InfiniteCnr, ValidationError
from .volume import (BG, CHANNELS, CSF, GM, MWM, WM, BrainMask, LabelVolume,
                     MultiChannelVolume, ScalarVolume)

_CLASS_KEYS = {"CSF": CSF, "GM": GM, "WM": WM, "MWM": MWM}


def _default_means():
    # T1w, T2w, PDw
    return {"CSF": [0.15, 0.90, 0.85], "GM": [0.50, 0.60, 0.65],
            "WM": [0.70, 0.40, 0.50], "MWM": [0.80, 0.30, 0.70]}


def _default_stds():
    return {k: [0.1, 0.1, 0.1] for k in ("CSF", "GM", "WM", "MWM")}


@dataclass
class PhantomSpec:
    """Parameters of a nested-ellipsoid phantom.

    Radii are fractions of the half-extent along each axis, so the same spec
    scales to any grid. ``mwm_radius`` plants an optional myelinated-WM core
    inside the WM ellipsoid (0 disables it).
    """

    dims: Tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    tissue_means: Dict[str, List[float]] = field(default_factory=_default_means)
    tissue_stds: Dict[str, List[float]] = field(default_factory=_default_stds)
    bias_amplitude: float = 0.0
    streak_count: int = 0
    streak_radius: float = 1.0
    streak_factor: float = 0.85
    csf_radius: float = 0.9
    gm_radius: float = 0.75
    wm_radius: float = 0.5
    mwm_radius: float = 0.0
    channels: Tuple[str, ...] = CHANNELS
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.channels = tuple(self.channels)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.validate()

    def validate(self):
        if len(self.dims) != 3:
            raise ValidationError("dims must have three entries")
        if not set(self.channels) <= set(CHANNELS) or not self.channels:
            raise ValidationError(f"channels must be a non-empty subset of {CHANNELS}")
        for key in ("CSF", "GM", "WM"):
            if key not in self.tissue_means or key not in self.tissue_stds:
                raise ValidationError(f"missing tissue parameters for {key}")
        for key, means in self.tissue_means.items():
            if len(means) != len(CHANNELS) or any(not 0.0 <= m <= 1.0 for m in means):
                raise ValidationError(f"{key} means must be three values in [0, 1]")
        for key, stds in self.tissue_stds.items():
            if len(stds) != len(CHANNELS) or any(s < 0 for s in stds):
                raise ValidationError(f"{key} stds must be three non-negative values")
        if not 0.0 <= self.bias_amplitude <= 0.5:
            raise ValidationError("bias_amplitude must lie in [0, 0.5]")
        if not 1.0 >= self.csf_radius > self.gm_radius > self.wm_radius > 0:
            raise ValidationError("radii must satisfy 1 >= csf > gm > wm > 0")
        if not 0 <= self.mwm_radius < self.wm_radius:
            raise ValidationError("mwm_radius must lie in [0, wm_radius)")
        if self.mwm_radius > 0 and "MWM" not in self.tissue_means:
            raise ValidationError("MWM core requested without MWM tissue parameters")
        if self.streak_count < 0 or self.streak_radius <= 0:
            raise ValidationError("invalid streak parameters")

    @classmethod
    def from_dict(cls, data) -> "PhantomSpec":
        data = dict(data)
        for key in ("tissue_means", "tissue_stds"):
            if key in data:
                merged = _default_means() if key == "tissue_means" else _default_stds()
                merged.update(data[key])
                data[key] = merged
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["channels"] = list(self.channels)
        d["voxel_size"] = list(self.voxel_size)
        return d


def _ellipsoid_radius(dims) -> np.ndarray:
    """Normalized ellipsoidal radius of every voxel centre (1.0 at the half-extent)."""
    axes = [(np.arange(n) - (n - 1) / 2.0) / (n / 2.0) for n in dims]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.sqrt(gx ** 2 + gy ** 2 + gz ** 2)


def ground_truth_labels(spec: PhantomSpec) -> np.ndarray:
    if min(spec.dims) < 8 or spec.wm_radius * min(spec.dims) / 2.0 < 1.0:
        raise DimensionError(f"dims {spec.dims} too small for the phantom geometry")
    r = _ellipsoid_radius(spec.dims)
    labels = np.full(spec.dims, BG, dtype=np.uint8)
    labels[r <= spec.csf_radius] = CSF
    labels[r <= spec.gm_radius] = GM
    labels[r <= spec.wm_radius] = WM
    if spec.mwm_radius > 0:
        labels[r <= spec.mwm_radius] = MWM
    return labels


def bias_field(spec: PhantomSpec) -> np.ndarray:
    """Separable quadratic multiplicative drift with peak deviation ``bias_amplitude``."""
    if spec.bias_amplitude == 0:
        return np.ones(spec.dims)
    rng = np.random.default_rng([spec.seed, 1])
    coeffs = rng.uniform(-1.0, 1.0, size=(3, 2))
    # a guaranteed linear x term so left and right halves always differ
    coeffs[0, 0] = 1.0
    g = np.zeros(spec.dims)
    for axis, n in enumerate(spec.dims):
        u = np.linspace(-1.0, 1.0, n)
        poly = coeffs[axis, 0] * u + coeffs[axis, 1] * (u ** 2 - 1.0 / 3.0)
        shape = [1, 1, 1]
        shape[axis] = n
        g = g + poly.reshape(shape)
    g /= np.abs(g).max()
    return 1.0 + spec.bias_amplitude * g


def streak_mask(spec: PhantomSpec, labels: np.ndarray) -> np.ndarray:
    """Thin axis-parallel cylinders restricted to WM voxels."""
    out = np.zeros(spec.dims, dtype=bool)
    if spec.streak_count == 0:
        return out
    rng = np.random.default_rng([spec.seed, 2])
    grids = np.meshgrid(*[np.arange(n) for n in spec.dims], indexing="ij")
    for _ in range(spec.streak_count):
        axis = int(rng.integers(3))
        others = [a for a in range(3) if a != axis]
        centre = [rng.uniform(0.35, 0.65) * spec.dims[a] for a in others]
        d2 = sum((grids[a] - c) ** 2 for a, c in zip(others, centre))
        out |= d2 <= spec.streak_radius ** 2
    return out & (labels == WM)


def generate_phantom(spec: PhantomSpec):
    """Return ``(MultiChannelVolume, LabelVolume)`` for ``spec``.

    Noise is drawn in one pass from a Philox stream keyed by the seed, so the
    output depends on nothing but the spec.
    """
    spec.validate()
    labels = ground_truth_labels(spec)
    mask = labels != BG
    bias = bias_field(spec)
    streaks = streak_mask(spec, labels)
    noise = np.random.Generator(np.random.Philox(key=spec.seed)).standard_normal(
        (len(CHANNELS),) + spec.dims)
    channels = {}
    for ci, name in enumerate(CHANNELS):
        if name not in spec.channels:
            continue
        mean = np.zeros(spec.dims)
        std = np.zeros(spec.dims)
        for key, code in _CLASS_KEYS.items():
            if key not in spec.tissue_means:
                continue
            sel = labels == code
            mean[sel] = spec.tissue_means[key][ci]
            std[sel] = spec.tissue_stds[key][ci]
        mean[streaks] *= spec.streak_factor
        data = mean * bias + std * noise[ci]
        data = np.clip(data, 0.0, 1.0)
        data[~mask] = 0.0
        channels[name] = ScalarVolume(data, spec.voxel_size)
    vol = MultiChannelVolume(channels, BrainMask(mask, spec.voxel_size))
    return vol, LabelVolume(labels, spec.voxel_size)


def cnr(mean_gm, mean_wm, std_gm, std_wm) -> float:
    """GM/WM contrast-to-noise ratio with pooled noise."""
    pooled = math.sqrt((std_gm ** 2 + std_wm ** 2) / 2.0)
    diff = abs(mean_wm - mean_gm)
    if pooled == 0:
        if diff == 0:
            raise DegenerateError("equal means and zero noise: CNR undefined")
        raise InfiniteCnr(f"zero noise with contrast {diff}")
    return diff / pooled


def phantom_cnr(spec: PhantomSpec, channel: str = "T1w") -> float:
    ci = CHANNELS.index(channel)
    return cnr(spec.tissue_means["GM"][ci], spec.tissue_means["WM"][ci],
               spec.tissue_stds["GM"][ci], spec.tissue_stds["WM"][ci])


def degrade_labels(truth: LabelVolume, erode_csf: int = 0, swap_fraction: float = 0.0,
                   seed: int = 0) -> LabelVolume:
    """Synthesize a flawed initialization from ground truth.

    ``erode_csf`` peels that many layers of CSF bordering GM/WM and relabels
    them GM (partial-volume style underestimation). ``swap_fraction`` flips
    that share of GM/WM voxels to the other class.
    """
    lab = truth.data.copy()
    struct = ndimage.generate_binary_structure(3, 1)
    for _ in range(int(erode_csf)):
        tissue = (lab == GM) | (lab == WM) | (lab == MWM)
        border = (lab == CSF) & ndimage.binary_dilation(tissue, struct)
        lab[border] = GM
    if swap_fraction > 0:
        rng = np.random.default_rng([seed, 3])
        gmwm = np.flatnonzero((lab == GM) | (lab == WM))
        n_swap = int(round(swap_fraction * gmwm.size))
        pick = np.sort(rng.choice(gmwm, size=n_swap, replace=False))
        flat = lab.reshape(-1)
        flat[pick] = np.where(flat[pick] == GM, WM, GM)
    return LabelVolume(lab, truth.voxel_size)


def low_contrast_spec(**overrides) -> PhantomSpec:
    """T1w GM/WM CNR 1 phantom used for CSF-recovery experiments."""
    means = _default_means()
    means["GM"] = [0.50, 0.55, 0.62]
    means["WM"] = [0.60, 0.45, 0.55]
    params = dict(tissue_means=means, bias_amplitude=0.1, streak_count=2, seed=11)
    params.update(overrides)
    return PhantomSpec(**params)
