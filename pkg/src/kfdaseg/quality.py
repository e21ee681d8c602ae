"""Classification quality: class-mean painting, masked SSIM/MSSIM and Dice."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DegenerateError, DimensionError, ValidationError
from .volume import BG, CSF, GM, LABEL_NAMES, MWM, WM, BrainMask, LabelVolume, ScalarVolume


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-r ** 2 / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


@dataclass
class SsimParams:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: Optional[float] = None   # None: in-mask max - min of the reference

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValidationError("window_size must be a positive odd number")
        if not (self.k1 > 0 and self.k2 > 0 and self.window_sigma > 0):
            raise ValidationError("k1, k2 and window_sigma must be positive")

    @property
    def window(self) -> np.ndarray:
        return gaussian_window(self.window_size, self.window_sigma)


def _local_mean(img, win):
    # zero padding: everything outside the slice counts as background
    return ndimage.correlate(img, win, mode="constant", cval=0.0)


def ssim_map(ref_slice, test_slice, mask_slice=None, p: SsimParams = None,
             dynamic_range: float = None) -> np.ndarray:
    """Per-pixel SSIM; pixels whose window centre is outside the mask are NaN."""
    p = p or SsimParams()
    x = np.asarray(ref_slice, dtype=np.float64)
    y = np.asarray(test_slice, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise DimensionError("SSIM needs two equally shaped 2D images")
    L = dynamic_range if dynamic_range is not None else p.dynamic_range
    if L is None:
        sel = x[mask_slice] if mask_slice is not None else x
        L = float(sel.max() - sel.min()) if sel.size else 0.0
    if not L > 0:
        raise ValidationError("dynamic range must be positive")
    c1 = (p.k1 * L) ** 2
    c2 = (p.k2 * L) ** 2
    win = p.window
    mx, my = _local_mean(x, win), _local_mean(y, win)
    sxx = _local_mean(x * x, win) - mx * mx
    syy = _local_mean(y * y, win) - my * my
    sxy = _local_mean(x * y, win) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    if mask_slice is not None:
        s = np.where(mask_slice, s, np.nan)
    return s


def reference_range(ref: ScalarVolume, mask: BrainMask) -> float:
    vals = ref.data[mask.data]
    if vals.size == 0:
        raise DegenerateError("empty mask")
    return float(vals.max()) - float(vals.min())


def mssim(ref: ScalarVolume, test: ScalarVolume, mask: BrainMask, p: SsimParams = None,
          return_maps: bool = False):
    """Mean SSIM over every in-mask window centre of all axial slices."""
    p = p or SsimParams()
    if ref.dims != test.dims or ref.dims != mask.dims:
        raise DimensionError("volumes and mask must share dims")
    if not mask.data.any():
        raise DegenerateError("empty mask")
    L = p.dynamic_range if p.dynamic_range is not None else reference_range(ref, mask)
    values = []
    maps = np.full(ref.dims, np.nan) if return_maps else None
    for z in range(ref.dims[2]):
        m = mask.data[:, :, z]
        if not m.any():
            continue
        s = ssim_map(ref.data[:, :, z], test.data[:, :, z], m, p, dynamic_range=L)
        values.append(s[m])
        if return_maps:
            maps[:, :, z] = s
    score = float(np.mean(np.concatenate(values)))
    return (score, maps) if return_maps else score


def render_classified(labels: LabelVolume, reference: ScalarVolume, mask: BrainMask = None,
                      references: Dict[int, ScalarVolume] = None) -> ScalarVolume:
    """Paint each class with its mean reference intensity (0 outside the mask).

    ``references`` optionally maps a class code to its own reference volume;
    classes not listed use ``reference``.
    """
    m = mask.data if mask is not None else labels.data != BG
    out = np.zeros(labels.dims, dtype=np.float64)
    for code in np.unique(labels.data[m]):
        sel = m & (labels.data == code)
        ref = (references or {}).get(int(code), reference)
        out[sel] = ref.data[sel].astype(np.float64).mean()
    return ScalarVolume(out, reference.voxel_size)


def dice(a: LabelVolume, b: LabelVolume, cls: int) -> float:
    if a.dims != b.dims:
        raise DimensionError("label volumes differ in dims")
    A = a.data == cls
    B = b.data == cls
    denom = int(A.sum()) + int(B.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(A & B)) / denom


AGE_PROFILES = ("older", "infant", "early")

_REFERENCE_TABLE = {
    "older": {CSF: "T1w", GM: "T1w", WM: "T1w", MWM: "T1w"},
    "infant": {CSF: "T1w", GM: "T2w", WM: "T2w", MWM: "T2w"},
    "early": {CSF: "T1w", GM: "T2w", WM: "T2w", MWM: "PDw-T1w"},
}


def reference_name(cls: int, age_profile: str) -> str:
    if age_profile not in _REFERENCE_TABLE:
        raise ConfigError(f"unknown age profile {age_profile!r}")
    return _REFERENCE_TABLE[age_profile][cls]


def reference_for_class(cls: int, age_profile: str, channels: Dict[str, ScalarVolume]) -> ScalarVolume:
    """Reference image against which class ``cls`` is judged for an age profile."""
    name = reference_name(cls, age_profile)
    if name == "PDw-T1w":
        if "PDw" not in channels or "T1w" not in channels:
            raise ConfigError("the PDw-T1w reference needs both PDw and T1w")
        diff = channels["PDw"].data.astype(np.float64) - channels["T1w"].data.astype(np.float64)
        return ScalarVolume(diff, channels["T1w"].voxel_size)
    if name not in channels:
        raise ConfigError(f"reference channel {name} is not loaded")
    return channels[name]


@dataclass
class QualityReport:
    mssim_before: Optional[float] = None
    mssim_after: Optional[float] = None
    mssim_by_reference: Dict[str, Dict[str, float]] = field(default_factory=dict)
    dice: Dict[str, float] = field(default_factory=dict)
    dice_before: Dict[str, float] = field(default_factory=dict)
    class_volumes: Dict[str, int] = field(default_factory=dict)
    class_volumes_before: Dict[str, int] = field(default_factory=dict)
    cnr_map: List[dict] = field(default_factory=list)
    events: List[str] = field(default_factory=list)
    refinement: List[dict] = field(default_factory=list)
    extra: Dict[str, object] = field(default_factory=dict)

    def validate(self, mask_size: int = None):
        for v in (self.mssim_before, self.mssim_after):
            if v is not None and not -1.0 <= v <= 1.0:
                raise ValidationError(f"MSSIM {v} outside [-1, 1]")
        for v in self.dice.values():
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"Dice {v} outside [0, 1]")
        if mask_size is not None and sum(self.class_volumes.values()) != mask_size:
            raise ValidationError("class volumes do not sum to the mask size")

    def to_dict(self):
        d = asdict(self)
        d["label_codes"] = {str(k): v for k, v in LABEL_NAMES.items()}
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def class_volumes(labels: LabelVolume, mask: BrainMask = None) -> Dict[str, int]:
    data = labels.data if mask is None else labels.data[mask.data]
    counts = np.bincount(data.ravel(), minlength=MWM + 1)
    return {LABEL_NAMES[c]: int(counts[c]) for c in (CSF, GM, WM, MWM) if counts[c] or c != MWM}
