"""Volume data model, NIfTI-1 I/O and subvolume helpers.

Arrays are indexed ``[x, y, z]``; on disk voxels are written x-fastest as
NIfTI-1 requires.
"""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import (DegenerateError, DimensionError, FormatError, IoError,
                     UnsupportedError, ValidationError)

BG, CSF, GM, WM, MWM = 0, 1, 2, 3, 4
LABEL_NAMES = {BG: "BG", CSF: "CSF", GM: "GM", WM: "WM", MWM: "MWM"}
CHANNELS = ("T1w", "T2w", "PDw")

_DTYPES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}

HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "<i4"), ("data_type", "S10"), ("db_name", "S18"),
    ("extents", "<i4"), ("session_error", "<i2"), ("regular", "S1"),
    ("dim_info", "u1"), ("dim", "<i2", (8,)), ("intent_p1", "<f4"),
    ("intent_p2", "<f4"), ("intent_p3", "<f4"), ("intent_code", "<i2"),
    ("datatype", "<i2"), ("bitpix", "<i2"), ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)), ("vox_offset", "<f4"), ("scl_slope", "<f4"),
    ("scl_inter", "<f4"), ("slice_end", "<i2"), ("slice_code", "u1"),
    ("xyzt_units", "u1"), ("cal_max", "<f4"), ("cal_min", "<f4"),
    ("slice_duration", "<f4"), ("toffset", "<f4"), ("glmax", "<i4"),
    ("glmin", "<i4"), ("descrip", "S80"), ("aux_file", "S24"),
    ("qform_code", "<i2"), ("sform_code", "<i2"), ("quatern_b", "<f4"),
    ("quatern_c", "<f4"), ("quatern_d", "<f4"), ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"), ("qoffset_z", "<f4"), ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)), ("srow_z", "<f4", (4,)), ("intent_name", "S16"),
    ("magic", "S4"),
])
assert HEADER_DTYPE.itemsize == 348


def _as_voxel_size(voxel_size) -> Tuple[float, float, float]:
    vs = tuple(float(np.float32(v)) for v in voxel_size)
    if len(vs) != 3 or any(not v > 0 for v in vs):
        raise ValidationError(f"voxel_size must be three positive values, got {voxel_size}")
    return vs


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with inclusive voxel bounds."""

    lo: Tuple[int, int, int]
    hi: Tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        if any(h < l for l, h in zip(self.lo, self.hi)):
            raise ValidationError(f"empty box {self.lo}..{self.hi}")

    @classmethod
    def full(cls, dims) -> "Box":
        return cls((0, 0, 0), tuple(d - 1 for d in dims))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def slices(self):
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    def contains(self, other: "Box") -> bool:
        return all(a <= b for a, b in zip(self.lo, other.lo)) and \
            all(a >= b for a, b in zip(self.hi, other.hi))

    def within(self, dims) -> bool:
        return all(l >= 0 for l in self.lo) and all(h < d for h, d in zip(self.hi, dims))

    def intersect(self, other: "Box") -> Optional["Box"]:
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        if any(h < l for l, h in zip(lo, hi)):
            return None
        return Box(lo, hi)

    def shifted(self, offset) -> "Box":
        return Box(tuple(l + o for l, o in zip(self.lo, offset)),
                   tuple(h + o for h, o in zip(self.hi, offset)))

    def to_list(self):
        return [list(self.lo), list(self.hi)]

    @classmethod
    def from_list(cls, data) -> "Box":
        return cls(tuple(data[0]), tuple(data[1]))


class ScalarVolume:
    """Real-valued 3D grid. Data is held as float32, the on-disk scalar type."""

    def __init__(self, data, voxel_size=(1.0, 1.0, 1.0)):
        data = np.asarray(data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimensionError(f"expected a 3D array, got shape {data.shape}")
        data = np.ascontiguousarray(data, dtype=np.float32)
        data.setflags(write=False)
        self.data = data
        self.voxel_size = _as_voxel_size(voxel_size)

    @property
    def dims(self):
        return self.data.shape

    def __eq__(self, other):
        return (isinstance(other, ScalarVolume) and self.voxel_size == other.voxel_size
                and self.dims == other.dims
                and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32)))

    def __repr__(self):
        return f"ScalarVolume(dims={self.dims}, voxel_size={self.voxel_size})"


class BrainMask:
    def __init__(self, data, voxel_size=(1.0, 1.0, 1.0)):
        data = np.ascontiguousarray(np.asarray(data) != 0)
        if data.ndim != 3:
            raise DimensionError(f"expected a 3D mask, got shape {data.shape}")
        if not data.any():
            raise DegenerateError("brain mask has no interior voxel")
        data.setflags(write=False)
        self.data = data
        self.voxel_size = _as_voxel_size(voxel_size)

    @property
    def dims(self):
        return self.data.shape

    @property
    def count(self) -> int:
        return int(self.data.sum())


class LabelVolume:
    """Per-voxel tissue codes (see ``LABEL_NAMES``), stored as uint8."""

    def __init__(self, data, voxel_size=(1.0, 1.0, 1.0)):
        data = np.asarray(data)
        if data.ndim != 3:
            raise DimensionError(f"expected a 3D label array, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() > MWM):
            raise ValidationError("label codes must lie in 0..4")
        data = np.ascontiguousarray(data, dtype=np.uint8)
        data.setflags(write=False)
        self.data = data
        self.voxel_size = _as_voxel_size(voxel_size)

    @property
    def dims(self):
        return self.data.shape

    def count(self, code: int) -> int:
        return int(np.count_nonzero(self.data == code))

    def class_counts(self) -> Dict[int, int]:
        counts = np.bincount(self.data.ravel(), minlength=MWM + 1)
        return {c: int(counts[c]) for c in LABEL_NAMES}

    def __eq__(self, other):
        return (isinstance(other, LabelVolume) and self.dims == other.dims
                and self.voxel_size == other.voxel_size
                and np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"LabelVolume(dims={self.dims})"


@dataclass
class MultiChannelVolume:
    channels: Dict[str, ScalarVolume]
    mask: BrainMask
    voxel_size: Tuple[float, float, float] = field(init=False)

    def __post_init__(self):
        if not self.channels:
            raise ValidationError("at least one channel is required")
        unknown = set(self.channels) - set(CHANNELS)
        if unknown:
            raise ValidationError(f"unknown channels {sorted(unknown)}")
        # keep canonical T1w, T2w, PDw order
        self.channels = {c: self.channels[c] for c in CHANNELS if c in self.channels}
        for name, vol in self.channels.items():
            if vol.dims != self.mask.dims:
                raise DimensionError(f"channel {name} dims {vol.dims} != mask dims {self.mask.dims}")
            if vol.voxel_size != self.mask.voxel_size:
                raise DimensionError(f"channel {name} voxel size differs from mask")
        self.voxel_size = self.mask.voxel_size

    @property
    def dims(self):
        return self.mask.dims

    @property
    def names(self):
        return tuple(self.channels)

    def features(self, names=None, where=None) -> np.ndarray:
        """Stack channel intensities into an (n_voxels, n_channels) float64 array.

        ``where`` is a boolean array selecting voxels (default: the mask).
        """
        names = self.names if names is None else tuple(names)
        missing = [n for n in names if n not in self.channels]
        if missing:
            raise DimensionError(f"channels {missing} not present")
        where = self.mask.data if where is None else where
        return np.stack([self.channels[n].data[where].astype(np.float64) for n in names], axis=1)


# ---------------------------------------------------------------- NIfTI-1 I/O

def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise FormatError(f"{path}: corrupt gzip container") from exc
    return raw


def read_nifti(path):
    """Return ``(array, voxel_size, header)`` with scaling applied when present."""
    raw = _read_bytes(path)
    if len(raw) < 348:
        raise FormatError(f"{path}: truncated header")
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE)[0]
    if int(hdr["sizeof_hdr"]) != 348:
        raise FormatError(f"{path}: sizeof_hdr is {int(hdr['sizeof_hdr'])}, expected 348 "
                          "(big-endian files are not supported)")
    if bytes(hdr["magic"]) != b"n+1":  # numpy strips the trailing NUL
        raise FormatError(f"{path}: magic {bytes(hdr['magic'])!r} is not single-file NIfTI-1")
    dim = [int(d) for d in hdr["dim"]]
    if dim[0] != 3:
        raise DimensionError(f"{path}: dim[0] = {dim[0]}, only 3D volumes are supported")
    code = int(hdr["datatype"])
    if code not in _DTYPES:
        raise UnsupportedError(f"{path}: datatype code {code} is not supported")
    dims = tuple(dim[1:4])
    if min(dims) < 1:
        raise DimensionError(f"{path}: invalid dims {dims}")
    offset = int(hdr["vox_offset"])
    if offset < 352:
        raise FormatError(f"{path}: vox_offset {offset} < 352")
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise FormatError(f"{path}: voxel data truncated")
    flat = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=offset)
    arr = flat.reshape(dims, order="F")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        arr = arr.astype(np.float64) * slope + inter
    voxel_size = tuple(float(v) for v in hdr["pixdim"][1:4])
    return np.array(arr), voxel_size, hdr


def load_volume(path) -> ScalarVolume:
    arr, voxel_size, _ = read_nifti(path)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{path}: non-finite intensities")
    return ScalarVolume(arr.astype(np.float64), voxel_size)


def load_labels(path) -> LabelVolume:
    arr, voxel_size, _ = read_nifti(path)
    if np.any(arr != np.round(arr)):
        raise ValidationError(f"{path}: label volume holds non-integer values")
    return LabelVolume(arr.astype(np.int64), voxel_size)


def load_mask(path) -> BrainMask:
    arr, voxel_size, _ = read_nifti(path)
    return BrainMask(arr != 0, voxel_size)


def write_nifti(arr: np.ndarray, voxel_size, path, descrip: str = "") -> None:
    if arr.dtype == np.uint8:
        code = 2
    elif arr.dtype == np.int16:
        code = 4
    elif arr.dtype == np.float32:
        code = 16
    else:
        raise UnsupportedError(f"cannot write dtype {arr.dtype}")
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *arr.shape, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = arr.dtype.itemsize * 8
    hdr["pixdim"] = [1.0, *voxel_size, 0, 0, 0, 0]
    hdr["vox_offset"] = 352
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = descrip.encode("ascii", "replace")[:79]
    hdr["sform_code"] = 1
    hdr["srow_x"] = [voxel_size[0], 0, 0, 0]
    hdr["srow_y"] = [0, voxel_size[1], 0, 0]
    hdr["srow_z"] = [0, 0, voxel_size[2], 0]
    hdr["magic"] = b"n+1"
    payload = hdr.tobytes() + b"\x00" * 4 + np.asfortranarray(arr).tobytes(order="F")
    path = os.fspath(path)
    if path.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def save_volume(vol, path) -> None:
    """Write a ScalarVolume (float32), LabelVolume (uint8) or BrainMask (uint8)."""
    if isinstance(vol, ScalarVolume):
        if not np.all(np.isfinite(vol.data)):
            raise ValidationError("scalar volume contains non-finite voxels")
        write_nifti(vol.data.astype("<f4"), vol.voxel_size, path, "kfdaseg scalar")
    elif isinstance(vol, LabelVolume):
        write_nifti(vol.data, vol.voxel_size, path, "kfdaseg labels 0=BG 1=CSF 2=GM 3=WM 4=MWM")
    elif isinstance(vol, BrainMask):
        write_nifti(vol.data.astype(np.uint8), vol.voxel_size, path, "kfdaseg mask")
    else:
        raise TypeError(f"cannot save {type(vol).__name__}")


# ------------------------------------------------------------- manipulation

def extract_subvolume(vol: MultiChannelVolume, box) -> MultiChannelVolume:
    """Crop every channel and the mask to ``box`` (a Box or a Subdomain's overlap box)."""
    box = getattr(box, "overlap_box", box)
    if not box.within(vol.dims):
        raise DimensionError(f"box {box.lo}..{box.hi} exceeds volume dims {vol.dims}")
    sl = box.slices()
    mask = np.asarray(vol.mask.data[sl])
    channels = {n: ScalarVolume(v.data[sl], v.voxel_size) for n, v in vol.channels.items()}
    # a crop may legitimately hold no brain; bypass the non-empty check
    cropped_mask = BrainMask.__new__(BrainMask)
    cropped_mask.data = np.ascontiguousarray(mask)
    cropped_mask.voxel_size = vol.mask.voxel_size
    return MultiChannelVolume(channels, cropped_mask)


def normalize_channels(vol: MultiChannelVolume, low_pct=1.0, high_pct=99.0) -> MultiChannelVolume:
    """Map each channel's in-mask 1st/99th percentiles onto 0/1 and clamp."""
    m = vol.mask.data
    if not m.any():
        raise DegenerateError("empty mask")
    out = {}
    for name, ch in vol.channels.items():
        values = ch.data[m].astype(np.float64)
        # order statistics (not interpolated) keep the map exactly idempotent
        lo = np.percentile(values, low_pct, method="lower")
        hi = np.percentile(values, high_pct, method="higher")
        if not hi > lo:
            lo, hi = values.min(), values.max()
            if not hi > lo:
                raise DegenerateError(f"channel {name} is constant inside the mask")
        scaled = np.clip((ch.data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
        scaled[~m] = 0.0
        out[name] = ScalarVolume(scaled, ch.voxel_size)
    return MultiChannelVolume(out, vol.mask)
