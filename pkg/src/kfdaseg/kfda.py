"""Two-class kernel Fisher discriminants and the two-stage tissue classifier.

Stage 1 separates CSF from G+WM with a sigmoid kernel; stage 2 separates GM
from WM with a Gaussian RBF kernel. The discriminant direction is found by the
regularised solve ``(N + mu' I) alpha = M+ - M-`` in the span of the training
samples.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .errors import (ClassAbsent, ConfigError, DegenerateError, DimensionError,
                     SingularError, ValidationError)
from .volume import BG, CSF, GM, MWM, WM, Box, LabelVolume, MultiChannelVolume

log = logging.getLogger(__name__)

PROTOTYPE, INTERIOR, OVERLAPPING, OUTLIER = 0, 1, 2, 3
CATEGORY_NAMES = {PROTOTYPE: "prototype", INTERIOR: "interior",
                  OVERLAPPING: "overlapping", OUTLIER: "outlier"}


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    a: float = 1.0
    b: float = -1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sigmoid", "rbf", "linear"):
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and not self.sigma > 0:
            raise ValidationError("rbf kernel needs sigma > 0")
        if self.kind == "sigmoid" and self.a == 0:
            raise ValidationError("sigmoid kernel needs a != 0")

    def to_dict(self):
        if self.kind == "sigmoid":
            return {"kernel": "sigmoid", "a": self.a, "b": self.b}
        if self.kind == "rbf":
            return {"kernel": "rbf", "sigma": self.sigma}
        return {"kernel": "linear"}


def kernel_eval(spec: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"vector shapes differ: {x.shape} vs {y.shape}")
    if spec.kind == "linear":
        return float(x @ y)
    if spec.kind == "sigmoid":
        return float(np.tanh(spec.a * (x @ y) + spec.b))
    d = x - y
    return float(np.exp(-(d @ d) / (2.0 * spec.sigma ** 2)))


def kernel_cross(spec: KernelSpec, X, Y) -> np.ndarray:
    """Kernel values between the rows of X (m, d) and Y (n, d)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise DimensionError(f"feature dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.kind == "rbf":
        d2 = (X ** 2).sum(1)[:, None] + (Y ** 2).sum(1)[None, :] - 2.0 * X @ Y.T
        np.maximum(d2, 0.0, out=d2)
        return np.exp(-d2 / (2.0 * spec.sigma ** 2))
    g = X @ Y.T
    if spec.kind == "sigmoid":
        return np.tanh(spec.a * g + spec.b)
    return g


def kernel_matrix(spec: KernelSpec, samples) -> np.ndarray:
    S = np.asarray(samples, dtype=np.float64)
    n = S.shape[0]
    if n < 2:
        raise ValidationError("kernel matrix needs at least two samples")
    if spec.kind == "rbf":
        d2 = np.zeros((n, n))
        iu = np.triu_indices(n, 1)
        d2[iu] = pdist(S, "sqeuclidean")
        K = np.exp(-d2 / (2.0 * spec.sigma ** 2))
    else:
        K = kernel_cross(spec, S, S)
    # mirror the upper triangle so K is symmetric bit for bit
    return np.triu(K) + np.triu(K, 1).T


def median_sigma(samples) -> float:
    """Median pairwise Euclidean distance of the samples.

    When most pairs coincide (near noiseless data) the median of the non-zero
    distances is used instead.
    """
    d = pdist(np.asarray(samples, dtype=np.float64))
    sigma = float(np.median(d)) if d.size else 0.0
    if not sigma > 0 and np.any(d > 0):
        sigma = float(np.median(d[d > 0]))
    if not sigma > 0:
        raise DegenerateError("median pairwise distance is zero; cannot set rbf width")
    return sigma


@dataclass
class TrainingSet:
    samples: np.ndarray        # (n, d) intensity vectors
    labels: np.ndarray         # +1 for class A, -1 for class B
    coords: np.ndarray         # (n, 3) absolute voxel coordinates

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(len(self.labels), -1)
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValidationError("samples and labels differ in length")
        if not set(np.unique(self.labels)) <= {-1, 1}:
            raise ValidationError("labels must be +1 or -1")
        if (self.labels == 1).sum() == 0 or (self.labels == -1).sum() == 0:
            raise ValidationError("both classes must be non-empty")


@dataclass
class DiscriminantModel:
    kernel: KernelSpec
    samples: np.ndarray
    sample_labels: np.ndarray
    alpha: np.ndarray
    threshold: float
    m_pos: float
    s_pos: float
    m_neg: float
    s_neg: float
    mu: float

    @property
    def s_pooled(self) -> float:
        return float(np.sqrt((self.s_pos ** 2 + self.s_neg ** 2) / 2.0))

    def summary(self):
        return {**self.kernel.to_dict(), "n": int(len(self.alpha)), "threshold": self.threshold,
                "m_pos": self.m_pos, "s_pos": self.s_pos, "m_neg": self.m_neg,
                "s_neg": self.s_neg, "mu": self.mu}


def train_discriminant(ts: TrainingSet, spec: KernelSpec, mu: float = 1e-3) -> DiscriminantModel:
    """Fit a kernel Fisher discriminant; class A (+1) projects above the threshold."""
    if mu < 0:
        raise ValidationError("mu must be non-negative")
    pos = ts.labels == 1
    neg = ~pos
    if pos.sum() < 2 or neg.sum() < 2:
        raise ValidationError("each class needs at least two samples")
    K = kernel_matrix(spec, ts.samples)
    n = K.shape[0]
    m_plus = K[:, pos].mean(axis=1)
    m_minus = K[:, neg].mean(axis=1)
    diff = m_plus - m_minus
    if np.max(np.abs(diff)) <= 1e-12 * max(1.0, np.max(np.abs(K))):
        raise DegenerateError("class means coincide in feature space")
    # sum_j K_j (I - 1/n_j) K_j^T = K K^T - sum_j n_j M_j M_j^T
    N = K @ K.T - pos.sum() * np.outer(m_plus, m_plus) - neg.sum() * np.outer(m_minus, m_minus)
    N = (N + N.T) / 2.0
    trace = float(np.trace(N))
    scale = trace
    if not trace > 1e-12 * float(np.sum(K * K)):
        # point-mass classes: no within-class spread to scale by, fall back to
        # the total feature-space energy so the solve tends to the mean difference
        scale = float(np.sum(K * K))
    reg = mu * scale / n
    A = N + reg * np.eye(n)
    if mu == 0 and np.linalg.cond(A) > 1e12:
        raise SingularError("within-class scatter is singular; use mu > 0")
    try:
        alpha = np.linalg.solve(A, diff)
    except np.linalg.LinAlgError as exc:
        raise SingularError("within-class scatter is singular; use mu > 0") from exc
    y = K @ alpha
    m_pos, m_neg = float(y[pos].mean()), float(y[neg].mean())
    if m_pos == m_neg:
        raise DegenerateError("projected class means coincide")
    if m_pos < m_neg:
        alpha = -alpha
        y = -y
        m_pos, m_neg = -m_pos, -m_neg
    return DiscriminantModel(
        kernel=spec, samples=ts.samples.copy(), sample_labels=ts.labels.copy(), alpha=alpha,
        threshold=(m_pos + m_neg) / 2.0, m_pos=m_pos, s_pos=float(y[pos].std()),
        m_neg=m_neg, s_neg=float(y[neg].std()), mu=mu)


def project(model: DiscriminantModel, x) -> np.ndarray:
    """Discriminant projection of one vector (returns a float) or of rows of an array."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.samples.shape[1]:
        raise DimensionError(f"expected {model.samples.shape[1]} channels, got {X.shape[1]}")
    y = np.empty(X.shape[0])
    for start in range(0, X.shape[0], 4096):  # bound the cross-kernel block size
        block = X[start:start + 4096]
        y[start:start + len(block)] = kernel_cross(model.kernel, block, model.samples) @ model.alpha
    return float(y[0]) if single else y


def _margins(model: DiscriminantModel, y):
    sp = model.s_pooled
    d = np.asarray(y, dtype=np.float64) - model.threshold
    if sp > 0:
        return d / sp
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(d == 0, 0.0, np.sign(d) * np.inf)


def classify_binary(model: DiscriminantModel, x):
    """Return ``(is_class_a, margin)``; ties at the threshold go to class A."""
    y = project(model, x)
    margin = _margins(model, y)
    is_a = np.asarray(y) >= model.threshold
    if np.ndim(y) == 0:
        return bool(is_a), float(margin)
    return is_a, margin


def categorize_voxels(model: DiscriminantModel, X, is_prototype=None, delta: float = 0.5,
                      k_vote: int = 9):
    """Tag voxels and resolve overlapping ones by a prototype vote.

    Returns ``(categories, is_class_a, projections)``. Overlapping voxels take
    the majority class of their ``k_vote`` nearest training samples in
    intensity space; a tied vote keeps the discriminant decision.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = project(model, X)
    margin = _margins(model, y)
    is_a = y >= model.threshold
    cat = np.full(len(y), INTERIOR, dtype=np.int8)
    class_mean = np.where(is_a, model.m_pos, model.m_neg)
    class_std = np.where(is_a, model.s_pos, model.s_neg)
    cat[np.abs(y - class_mean) > 3.0 * class_std] = OUTLIER
    overlapping = np.abs(margin) <= delta
    cat[overlapping] = OVERLAPPING
    if is_prototype is not None:
        cat[np.asarray(is_prototype, dtype=bool)] = PROTOTYPE
    vote_idx = np.flatnonzero(cat == OVERLAPPING)
    if vote_idx.size:
        k = min(k_vote, len(model.samples))
        _, nn = cKDTree(model.samples).query(X[vote_idx], k=k)
        nn = np.asarray(nn).reshape(len(vote_idx), k)
        votes = model.sample_labels[nn].sum(axis=1)
        decided = votes != 0
        is_a = is_a.copy()
        is_a[vote_idx[decided]] = votes[decided] > 0
    return cat, is_a, y


# ------------------------------------------------------------ tissue stages

STAGE_CLASSES = {1: ((CSF,), (GM, WM, MWM)), 2: ((GM,), (WM,))}


@dataclass
class StageConfig:
    kernel: str
    a: float = 1.0
    b: float = -1.0
    sigma: object = "median"   # "median" or a positive number
    channels: Tuple[str, ...] = ("T1w", "T2w", "PDw")

    def kernel_spec(self, samples=None) -> KernelSpec:
        if self.kernel == "rbf":
            sigma = median_sigma(samples) if self.sigma == "median" else float(self.sigma)
            return KernelSpec("rbf", sigma=sigma)
        return KernelSpec(self.kernel, a=self.a, b=self.b)

    def to_dict(self):
        d = {"kernel": self.kernel, "channels": list(self.channels)}
        if self.kernel == "sigmoid":
            d.update(a=self.a, b=self.b)
        elif self.kernel == "rbf":
            d["sigma"] = self.sigma
        return d


@dataclass
class KfdaParams:
    stage1: StageConfig = field(default_factory=lambda: StageConfig("sigmoid", a=1.0, b=-1.0))
    stage2: StageConfig = field(default_factory=lambda: StageConfig("rbf", sigma="median"))
    mu: float = 1e-3
    n_max: int = 1500
    delta: float = 0.5
    k_vote: int = 9

    def __post_init__(self):
        if isinstance(self.stage1, dict):
            self.stage1 = _stage_from_dict(self.stage1)
        if isinstance(self.stage2, dict):
            self.stage2 = _stage_from_dict(self.stage2)
        if self.mu < 0 or self.n_max < 2 or self.delta < 0 or self.k_vote < 1:
            raise ConfigError("kfda parameters out of range")

    def to_dict(self):
        return {"stage1": self.stage1.to_dict(), "stage2": self.stage2.to_dict(), "mu": self.mu,
                "n_max": self.n_max, "delta": self.delta, "k_vote": self.k_vote}


def _stage_from_dict(d) -> StageConfig:
    d = dict(d)
    if "channels" in d:
        d["channels"] = tuple(d["channels"])
    try:
        cfg = StageConfig(**d)
        if cfg.kernel not in ("sigmoid", "rbf", "linear"):
            raise ConfigError(f"unknown kernel {cfg.kernel!r}")
        if cfg.kernel == "rbf" and cfg.sigma != "median" and not float(cfg.sigma) > 0:
            raise ConfigError("sigma must be 'median' or positive")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


_STRUCT6 = ndimage.generate_binary_structure(3, 1)


def _region_prototypes(region: np.ndarray, n_max: int, rng) -> np.ndarray:
    eroded = ndimage.binary_erosion(region, _STRUCT6, border_value=1)
    if eroded.sum() < 2:  # too thin to survive erosion
        eroded = region
    idx = np.flatnonzero(eroded)
    if idx.size > n_max:
        idx = np.sort(rng.choice(idx, size=n_max, replace=False))
    return idx


def select_prototypes(init_labels: LabelVolume, sub, volume: MultiChannelVolume, stage: int,
                      n_max: int = 1500, seed=0, channels: Sequence[str] = None,
                      exclude: np.ndarray = None) -> TrainingSet:
    """Eroded, subsampled class prototypes inside a subdomain's overlap box.

    ``exclude`` (boolean, overlap-box shaped) removes voxels from both classes.
    Raises ClassAbsent when a stage class has fewer than two voxels.
    """
    box: Box = getattr(sub, "overlap_box", sub)
    sl = box.slices()
    lab = init_labels.data[sl]
    eligible = volume.mask.data[sl].copy()
    if exclude is not None:
        eligible &= ~exclude
    cls_a, cls_b = STAGE_CLASSES[stage]
    region_a = np.isin(lab, cls_a) & eligible
    region_b = np.isin(lab, cls_b) & eligible
    for name, region in (("A", region_a), ("B", region_b)):
        if region.sum() < 2:
            missing = "CSF" if (stage, name) == (1, "A") else "G+WM" if stage == 1 else (
                "GM" if name == "A" else "WM")
            raise ClassAbsent(stage, missing)
    rng = np.random.default_rng(seed)
    idx_a = _region_prototypes(region_a, n_max, rng)
    idx_b = _region_prototypes(region_b, n_max, rng)
    idx = np.concatenate([idx_a, idx_b])
    local = np.stack(np.unravel_index(idx, box.shape), axis=1)
    coords = local + np.asarray(box.lo)
    names = tuple(channels) if channels is not None else volume.names
    samples = np.stack([volume.channels[c].data[tuple(coords.T)].astype(np.float64)
                        for c in names], axis=1)
    labels = np.concatenate([np.ones(len(idx_a), np.int64), -np.ones(len(idx_b), np.int64)])
    return TrainingSet(samples, labels, coords)


@dataclass
class SubdomainResult:
    sub_id: int
    box: Box
    labels: np.ndarray                     # overlap-box shaped uint8
    events: List[str] = field(default_factory=list)
    categories: Dict[str, Dict[str, int]] = field(default_factory=dict)
    models: Dict[str, dict] = field(default_factory=dict)


def _check_channels(volume, names):
    missing = [c for c in names if c not in volume.channels]
    if missing:
        raise ConfigError(f"channels {missing} required by a KFDA stage are not loaded")


def _run_stage(stage, volume, sub, init_labels, cfg: StageConfig, params: KfdaParams, seed,
               target, exclude, result):
    """Train one stage and classify ``target`` voxels; returns (is_a, cat) or None if skipped."""
    box = sub.overlap_box
    try:
        ts = select_prototypes(init_labels, sub, volume, stage, params.n_max,
                               seed=seed, channels=cfg.channels, exclude=exclude)
    except ClassAbsent as exc:
        result.events.append(f"subdomain {sub.id}: stage {stage} skipped ({exc.missing} absent)")
        return None
    try:
        spec = cfg.kernel_spec(ts.samples)
        model = train_discriminant(ts, spec, params.mu)
    except (DegenerateError, SingularError) as exc:
        result.events.append(f"subdomain {sub.id}: stage {stage} skipped ({exc})")
        return None
    sl = box.slices()
    X = np.stack([volume.channels[c].data[sl][target].astype(np.float64) for c in cfg.channels],
                 axis=1)
    proto = np.zeros(box.shape, dtype=bool)
    local = ts.coords - np.asarray(box.lo)
    proto[tuple(local.T)] = True
    cat, is_a, _ = categorize_voxels(model, X, proto[target], params.delta, params.k_vote)
    counts = np.bincount(cat, minlength=4)
    result.categories[f"stage{stage}"] = {CATEGORY_NAMES[c]: int(counts[c]) for c in CATEGORY_NAMES}
    result.models[f"stage{stage}"] = model.summary()
    return is_a


def classify_subdomain(volume: MultiChannelVolume, sub, init_labels: LabelVolume,
                       params: KfdaParams = None, seed=0) -> SubdomainResult:
    """Two-stage classification of one subdomain over its overlap box.

    ``volume`` must hold normalized channels. MWM voxels in the initialization
    are held fixed. A stage whose classes are absent is skipped and the
    initialization is kept for its voxels.
    """
    params = params or KfdaParams()
    _check_channels(volume, params.stage1.channels)
    _check_channels(volume, params.stage2.channels)
    box = getattr(sub, "overlap_box", None)
    if box is None or not box.within(volume.dims):
        raise DimensionError("subdomain outside the volume")
    sl = box.slices()
    mask = volume.mask.data[sl]
    init = init_labels.data[sl]
    labels = init.copy()
    labels[~mask] = BG
    result = SubdomainResult(sub.id, box, labels)
    fixed = (init == MWM) | ~mask
    rng_seeds = np.random.SeedSequence([int(s) for s in np.atleast_1d(seed)] + [sub.id])
    s1, s2 = rng_seeds.spawn(2)

    # stage 1: CSF vs G+WM
    target1 = ~fixed
    is_csf = _run_stage(1, volume, sub, init_labels, params.stage1, params, s1, target1,
                        fixed, result)
    if is_csf is not None:
        was_csf = labels[target1] == CSF
        new = labels[target1]
        new[is_csf] = CSF
        # voxels leaving CSF get GM until stage 2 decides
        new[~is_csf & was_csf] = GM
        labels[target1] = new

    # stage 2: GM vs WM over the non-CSF tissue
    target2 = ~fixed & (labels != CSF)
    if target2.any():
        exclude2 = fixed | (labels == CSF)
        is_gm = _run_stage(2, volume, sub, init_labels, params.stage2, params, s2, target2,
                           exclude2, result)
        if is_gm is not None:
            labels[target2] = np.where(is_gm, GM, WM)
    labels[~mask] = BG
    result.labels = labels.astype(np.uint8)
    return result
