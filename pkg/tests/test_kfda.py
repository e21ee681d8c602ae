import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kfdaseg.errors import ClassAbsent, ConfigError, DegenerateError, SingularError
from kfdaseg.kfda import (INTERIOR, OUTLIER, OVERLAPPING, PROTOTYPE, KernelSpec, KfdaParams,
                          TrainingSet, categorize_voxels, classify_binary, classify_subdomain,
                          kernel_eval, kernel_matrix, median_sigma, project, select_prototypes,
                          train_discriminant)
from kfdaseg.partition import Subdomain
from kfdaseg.phantom import PhantomSpec, degrade_labels, generate_phantom, low_contrast_spec
from kfdaseg.quality import dice
from kfdaseg.volume import CSF, GM, MWM, WM, Box, LabelVolume, normalize_channels

from conftest import make_volume
from oracles import gaussian_pair, lda_decision

LINEAR = KernelSpec("linear")


def training_set(Xa, Xb):
    X = np.vstack([Xa, Xb])
    y = np.r_[np.ones(len(Xa)), -np.ones(len(Xb))]
    return TrainingSet(X, y, np.zeros((len(X), 3)))


# ----------------------------------------------------------------- kernels

def test_kernel_closed_forms():
    x, y = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    assert kernel_eval(KernelSpec("rbf", sigma=1.0), x, x) == 1.0
    assert kernel_eval(KernelSpec("sigmoid", a=1.0, b=0.0), x, y) == 0.0
    assert kernel_eval(KernelSpec("rbf", sigma=1.0), x, y) == pytest.approx(np.exp(-1.0), abs=1e-15)
    assert kernel_eval(KernelSpec("sigmoid", a=2.0, b=-1.0), x, x) == pytest.approx(np.tanh(1.0))


@pytest.mark.parametrize("spec", [KernelSpec("rbf", sigma=0.7), KernelSpec("sigmoid"), LINEAR])
def test_kernel_matrix_symmetric_and_matches_eval(spec, rng):
    S = rng.random((40, 3))
    K = kernel_matrix(spec, S)
    assert np.array_equal(K, K.T)
    for i, j in [(0, 1), (5, 17), (39, 2), (8, 8)]:
        assert K[i, j] == pytest.approx(kernel_eval(spec, S[i], S[j]), abs=1e-12)


def test_rbf_diagonal_is_one(rng):
    K = kernel_matrix(KernelSpec("rbf", sigma=0.3), rng.random((25, 3)))
    assert np.all(np.diag(K) == 1.0)


def test_linear_kernel_on_basis():
    assert np.array_equal(kernel_matrix(LINEAR, np.eye(3)), np.eye(3))


def test_median_sigma(rng):
    S = rng.random((30, 3))
    d = [np.linalg.norm(S[i] - S[j]) for i in range(30) for j in range(i + 1, 30)]
    assert median_sigma(S) == pytest.approx(np.median(d), abs=1e-12)
    with pytest.raises(DegenerateError):
        median_sigma(np.ones((5, 3)))


# ------------------------------------------------------------ discriminant

def test_one_dimensional_lda():
    ts = TrainingSet(np.array([[-2.0], [-1.0], [1.0], [2.0]]), [1, 1, -1, -1], np.zeros((4, 3)))
    model = train_discriminant(ts, LINEAR, mu=1e-6)
    # theta projects back to the input midpoint 0
    w = model.alpha @ model.samples[:, 0]
    assert model.threshold / w == pytest.approx(0.0, abs=1e-9)
    assert classify_binary(model, [-0.5])[0] is True
    assert classify_binary(model, [0.5])[0] is False


@pytest.mark.parametrize("seed", range(10))
def test_linear_kernel_agrees_with_lda(seed):
    rng = np.random.default_rng(seed)
    Xa, Xb = gaussian_pair(rng)
    model = train_discriminant(training_set(Xa, Xb), LINEAR, mu=1e-10)
    X = np.vstack([Xa, Xb, rng.normal(size=(200, 3)) * 3])
    is_a, margin = classify_binary(model, X)
    keep = np.abs(margin) > 1e-6
    assert np.array_equal(is_a[keep], lda_decision(Xa, Xb, X)[keep])


def test_identical_classes_degenerate(rng):
    X = rng.random((10, 3))
    with pytest.raises(DegenerateError):
        train_discriminant(training_set(X, X.copy()), KernelSpec("rbf", sigma=0.5))


def test_unregularized_singular(rng):
    # more samples than features: the linear-kernel scatter is rank deficient
    Xa, Xb = gaussian_pair(rng, n=20)
    with pytest.raises(SingularError):
        train_discriminant(training_set(Xa, Xb), LINEAR, mu=0.0)


def test_projection_of_training_sample(rng):
    Xa, Xb = gaussian_pair(rng, n=30)
    spec = KernelSpec("rbf", sigma=1.0)
    model = train_discriminant(training_set(Xa, Xb), spec)
    K = kernel_matrix(spec, model.samples)
    for i in (0, 7, 45):
        assert project(model, model.samples[i]) == pytest.approx(model.alpha @ K[i], abs=1e-9)


def test_projected_statistics_consistent(rng):
    Xa, Xb = gaussian_pair(rng, n=40)
    model = train_discriminant(training_set(Xa, Xb), KernelSpec("sigmoid", a=0.3, b=-0.5))
    y = project(model, model.samples)
    pos = model.sample_labels == 1
    assert y[pos].mean() == pytest.approx(model.m_pos, abs=1e-9)
    assert y[~pos].mean() == pytest.approx(model.m_neg, abs=1e-9)
    assert y[pos].std() == pytest.approx(model.s_pos, abs=1e-9)
    assert model.m_pos > model.m_neg


def test_rbf_decays_far_away(rng):
    Xa, Xb = gaussian_pair(rng, n=20)
    model = train_discriminant(training_set(Xa, Xb), KernelSpec("rbf", sigma=0.5))
    assert project(model, np.full(3, 1e6)) == 0.0


def test_threshold_tie_goes_to_class_a(rng):
    Xa, Xb = gaussian_pair(rng, n=20)
    model = train_discriminant(training_set(Xa, Xb), LINEAR, mu=1e-6)
    x = np.array([0.3, -0.2, 0.1])
    model = dataclasses.replace(model, threshold=project(model, x))
    is_a, margin = classify_binary(model, x)
    assert is_a is True and margin == 0.0


def test_separable_training_recall():
    rng = np.random.default_rng(3)
    Xa = rng.normal(0.2, 0.05, (80, 3))
    Xb = rng.normal(0.8, 0.05, (80, 3))
    model = train_discriminant(training_set(Xa, Xb), KernelSpec("rbf", sigma=0.5))
    assert classify_binary(model, Xa)[0].mean() >= 0.95
    assert (~classify_binary(model, Xb)[0]).mean() >= 0.95


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100.0))
def test_decisions_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    Xa, Xb = gaussian_pair(rng, n=25)
    model = train_discriminant(training_set(Xa, Xb), KernelSpec("rbf", sigma=1.0))
    scaled = dataclasses.replace(model, alpha=model.alpha * c, threshold=model.threshold * c)
    X = rng.normal(size=(100, 3))
    y = project(model, X)
    keep = np.abs(y - model.threshold) > 1e-9 * max(1.0, abs(model.threshold))
    assert np.array_equal(classify_binary(model, X)[0][keep], classify_binary(scaled, X)[0][keep])
    a, m = classify_binary(model, X)
    assert np.array_equal(a, m >= 0)


# -------------------------------------------------------------- categories

def _linear_model():
    rng = np.random.default_rng(7)
    Xa = rng.normal(0.0, 0.1, (60, 3))
    Xb = rng.normal(1.0, 0.1, (60, 3))
    model = train_discriminant(training_set(Xa, Xb), LINEAR, mu=1e-8)
    w = model.alpha @ model.samples
    return model, w


def _at(w, t):
    """Input vector whose linear projection equals t."""
    return t * w / (w @ w)


def test_categories():
    model, w = _linear_model()
    sp = model.s_pooled
    X = np.array([_at(w, model.threshold), _at(w, model.m_pos), _at(w, model.m_neg),
                  _at(w, model.m_pos + 10 * sp)])
    cat, is_a, y = categorize_voxels(model, X)
    assert list(cat) == [OVERLAPPING, INTERIOR, INTERIOR, OUTLIER]
    assert list(is_a[1:]) == [True, False, True]


def test_prototype_flag_wins():
    model, w = _linear_model()
    X = np.array([_at(w, model.threshold), _at(w, model.m_pos)])
    cat, _, _ = categorize_voxels(model, X, is_prototype=[True, False])
    assert list(cat) == [PROTOTYPE, INTERIOR]


def test_overlapping_vote_follows_prototypes():
    model, w = _linear_model()
    # right at the threshold but next to class A prototypes in intensity space
    x = model.samples[model.sample_labels == 1].mean(0)
    model = dataclasses.replace(model, threshold=project(model, x) + 1e-9)
    cat, is_a, _ = categorize_voxels(model, x[None, :])
    assert cat[0] == OVERLAPPING and is_a[0]


def test_every_voxel_one_category(rng):
    model, _ = _linear_model()
    cat, _, _ = categorize_voxels(model, rng.normal(0.5, 0.5, (500, 3)))
    assert set(np.unique(cat)) <= {PROTOTYPE, INTERIOR, OVERLAPPING, OUTLIER}
    assert cat.shape == (500,)


# -------------------------------------------------------------- prototypes

def test_thin_region_falls_back_to_uneroded(rng):
    shape = (6, 6, 6)
    lab = np.full(shape, GM, np.uint8)
    lab[:, :, 3] = CSF  # one voxel thick
    vol = make_volume({"T1w": rng.random(shape)})
    ts = select_prototypes(LabelVolume(lab), Box.full(shape), vol, stage=1, n_max=1000)
    assert (ts.labels == 1).sum() == 36


def test_subsample_is_capped_and_seeded(rng):
    shape = (50, 50, 82)
    lab = np.full(shape, GM, np.uint8)
    lab[:, :, 40:] = WM
    vol = make_volume({"T1w": rng.random(shape)})
    box = Box.full(shape)
    ts1 = select_prototypes(LabelVolume(lab), box, vol, 2, n_max=1500, seed=4)
    ts2 = select_prototypes(LabelVolume(lab), box, vol, 2, n_max=1500, seed=4)
    assert (ts1.labels == 1).sum() == 1500 and (ts1.labels == -1).sum() == 1500
    assert np.array_equal(ts1.coords, ts2.coords)


def test_missing_class_raises(rng):
    shape = (5, 5, 5)
    vol = make_volume({"T1w": rng.random(shape)})
    with pytest.raises(ClassAbsent):
        select_prototypes(LabelVolume(np.full(shape, WM)), Box.full(shape), vol, 1)


def test_eroded_prototypes_survive_label_swaps():
    vol, truth = generate_phantom(PhantomSpec(dims=(32, 32, 32), seed=2))
    init = degrade_labels(truth, swap_fraction=0.2, seed=2)
    ts = select_prototypes(init, Box.full(vol.dims), vol, 2, n_max=1500, seed=0)
    true = truth.data[tuple(ts.coords.T)]
    want = np.where(ts.labels == 1, GM, WM)
    assert (true == want).mean() >= 0.95


# --------------------------------------------------------------- subdomain

def _whole(vol):
    b = Box.full(vol.dims)
    return Subdomain(0, b, b)


def test_noiseless_subdomain_exact():
    spec = PhantomSpec(dims=(24, 24, 24), tissue_stds={k: [0.0] * 3 for k in ("CSF", "GM", "WM", "MWM")})
    vol, truth = generate_phantom(spec)
    vol = normalize_channels(vol)
    init = degrade_labels(truth, erode_csf=1, swap_fraction=0.1, seed=0)
    res = classify_subdomain(vol, _whole(vol), init, seed=1)
    out = LabelVolume(res.labels)
    for c in (CSF, GM, WM):
        assert dice(out, truth, c) == 1.0


def test_pure_wm_subdomain_keeps_initialization(rng):
    shape = (8, 8, 8)
    vol = make_volume({n: rng.random(shape) for n in ("T1w", "T2w", "PDw")})
    init = LabelVolume(np.full(shape, WM))
    res = classify_subdomain(vol, _whole(vol), init)
    assert np.array_equal(res.labels, init.data)
    assert len(res.events) == 2 and all("skipped" in e for e in res.events)


def test_mwm_is_fixed(small_phantom):
    _, vol, truth = small_phantom
    lab = truth.data.copy()
    lab[14:18, 14:18, 14:18] = MWM
    res = classify_subdomain(normalize_channels(vol), _whole(vol), LabelVolume(lab))
    assert np.all(res.labels[14:18, 14:18, 14:18] == MWM)
    assert np.count_nonzero(res.labels == MWM) == 64


def test_low_contrast_csf_grows():
    vol, truth = generate_phantom(low_contrast_spec(dims=(40, 40, 40)))
    vol = normalize_channels(vol)
    init = degrade_labels(truth, erode_csf=1)
    res = classify_subdomain(vol, _whole(vol), init, seed=0)
    assert np.count_nonzero(res.labels == CSF) > init.count(CSF)


def test_subdomain_deterministic(small_phantom):
    _, vol, truth = small_phantom
    vol = normalize_channels(vol)
    init = degrade_labels(truth, 1, 0.1, seed=1)
    a = classify_subdomain(vol, _whole(vol), init, seed=5)
    b = classify_subdomain(vol, _whole(vol), init, seed=5)
    assert np.array_equal(a.labels, b.labels) and a.models == b.models


def test_missing_stage_channel(rng):
    shape = (6, 6, 6)
    vol = make_volume({"T1w": rng.random(shape)})
    with pytest.raises(ConfigError):
        classify_subdomain(vol, _whole(vol), LabelVolume(np.full(shape, GM)))


def test_params_from_dict():
    p = KfdaParams(stage1={"kernel": "sigmoid", "a": 2.0, "b": 0.0}, stage2={"kernel": "rbf", "sigma": 0.3})
    assert p.stage1.a == 2.0 and p.stage2.sigma == 0.3
    assert KfdaParams(**p.to_dict()).to_dict() == p.to_dict()
    with pytest.raises(ConfigError):
        KfdaParams(stage1={"kernel": "poly"})
