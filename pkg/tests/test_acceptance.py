"""Acceptance criteria, one test each, every test printing a single PASS/FAIL line."""
import json
import time

import numpy as np
import pytest

from kfdaseg.cli import main
from kfdaseg.kfda import KernelSpec, TrainingSet, classify_binary, train_discriminant
from kfdaseg.mixture import gmm2_em
from kfdaseg.partition import PartitionParams, best_split, build_histogram, partition_volume
from kfdaseg.phantom import PhantomSpec, generate_phantom
from kfdaseg.quality import SsimParams, mssim, ssim_map
from kfdaseg.stitch import AnnealSchedule, EnergyParams, OverlapObservation, energy, sa_map_estimate
from kfdaseg.volume import BrainMask, ScalarVolume

from oracles import (direct_mi, energy_oracle, exhaustive_best, exhaustive_map, gaussian_pair,
                     lda_decision, ssim_oracle)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return emit


# ------------------------------------------------------------ 1 KFDA vs LDA

def test_acceptance_1_linear_kfda_matches_lda(verdict):
    t0 = time.perf_counter()
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        Xa, Xb = gaussian_pair(rng, n=200)
        X = np.vstack([Xa, Xb])
        y = np.r_[np.ones(len(Xa)), -np.ones(len(Xb))]
        model = train_discriminant(TrainingSet(X, y, np.zeros((len(X), 3))), KernelSpec("linear"),
                                   mu=1e-10)
        is_a, margin = classify_binary(model, X)
        keep = np.abs(margin) > 1e-6
        bad += int(np.count_nonzero(is_a[keep] != lda_decision(Xa, Xb, X)[keep]))
    dt = time.perf_counter() - t0
    assert verdict(1, bad == 0 and dt < 10, f"disagreements={bad} runtime={dt:.2f}s")


# ------------------------------------------------------- 2 partition oracle

def _noise_volume(seed, n=16):
    rng = np.random.default_rng(seed)
    data = rng.random((n, n, n))
    data += rng.uniform(-1, 1) * np.linspace(0, 1, n)[:, None, None]
    data += rng.uniform(-1, 1) * np.linspace(0, 1, n)[None, :, None]
    mask = rng.random((n, n, n)) > 0.2
    return ScalarVolume(data), BrainMask(mask)


def test_acceptance_2_partition_matches_exhaustive(verdict):
    t0 = time.perf_counter()
    mismatches, worst_sum, worst_mi, negative, nodes = 0, 0.0, 0.0, 0, 0
    params = PartitionParams(bin_count=16, max_regions=6, min_gain_bits=0.0, min_extent=3, margin=1)
    for seed in range(20):
        vol, mask = _noise_volume(1000 + seed)
        model = build_histogram(vol, mask, params.bin_count)
        tree = partition_volume(vol, mask, params)
        for node in tree.internal_nodes():
            nodes += 1
            got = best_split(model, node.box, params)
            want = exhaustive_best(model, node.box, params.min_extent)
            if (got is None or want is None or got[:2] != want[:2]
                    or (node.axis, node.plane) != got[:2] or abs(got[2] - want[2]) > 1e-9):
                mismatches += 1
        negative += sum(g < 0 for g in tree.split_gains)
        ids = np.zeros(vol.dims, np.int64)
        for leaf in tree.leaves:
            ids[leaf.core_box.slices()] = leaf.id
        worst_sum = max(worst_sum, abs(tree.total_mi - sum(tree.split_gains)))
        worst_mi = max(worst_mi, abs(tree.total_mi - direct_mi(ids, model.bins)))
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and negative == 0 and worst_sum <= 1e-9 and worst_mi <= 1e-9 and dt < 30
    assert verdict(2, ok, f"nodes={nodes} mismatches={mismatches} negative_gains={negative} "
                          f"|total-sum|={worst_sum:.1e} |total-direct|={worst_mi:.1e} "
                          f"runtime={dt:.2f}s")


# ------------------------------------------------------------ 3 overlap law

def test_acceptance_3_overlap_law(verdict):
    pairs, violations = 0, 0
    for seed, regions in ((1, 8), (2, 16), (3, 32)):
        vol, _ = generate_phantom(PhantomSpec(dims=(64, 64, 64), seed=seed))
        tree = partition_volume(vol.channels["T1w"], vol.mask, PartitionParams(max_regions=regions))
        for a in tree.leaves:
            for b in tree.leaves:
                for ax in range(3):
                    if a.core_box.hi[ax] + 1 != b.core_box.lo[ax]:
                        continue
                    others = [o for o in range(3) if o != ax]
                    if not all(a.core_box.lo[o] <= b.core_box.hi[o]
                               and b.core_box.lo[o] <= a.core_box.hi[o] for o in others):
                        continue
                    pairs += 1
                    shared = a.overlap_box.intersect(b.overlap_box)
                    violations += int(shared is None or shared.shape[ax] != 4)
    assert verdict(3, pairs > 0 and violations == 0, f"adjacent_pairs={pairs} violations={violations}")


# -------------------------------------------------------------- 4 SA oracle

def test_acceptance_4_sa_reaches_map(verdict):
    t0 = time.perf_counter()
    p = EnergyParams()
    hits, worse = 0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.integers(1, 4, size=(3, 4))
        b = a.copy()
        flip = rng.random(a.shape) < 0.4
        b[flip] = rng.integers(1, 4, size=int(flip.sum()))
        obs = OverlapObservation(a, b, 1, 0, -1)
        out = sa_map_estimate(obs, p, AnnealSchedule(seed=seed))
        e = energy_oracle(out, a, b, p.w, p.beta)
        hits += int(abs(e - exhaustive_map(obs, p, [1, 2, 3])) < 1e-9)
        worse += int(e > energy(obs.initial(), obs, p) + 1e-12)
    dt = time.perf_counter() - t0
    ok = hits >= 95 and worse == 0 and dt < 20
    assert verdict(4, ok, f"map_hits={hits}/100 worse_than_init={worse} runtime={dt:.2f}s")


# ------------------------------------------------------------ 5 SSIM oracle

def test_acceptance_5_ssim_oracle(verdict):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.random((16, 16))
        y = 0.5 * x + 0.5 * rng.random((16, 16))
        worst = max(worst, float(np.max(np.abs(ssim_map(x, y, dynamic_range=1.0)
                                               - ssim_oracle(x, y, 1.0)))))
    rng = np.random.default_rng(99)
    a = ScalarVolume(rng.random((24, 24, 4)))
    b = ScalarVolume(rng.random((24, 24, 4)))
    m = np.zeros((24, 24, 4), bool)
    m[3:21, 3:21] = True
    m = BrainMask(m)
    ident = abs(mssim(a, a, m) - 1.0)
    fixed = SsimParams(dynamic_range=1.0)
    sym = abs(mssim(a, b, m, fixed) - mssim(b, a, m, fixed))
    ok = worst <= 1e-9 and ident <= 1e-12 and sym <= 1e-12
    assert verdict(5, ok, f"max_map_err={worst:.1e} identity_err={ident:.1e} symmetry_err={sym:.1e}")


# ------------------------------------------------- 6 and 9 end-to-end phantom

@pytest.fixture(scope="module")
def default_phantom(tmp_path_factory):
    d = tmp_path_factory.mktemp("accept_phantom")
    assert main(["phantom", "--out", str(d), "--degrade"]) == 0
    return d


@pytest.fixture(scope="module")
def single_thread_run(default_phantom, tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_run1")
    t0 = time.perf_counter()
    code = main(["pipeline", "--config", str(default_phantom / "pipeline.json"), "--out", str(out),
                 "--threads", "1"])
    return out, code, time.perf_counter() - t0


def test_acceptance_6_end_to_end_dice(single_thread_run, verdict):
    out, code, dt = single_thread_run
    rep = json.loads((out / "report.json").read_text())
    d = rep["dice"]
    ok = code == 0 and all(d[k] >= 0.85 for k in ("GM", "WM", "CSF")) and dt < 300
    assert verdict(6, ok, f"dice GM={d['GM']:.4f} WM={d['WM']:.4f} CSF={d['CSF']:.4f} "
                          f"runtime={dt:.1f}s")


# ----------------------------------------------------------- 7 CSF recovery

def test_acceptance_7_csf_recovery(tmp_path, verdict):
    ph = tmp_path / "low"
    assert main(["phantom", "--out", str(ph), "--preset", "low-contrast", "--degrade",
                 "--erode-csf", "1", "--swap-fraction", "0"]) == 0
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(ph / "pipeline.json"), "--out", str(out),
                 "--no-figures"]) == 0
    rep = json.loads((out / "report.json").read_text())
    before, after = rep["class_volumes_before"]["CSF"], rep["class_volumes"]["CSF"]
    gain = rep["dice"]["CSF"] - rep["dice_before"]["CSF"]
    ok = after > before and gain >= 0.05 and rep["mssim_after"] > rep["mssim_before"]
    assert verdict(7, ok, f"csf_voxels {before}->{after} dice_gain={gain:.4f} "
                          f"mssim {rep['mssim_before']:.4f}->{rep['mssim_after']:.4f}")


# ------------------------------------------------------------- 8 EM recovery

def test_acceptance_8_em_recovery(verdict):
    cases = [((0.5, 0.5), (0.2, 0.8), (0.05, 0.05)),
             ((0.3, 0.7), (0.0, 1.0), (0.2, 0.15)),
             ((0.8, 0.2), (0.25, 0.55), (0.05, 0.08))]
    worst_mean, worst_weight, monotone = 0.0, 0.0, True
    for seed in range(10):
        for weights, means, stds in cases:
            rng = np.random.default_rng(seed)
            comp = rng.random(10_000) < weights[1]
            x = np.where(comp, rng.normal(means[1], stds[1], comp.size),
                         rng.normal(means[0], stds[0], comp.size))
            g = gmm2_em(x)
            worst_mean = max(worst_mean, float(np.max(np.abs(np.subtract(g.means, means)))))
            worst_weight = max(worst_weight, float(np.max(np.abs(np.subtract(g.weights, weights)))))
            ll = g.log_likelihood
            monotone &= all(b >= a for a, b in zip(ll, ll[1:]))
    ok = worst_mean <= 0.01 and worst_weight <= 0.02 and monotone
    assert verdict(8, ok, f"max_mean_err={worst_mean:.4f} max_weight_err={worst_weight:.4f} "
                          f"monotone={monotone}")


# ------------------------------------------------------------ 9 determinism

def test_acceptance_9_thread_determinism(default_phantom, single_thread_run, tmp_path, verdict):
    first, code, _ = single_thread_run
    out = tmp_path / "run8"
    code8 = main(["pipeline", "--config", str(default_phantom / "pipeline.json"), "--out", str(out),
                  "--threads", "8"])
    same = {name: (out / name).read_bytes() == (first / name).read_bytes()
            for name in ("labels.nii", "report.json")}
    ok = code == 0 and code8 == 0 and all(same.values())
    assert verdict(9, ok, " ".join(f"{k}={'identical' if v else 'differs'}" for k, v in same.items()))
