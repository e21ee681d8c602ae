"""End-to-end orchestration: normalize, partition, classify, stitch, score."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage
from threadpoolctl import threadpool_limits

from .errors import ConfigError, DimensionError, InfiniteCnr, KfdaSegError
from .kfda import KfdaParams, classify_subdomain
from .mixture import classify_myelin, difference_image, gmm2_em
from .partition import PartitionParams, PartitionTree, partition_volume, subdomain_stats
from .quality import (AGE_PROFILES, QualityReport, SsimParams, class_volumes, dice, mssim,
                      reference_for_class, reference_name, render_classified)
from .stitch import AnnealSchedule, EnergyParams, assemble_volume
from .volume import (BG, CHANNELS, CSF, GM, LABEL_NAMES, MWM, WM, BrainMask, LabelVolume,
                     MultiChannelVolume, ScalarVolume, load_labels, load_mask, load_volume,
                     normalize_channels, save_volume)

log = logging.getLogger(__name__)

REFINE_MIN_GAIN = 1e-4


@dataclass
class StitchParams:
    w: float = 1.0
    beta: float = 0.7
    t0: float = 2.0
    c: float = 0.95
    max_sweeps: int = 200
    stall_sweeps: int = 3

    def energy(self) -> EnergyParams:
        return EnergyParams(self.w, self.beta)

    def schedule(self, seed) -> AnnealSchedule:
        return AnnealSchedule(self.t0, self.c, self.max_sweeps, self.stall_sweeps, seed)


@dataclass
class PipelineConfig:
    t1w: str
    mask: str
    init_labels: str
    t2w: Optional[str] = None
    pdw: Optional[str] = None
    ground_truth: Optional[str] = None
    age_profile: str = "older"
    partition: PartitionParams = field(default_factory=PartitionParams)
    partition_channel: str = "T1w"
    kfda: KfdaParams = field(default_factory=KfdaParams)
    stitch: StitchParams = field(default_factory=StitchParams)
    ssim: SsimParams = field(default_factory=SsimParams)
    seed: int = 0
    threads: int = 1
    max_refine_iters: int = 1
    output_dir: str = "out"
    figures: bool = True
    write_ssim_map: bool = False
    base_dir: str = "."

    def __post_init__(self):
        if self.age_profile not in AGE_PROFILES:
            raise ConfigError(f"age_profile must be one of {AGE_PROFILES}")
        if not 1 <= self.max_refine_iters <= 5:
            raise ConfigError("max_refine_iters must lie in 1..5")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.partition_channel not in CHANNELS:
            raise ConfigError(f"unknown partition channel {self.partition_channel!r}")

    @classmethod
    def from_dict(cls, data, base_dir=".") -> "PipelineConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "partition" in data:
                data["partition"] = PartitionParams(**data["partition"])
            kfda = dict(data.get("kfda", {}))
            if data.get("age_profile") == "early":
                # CSF needs every channel; GM/unmyelinated WM are separated on T1w and T2w
                kfda.setdefault("stage2", {"kernel": "rbf", "sigma": "median",
                                           "channels": ["T1w", "T2w"]})
            data["kfda"] = KfdaParams(**kfda)
            if "stitch" in data:
                data["stitch"] = StitchParams(**data["stitch"])
            if "ssim" in data:
                data["ssim"] = SsimParams(**data["ssim"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        data.setdefault("base_dir", base_dir)
        for key in ("t1w", "mask", "init_labels"):
            if key not in data:
                raise ConfigError(f"config is missing required input {key!r}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))

    def resolve(self, path):
        if path is None:
            return None
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    @property
    def out_dir(self):
        return self.resolve(self.output_dir)

    def to_dict(self):
        """Echo of the run parameters (paths as given, no output location)."""
        return {
            "inputs": {k: getattr(self, k) for k in ("t1w", "t2w", "pdw", "mask", "init_labels",
                                                     "ground_truth")},
            "age_profile": self.age_profile,
            "partition": vars(self.partition).copy(),
            "partition_channel": self.partition_channel,
            "kfda": self.kfda.to_dict(),
            "stitch": vars(self.stitch).copy(),
            "ssim": vars(self.ssim).copy(),
            "seed": int(self.seed),
            "max_refine_iters": self.max_refine_iters,
        }


@dataclass
class Inputs:
    raw: MultiChannelVolume
    volume: MultiChannelVolume          # normalized
    init: LabelVolume
    truth: Optional[LabelVolume]


def load_inputs(cfg: PipelineConfig) -> Inputs:
    for key in ("t1w", "t2w", "pdw", "mask", "init_labels", "ground_truth"):
        path = cfg.resolve(getattr(cfg, key))
        if path is not None and not os.path.exists(path):
            raise ConfigError(f"input {key} not found: {path}")
    mask = load_mask(cfg.resolve(cfg.mask))
    channels = {}
    for name, key in zip(CHANNELS, ("t1w", "t2w", "pdw")):
        path = cfg.resolve(getattr(cfg, key))
        if path is not None:
            vol = load_volume(path)
            channels[name] = ScalarVolume(vol.data, mask.voxel_size) \
                if vol.dims == mask.dims else vol
    raw = MultiChannelVolume(channels, mask)
    init = load_labels(cfg.resolve(cfg.init_labels))
    truth = load_labels(cfg.resolve(cfg.ground_truth)) if cfg.ground_truth else None
    for name, lab in (("init_labels", init), ("ground_truth", truth)):
        if lab is not None and lab.dims != mask.dims:
            raise DimensionError(f"{name} dims {lab.dims} != mask dims {mask.dims}")
    return Inputs(raw, normalize_channels(raw), _conform_labels(init, mask), truth)


def _conform_labels(labels: LabelVolume, mask: BrainMask) -> LabelVolume:
    """BG outside the mask; in-mask BG takes the nearest in-mask tissue label."""
    data = labels.data.copy()
    data[~mask.data] = BG
    hole = mask.data & (data == BG)
    if hole.any():
        tissue = mask.data & (data != BG)
        if tissue.any():
            _, idx = ndimage.distance_transform_edt(~tissue, return_indices=True)
            data[hole] = data[tuple(i[hole] for i in idx)]
        else:
            data[hole] = GM
    return LabelVolume(data, mask.voxel_size)


def extract_myelin(volume: MultiChannelVolume, init: LabelVolume, report: QualityReport):
    """Fit the PDw-T1w mixture over initial white matter and write MWM into the initialization.

    Myelinated WM is a white-matter subtype, so the two components model
    myelinated and unmyelinated WM; CSF and GM would otherwise claim them.
    """
    diff = difference_image(volume.channels["PDw"], volume.channels["T1w"], volume.mask)
    white = volume.mask.data & np.isin(init.data, (WM, MWM))
    if white.sum() < 10:
        report.events.append("myelin extraction skipped: too few initial WM voxels")
        return init
    model = gmm2_em(diff.data[white])
    mwm = classify_myelin(diff, volume.mask, model).data == MWM
    mwm &= white
    data = init.data.copy()
    data[(data == MWM) & ~mwm] = WM
    data[mwm] = MWM
    report.extra["myelin_gmm"] = model.to_dict()
    report.events.append(f"myelinated WM extracted by EM: {int(mwm.sum())} voxels")
    return LabelVolume(data, init.voxel_size)


def classify_all(volume, tree: PartitionTree, init: LabelVolume, params: KfdaParams, seed,
                 threads: int = 1):
    def run(sub):
        return classify_subdomain(volume, sub, init, params, seed=[int(seed)])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, tree.leaves))
    return [run(sub) for sub in tree.leaves]


def kfda_pass(cfg: PipelineConfig, volume, tree, init, report: QualityReport, tag: str):
    results = classify_all(volume, tree, init, cfg.kfda, cfg.seed, cfg.threads)
    for res in results:
        report.events.extend(f"{tag}: {e}" for e in res.events)
    classified = {res.sub_id: res.labels for res in results}
    seam = []
    labels = assemble_volume(classified, tree, volume.mask, cfg.stitch.energy(),
                             cfg.stitch.schedule([int(cfg.seed)]), cfg.threads, seam)
    labels = _conform_labels(labels, volume.mask)
    return labels, results, seam


def score(cfg: PipelineConfig, volume: MultiChannelVolume, labels: LabelVolume):
    """MSSIM between each profile reference and its class-mean painting."""
    present = [c for c in (CSF, GM, WM, MWM) if np.any(labels.data == c)]
    names = sorted({reference_name(c, cfg.age_profile) for c in present})
    scores = {}
    for name in names:
        cls = next(c for c in present if reference_name(c, cfg.age_profile) == name)
        ref = reference_for_class(cls, cfg.age_profile, volume.channels)
        painted = render_classified(labels, ref, volume.mask)
        scores[name] = mssim(ref, painted, volume.mask, cfg.ssim)
    return float(np.mean(list(scores.values()))), scores


def cnr_map(volume: MultiChannelVolume, labels: LabelVolume, tree: PartitionTree):
    t1 = volume.channels["T1w"] if "T1w" in volume.channels else next(iter(volume.channels.values()))
    rows = []
    for sub in tree.leaves:
        row = {"id": sub.id, "core_box": sub.core_box.to_list()}
        try:
            mean, value = subdomain_stats(t1, labels, sub, volume.mask)
            row.update(mean=mean, cnr=value, infinite=False)
        except InfiniteCnr:
            row.update(mean=float(t1.data[sub.core_box.slices()][volume.mask.data[
                sub.core_box.slices()]].mean()), cnr=None, infinite=True)
        except KfdaSegError:
            row.update(mean=None, cnr=None, infinite=False)
        sub.mean_intensity, sub.cnr = row["mean"], row["cnr"]
        rows.append(row)
    return rows


def _named(d):
    return {LABEL_NAMES[c]: v for c, v in d.items()}


def run_pipeline(cfg: PipelineConfig, write: bool = True) -> QualityReport:
    """Run every stage and write ``labels.nii``, ``partition.json`` and ``report.json``."""
    report = QualityReport()
    report.extra["config"] = cfg.to_dict()
    out = cfg.out_dir
    if write:
        os.makedirs(out, exist_ok=True)
    try:
        with threadpool_limits(limits=1):
            result = _run(cfg, report)
    except KfdaSegError as exc:
        report.extra["status"] = "failed"
        report.extra["error"] = f"{type(exc).__name__}: {exc}"
        if write:
            report.to_json(os.path.join(out, "report.json"))
        raise
    labels, tree, inputs, ssim_maps = result
    report.extra["status"] = "ok"
    report.validate(inputs.volume.mask.count)
    if write:
        save_volume(labels, os.path.join(out, "labels.nii"))
        tree.to_json(os.path.join(out, "partition.json"))
        report.to_json(os.path.join(out, "report.json"))
        write_subdomain_table(report.cnr_map, os.path.join(out, "subdomains.tsv"))
        if cfg.write_ssim_map:
            save_volume(ScalarVolume(np.nan_to_num(ssim_maps, nan=0.0), labels.voxel_size),
                        os.path.join(out, "ssim_map.nii"))
        if cfg.figures:
            from . import plotting
            plotting.render_report(os.path.join(out, "figures"), inputs, labels, tree, report,
                                   ssim_maps)
    return report


def _run(cfg: PipelineConfig, report: QualityReport):
    inputs = load_inputs(cfg)
    volume, init = inputs.volume, inputs.init
    if cfg.age_profile == "early":
        if "PDw" not in volume.channels:
            raise ConfigError("the early profile needs a PDw channel")
        init = extract_myelin(volume, init, report)
        log.info(report.events[-1])
    tree = partition_volume(volume.channels[cfg.partition_channel], volume.mask, cfg.partition)
    log.info("partition: %d subdomains, %.4f bits", len(tree.leaves), tree.total_mi)
    report.extra["partition"] = {"leaves": len(tree.leaves), "total_mi_bits": tree.total_mi}

    report.mssim_before, before_by_ref = score(cfg, volume, init)
    report.class_volumes_before = class_volumes(init, volume.mask)
    labels, results, seam = kfda_pass(cfg, volume, tree, init, report, "pass 1")
    best_mssim, after_by_ref = score(cfg, volume, labels)
    log.info("pass 1: MSSIM %.4f -> %.4f", report.mssim_before, best_mssim)
    report.refinement.append({"iteration": 1, "mssim": best_mssim, "accepted": True})
    report.extra["subdomains"] = [{"id": r.sub_id, "categories": r.categories, "models": r.models}
                                  for r in results]
    report.extra["seams"] = {"strips": len(seam),
                             "disagreeing_pixels": int(sum(s["disagreements"] for s in seam))}

    for it in range(2, cfg.max_refine_iters + 1):
        cand, _, _ = kfda_pass(cfg, volume, tree, labels, report, f"pass {it}")
        cand_mssim, cand_by_ref = score(cfg, volume, cand)
        accepted = cand_mssim > best_mssim + REFINE_MIN_GAIN
        log.info("pass %d: MSSIM %.4f (%s)", it, cand_mssim, "kept" if accepted else "rejected")
        report.refinement.append({"iteration": it, "mssim": cand_mssim, "accepted": accepted})
        if not accepted:
            report.events.append(f"refinement stopped at iteration {it}: MSSIM "
                                 f"{cand_mssim:.6f} vs best {best_mssim:.6f}; kept best iterate")
            break
        labels, best_mssim, after_by_ref = cand, cand_mssim, cand_by_ref

    report.mssim_after = best_mssim
    report.mssim_by_reference = {k: {"before": before_by_ref.get(k), "after": after_by_ref[k]}
                                 for k in after_by_ref}
    report.class_volumes = class_volumes(labels, volume.mask)
    report.cnr_map = cnr_map(volume, labels, tree)
    if inputs.truth is not None:
        for c in (CSF, GM, WM) + ((MWM,) if np.any(inputs.truth.data == MWM) else ()):
            report.dice[LABEL_NAMES[c]] = dice(labels, inputs.truth, c)
            report.dice_before[LABEL_NAMES[c]] = dice(inputs.init, inputs.truth, c)
    ssim_maps = None
    if cfg.write_ssim_map or cfg.figures:
        ref = reference_for_class(CSF, cfg.age_profile, volume.channels)
        _, ssim_maps = mssim(ref, render_classified(labels, ref, volume.mask), volume.mask,
                             cfg.ssim, return_maps=True)
    return labels, tree, inputs, ssim_maps


def write_subdomain_table(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", "x0", "y0", "z0", "x1", "y1", "z1", "mean_t1w", "cnr"])
        for r in rows:
            (lo, hi) = r["core_box"]
            mean = "" if r["mean"] is None else f"{r['mean']:.6f}"
            value = "inf" if r.get("infinite") else ("" if r["cnr"] is None else f"{r['cnr']:.6f}")
            writer.writerow([r["id"], *lo, *hi, mean, value])
