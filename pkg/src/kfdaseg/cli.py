"""Command-line interface: ``kfdaseg <subcommand> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .errors import ConfigError, KfdaSegError
from .partition import PartitionParams, PartitionTree, partition_volume
from .phantom import PhantomSpec, degrade_labels, generate_phantom, low_contrast_spec
from .quality import SsimParams, dice, mssim
from .volume import (CSF, GM, LABEL_NAMES, MWM, WM, load_labels, load_mask, load_volume,
                     read_nifti, save_volume, write_nifti)


def _u64(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="JSON", help="JSON configuration file")
    common.add_argument("--seed", type=_u64, help="global random seed (overrides the config)")
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="maximum worker threads (default 1); output does not depend on it")
    common.add_argument("--verbose", action="store_true", help="log progress to stderr")

    kfda = argparse.ArgumentParser(add_help=False)
    g = kfda.add_argument_group("discriminant overrides")
    g.add_argument("--stage1-kernel", choices=["sigmoid", "rbf", "linear"],
                   help="CSF vs tissue kernel (default sigmoid)")
    g.add_argument("--stage2-kernel", choices=["sigmoid", "rbf", "linear"],
                   help="GM vs WM kernel (default rbf)")
    g.add_argument("--sigmoid-a", type=float, help="sigmoid kernel slope a (default 1.0)")
    g.add_argument("--sigmoid-b", type=float, help="sigmoid kernel offset b (default -1.0)")
    g.add_argument("--rbf-sigma", help="RBF width, a number or 'median' (default median)")
    g.add_argument("--mu", type=float, help="ridge regularizer scale (default 1e-3)")
    g.add_argument("--n-max", type=int, help="prototypes per class (default 1500)")
    g.add_argument("--delta", type=float, help="overlapping-voxel margin band (default 0.5)")

    parser = argparse.ArgumentParser(
        prog="kfdaseg",
        description="Local kernel Fisher discriminant brain tissue classification.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic phantom",
                       description="Write phantom channels, mask, ground truth, an initial "
                                   "labeling and a pipeline config into --out. --config is "
                                   "read as a phantom spec JSON.")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--preset", choices=["default", "low-contrast"], default="default",
                   help="base spec when no --config is given")
    p.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"),
                   help="override grid size")
    p.add_argument("--degrade", action="store_true",
                   help="write a flawed initialization instead of the ground truth")
    p.add_argument("--erode-csf", type=int, default=1, help="CSF layers peeled by --degrade")
    p.add_argument("--swap-fraction", type=float, default=0.1,
                   help="fraction of GM/WM voxels swapped by --degrade")

    p = sub.add_parser("partition", parents=[common], help="MI-driven binary space partitioning",
                       description="Partition a T1w volume; inputs come from --t1w/--mask or "
                                   "from a pipeline --config.")
    p.add_argument("--t1w", help="T1w NIfTI volume")
    p.add_argument("--mask", help="brain mask NIfTI volume")
    p.add_argument("--bins", type=int, help="histogram bin count (default 64)")
    p.add_argument("--max-regions", type=int, help="maximum number of subdomains (default 48)")
    p.add_argument("--min-gain", type=float, help="minimum MI gain in bits (default 1e-3)")
    p.add_argument("--min-extent", type=int, help="minimum subdomain extent per axis (default 8)")
    p.add_argument("--margin", type=int, help="overlap margin per internal face (default 2)")
    p.add_argument("--out", default="partition.json", help="output JSON path")

    p = sub.add_parser("classify", parents=[common, kfda], help="per-subdomain two-stage KFDA",
                       description="Partition and classify every subdomain of a pipeline "
                                   "--config; writes sub_NNN.nii overlap-box labelings.")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("stitch", parents=[common], help="fuse subdomain labelings",
                       description="Stitch the sub_NNN.nii files written by `classify`.")
    p.add_argument("--partition", required=True, help="partition JSON")
    p.add_argument("--subdomains", required=True, help="directory with sub_NNN.nii files")
    p.add_argument("--mask", required=True, help="brain mask NIfTI volume")
    p.add_argument("--out", default="labels.nii", help="output label volume")
    p.add_argument("--beta", type=float, help="Potts smoothness weight (default 0.7)")

    p = sub.add_parser("ssim", parents=[common], help="masked MSSIM between two volumes")
    p.add_argument("--ref", required=True, help="reference volume")
    p.add_argument("--test", required=True, help="test volume")
    p.add_argument("--mask", required=True, help="brain mask")
    p.add_argument("--window", type=int, default=11, help="Gaussian window size (default 11)")
    p.add_argument("--sigma", type=float, default=1.5, help="Gaussian window std (default 1.5)")
    p.add_argument("--k1", type=float, default=0.01, help="luminance constant (default 0.01)")
    p.add_argument("--k2", type=float, default=0.03, help="contrast constant (default 0.03)")
    p.add_argument("--range", type=float, dest="dynamic_range",
                   help="dynamic range L (default: in-mask range of --ref)")
    p.add_argument("--map", help="write the SSIM map as float32 NIfTI")

    p = sub.add_parser("dice", parents=[common], help="per-class Dice overlap")
    p.add_argument("--a", required=True, help="first label volume")
    p.add_argument("--b", required=True, help="second label volume")

    p = sub.add_parser("pipeline", parents=[common, kfda], help="run the full pipeline",
                       description="Normalize, partition, classify, stitch and score. Writes "
                                   "labels.nii, partition.json, report.json, subdomains.tsv "
                                   "and figures/ into the output directory.")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--degrade", action="store_true",
                   help="synthesize the initialization from the config's ground_truth")
    p.add_argument("--erode-csf", type=int, default=1, help="CSF layers peeled by --degrade")
    p.add_argument("--swap-fraction", type=float, default=0.0,
                   help="fraction of GM/WM voxels swapped by --degrade")
    p.add_argument("--max-refine-iters", type=int, help="SSIM-guarded refinement passes (1-5)")
    p.add_argument("--no-figures", action="store_true", help="skip the matplotlib figures")
    return parser


# ----------------------------------------------------------------- commands

def _load_pipeline_config(args):
    from .pipeline import PipelineConfig
    if not args.config:
        raise ConfigError("--config is required")
    cfg = PipelineConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if hasattr(args, "mu"):
        _apply_kfda_overrides(cfg.kfda, args)
    return cfg


def _apply_kfda_overrides(kp, args):
    for stage, kernel in ((kp.stage1, args.stage1_kernel), (kp.stage2, args.stage2_kernel)):
        if kernel is not None:
            stage.kernel = kernel
        if args.sigmoid_a is not None:
            stage.a = args.sigmoid_a
        if args.sigmoid_b is not None:
            stage.b = args.sigmoid_b
        if args.rbf_sigma is not None:
            stage.sigma = args.rbf_sigma if args.rbf_sigma == "median" else float(args.rbf_sigma)
    for name in ("mu", "n_max", "delta"):
        if getattr(args, name) is not None:
            setattr(kp, name, getattr(args, name))
    kp.__post_init__()


def cmd_phantom(args):
    if args.config:
        spec = PhantomSpec.from_json(args.config)
    else:
        spec = low_contrast_spec() if args.preset == "low-contrast" else PhantomSpec(
            bias_amplitude=0.15, streak_count=3, seed=3)
    if args.seed is not None:
        spec.seed = args.seed
    if args.dims:
        spec.dims = tuple(args.dims)
    vol, truth = generate_phantom(spec)
    os.makedirs(args.out, exist_ok=True)
    names = {"T1w": "t1w.nii", "T2w": "t2w.nii", "PDw": "pdw.nii"}
    for name, ch in vol.channels.items():
        save_volume(ch, os.path.join(args.out, names[name]))
    save_volume(vol.mask, os.path.join(args.out, "mask.nii"))
    save_volume(truth, os.path.join(args.out, "phantom_gt.nii"))
    init = degrade_labels(truth, args.erode_csf, args.swap_fraction, spec.seed) \
        if args.degrade else truth
    save_volume(init, os.path.join(args.out, "init_labels.nii"))
    with open(os.path.join(args.out, "phantom.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1)
    config = {"t1w": "t1w.nii", "mask": "mask.nii", "init_labels": "init_labels.nii",
              "ground_truth": "phantom_gt.nii", "seed": int(spec.seed), "output_dir": "out"}
    if "T2w" in vol.channels:
        config["t2w"] = "t2w.nii"
    if "PDw" in vol.channels:
        config["pdw"] = "pdw.nii"
    with open(os.path.join(args.out, "pipeline.json"), "w") as fh:
        json.dump(config, fh, indent=1)
    print(f"phantom {spec.dims} written to {args.out}")
    return 0


def cmd_partition(args):
    params = {}
    if args.config:
        cfg = _load_pipeline_config(args)
        from .pipeline import load_inputs
        inputs = load_inputs(cfg)
        t1w = inputs.volume.channels[cfg.partition_channel]
        mask = inputs.volume.mask
        params = dataclasses.asdict(cfg.partition)
    else:
        if not (args.t1w and args.mask):
            raise ConfigError("give --t1w and --mask, or --config")
        t1w, mask = load_volume(args.t1w), load_mask(args.mask)
    overrides = {"bin_count": args.bins, "max_regions": args.max_regions,
                 "min_gain_bits": args.min_gain, "min_extent": args.min_extent,
                 "margin": args.margin}
    params.update({k: v for k, v in overrides.items() if v is not None})
    tree = partition_volume(t1w, mask, PartitionParams(**params))
    tree.to_json(args.out)
    print(f"subdomains {len(tree.leaves)}")
    print(f"total_mi_bits {tree.total_mi:.9f}")
    return 0


def cmd_classify(args):
    from threadpoolctl import threadpool_limits

    from .pipeline import classify_all, extract_myelin, load_inputs
    from .quality import QualityReport
    cfg = _load_pipeline_config(args)
    inputs = load_inputs(cfg)
    report = QualityReport()
    init = inputs.init
    with threadpool_limits(limits=1):
        if cfg.age_profile == "early":
            init = extract_myelin(inputs.volume, init, report)
        tree = partition_volume(inputs.volume.channels[cfg.partition_channel],
                                inputs.volume.mask, cfg.partition)
        results = classify_all(inputs.volume, tree, init, cfg.kfda, cfg.seed, cfg.threads)
    os.makedirs(args.out, exist_ok=True)
    tree.to_json(os.path.join(args.out, "partition.json"))
    for res in results:
        write_nifti(res.labels, inputs.volume.voxel_size,
                    os.path.join(args.out, f"sub_{res.sub_id:03d}.nii"), "kfdaseg subdomain")
        report.events.extend(res.events)
    with open(os.path.join(args.out, "classify.json"), "w") as fh:
        json.dump({"events": report.events,
                   "subdomains": [{"id": r.sub_id, "overlap_box": r.box.to_list(),
                                   "categories": r.categories, "models": r.models}
                                  for r in results]}, fh, indent=1)
    print(f"classified {len(results)} subdomains into {args.out}")
    return 0


def cmd_stitch(args):
    from .pipeline import _conform_labels
    from .stitch import AnnealSchedule, EnergyParams, assemble_volume
    tree = PartitionTree.from_json(args.partition)
    mask = load_mask(args.mask)
    classified = {}
    for leaf in tree.leaves:
        arr, _, _ = read_nifti(os.path.join(args.subdomains, f"sub_{leaf.id:03d}.nii"))
        if arr.shape != leaf.overlap_box.shape:
            raise ConfigError(f"sub_{leaf.id:03d}.nii does not match its overlap box")
        classified[leaf.id] = arr.astype(np.uint8)
    energy_params = EnergyParams()
    sched = AnnealSchedule()
    if args.config:
        from .pipeline import PipelineConfig
        cfg = PipelineConfig.from_json(args.config)
        energy_params, sched = cfg.stitch.energy(), cfg.stitch.schedule(int(cfg.seed))
    if args.beta is not None:
        energy_params = EnergyParams(energy_params.w, args.beta)
    seed = args.seed if args.seed is not None else sched.seed
    sched = dataclasses.replace(sched, seed=[int(seed)])
    labels = assemble_volume(classified, tree, mask, energy_params, sched, args.threads or 1)
    labels = _conform_labels(labels, mask)
    save_volume(labels, args.out)
    for code in (CSF, GM, WM, MWM):
        print(f"{LABEL_NAMES[code]} {labels.count(code)}")
    return 0


def cmd_ssim(args):
    ref, test, mask = load_volume(args.ref), load_volume(args.test), load_mask(args.mask)
    p = SsimParams(args.window, args.sigma, args.k1, args.k2, args.dynamic_range)
    if args.map:
        score, maps = mssim(ref, test, mask, p, return_maps=True)
        from .volume import ScalarVolume
        save_volume(ScalarVolume(np.nan_to_num(maps, nan=0.0), ref.voxel_size), args.map)
    else:
        score = mssim(ref, test, mask, p)
    print(f"mssim {score:.12f}")
    return 0


def cmd_dice(args):
    a, b = load_labels(args.a), load_labels(args.b)
    for code in (CSF, GM, WM, MWM):
        if code == MWM and not (np.any(a.data == MWM) or np.any(b.data == MWM)):
            continue
        print(f"{LABEL_NAMES[code]} {dice(a, b, code):.6f}")
    return 0


def cmd_pipeline(args):
    from .pipeline import run_pipeline
    cfg = _load_pipeline_config(args)
    if args.out:
        cfg.output_dir = os.path.abspath(args.out)
    if args.max_refine_iters is not None:
        cfg.max_refine_iters = args.max_refine_iters
        cfg.__post_init__()
    if args.no_figures:
        cfg.figures = False
    if args.degrade:
        if not cfg.ground_truth:
            raise ConfigError("--degrade needs ground_truth in the config")
        truth = load_labels(cfg.resolve(cfg.ground_truth))
        init = degrade_labels(truth, args.erode_csf, args.swap_fraction, int(cfg.seed))
        os.makedirs(cfg.out_dir, exist_ok=True)
        path = os.path.join(cfg.out_dir, "init_labels.nii")
        save_volume(init, path)
        cfg.init_labels = os.path.abspath(path)
    report = run_pipeline(cfg)
    print(f"mssim_before {report.mssim_before:.6f}")
    print(f"mssim_after {report.mssim_after:.6f}")
    for name, value in report.dice.items():
        print(f"dice_{name} {value:.6f}")
    print(f"outputs {cfg.out_dir}")
    return 0


COMMANDS = {"phantom": cmd_phantom, "partition": cmd_partition, "classify": cmd_classify,
            "stitch": cmd_stitch, "ssim": cmd_ssim, "dice": cmd_dice, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (KfdaSegError, OSError, ValueError) as exc:
        print(f"kfdaseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


cli_dispatch = main


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
