"""Report figures written next to the JSON/TSV outputs."""
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

LABEL_CMAP = ListedColormap(["black", "tab:blue", "tab:gray", "white", "tab:orange"])

_RC = {"font.size": 9, "axes.titlesize": 10, "figure.dpi": 100, "savefig.bbox": "tight",
       "image.interpolation": "nearest", "image.origin": "lower"}


def _save(fig, path):
    # no timestamp metadata so figures are reproducible byte for byte
    fig.savefig(path, metadata={"Software": None, "Creation Time": None} if path.endswith(".png")
                else None)
    plt.close(fig)


def plot_label_slices(path, t1w, panels, z=None):
    """T1w slice followed by one label panel per (title, label array) pair."""
    z = t1w.shape[2] // 2 if z is None else z
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(panels) + 1, figsize=(2.6 * (len(panels) + 1), 2.8))
        axes[0].imshow(t1w[:, :, z].T, cmap="gray", vmin=0, vmax=1)
        axes[0].set_title(f"T1w, z={z}")
        for ax, (title, lab) in zip(axes[1:], panels):
            ax.imshow(lab[:, :, z].T, cmap=LABEL_CMAP, vmin=0, vmax=4)
            ax.set_title(title)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        _save(fig, path)


def plot_partition(path, t1w, tree, z=None):
    z = t1w.shape[2] // 2 if z is None else z
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(t1w[:, :, z].T, cmap="gray", vmin=0, vmax=1)
        for sub in tree.leaves:
            (x0, y0, z0), (x1, y1, z1) = sub.core_box.lo, sub.core_box.hi
            if not z0 <= z <= z1:
                continue
            ax.add_patch(Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0 + 1, y1 - y0 + 1,
                                   fill=False, edgecolor="yellow", lw=0.8))
            ax.text((x0 + x1) / 2, (y0 + y1) / 2, str(sub.id), color="yellow",
                    ha="center", va="center", fontsize=6)
        ax.set_title(f"{len(tree.leaves)} subdomains, {tree.total_mi:.3f} bits")
        ax.set_xticks([])
        ax.set_yticks([])
        _save(fig, path)


def plot_cnr_map(path, cnr_rows):
    rows = [r for r in cnr_rows if r["cnr"] is not None]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        if rows:
            means = [r["mean"] for r in rows]
            vals = [r["cnr"] for r in rows]
            sc = ax.scatter(means, vals, c=[r["id"] for r in rows], cmap="viridis", s=18)
            fig.colorbar(sc, ax=ax, label="subdomain id")
        ax.set_xlabel("mean T1w (normalized)")
        ax.set_ylabel("GM/WM CNR")
        ax.set_title("Local GM/WM contrast-to-noise")
        _save(fig, path)


def plot_ssim_map(path, ssim_maps, z=None):
    z = ssim_maps.shape[2] // 2 if z is None else z
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4, 3.6))
        im = ax.imshow(ssim_maps[:, :, z].T, cmap="magma", vmin=0, vmax=1)
        fig.colorbar(im, ax=ax, label="SSIM")
        ax.set_title(f"SSIM map, z={z}")
        ax.set_xticks([])
        ax.set_yticks([])
        _save(fig, path)


def render_report(out_dir, inputs, labels, tree, report, ssim_maps=None):
    os.makedirs(out_dir, exist_ok=True)
    t1 = inputs.volume.channels["T1w"].data if "T1w" in inputs.volume.channels else \
        next(iter(inputs.volume.channels.values())).data
    panels = [("initial", inputs.init.data), ("KFDA", labels.data)]
    if inputs.truth is not None:
        panels.append(("ground truth", inputs.truth.data))
    plot_label_slices(os.path.join(out_dir, "labels.png"), t1, panels)
    plot_partition(os.path.join(out_dir, "partition.png"), t1, tree)
    plot_cnr_map(os.path.join(out_dir, "cnr_map.png"), report.cnr_map)
    if ssim_maps is not None:
        plot_ssim_map(os.path.join(out_dir, "ssim_map.png"), np.nan_to_num(ssim_maps, nan=0.0))
