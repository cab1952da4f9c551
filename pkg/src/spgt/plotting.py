"""Report figures. Uses the Agg backend; every function writes one file."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_explained_variance(ratios, path):
    ratios = np.asarray(ratios)
    k = np.arange(1, len(ratios) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(k, ratios, color="0.6", label="component")
    ax.plot(k, np.cumsum(ratios), "o-", color="k", label="cumulative")
    ax.set_xlabel("principal component")
    ax.set_ylabel("explained variance")
    ax.set_xticks(k)
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_eval_report(report, path):
    """Per-object disparity EPE and depth RMSE, with the object-wise means."""
    ids = [o.id for o in report.per_object]
    epe = [o.epe for o in report.per_object]
    rmse = [o.rmse for o in report.per_object]
    x = np.arange(len(ids))
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(max(5, 0.35 * len(ids) + 2), 5), sharex=True)
    a1.bar(x, epe, color="0.5")
    a1.axhline(report.object_epe, color="k", ls="--", lw=1)
    a1.set_ylabel("EPE [px]")
    a2.bar(x, rmse, color="0.5")
    a2.axhline(report.object_depth_rmse, color="k", ls="--", lw=1)
    a2.set_ylabel("depth RMSE [m]")
    a2.set_xticks(x)
    a2.set_xticklabels(ids, rotation=90, fontsize=7)
    a2.set_xlabel("instance")
    _save(fig, path)


def plot_disparity_map(dmap, path):
    vals = np.where(dmap.mask, dmap.values, np.nan)
    fig, ax = plt.subplots(figsize=(4, 3))
    im = ax.imshow(vals, cmap="viridis")
    fig.colorbar(im, ax=ax, label=f"instance disparity [{dmap.units}]")
    ax.set_axis_off()
    _save(fig, path)
