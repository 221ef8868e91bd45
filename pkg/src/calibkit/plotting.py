"""Report figures: per-site quality indicators and residual histograms."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import PARAM_NAMES  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path):
    # no Software/creation metadata so identical inputs give identical files
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def plot_quality_indicators(history, path, title: str = "") -> None:
    """Four stacked panels over calibration sites: correspondence count,
    residual mean +/- std, angle sigmas and translation sigmas.

    Sites rejected by the gate or by a pipeline failure are drawn hollow.
    """
    records = [r for r in history if r.sigmas is not None]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(4, 1, figsize=(6.0, 8.0), sharex=True)
        if title:
            fig.suptitle(title)
        if not records:
            axes[0].text(0.5, 0.5, "no calibrated sites", ha="center", transform=axes[0].transAxes)
            _save(fig, path)
            return
        sites = np.array([r.site for r in records])
        accepted = np.array([r.accepted for r in records])
        ncorr = np.array([r.num_correspondences for r in records])
        mean = np.array([r.residual_mean for r in records])
        std = np.array([r.residual_std for r in records])
        sig = np.array([r.sigmas for r in records])

        def points(ax, y, **kw):
            line = ax.plot(sites, y, "-", lw=0.8, **kw)[0]
            ax.plot(sites[accepted], y[accepted], "o", color=line.get_color(), ms=4)
            ax.plot(sites[~accepted], y[~accepted], "o", mfc="none", color=line.get_color(), ms=4)

        points(axes[0], ncorr)
        axes[0].set_ylabel("correspondences")

        axes[1].errorbar(sites, mean * 100.0, yerr=std * 100.0, fmt="o", ms=3, capsize=2)
        axes[1].axhline(0.0, color="k", lw=0.6)
        axes[1].set_ylabel("residual [cm]")

        for i in range(3):
            points(axes[2], np.degrees(sig[:, i]), label=PARAM_NAMES[i])
        axes[2].set_ylabel("sigma angle [deg]")
        axes[2].set_yscale("log")
        axes[2].legend(ncol=3)

        for i in range(3, 6):
            points(axes[3], sig[:, i] * 100.0, label=PARAM_NAMES[i])
        axes[3].set_ylabel("sigma translation [cm]")
        axes[3].set_yscale("log")
        axes[3].legend(ncol=3)
        axes[3].set_xlabel("site")
        axes[3].set_xticks(sites)
        fig.tight_layout()
        _save(fig, path)


def plot_residual_histogram(residuals, path, title: str = "", bins: int = 40) -> None:
    """Histogram of signed point-to-plane residuals (cm) with mean and std annotated."""
    r = np.asarray(residuals, dtype=float) * 100.0
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        if r.size:
            ax.hist(r, bins=bins, color="0.55", edgecolor="0.25", lw=0.4)
            mu, sd = float(np.mean(r)), float(np.std(r))
            ax.axvline(mu, color="C3", lw=1.0)
            ax.text(
                0.98, 0.95, f"mean {mu:.2f} cm\nstd {sd:.2f} cm", ha="right", va="top", transform=ax.transAxes
            )
        ax.set_xlabel("point-to-plane residual [cm]")
        ax.set_ylabel("count")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def plot_site_histograms(history, path, title: str = "") -> None:
    """One residual histogram per site that produced an estimate."""
    records = [r for r in history if r.residuals is not None and len(r.residuals)]
    if not records:
        plot_residual_histogram([], path, title)
        return
    ncols = min(4, len(records))
    nrows = math.ceil(len(records) / ncols)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(nrows, ncols, figsize=(2.4 * ncols, 1.9 * nrows), squeeze=False)
        for ax, rec in zip(axes.flat, records):
            ax.hist(np.asarray(rec.residuals) * 100.0, bins=30, color="0.55")
            ax.set_title(f"site {rec.site}" + ("" if rec.accepted else " (rejected)"), fontsize=8)
        for ax in list(axes.flat)[len(records):]:
            ax.axis("off")
        if title:
            fig.suptitle(title)
        fig.supxlabel("residual [cm]")
        fig.tight_layout()
        _save(fig, path)
