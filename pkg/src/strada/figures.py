"""Figure rendering for CLI outputs, written next to the delimited files.

Everything draws through the Agg backend so runs stay headless. Each
function writes one PNG and returns its path; callers decide where.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import MetricReport
from .forecast import ForecastFan, point_forecast, quantiles
from .training import TrainReport

_DPI = 120


def _finish(fig, path) -> str:
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def training_curves(report: TrainReport, path) -> str:
    epochs = [r.epoch for r in report.records]
    train = [r.train_nll for r in report.records]
    val = [r.val_nll for r in report.records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, train, label="train NLL", color="tab:blue")
    if not all(np.isnan(val)):
        ax.plot(epochs, val, label="val NLL", color="tab:orange")
    if report.records:
        ax.axvline(report.best_epoch, color="gray", linewidth=0.8, linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("NLL")
    ax.legend()
    ax.set_title("training curves")
    return _finish(fig, path)


def metric_chart(
    report: MetricReport, path, baseline: MetricReport | None = None
) -> str:
    hs = [h.horizon for h in report.horizons]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, attr in zip(axes, ("mae", "rmse")):
        ax.plot(hs, [getattr(h, attr) for h in report.horizons], "o-", label="model")
        if baseline is not None:
            ax.plot(
                [h.horizon for h in baseline.horizons],
                [getattr(h, attr) for h in baseline.horizons],
                "s--",
                label="persistence",
                color="gray",
            )
        ax.set_xlabel("horizon (steps)")
        ax.set_ylabel(attr.upper())
        ax.set_xticks(hs)
        ax.legend()
    fig.suptitle("point-forecast error by horizon")
    return _finish(fig, path)


def fan_chart(
    fan: ForecastFan,
    history: np.ndarray,
    path,
    nodes: Sequence[int] | None = None,
    levels: tuple[float, float] = (0.1, 0.9),
    tail: int = 72,
) -> str:
    """History tail, median forecast, and a quantile band for a few nodes."""
    if history.ndim == 3:
        history = history[:, :, 0]
    if nodes is None:
        nodes = list(range(min(4, fan.n_nodes)))
    med = point_forecast(fan)
    band = quantiles(fan, list(levels))
    t_hist = np.arange(-min(tail, history.shape[0]), 0)
    t_fore = np.arange(1, fan.horizon + 1)
    fig, axes = plt.subplots(len(nodes), 1, figsize=(7, 2.2 * len(nodes)), sharex=True)
    if len(nodes) == 1:
        axes = [axes]
    for ax, v in zip(axes, nodes):
        ax.plot(t_hist, history[t_hist[0] + history.shape[0] :, v], color="tab:blue", lw=0.9)
        ax.plot(t_fore, med[v], color="tab:red", label="median")
        ax.fill_between(
            t_fore, band[v, :, 0], band[v, :, 1], color="tab:red", alpha=0.2,
            label=f"{levels[0]:g}-{levels[1]:g} band",
        )
        ax.axvline(0.5, color="gray", lw=0.8, linestyle=":")
        ax.set_ylabel(f"node {v}")
    axes[-1].set_xlabel("steps relative to forecast origin")
    axes[0].legend(loc="upper left", fontsize=8)
    fig.suptitle("forecast fan")
    return _finish(fig, path)


def sweep_chart(sweep: Sequence[tuple[float, MetricReport]], path) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    horizons = [h.horizon for h in sweep[0][1].horizons]
    sigmas = [s for s, _ in sweep]
    for i, hz in enumerate(horizons):
        ax.plot(sigmas, [rep.horizons[i].mae for _, rep in sweep], "o-", label=f"H={hz}")
    ax.set_xlabel("noise sigma")
    ax.set_ylabel("MAE")
    ax.legend()
    ax.set_title("input-noise robustness")
    return _finish(fig, path)
