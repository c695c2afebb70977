"""Forecast scoring: point metrics, baselines, calibration, noise sweeps.

Evaluation is walk-forward: forecast origins march through the chosen split
spaced one horizon apart, each fan sees only data strictly before its origin,
and point forecasts (medians over trajectories) are scored per horizon step
against the held-out truth.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from ._util import check_keys
from .adapt import load_adapters
from .data import Checkpoint, DatasetBundle, Splits, canonical_json, params_from_checkpoint
from .errors import ConfigError, InputError
from .features import FeaturizeConfig, SampleBuilder
from .forecast import ForecastFan, Roller, RolloutConfig, point_forecast, quantiles
from .model import ModelParams, forward_batch
from .tensor import RngStream

MAPE_MASK_THRESHOLD = 1e-3

_STREAM_NOISE = 31
_STREAM_EMBED = 32


# ---------------------------------------------------------------------------
# point metrics


def _check_shapes(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InputError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    return pred, truth


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check_shapes(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check_shapes(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape(pred: np.ndarray, truth: np.ndarray) -> float:
    """Percent error over entries with |truth| >= the masking threshold."""
    value, _ = mape_masked(pred, truth)
    return value


def mape_masked(pred: np.ndarray, truth: np.ndarray) -> tuple[float, int]:
    """(MAPE %, number of masked near-zero targets)."""
    pred, truth = _check_shapes(pred, truth)
    keep = np.abs(truth) >= MAPE_MASK_THRESHOLD
    n_masked = int(truth.size - keep.sum())
    if not keep.any():
        return 0.0, n_masked
    value = 100.0 * np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep]))
    return float(value), n_masked


def persistence_baseline(history: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat each node's last observed value `horizon` times, (N, H)."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim == 3:
        history = history[:, :, 0]
    if history.ndim != 2 or history.shape[0] == 0:
        raise InputError("history must be a nonempty (T, N) array")
    last = history[-1]
    return np.repeat(last[:, None], horizon, axis=1)


@dataclass(frozen=True)
class HorizonMetrics:
    horizon: int
    mae: float
    rmse: float
    mape: float
    n_pairs: int
    n_masked: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class MetricReport:
    horizons: tuple[HorizonMetrics, ...]

    def json_lines(self) -> list[str]:
        return [canonical_json(h.to_dict()) for h in self.horizons]

    def by_horizon(self, horizon: int) -> HorizonMetrics:
        for h in self.horizons:
            if h.horizon == horizon:
                return h
        raise InputError(f"no metrics for horizon {horizon}")


def write_report(path, report: MetricReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.json_lines()) + "\n")


# ---------------------------------------------------------------------------
# walk-forward evaluation


def split_range(splits: Splits, name: str) -> range:
    if name not in ("train", "val", "test"):
        raise InputError(f"split must be train, val, or test, got {name!r}")
    return getattr(splits, name)


def walk_forward_origins(
    split: range, min_history: int, horizon: int, max_origins: int | None = None
) -> list[int]:
    """Forecast origins spaced `horizon` apart inside the split.

    An origin t0 forecasts times [t0, t0 + horizon); it needs min_history
    steps of data before it and the whole forecast inside the split.
    """
    if horizon < 1:
        raise InputError(f"horizon must be >= 1, got {horizon}")
    start = max(split.start, min_history)
    origins = list(range(start, split.stop - horizon + 1, horizon))
    if not origins:
        raise InputError(
            f"split [{split.start}, {split.stop}) too short for horizon {horizon} "
            f"with {min_history} steps of required history"
        )
    if max_origins is not None and len(origins) > max_origins:
        keep = np.unique(np.linspace(0, len(origins) - 1, max_origins).astype(np.int64))
        origins = [origins[i] for i in keep]
    return origins


def _metrics_over(horizons, preds, truths) -> MetricReport:
    rows = []
    for h in horizons:
        p = np.concatenate(preds[h])
        y = np.concatenate(truths[h])
        mape_val, n_masked = mape_masked(p, y)
        rows.append(
            HorizonMetrics(
                horizon=h,
                mae=mae(p, y),
                rmse=rmse(p, y),
                mape=mape_val,
                n_pairs=int(p.size),
                n_masked=n_masked,
            )
        )
    return MetricReport(tuple(rows))


def walk_forward_metrics(
    roller: Roller,
    series: np.ndarray,
    split: range,
    horizons: Sequence[int],
    roll_cfg: RolloutConfig,
    max_origins: int | None = None,
    jobs: int = 1,
) -> tuple[MetricReport, MetricReport]:
    """(model report, persistence report) over the split's walk-forward origins."""
    horizons = sorted(set(int(h) for h in horizons))
    if not horizons or horizons[0] < 1:
        raise InputError(f"horizons must be positive integers, got {horizons}")
    h_max = horizons[-1]
    cfg = dataclasses.replace(roll_cfg, horizon=h_max)
    origins = walk_forward_origins(split, roller.min_history, h_max, max_origins)

    preds = {h: [] for h in horizons}
    base = {h: [] for h in horizons}
    truths = {h: [] for h in horizons}
    for t0 in origins:
        history = series[:t0]
        fan = roller.run(history, cfg, jobs=jobs)
        point = point_forecast(fan)
        persist = persistence_baseline(history, h_max)
        for h in horizons:
            preds[h].append(point[:, h - 1])
            base[h].append(persist[:, h - 1])
            truths[h].append(series[t0 + h - 1, :, 0])
    return _metrics_over(horizons, preds, truths), _metrics_over(horizons, base, truths)


def evaluate_point_forecasts(
    ckpt: Checkpoint,
    bundle: DatasetBundle,
    splits: Splits,
    horizons: Sequence[int] = (3, 6, 12),
    roll_cfg: RolloutConfig | None = None,
    split: str = "test",
    max_origins: int | None = None,
    jobs: int = 1,
) -> tuple[MetricReport, MetricReport]:
    params, feat_cfg = params_from_checkpoint(ckpt)
    adapters = load_adapters(ckpt, params)
    roller = Roller(
        params, feat_cfg, bundle.timestamps, bundle.frequency, bundle.graph, adapters
    )
    return walk_forward_metrics(
        roller,
        bundle.series,
        split_range(splits, split),
        horizons,
        roll_cfg or RolloutConfig(),
        max_origins=max_origins,
        jobs=jobs,
    )


# ---------------------------------------------------------------------------
# predictive likelihood vs a per-node Gaussian climatology


def _student_t_nll_values(nu, mu, sigma, y) -> np.ndarray:
    z = (y - mu) / sigma
    return (
        gammaln(nu / 2.0)
        - gammaln((nu + 1.0) / 2.0)
        + 0.5 * np.log(nu * np.pi)
        + np.log(sigma)
        + (nu + 1.0) / 2.0 * np.log1p(z * z / nu)
    )


def _split_pairs(
    builder: SampleBuilder, split: range, cap: int | None
) -> list[tuple[int, int]]:
    """Deterministic (node, window end) pairs whose target time lies in the split."""
    t_min = max(split.start, builder.max_lag + builder.context)
    ends = range(t_min, split.stop)
    if len(ends) == 0:
        raise InputError(f"split [{split.start}, {split.stop}) leaves no usable windows")
    pairs = [(v, t) for v in range(builder.n_nodes) for t in ends]
    if cap is not None and len(pairs) > cap:
        keep = np.unique(np.linspace(0, len(pairs) - 1, cap).astype(np.int64))
        pairs = [pairs[i] for i in keep]
    return pairs


def nll_comparison(
    ckpt: Checkpoint,
    bundle: DatasetBundle,
    splits: Splits,
    split: str = "test",
    cap: int | None = 4096,
    batch_size: int = 64,
) -> tuple[float, float, int]:
    """(model NLL, per-node Gaussian climatology NLL, pair count), raw units.

    Both likelihoods are scored on the identical one-step-ahead targets. The
    model term converts its scaled-space density back to raw units by adding
    log of the per-sample scale; the climatology fits each node's mean and
    variance on the train split only.
    """
    params, feat_cfg = params_from_checkpoint(ckpt)
    adapters = load_adapters(ckpt, params)
    builder = SampleBuilder(
        bundle.series,
        bundle.timestamps,
        bundle.frequency,
        bundle.graph,
        feat_cfg,
        params.cfg.context_length,
    )
    pairs = _split_pairs(builder, split_range(splits, split), cap)

    train = split_range(splits, "train")
    node_mean = bundle.series[train.start : train.stop, :, 0].mean(axis=0)
    node_std = np.maximum(bundle.series[train.start : train.stop, :, 0].std(axis=0), 1e-8)

    model_total, clim_total = 0.0, 0.0
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo : lo + batch_size]
        tokens, targets, loc, scale = builder.batch(chunk)
        nu, mu, sigma = forward_batch(params, tokens, adapters=adapters)
        nu_l = nu.data[:, -1].astype(np.float64)
        mu_l = mu.data[:, -1].astype(np.float64)
        sigma_l = sigma.data[:, -1].astype(np.float64)
        scaled_nll = _student_t_nll_values(nu_l, mu_l, sigma_l, targets[:, -1])
        model_total += float(np.sum(scaled_nll + np.log(scale[:, 0])))

        nodes = np.array([v for v, _ in chunk])
        ends = np.array([t for _, t in chunk])
        y_raw = bundle.series[ends, nodes, 0]
        m, s = node_mean[nodes], node_std[nodes]
        clim = 0.5 * np.log(2.0 * np.pi * s * s) + (y_raw - m) ** 2 / (2.0 * s * s)
        clim_total += float(np.sum(clim))
    n = len(pairs)
    return model_total / n, clim_total / n, n


# ---------------------------------------------------------------------------
# calibration


def coverage_check(fan: ForecastFan, truth: np.ndarray, level: float) -> float:
    """Fraction of (node, step) pairs inside the central `level` interval."""
    if not (0.0 < level < 1.0):
        raise InputError(f"level must lie strictly in (0, 1), got {level}")
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != fan.samples.shape[:2]:
        raise InputError(
            f"truth shape {truth.shape} does not match fan {fan.samples.shape[:2]}"
        )
    if truth.size == 0:
        raise InputError("coverage needs at least one (node, step) pair")
    lo, hi = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    q = quantiles(fan, [lo, hi])
    inside = (truth >= q[:, :, 0]) & (truth <= q[:, :, 1])
    return float(inside.mean())


# ---------------------------------------------------------------------------
# input-noise robustness sweep


@dataclass(frozen=True)
class NoiseSpec:
    sigmas: tuple[float, ...] = (0.2, 0.4, 0.8, 1.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        if not sig:
            raise ConfigError("sigmas must be nonempty")
        if any(s <= 0 for s in sig):
            raise ConfigError(f"sigmas must be positive, got {sig}")
        if list(sig) != sorted(sig):
            raise ConfigError(f"sigmas must be sorted ascending, got {sig}")
        object.__setattr__(self, "sigmas", sig)

    def to_dict(self) -> dict:
        return {"sigmas": list(self.sigmas), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Mapping) -> "NoiseSpec":
        check_keys(data, ("sigmas", "seed"), "noise spec")
        out = dict(data)
        if "sigmas" in out:
            out["sigmas"] = tuple(out["sigmas"])
        return cls(**out)


def minmax_gaussian_noise(sigma: float, base: np.ndarray) -> np.ndarray:
    """N(0, sigma^2) noise rescaled to [0, 1] by min-max normalization.

    The rescaling divides out sigma entirely, so every sigma yields the same
    matrix given the same base draw. That is the literal consequence of
    normalizing the noise to [0, 1] and is kept as such; the sweep reports it
    per sigma anyway so the output format stays stable.
    """
    scaled = sigma * base
    lo, hi = scaled.min(), scaled.max()
    if hi <= lo:
        return np.zeros_like(scaled)
    return (scaled - lo) / (hi - lo)


def perturbation_sweep(
    ckpt: Checkpoint,
    bundle: DatasetBundle,
    splits: Splits,
    spec: NoiseSpec,
    horizons: Sequence[int] = (3, 6, 12),
    roll_cfg: RolloutConfig | None = None,
    split: str = "val",
    max_origins: int | None = None,
    jobs: int = 1,
    noise_fn: Callable[[float, np.ndarray], np.ndarray] | None = None,
) -> list[tuple[float, MetricReport]]:
    """Evaluate walk-forward metrics with noise added to the series, per sigma.

    One standard-normal base matrix is drawn for the whole sweep; `noise_fn`
    (sigma, base) -> matrix defaults to min-max normalized Gaussian noise.
    """
    params, feat_cfg = params_from_checkpoint(ckpt)
    adapters = load_adapters(ckpt, params)
    roller = Roller(
        params, feat_cfg, bundle.timestamps, bundle.frequency, bundle.graph, adapters
    )
    rng = split_range(splits, split)
    cfg = roll_cfg or RolloutConfig()
    noise_fn = noise_fn or minmax_gaussian_noise

    base = RngStream(spec.seed, _STREAM_NOISE).normal(bundle.series.shape, dtype=np.float64)
    out = []
    for sigma in spec.sigmas:
        noisy = bundle.series + noise_fn(float(sigma), base)
        report, _ = walk_forward_metrics(
            roller, noisy, rng, horizons, cfg, max_origins=max_origins, jobs=jobs
        )
        out.append((float(sigma), report))
    return out


def write_sweep_csv(path, sweep: Sequence[tuple[float, MetricReport]]) -> None:
    lines = ["sigma,horizon,mae,rmse,mape,n_pairs,n_masked"]
    for sigma, report in sweep:
        for h in report.horizons:
            lines.append(
                f"{sigma:g},{h.horizon},{h.mae:.6f},{h.rmse:.6f},{h.mape:.6f},"
                f"{h.n_pairs},{h.n_masked}"
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# latent embedding export


def export_embeddings(
    ckpt: Checkpoint,
    bundle: DatasetBundle,
    limit: int,
    seed: int = 0,
    batch_size: int = 64,
) -> list[str]:
    """CSV lines of final-norm outputs at the last position of sampled windows.

    Columns: dataset, node, time, e0..e{d_model-1}. A seeded draw picks
    `limit` (node, window end) pairs without replacement; re-running with the
    same seed and limit reproduces the file byte for byte.
    """
    if limit < 0:
        raise InputError(f"limit must be >= 0, got {limit}")
    params, feat_cfg = params_from_checkpoint(ckpt)
    adapters = load_adapters(ckpt, params)
    d_model = params.cfg.d_model
    header = "dataset,node,time," + ",".join(f"e{j}" for j in range(d_model))
    if limit == 0:
        return [header]

    builder = SampleBuilder(
        bundle.series,
        bundle.timestamps,
        bundle.frequency,
        bundle.graph,
        feat_cfg,
        params.cfg.context_length,
    )
    t_min = builder.max_lag + builder.context
    ends = range(t_min, bundle.n_steps)
    if len(ends) == 0:
        raise InputError("series too short to build any windows")
    pairs = [(v, t) for v in range(builder.n_nodes) for t in ends]
    if limit < len(pairs):
        picked = RngStream(seed, _STREAM_EMBED).choice(len(pairs), size=limit)
        pairs = [pairs[i] for i in np.sort(picked)]

    lines = [header]
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo : lo + batch_size]
        tokens, _, _, _ = builder.batch(chunk)
        _, _, _, hidden = forward_batch(params, tokens, adapters=adapters, return_hidden=True)
        last = hidden.data[:, -1, :]
        for i, (v, t) in enumerate(chunk):
            vec = ",".join(f"{last[i, j]:.6f}" for j in range(d_model))
            lines.append(f"{bundle.name},{v},{bundle.timestamps[t].isoformat()},{vec}")
    return lines


def write_embeddings_csv(path, lines: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
