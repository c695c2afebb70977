"""Multi-step probabilistic forecasting by autoregressive rollout.

Each trajectory repeatedly featurizes its own extended history, runs the
model, draws one next value per node from the predicted Student-t, and
appends the full node vector so neighbor covariates stay self-consistent.
Trajectories are independent given their RNG streams and are processed in
fixed-size chunks, so the fan is bit-identical for any worker count.
"""

from __future__ import annotations

import datetime as _dt
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._util import check_keys
from .adapt import load_adapters
from .data import Checkpoint, params_from_checkpoint
from .errors import ConfigError, InputError, NumericError
from .features import FeaturizeConfig, SampleBuilder
from .graph import RoadGraph
from .model import ModelParams, forward_batch
from .tensor import RngStream, mix_stream

# Trajectories are partitioned into chunks of this fixed size regardless of
# how many workers run them; changing it would change batch shapes and with
# them the low-order float bits of the fan.
TRAJECTORY_CHUNK = 25

_STREAM_TRAJECTORY = 21

MODES = ("sample", "mean-path")


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 12
    n_samples: int = 100
    seed: int = 0
    mode: str = "sample"

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigError(f"horizon must be >= 0, got {self.horizon}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RolloutConfig":
        check_keys(data, cls().to_dict().keys(), "rollout config")
        return cls(**dict(data))


@dataclass(frozen=True)
class ForecastFan:
    """Sampled trajectories, nodes x horizon steps x samples."""

    samples: np.ndarray
    horizon: int
    n_samples: int

    def __post_init__(self):
        s = self.samples
        if s.ndim != 3 or s.shape[1] != self.horizon or s.shape[2] != self.n_samples:
            raise InputError(
                f"fan shape {s.shape} does not match horizon {self.horizon}, "
                f"n_samples {self.n_samples}"
            )
        if self.n_samples < 1 or self.horizon < 0:
            raise InputError("fan needs n_samples >= 1 and horizon >= 0")
        if s.size and not np.isfinite(s).all():
            raise NumericError("forecast fan contains non-finite values")

    @property
    def n_nodes(self) -> int:
        return self.samples.shape[0]


def point_forecast(fan: ForecastFan) -> np.ndarray:
    """Per-(node, step) median over trajectories, (N, H)."""
    return np.median(fan.samples, axis=2)


def quantiles(fan: ForecastFan, levels: Sequence[float]) -> np.ndarray:
    """Empirical quantiles by linear interpolation, (N, H, len(levels))."""
    for lv in levels:
        if not (0.0 < float(lv) < 1.0):
            raise InputError(f"quantile level must lie strictly in (0, 1), got {lv}")
    if not levels:
        return np.zeros(fan.samples.shape[:2] + (0,))
    out = np.quantile(fan.samples, list(levels), axis=2)
    return np.moveaxis(out, 0, 2)


class Roller:
    """Rollout engine bound to one model and one dataset's featurization.

    Reused across forecast origins during walk-forward evaluation so the
    positional encodings, neighborhoods, and calendar cache are built once.
    """

    def __init__(
        self,
        params: ModelParams,
        feat_cfg: FeaturizeConfig,
        timestamps: Sequence[_dt.datetime],
        frequency: _dt.timedelta,
        graph: RoadGraph,
        adapters: Mapping | None = None,
    ):
        self.params = params
        self.adapters = adapters
        self.context = params.cfg.context_length
        # The builder's own series is never read during rollout (histories are
        # passed per step); a zero-length placeholder keeps it honest.
        placeholder = np.zeros((0, graph.num_nodes, 1))
        self.builder = SampleBuilder(
            placeholder, timestamps, frequency, graph, feat_cfg, self.context
        )
        self.min_history = self.builder.max_lag + self.context

    def run(self, histories: np.ndarray, cfg: RolloutConfig, jobs: int = 1) -> ForecastFan:
        histories = np.asarray(histories, dtype=np.float64)
        if histories.ndim == 2:
            histories = histories[:, :, None]
        if histories.ndim != 3:
            raise InputError(f"histories must be (T, N, F), got shape {histories.shape}")
        t0, n_nodes, n_channels = histories.shape
        if n_nodes != self.builder.n_nodes:
            raise InputError(
                f"histories have {n_nodes} nodes, graph has {self.builder.n_nodes}"
            )
        if n_channels != 1:
            raise InputError("rollout supports single-channel series only")
        if t0 < self.min_history:
            raise InputError(
                f"insufficient history: need at least max_lag + context = "
                f"{self.min_history} steps, got {t0}"
            )
        if not np.isfinite(histories).all():
            raise InputError("histories contain non-finite values")

        horizon, n_samples = cfg.horizon, cfg.n_samples
        if horizon == 0:
            return ForecastFan(np.zeros((n_nodes, 0, n_samples)), 0, n_samples)

        # Warm the calendar cache up front so worker threads only read it.
        self.builder.dt_rows(np.arange(t0 - self.context, t0 + horizon))

        if cfg.mode == "mean-path":
            one = self._run_chunk(histories, cfg, 0, 1, horizon)
            stacked = np.repeat(one, n_samples, axis=0)
        else:
            bounds = [
                (lo, min(lo + TRAJECTORY_CHUNK, n_samples))
                for lo in range(0, n_samples, TRAJECTORY_CHUNK)
            ]
            if jobs <= 1 or len(bounds) == 1:
                parts = [self._run_chunk(histories, cfg, lo, hi, horizon) for lo, hi in bounds]
            else:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    parts = list(
                        pool.map(
                            lambda b: self._run_chunk(histories, cfg, b[0], b[1], horizon),
                            bounds,
                        )
                    )
            stacked = np.concatenate(parts, axis=0)
        return ForecastFan(stacked.transpose(2, 1, 0), horizon, n_samples)

    def _run_chunk(
        self, histories: np.ndarray, cfg: RolloutConfig, lo: int, hi: int, horizon: int
    ) -> np.ndarray:
        """Roll trajectories [lo, hi) forward; returns (hi - lo, H, N)."""
        t0, n_nodes, _ = histories.shape
        n = hi - lo
        context = self.context
        token_dim = self.builder.cfg.token_dim(1)

        buf = np.empty((n, t0 + horizon, n_nodes, 1), dtype=np.float64)
        buf[:, :t0] = histories[None]
        streams = [
            RngStream(cfg.seed, mix_stream(_STREAM_TRAJECTORY, s)) for s in range(lo, hi)
        ]
        out = np.empty((n, horizon, n_nodes), dtype=np.float64)

        for h in range(horizon):
            t_next = t0 + h
            tokens, loc, scale = self.builder.step_tokens(buf[:, :t_next], t_next)
            flat = tokens.reshape(n * n_nodes, context, token_dim)
            nu, mu, sigma = forward_batch(self.params, flat, adapters=self.adapters)
            nu_last = nu.data[:, -1].reshape(n, n_nodes).astype(np.float64)
            mu_last = mu.data[:, -1].reshape(n, n_nodes).astype(np.float64)
            sigma_last = sigma.data[:, -1].reshape(n, n_nodes).astype(np.float64)

            if cfg.mode == "sample":
                z = np.stack(
                    [streams[i].standard_t(nu_last[i], shape=(n_nodes,)) for i in range(n)]
                )
                scaled = mu_last + sigma_last * z
            else:
                scaled = mu_last
            raw = scaled * scale[:, :, 0] + loc[:, :, 0]

            finite = np.isfinite(raw)
            if not finite.all():
                s_bad, v_bad = np.argwhere(~finite)[0]
                raise NumericError(
                    f"non-finite forecast value at step {h + 1}, node {int(v_bad)} "
                    f"(trajectory {lo + int(s_bad)})"
                )
            buf[:, t_next, :, 0] = raw
            out[:, h] = raw
        return out


def rollout(
    ckpt: Checkpoint,
    histories: np.ndarray,
    graph: RoadGraph,
    cfg: RolloutConfig,
    timestamps: Sequence[_dt.datetime],
    frequency: _dt.timedelta,
    jobs: int = 1,
) -> ForecastFan:
    """One-shot rollout from a checkpoint; adapters stored in it are applied."""
    params, feat_cfg = params_from_checkpoint(ckpt)
    adapters = load_adapters(ckpt, params)
    roller = Roller(params, feat_cfg, timestamps, frequency, graph, adapters)
    return roller.run(histories, cfg, jobs=jobs)


def write_forecast_csv(path, fan: ForecastFan, levels: Sequence[float] = (0.1, 0.9)) -> None:
    """node,step,median plus one column per quantile level; step is 1-based."""
    med = point_forecast(fan)
    q = quantiles(fan, levels)
    header = "node,step,median" + "".join(f",q{float(lv):g}" for lv in levels)
    lines = [header]
    for v in range(fan.n_nodes):
        for h in range(fan.horizon):
            cells = [str(v), str(h + 1), f"{med[v, h]:.6f}"]
            cells.extend(f"{q[v, h, j]:.6f}" for j in range(len(levels)))
            lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
