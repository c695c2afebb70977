"""Turning raw series + graph into model tokens.

A token for node v at time t stacks, in order: lagged values for every node
in v's k-hop neighborhood (one scaled block per neighbor slot, zero-padded
up to the slot cap), normalized calendar features of the timestamp, and v's
Laplacian positional embedding. Values are scaled per sample with each
node's own mean-absolute scaler, so tokens never see absolute units.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ._util import check_keys
from .errors import InputError
from .graph import KHopSpec, RoadGraph, khop_neighborhood, laplacian_pe

DEFAULT_LAGS: tuple[int, ...] = tuple(range(1, 13)) + (24, 48, 72, 96, 144, 288)

# name -> (index extractor, cardinality); features are idx/(cardinality-1) - 0.5
_DT_FIELDS: dict[str, tuple[Callable[[_dt.datetime], int], int]] = {
    "minute_of_hour": (lambda ts: ts.minute, 60),
    "hour_of_day": (lambda ts: ts.hour, 24),
    "day_of_week": (lambda ts: ts.weekday(), 7),
    "day_of_month": (lambda ts: ts.day - 1, 31),
    "day_of_year": (lambda ts: ts.timetuple().tm_yday - 1, 366),
    "month_of_year": (lambda ts: ts.month - 1, 12),
    "quarter_of_year": (lambda ts: (ts.month - 1) // 3, 4),
}

DEFAULT_DT_FEATURES: tuple[str, ...] = tuple(_DT_FIELDS)


@dataclass(frozen=True)
class LagSet:
    """Strictly increasing positive lag indices (in steps, not wall time)."""

    indices: tuple[int, ...] = DEFAULT_LAGS

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise InputError("lag set must not be empty")
        if idx[0] < 1 or any(b <= a for a, b in zip(idx, idx[1:])):
            raise InputError(f"lags must be strictly increasing and >= 1, got {idx}")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def max_lag(self) -> int:
        return self.indices[-1]


@dataclass(frozen=True)
class FeaturizeConfig:
    """Everything token layout depends on."""

    lags: LagSet = field(default_factory=LagSet)
    k_hops: int = 3
    max_neighbors: int = 8
    k_pe: int = 4
    datetime_features: tuple[str, ...] = DEFAULT_DT_FEATURES
    scale_floor: float = 1e-3

    def __post_init__(self):
        for name in self.datetime_features:
            if name not in _DT_FIELDS:
                raise InputError(f"unknown datetime feature {name!r}")
        if self.scale_floor <= 0.0:
            raise InputError("scale_floor must be positive")
        KHopSpec(self.k_hops, self.max_neighbors)  # validates both

    @property
    def khop(self) -> KHopSpec:
        return KHopSpec(self.k_hops, self.max_neighbors)

    def token_dim(self, n_channels: int = 1) -> int:
        return (
            len(self.lags) * self.max_neighbors * n_channels
            + len(self.datetime_features)
            + self.k_pe
        )

    def layout_fields(self) -> dict:
        """The fields another config must match for checkpoints to transfer."""
        return {
            "lags": list(self.lags.indices),
            "k_hops": self.k_hops,
            "max_neighbors": self.max_neighbors,
            "k_pe": self.k_pe,
            "datetime_features": list(self.datetime_features),
        }

    def to_dict(self) -> dict:
        out = self.layout_fields()
        out["scale_floor"] = self.scale_floor
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeaturizeConfig":
        check_keys(
            data,
            ("lags", "k_hops", "max_neighbors", "k_pe", "datetime_features", "scale_floor"),
            "featurize config",
        )
        kwargs = dict(data)
        if "lags" in kwargs:
            kwargs["lags"] = LagSet(tuple(kwargs["lags"]))
        if "datetime_features" in kwargs:
            kwargs["datetime_features"] = tuple(kwargs["datetime_features"])
        return cls(**kwargs)


@dataclass(frozen=True)
class Scaler:
    """Per-channel location/scale fit on one sample window."""

    location: np.ndarray
    scale: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.location) / self.scale

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.scale + self.location


@dataclass(frozen=True)
class TokenFrame:
    """One token vector plus the neighbor-slot occupancy mask."""

    values: np.ndarray
    neighbor_mask: np.ndarray


@dataclass(frozen=True)
class TokenSequence:
    """Context tokens for one (node, window end) sample, plus scaled targets."""

    tokens: np.ndarray  # (context, token_dim)
    neighbor_mask: np.ndarray
    node: int
    end_time: int
    center_scaler: Scaler


def datetime_features(
    timestamp: _dt.datetime, features: Sequence[str] = DEFAULT_DT_FEATURES
) -> np.ndarray:
    """Calendar features normalized to [-0.5, 0.5] by cardinality."""
    out = np.empty(len(features), dtype=np.float64)
    for i, name in enumerate(features):
        try:
            extract, cardinality = _DT_FIELDS[name]
        except KeyError:
            raise InputError(f"unknown datetime feature {name!r}") from None
        out[i] = extract(timestamp) / (cardinality - 1) - 0.5
    return out


def lag_features(series: np.ndarray, t: int, lags: LagSet) -> np.ndarray:
    """Values of one node's series at t - lag for each lag, shape (|lags|, F).

    `series` is (T, F) for a single node; requires t >= max lag so nothing
    before the start of the series is read.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    if t < lags.max_lag:
        raise InputError(f"t={t} has insufficient history for max lag {lags.max_lag}")
    if t > series.shape[0]:
        raise InputError(f"t={t} beyond series length {series.shape[0]}")
    idx = t - np.asarray(lags.indices, dtype=np.int64)
    return series[idx]


def fit_scaler(window: np.ndarray, floor: float = 1e-3) -> Scaler:
    """Location = mean, scale = mean absolute value (floored), per channel."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 1:
        window = window[:, None]
    if window.shape[0] == 0:
        raise InputError("cannot fit a scaler on an empty window")
    location = window.mean(axis=0)
    scale = np.maximum(np.abs(window).mean(axis=0), floor)
    return Scaler(location=location, scale=scale)


def apply_scaler(scaler: Scaler, values: np.ndarray) -> np.ndarray:
    return scaler.apply(np.asarray(values, dtype=np.float64))


def build_token(
    series: np.ndarray,
    t: int,
    timestamp: _dt.datetime,
    neighborhood: Sequence[int],
    pe_row: np.ndarray,
    cfg: FeaturizeConfig,
    scalers: Mapping[int, Scaler] | None = None,
) -> TokenFrame:
    """Assemble one token for the node owning `neighborhood[0]` at time t.

    Reads only series values at times <= t-1 (all lags are >= 1). Neighbor
    slots beyond len(neighborhood) are zero blocks with mask 0.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 2:
        series = series[:, :, None]
    n_channels = series.shape[2]
    if len(neighborhood) == 0:
        raise InputError("neighborhood must contain at least the center node")
    if len(neighborhood) > cfg.max_neighbors:
        raise InputError(
            f"neighborhood size {len(neighborhood)} exceeds cap {cfg.max_neighbors}"
        )
    pe_row = np.asarray(pe_row, dtype=np.float64)
    if pe_row.shape != (cfg.k_pe,):
        raise InputError(f"pe_row shape {pe_row.shape} != ({cfg.k_pe},)")

    block = len(cfg.lags) * n_channels
    values = np.zeros(cfg.token_dim(n_channels), dtype=np.float64)
    mask = np.zeros(cfg.max_neighbors, dtype=np.float64)
    for slot, node in enumerate(neighborhood):
        lagged = lag_features(series[:, node, :], t, cfg.lags)
        if scalers is not None:
            lagged = scalers[node].apply(lagged)
        values[slot * block : (slot + 1) * block] = lagged.reshape(-1)
        mask[slot] = 1.0
    offset = cfg.max_neighbors * block
    dt_vals = datetime_features(timestamp, cfg.datetime_features)
    values[offset : offset + dt_vals.size] = dt_vals
    values[offset + dt_vals.size :] = pe_row
    return TokenFrame(values=values, neighbor_mask=mask)


def admissible_window_ends(
    t_start: int, t_stop: int, max_lag: int, context_length: int
) -> range:
    """Window ends t in [t_start, t_stop) with full history behind them.

    A window end t is the time of the sample's last target; its tokens span
    [t - context, t - 1] and the deepest lag reads t - context - max_lag.
    """
    lo = max(t_start, max_lag + context_length)
    return range(lo, max(lo, t_stop))


def make_sample(
    series: np.ndarray,
    timestamps: Sequence[_dt.datetime],
    graph: RoadGraph,
    node: int,
    t: int,
    cfg: FeaturizeConfig,
    context_length: int,
    pe: np.ndarray | None = None,
) -> tuple[TokenSequence, np.ndarray]:
    """One teacher-forced sample: context tokens and scaled next-step targets.

    Position p holds the token for time t - context + p; target[p] is the
    center node's (first-channel) value at time t - context + p + 1, in the
    sample's scaled space. Scalers are fit per node on the window
    [t - context - max_lag, t), so the final target at time t never leaks
    into them.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 2:
        series = series[:, :, None]
    max_lag = cfg.lags.max_lag
    if t < max_lag + context_length:
        raise InputError(
            f"window end {t} needs history >= {max_lag + context_length} steps"
        )
    if t >= series.shape[0]:
        raise InputError(f"window end {t} beyond series length {series.shape[0]}")

    neighborhood = khop_neighborhood(graph, node, cfg.khop)
    if pe is None:
        pe = laplacian_pe(graph, cfg.k_pe).embeddings
    lo = t - context_length - max_lag
    scalers = {
        u: fit_scaler(series[lo:t, u, :], cfg.scale_floor) for u in neighborhood
    }
    frames = []
    for p in range(context_length):
        tau = t - context_length + p
        frames.append(
            build_token(series, tau, timestamps[tau], neighborhood, pe[node], cfg, scalers)
        )
    tokens = np.stack([f.values for f in frames])
    center = scalers[node]
    raw_targets = series[t - context_length + 1 : t + 1, node, 0]
    targets = (raw_targets - center.location[0]) / center.scale[0]
    seq = TokenSequence(
        tokens=tokens,
        neighbor_mask=frames[0].neighbor_mask,
        node=node,
        end_time=t,
        center_scaler=center,
    )
    return seq, targets


class SampleBuilder:
    """Vectorized batch featurizer over one dataset.

    Produces the same numbers as `make_sample` (tests hold the two routes
    together) but assembles whole batches with array gathers, which is what
    makes desk-scale training and rollout affordable. Windows are copied per
    sample so callers can augment them in place before token assembly.
    """

    def __init__(
        self,
        series: np.ndarray,
        timestamps: Sequence[_dt.datetime],
        frequency: _dt.timedelta,
        graph: RoadGraph,
        cfg: FeaturizeConfig,
        context_length: int,
    ):
        series = np.asarray(series, dtype=np.float64)
        if series.ndim == 2:
            series = series[:, :, None]
        self.series = series
        self.timestamps = list(timestamps)
        self.frequency = frequency
        self.graph = graph
        self.cfg = cfg
        self.context = int(context_length)
        self.max_lag = cfg.lags.max_lag
        self.n_nodes = graph.num_nodes
        self.n_channels = series.shape[2]

        self.pe = laplacian_pe(graph, cfg.k_pe).embeddings
        self.neighborhoods = [
            khop_neighborhood(graph, v, cfg.khop) for v in range(self.n_nodes)
        ]
        # local gather grid: row p, col j -> index of time (t - C + p) - lag_j
        # inside a window whose first row is time t - C - max_lag
        lags = np.asarray(cfg.lags.indices, dtype=np.int64)
        self._lag_grid = self.max_lag + np.arange(self.context)[:, None] - lags[None, :]
        self._dt_cache: dict[int, np.ndarray] = {}

    # -- calendar ----------------------------------------------------------
    def _timestamp_at(self, t: int) -> _dt.datetime:
        if t < len(self.timestamps):
            return self.timestamps[t]
        extra = t - (len(self.timestamps) - 1)
        return self.timestamps[-1] + extra * self.frequency

    def dt_rows(self, times: np.ndarray) -> np.ndarray:
        rows = np.empty((len(times), len(self.cfg.datetime_features)), dtype=np.float64)
        for i, t in enumerate(times):
            t = int(t)
            cached = self._dt_cache.get(t)
            if cached is None:
                cached = datetime_features(self._timestamp_at(t), self.cfg.datetime_features)
                self._dt_cache[t] = cached
            rows[i] = cached
        return rows

    # -- core assembly -----------------------------------------------------
    def window_slice(self, t: int) -> np.ndarray:
        """Raw window [t - C - max_lag, t] feeding the sample with end t."""
        lo = t - self.context - self.max_lag
        if lo < 0 or t >= self.series.shape[0]:
            raise InputError(f"window end {t} out of range")
        return self.series[lo : t + 1].copy()

    def from_windows(
        self, windows: np.ndarray, nodes: np.ndarray, ends: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Tokens/targets for per-sample windows of shape (B, C+L+1, N, F).

        Returns (tokens (B,C,D), targets (B,C), location (B,F), scale (B,F));
        the last two belong to each sample's center node.
        """
        cfg = self.cfg
        n_batch = windows.shape[0]
        fit = windows[:, :-1]  # exclude the final target row from scalers
        loc = fit.mean(axis=1)  # (B, N, F)
        scale = np.maximum(np.abs(fit).mean(axis=1), cfg.scale_floor)

        gathered = windows[:, self._lag_grid]  # (B, C, |L|, N, F)
        block = len(cfg.lags) * self.n_channels
        tokens = np.zeros((n_batch, self.context, cfg.token_dim(self.n_channels)))
        for v in np.unique(nodes):
            rows = np.flatnonzero(nodes == v)
            nbh = self.neighborhoods[v]
            sub = gathered[rows][:, :, :, nbh, :]  # (b, C, |L|, M, F)
            sub = (sub - loc[rows][:, None, None, nbh, :]) / scale[rows][:, None, None, nbh, :]
            sub = sub.transpose(0, 1, 3, 2, 4).reshape(len(rows), self.context, -1)
            tokens[rows, :, : len(nbh) * block] = sub
            tokens[rows, :, cfg.max_neighbors * block + len(cfg.datetime_features) :] = (
                self.pe[v]
            )
        dt_offset = cfg.max_neighbors * block
        for i in range(n_batch):
            times = ends[i] - self.context + np.arange(self.context)
            tokens[i, :, dt_offset : dt_offset + len(cfg.datetime_features)] = self.dt_rows(
                times
            )

        center_loc = loc[np.arange(n_batch), nodes, :]
        center_scale = scale[np.arange(n_batch), nodes, :]
        raw_targets = windows[
            np.arange(n_batch)[:, None],
            self.max_lag + 1 + np.arange(self.context)[None, :],
            nodes[:, None],
            0,
        ]
        targets = (raw_targets - center_loc[:, :1]) / center_scale[:, :1]
        return tokens, targets, center_loc, center_scale

    def batch(
        self,
        pairs: Sequence[tuple[int, int]],
        augment=None,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Featurize (node, window end) pairs; `augment` may edit each window."""
        nodes = np.asarray([p[0] for p in pairs], dtype=np.int64)
        ends = np.asarray([p[1] for p in pairs], dtype=np.int64)
        windows = np.stack([self.window_slice(int(t)) for t in ends])
        if augment is not None:
            for i in range(windows.shape[0]):
                windows[i] = augment(windows[i], i)
        return self.from_windows(windows, nodes, ends)

    def step_tokens(
        self, histories: np.ndarray, t_next: int
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Tokens for predicting time `t_next` for every node and trajectory.

        `histories` is (S, T, N, F) with T >= t_next >= max_lag + C. Returns
        (tokens (S, N, C, D), location (S, N, F), scale (S, N, F)).
        """
        cfg = self.cfg
        n_traj = histories.shape[0]
        lo = t_next - self.context - self.max_lag
        if lo < 0:
            raise InputError(f"step {t_next} lacks history for context + max lag")
        window = histories[:, lo:t_next]  # (S, C+L, N, F)
        loc = window.mean(axis=1)
        scale = np.maximum(np.abs(window).mean(axis=1), cfg.scale_floor)

        gathered = window[:, self._lag_grid]  # (S, C, |L|, N, F)
        block = len(cfg.lags) * self.n_channels
        tokens = np.zeros(
            (n_traj, self.n_nodes, self.context, cfg.token_dim(self.n_channels))
        )
        dt_offset = cfg.max_neighbors * block
        times = t_next - self.context + np.arange(self.context)
        dt_block = self.dt_rows(times)
        for v in range(self.n_nodes):
            nbh = self.neighborhoods[v]
            sub = gathered[:, :, :, nbh, :]
            sub = (sub - loc[:, None, None, nbh, :]) / scale[:, None, None, nbh, :]
            sub = sub.transpose(0, 1, 3, 2, 4).reshape(n_traj, self.context, -1)
            tokens[:, v, :, : len(nbh) * block] = sub
            tokens[:, v, :, dt_offset : dt_offset + dt_block.shape[1]] = dt_block
            tokens[:, v, :, dt_offset + dt_block.shape[1] :] = self.pe[v]
        return tokens, loc, scale
