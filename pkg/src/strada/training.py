"""Negative-log-likelihood training with Adam and frequency-domain augmentation.

One optimization step: draw a batch of (dataset, node, window end) triples
uniformly, optionally mask/mix frequency bins of each raw window, featurize,
take the mean Student-t NLL over every position, clip the global gradient
norm, and apply Adam with decoupled weight decay (weights only, never norm
gains or the head bias). Validation NLL is always computed without
augmentation; the best-validation epoch's weights are what gets checkpointed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tk
from ._util import check_keys
from .data import Checkpoint, DatasetBundle, Splits, checkpoint_from_params, chronological_split
from .errors import ConfigError, InputError, NumericError
from .features import FeaturizeConfig, SampleBuilder, admissible_window_ends
from .model import ModelConfig, ModelParams, forward_batch, init_params, student_t_nll_terms
from .tensor import RngStream, Tensor

# purpose tags for stream derivation
_STREAM_INIT = 1
_STREAM_SAMPLER = 2
_STREAM_AUGMENT = 3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 1e-8
    batch_size: int = 32
    epochs: int = 150
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    freq_mask_ratio: float = 0.1
    freq_mix_ratio: float = 0.1
    augment_prob: float = 0.5
    grad_clip: float = 1.0
    steps_per_epoch: int | None = None
    val_max_samples: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        for name in ("freq_mask_ratio", "freq_mix_ratio", "augment_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.grad_clip <= 0.0:
            raise ConfigError("grad_clip must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1 when set")
        if self.val_max_samples < 1:
            raise ConfigError("val_max_samples must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "freq_mask_ratio": self.freq_mask_ratio,
            "freq_mix_ratio": self.freq_mix_ratio,
            "augment_prob": self.augment_prob,
            "grad_clip": self.grad_clip,
            "steps_per_epoch": self.steps_per_epoch,
            "val_max_samples": self.val_max_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        check_keys(data, cls().to_dict().keys(), "train config")
        return cls(**dict(data))


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    seconds: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_nll: float = math.inf

    def log_lines(self) -> list[str]:
        lines = []
        for r in self.records:
            lines.append(f"{r.epoch},train,{r.train_nll:.6f},{r.seconds:.3f}")
            lines.append(f"{r.epoch},val,{r.val_nll:.6f},{r.seconds:.3f}")
        return lines


# ---------------------------------------------------------------------------
# frequency-domain augmentation


def freq_mask(window: np.ndarray, ratio: float, stream: RngStream) -> np.ndarray:
    """Zero ceil(ratio * (#bins - 1)) randomly chosen non-DC rfft bins."""
    if not (0.0 <= ratio <= 1.0):
        raise InputError(f"ratio must lie in [0, 1], got {ratio}")
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 1:
        raise InputError(f"freq_mask expects a 1-d series, got shape {window.shape}")
    spectrum = np.fft.rfft(window)
    maskable = spectrum.size - 1
    count = math.ceil(ratio * maskable)
    if count > 0:
        idx = stream.choice(maskable, count) + 1  # never the DC bin
        spectrum[idx] = 0.0
    return np.fft.irfft(spectrum, n=window.size)


def freq_mix(
    w1: np.ndarray, w2: np.ndarray, ratio: float, stream: RngStream
) -> np.ndarray:
    """Replace ceil(ratio * #bins) random rfft bins of w1 with w2's."""
    if not (0.0 <= ratio <= 1.0):
        raise InputError(f"ratio must lie in [0, 1], got {ratio}")
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.shape != w2.shape or w1.ndim != 1:
        raise InputError(
            f"freq_mix expects matching 1-d series, got {w1.shape} and {w2.shape}"
        )
    s1 = np.fft.rfft(w1)
    count = math.ceil(ratio * s1.size)
    if count > 0:
        idx = stream.choice(s1.size, count)
        s1[idx] = np.fft.rfft(w2)[idx]
    return np.fft.irfft(s1, n=w1.size)


# ---------------------------------------------------------------------------
# loss and optimizer


def batch_nll(
    params: ModelParams,
    tokens: np.ndarray,
    targets: np.ndarray,
    adapters: Mapping | None = None,
    batch_id=None,
) -> Tensor:
    """Mean NLL over every (sample, position); scalar with gradients attached."""
    nu, mu, sigma = forward_batch(params, tokens, adapters=adapters)
    terms = student_t_nll_terms(nu, mu, sigma, np.asarray(targets, dtype=nu.dtype))
    loss = tk.mean(terms)
    if not np.isfinite(loss.data):
        label = "" if batch_id is None else f" (batch {batch_id})"
        raise NumericError(f"non-finite training loss{label}")
    return loss


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, names: Sequence[str], params: Mapping[str, Tensor]):
        self.step = 0
        self.m = {n: np.zeros_like(params[n].data) for n in names}
        self.v = {n: np.zeros_like(params[n].data) for n in names}


def _decays(name: str, tensor: Tensor) -> bool:
    # decoupled decay touches weight matrices only: norm gains and the head
    # bias are 1-d and stay undecayed
    return tensor.data.ndim >= 2


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def adam_step(
    state: AdamState,
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    cfg: TrainConfig,
) -> None:
    """One Adam update with bias correction and decoupled weight decay."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, grad in grads.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad * grad
        if cfg.weight_decay > 0.0 and _decays(name, p):
            p.data *= 1.0 - cfg.learning_rate * cfg.weight_decay
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p.data -= (cfg.learning_rate * update).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# window bookkeeping


@dataclass
class TrainData:
    """Featurizer plus admissible window ends for one dataset."""

    bundle: DatasetBundle
    builder: SampleBuilder
    splits: Splits
    train_ends: list[int]
    val_ends: list[int]

    @property
    def windows_per_node(self) -> int:
        return len(self.train_ends)

    @property
    def n_train_windows(self) -> int:
        return self.bundle.n_nodes * len(self.train_ends)


def prepare_train_data(
    bundle: DatasetBundle,
    feat_cfg: FeaturizeConfig,
    context_length: int,
    split_ratios: tuple[float, float, float] = (0.70, 0.20, 0.10),
) -> TrainData:
    # Window ends must lie inside their split, but history may reach back
    # across the boundary (everything before t is observable at t), so only
    # the ends need checking, not each split's raw length.
    splits = chronological_split(bundle, split_ratios)
    builder = SampleBuilder(
        bundle.series, bundle.timestamps, bundle.frequency, bundle.graph, feat_cfg, context_length
    )
    train_ends = list(
        admissible_window_ends(
            splits.train.start, splits.train.stop, feat_cfg.lags.max_lag, context_length
        )
    )
    val_ends = list(
        admissible_window_ends(
            splits.val.start, splits.val.stop, feat_cfg.lags.max_lag, context_length
        )
    )
    if not train_ends:
        raise InputError(
            f"dataset {bundle.name!r}: no admissible training windows "
            f"(T={bundle.n_steps}, need > {feat_cfg.lags.max_lag + context_length})"
        )
    return TrainData(bundle, builder, splits, train_ends, val_ends)


def _triples_from_flat(data: Sequence[TrainData], flat: np.ndarray):
    """Map flat draws over the (dataset, node, window) space back to triples."""
    out = []
    bound = np.cumsum([d.n_train_windows for d in data])
    for raw in flat:
        ds = int(np.searchsorted(bound, raw, side="right"))
        local = int(raw - (0 if ds == 0 else bound[ds - 1]))
        node, widx = divmod(local, data[ds].windows_per_node)
        out.append((ds, node, data[ds].train_ends[widx]))
    return out


def draw_batch(
    data: Sequence[TrainData], batch_size: int, stream: RngStream
) -> list[tuple[int, int, int]]:
    """Uniform over every (dataset, node, admissible window end) triple."""
    total = sum(d.n_train_windows for d in data)
    flat = stream.integers(0, total, size=batch_size)
    return _triples_from_flat(data, flat)


def _eval_nll(
    params: ModelParams,
    data: Sequence[TrainData],
    pairs_by_ds: Sequence[list[tuple[int, int]]],
    batch_size: int,
    adapters=None,
) -> float:
    """Mean NLL over the given (node, end) pairs, no augmentation."""
    total, count = 0.0, 0
    for d, pairs in zip(data, pairs_by_ds):
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo : lo + batch_size]
            tokens, targets, _, _ = d.builder.batch(chunk)
            loss = batch_nll(params, tokens, targets, adapters=adapters)
            n = targets.size
            total += float(loss.data) * n
            count += n
    return total / max(count, 1)


def _subsampled_pairs(
    data: Sequence[TrainData], split: str, cap: int
) -> list[list[tuple[int, int]]]:
    """Deterministic evenly-spaced subsample of a split's (node, end) pairs."""
    all_pairs: list[tuple[int, tuple[int, int]]] = []
    for i, d in enumerate(data):
        ends = d.val_ends if split == "val" else d.train_ends
        for node in range(d.bundle.n_nodes):
            for t in ends:
                all_pairs.append((i, (node, t)))
    if len(all_pairs) > cap:
        keep = np.unique(np.linspace(0, len(all_pairs) - 1, cap).astype(np.int64))
        all_pairs = [all_pairs[j] for j in keep]
    return [[p for ds, p in all_pairs if ds == i] for i in range(len(data))]


def validation_pairs(data: Sequence[TrainData], cap: int) -> list[list[tuple[int, int]]]:
    return _subsampled_pairs(data, "val", cap)


# ---------------------------------------------------------------------------
# the shared fit loop


def _make_augment(
    d: TrainData, cfg: TrainConfig, stream: RngStream
) -> Callable[[np.ndarray, int], np.ndarray] | None:
    """Per-window augmentation closure for one dataset, or None if inert."""
    if cfg.augment_prob <= 0.0:
        return None
    if cfg.freq_mask_ratio <= 0.0 and cfg.freq_mix_ratio <= 0.0:
        return None  # keeps the ratios-0 run bit-identical to augmentation off

    def augment(window: np.ndarray, _i: int) -> np.ndarray:
        n_nodes, n_channels = window.shape[1], window.shape[2]
        if cfg.freq_mask_ratio > 0.0 and float(stream.uniform()) < cfg.augment_prob:
            for v in range(n_nodes):
                for f in range(n_channels):
                    window[:, v, f] = freq_mask(window[:, v, f], cfg.freq_mask_ratio, stream)
        if cfg.freq_mix_ratio > 0.0 and float(stream.uniform()) < cfg.augment_prob:
            partner_end = d.train_ends[int(stream.integers(0, len(d.train_ends)))]
            partner = d.builder.window_slice(partner_end)
            for v in range(n_nodes):
                for f in range(n_channels):
                    window[:, v, f] = freq_mix(
                        window[:, v, f], partner[:, v, f], cfg.freq_mix_ratio, stream
                    )
        return window

    return augment


def fit(
    params: ModelParams,
    data: Sequence[TrainData],
    cfg: TrainConfig,
    trainable: Sequence[str] | None = None,
    adapters: Mapping | None = None,
    adapter_tensors: Mapping[str, Tensor] | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray] | None, TrainReport]:
    """Run the training loop; returns (best base arrays, best adapter arrays, report).

    `trainable` restricts which base tensors get updates; `adapter_tensors`
    (flat name -> Tensor) are always trained when given. On a numeric failure
    the NumericError carries the partial report as `.report`.
    """
    base_names = list(trainable) if trainable is not None else params.names()
    opt_tensors: dict[str, Tensor] = {n: params.tensors[n] for n in base_names}
    if adapter_tensors:
        overlap = set(opt_tensors) & set(adapter_tensors)
        if overlap:
            raise ConfigError(f"adapter names collide with base tensors: {sorted(overlap)}")
        opt_tensors.update(adapter_tensors)
    if not opt_tensors:
        raise InputError("nothing to train: empty trainable set")

    state = AdamState(list(opt_tensors), opt_tensors)
    steps = cfg.steps_per_epoch
    if steps is None:
        total = sum(d.n_train_windows for d in data)
        steps = max(1, math.ceil(total / cfg.batch_size))
    val_by_ds = validation_pairs(data, cfg.val_max_samples)
    has_val = any(val_by_ds)

    report = TrainReport()

    def snapshot():
        base = {n: t.data.copy() for n, t in params.tensors.items()}
        ad = (
            {n: t.data.copy() for n, t in adapter_tensors.items()}
            if adapter_tensors
            else None
        )
        return base, ad

    def emit(record: EpochRecord):
        report.records.append(record)
        if log is not None:
            for line in (
                f"{record.epoch},train,{record.train_nll:.6f},{record.seconds:.3f}",
                f"{record.epoch},val,{record.val_nll:.6f},{record.seconds:.3f}",
            ):
                log(line)

    def run_validation() -> float:
        if not has_val:
            return math.nan
        return _eval_nll(params, data, val_by_ds, cfg.batch_size, adapters=adapters)

    # epoch 0: the untouched model, so descent is measurable from the log
    t0 = time.perf_counter()
    init_train = _eval_nll(
        params,
        data,
        _subsampled_pairs(data, "train", cfg.val_max_samples),
        cfg.batch_size,
        adapters=adapters,
    )
    init_val = run_validation()
    emit(EpochRecord(0, init_train, init_val, time.perf_counter() - t0))
    best_base, best_adapters = snapshot()
    report.best_epoch = 0
    report.best_val_nll = init_val if has_val else init_train

    for epoch in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        sampler = RngStream(cfg.seed, tk.mix_stream(_STREAM_SAMPLER, epoch))
        aug_stream = RngStream(cfg.seed, tk.mix_stream(_STREAM_AUGMENT, epoch))
        epoch_loss, epoch_count = 0.0, 0
        for step in range(steps):
            triples = draw_batch(data, cfg.batch_size, sampler)
            tokens_parts, target_parts = [], []
            for ds_index, d in enumerate(data):
                pairs = [(node, t) for ds, node, t in triples if ds == ds_index]
                if not pairs:
                    continue
                augment = _make_augment(d, cfg, aug_stream)
                tokens, targets, _, _ = d.builder.batch(pairs, augment=augment)
                tokens_parts.append(tokens)
                target_parts.append(targets)
            tokens = np.concatenate(tokens_parts, axis=0)
            targets = np.concatenate(target_parts, axis=0)
            try:
                loss = batch_nll(
                    params, tokens, targets, adapters=adapters, batch_id=f"{epoch}:{step}"
                )
            except NumericError as err:
                err.report = report
                raise
            grads_list = tk.gradient(loss, list(opt_tensors.values()))
            grads = {
                n: np.asarray(g, dtype=np.float64)
                for n, g in zip(opt_tensors, grads_list)
            }
            clip_global_norm(grads, cfg.grad_clip)
            adam_step(state, opt_tensors, grads, cfg)
            epoch_loss += float(loss.data)
            epoch_count += 1

        val_nll = run_validation()
        train_nll = epoch_loss / max(epoch_count, 1)
        emit(EpochRecord(epoch, train_nll, val_nll, time.perf_counter() - tic))
        score = val_nll if has_val else train_nll
        if score < report.best_val_nll:
            report.best_val_nll = score
            report.best_epoch = epoch
            best_base, best_adapters = snapshot()

    return best_base, best_adapters, report


def pretrain(
    datasets: Sequence[DatasetBundle],
    model_cfg: ModelConfig,
    feat_cfg: FeaturizeConfig,
    train_cfg: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> tuple[Checkpoint, TrainReport]:
    """Train a fresh model on one or more datasets; returns best-val checkpoint."""
    if not datasets:
        raise InputError("pretrain needs at least one dataset")
    channels = {d.series.shape[2] for d in datasets}
    if len(channels) != 1:
        raise InputError(f"datasets disagree on channel count: {sorted(channels)}")
    expected = feat_cfg.token_dim(channels.pop())
    if model_cfg.token_dim != expected:
        raise ConfigError(
            f"model token_dim {model_cfg.token_dim} != featurize layout {expected}"
        )
    data = [
        prepare_train_data(b, feat_cfg, model_cfg.context_length) for b in datasets
    ]
    params = init_params(model_cfg, RngStream(train_cfg.seed, _STREAM_INIT))
    best_base, _, report = fit(params, data, train_cfg, log=log)
    for name, arr in best_base.items():
        params.tensors[name].data = arr
    ckpt = checkpoint_from_params(
        params,
        feat_cfg,
        train_section=train_cfg.to_dict(),
        seed=train_cfg.seed,
    )
    return ckpt, report
