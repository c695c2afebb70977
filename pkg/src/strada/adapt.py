"""Fine-tuning a pretrained checkpoint on a new road network.

Three plans: low-rank adapters on the attention projections (frozen base,
trained head), unfreezing the top k blocks, or full fine-tuning. Low-rank
adapters add scale * B @ A next to each target projection; A starts Gaussian
(std 0.02) and B starts at zero, so an untrained adapter is an exact no-op.
Adapted checkpoints keep base weights and adapters separate; merging them
into plain weights is an explicit, one-shot step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._util import check_keys
from .data import (
    Checkpoint,
    DatasetBundle,
    checkpoint_from_params,
    params_from_checkpoint,
)
from .errors import CompatibilityError, ConfigError, InputError
from .features import FeaturizeConfig
from .model import ModelParams, count_parameters
from .tensor import RngStream, Tensor
from .training import (
    TrainConfig,
    TrainReport,
    _eval_nll,
    fit,
    prepare_train_data,
    validation_pairs,
)

LORA_INIT_STD = 0.02
LORA_TARGETS = ("wq", "wk", "wv")

_STREAM_LORA_INIT = 11


@dataclass
class LoraAdapter:
    """Low-rank delta for one projection: scale * (B @ A) beside the frozen W."""

    target: str
    a: Tensor  # (rank, in_dim)
    b: Tensor  # (out_dim, rank)
    rank: int
    scale: float = 1.0
    merged: bool = False


@dataclass(frozen=True)
class AdaptPlan:
    """What to train during adaptation and on how much target data."""

    method: str = "lora"
    rank: int = 4
    k_layers: int = 1
    scale: float = 1.0
    fraction: float = 1.0

    def __post_init__(self):
        if self.method not in ("lora", "topk", "full"):
            raise ConfigError(f"method must be lora, topk, or full, got {self.method!r}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.k_layers < 1:
            raise ConfigError(f"k_layers must be >= 1, got {self.k_layers}")
        if not (0.0 < self.fraction <= 1.0):
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "rank": self.rank,
            "k_layers": self.k_layers,
            "scale": self.scale,
            "fraction": self.fraction,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AdaptPlan":
        check_keys(data, cls().to_dict().keys(), "adapt config")
        return cls(**dict(data))


def attach_lora(
    params: ModelParams,
    rank: int,
    stream: RngStream,
    scale: float = 1.0,
    targets: Sequence[str] = LORA_TARGETS,
) -> dict[str, LoraAdapter]:
    """Build adapters for every layer's target projections, keyed by tensor name."""
    cfg = params.cfg
    adapters: dict[str, LoraAdapter] = {}
    for i in range(cfg.n_layers):
        for proj in targets:
            name = f"layers.{i}.attn.{proj}"
            w = params[name]
            out_dim, in_dim = w.shape[1], w.shape[0]
            if rank >= min(out_dim, in_dim):
                raise InputError(
                    f"rank {rank} must be < min(d, k) = {min(out_dim, in_dim)} for {name}"
                )
            a = Tensor(
                stream.normal((rank, in_dim), dtype=w.dtype) * LORA_INIT_STD,
                requires_grad=True,
            )
            b = Tensor(np.zeros((out_dim, rank), dtype=w.dtype), requires_grad=True)
            adapters[name] = LoraAdapter(target=name, a=a, b=b, rank=rank, scale=scale)
    return adapters


def adapter_tensor_map(adapters: Mapping[str, LoraAdapter]) -> dict[str, Tensor]:
    """Flat name -> Tensor view used by the optimizer and the checkpoint."""
    out: dict[str, Tensor] = {}
    for name, ad in adapters.items():
        out[f"{name}.lora_a"] = ad.a
        out[f"{name}.lora_b"] = ad.b
    return out


def lora_parameter_count(cfg, rank: int, targets: Sequence[str] = LORA_TARGETS) -> int:
    """Closed form: n_layers * |targets| * rank * (d + k) + head weights + bias."""
    d = cfg.d_model
    return cfg.n_layers * len(targets) * rank * (d + d) + (3 * d + 3)


def merge_lora(params: ModelParams, adapters: Mapping[str, LoraAdapter]) -> ModelParams:
    """Fold scale * B @ A into each target weight; consumes the adapters.

    Returns new params; merging the same adapters again raises, since their
    delta is already inside the returned weights.
    """
    already = [name for name, ad in adapters.items() if ad.merged]
    if already:
        raise InputError(f"adapters already merged once: {', '.join(sorted(already))}")
    merged = params.copy()
    for name, ad in adapters.items():
        delta = (ad.a.data.T @ ad.b.data.T) * ad.scale  # (in, out), matching x @ W
        merged.tensors[name].data = merged.tensors[name].data + delta.astype(
            merged.tensors[name].dtype, copy=False
        )
        ad.merged = True
    return merged


def plan_trainables(params: ModelParams, plan: AdaptPlan) -> list[str]:
    """Base tensor names the plan trains (adapters are tracked separately)."""
    cfg = params.cfg
    if plan.method == "full":
        return params.names()
    if plan.method == "lora":
        return ["head.w", "head.b"]
    if plan.k_layers > cfg.n_layers:
        raise InputError(f"k_layers {plan.k_layers} exceeds n_layers {cfg.n_layers}")
    names: list[str] = []
    for i in range(cfg.n_layers - plan.k_layers, cfg.n_layers):
        names.extend(n for n in params.names() if n.startswith(f"layers.{i}."))
    names.extend(["final_norm.gain", "head.w", "head.b"])
    return names


def few_shot_subset(ends: Sequence[int], fraction: float) -> list[int]:
    """Chronologically first ceil(fraction * count) window ends."""
    if not (0.0 < fraction <= 1.0):
        raise InputError(f"fraction must lie in (0, 1], got {fraction}")
    if not ends:
        raise InputError("no windows to subset")
    keep = math.ceil(fraction * len(ends))
    subset = sorted(ends)[:keep]
    if not subset:
        raise InputError(f"fraction {fraction} leaves no windows")
    return subset


def load_adapters(ckpt: Checkpoint, params: ModelParams) -> dict[str, LoraAdapter] | None:
    """Rebuild adapter objects stored beside a checkpoint's base weights."""
    if ckpt.adapters is None:
        return None
    meta = ckpt.config.get("adapter") or {}
    rank = int(meta.get("rank", 0))
    scale = float(meta.get("scale", 1.0))
    adapters: dict[str, LoraAdapter] = {}
    dtype = params.cfg.np_dtype
    for flat_name, arr in ckpt.adapters.items():
        if flat_name.endswith(".lora_a"):
            target = flat_name[: -len(".lora_a")]
            adapters.setdefault(
                target, LoraAdapter(target, None, None, rank, scale)  # type: ignore[arg-type]
            ).a = Tensor(arr.astype(dtype, copy=True), requires_grad=True)
        elif flat_name.endswith(".lora_b"):
            target = flat_name[: -len(".lora_b")]
            adapters.setdefault(
                target, LoraAdapter(target, None, None, rank, scale)  # type: ignore[arg-type]
            ).b = Tensor(arr.astype(dtype, copy=True), requires_grad=True)
        else:
            raise InputError(f"unrecognized adapter tensor {flat_name!r}")
    for name, ad in adapters.items():
        if ad.a is None or ad.b is None:
            raise InputError(f"adapter {name!r} is missing one of its two factors")
        if ad.rank == 0:
            ad.rank = ad.a.shape[0]
    return adapters


@dataclass
class AdaptReport:
    """Before/after validation NLL on the target plus the inner training log."""

    method: str
    trainable_parameters: int
    val_nll_before: float
    val_nll_after: float
    train_report: TrainReport = field(repr=False, default_factory=TrainReport)


def adapt_run(
    ckpt: Checkpoint,
    target: DatasetBundle,
    plan: AdaptPlan,
    train_cfg: TrainConfig,
    requested_featurize: FeaturizeConfig | None = None,
    log=None,
) -> tuple[Checkpoint, AdaptReport]:
    """Fine-tune a pretrained checkpoint on the target dataset per the plan."""
    params, feat_cfg = params_from_checkpoint(ckpt)
    if requested_featurize is not None:
        mine = feat_cfg.layout_fields()
        theirs = requested_featurize.layout_fields()
        differing = sorted(k for k in mine if mine[k] != theirs[k])
        if differing:
            raise CompatibilityError(
                "token layout mismatch between checkpoint and requested config; "
                f"differing fields: {', '.join(differing)}"
            )

    data = prepare_train_data(target, feat_cfg, params.cfg.context_length)
    data.train_ends = few_shot_subset(data.train_ends, plan.fraction)

    val_pairs = validation_pairs([data], train_cfg.val_max_samples)
    nll_before = _eval_nll(params, [data], val_pairs, train_cfg.batch_size)

    adapters = None
    adapter_tensors = None
    if plan.method == "lora":
        adapters = attach_lora(
            params, plan.rank, RngStream(train_cfg.seed, _STREAM_LORA_INIT), plan.scale
        )
        adapter_tensors = adapter_tensor_map(adapters)
    trainable = plan_trainables(params, plan)

    best_base, best_adapters, train_report = fit(
        params,
        [data],
        train_cfg,
        trainable=trainable,
        adapters=adapters,
        adapter_tensors=adapter_tensors,
        log=log,
    )
    for name, arr in best_base.items():
        params.tensors[name].data = arr
    if adapter_tensors and best_adapters:
        for name, arr in best_adapters.items():
            adapter_tensors[name].data = arr

    nll_after = _eval_nll(params, [data], val_pairs, train_cfg.batch_size, adapters=adapters)

    n_trainable = count_parameters(params, trainable)
    if adapter_tensors:
        n_trainable += sum(t.size for t in adapter_tensors.values())

    meta = plan.to_dict()
    adapter_arrays = (
        {name: t.data for name, t in adapter_tensors.items()} if adapter_tensors else None
    )
    out_ckpt = checkpoint_from_params(
        params,
        feat_cfg,
        train_section=train_cfg.to_dict(),
        adapters=adapter_arrays,
        adapter_meta=meta,
        seed=train_cfg.seed,
    )
    report = AdaptReport(
        method=plan.method,
        trainable_parameters=n_trainable,
        val_nll_before=nll_before,
        val_nll_after=nll_after,
        train_report=train_report,
    )
    return out_ckpt, report
