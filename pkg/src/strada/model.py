"""Decoder-only transformer emitting Student-t parameters per position.

Tokens are projected to d_model, run through pre-normalized residual blocks
(RMSNorm -> rotary causal attention, RMSNorm -> SiLU feed-forward, no biases),
normalized once more, and mapped by a 3-unit head to (nu, mu, sigma) of a
Student-t next-step distribution in the sample's scaled space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import tensor as tk
from ._util import check_keys
from .errors import ConfigError, InputError
from .tensor import RngStream, Tensor

NU_FLOOR = 1e-3
SIGMA_FLOOR = 1e-4
INIT_STD = 0.02

HEAD_UNITS = 3  # degrees of freedom, location, scale


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    head_dim: int | None = None
    ffn_dim: int = 256
    context_length: int = 32
    rope_base: float = 10000.0
    rmsnorm_eps: float = 1e-5
    dof_offset: float = 0.0  # set to 2.0 to force finite predictive variance
    dtype: str = "float32"

    def __post_init__(self):
        if self.head_dim is None:
            if self.d_model % self.n_heads != 0:
                raise ConfigError(
                    f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
                )
            object.__setattr__(self, "head_dim", self.d_model // self.n_heads)
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model={self.d_model} != n_heads*head_dim="
                f"{self.n_heads * self.head_dim}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim={self.head_dim} must be even for rotation pairs")
        for name in ("token_dim", "d_model", "n_layers", "n_heads", "ffn_dim", "context_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.dof_offset < 0.0:
            raise ConfigError("dof_offset must be >= 0")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def with_dtype(self, dtype: str) -> "ModelConfig":
        return replace(self, dtype=dtype)

    def to_dict(self) -> dict:
        return {
            "token_dim": self.token_dim,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "ffn_dim": self.ffn_dim,
            "context_length": self.context_length,
            "rope_base": self.rope_base,
            "rmsnorm_eps": self.rmsnorm_eps,
            "dof_offset": self.dof_offset,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, data) -> "ModelConfig":
        check_keys(
            data,
            (
                "token_dim",
                "d_model",
                "n_layers",
                "n_heads",
                "head_dim",
                "ffn_dim",
                "context_length",
                "rope_base",
                "rmsnorm_eps",
                "dof_offset",
                "dtype",
            ),
            "model config",
        )
        return cls(**dict(data))


@dataclass(frozen=True)
class StudentTParams:
    """One predictive distribution: dof nu > 0, location mu, scale sigma > 0."""

    nu: float
    mu: float
    sigma: float


def parameter_count_formula(cfg: ModelConfig) -> int:
    """Closed-form total parameter count (documented in the README).

    token_dim*d + L*(4*d^2 + 2*d*ffn + 2*d) + d + (3*d + 3)
    """
    d = cfg.d_model
    per_layer = 4 * d * d + 2 * d * cfg.ffn_dim + 2 * d
    return cfg.token_dim * d + cfg.n_layers * per_layer + d + (HEAD_UNITS * d + HEAD_UNITS)


class ModelParams:
    """Named parameter tensors in a fixed order, plus their config."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.cfg,
            {
                name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                for name, t in self.tensors.items()
            },
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}


def init_params(cfg: ModelConfig, stream: RngStream) -> ModelParams:
    """Truncated-normal (std 0.02) weights, unit norm gains, zero head bias."""
    dtype = cfg.np_dtype

    def weight(shape) -> Tensor:
        return Tensor(
            tk.truncated_normal(stream, shape, std=INIT_STD, dtype=dtype),
            requires_grad=True,
        )

    def ones(shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    tensors: dict[str, Tensor] = {}
    tensors["input_proj.w"] = weight((cfg.token_dim, cfg.d_model))
    for i in range(cfg.n_layers):
        tensors[f"layers.{i}.attn_norm.gain"] = ones((cfg.d_model,))
        for proj in ("wq", "wk", "wv", "wo"):
            tensors[f"layers.{i}.attn.{proj}"] = weight((cfg.d_model, cfg.d_model))
        tensors[f"layers.{i}.ffn_norm.gain"] = ones((cfg.d_model,))
        tensors[f"layers.{i}.ffn.w1"] = weight((cfg.d_model, cfg.ffn_dim))
        tensors[f"layers.{i}.ffn.w2"] = weight((cfg.ffn_dim, cfg.d_model))
    tensors["final_norm.gain"] = ones((cfg.d_model,))
    tensors["head.w"] = weight((cfg.d_model, HEAD_UNITS))
    tensors["head.b"] = Tensor(np.zeros(HEAD_UNITS, dtype=dtype), requires_grad=True)
    return ModelParams(cfg, tensors)


def count_parameters(params: ModelParams, names: list[str] | None = None) -> int:
    if names is None:
        return sum(t.size for t in params.tensors.values())
    return sum(params.tensors[n].size for n in names)


# ---------------------------------------------------------------------------
# building blocks


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """x * gain / sqrt(mean(x^2) + eps), mean over the last axis."""
    ms = tk.mean(tk.mul(x, x), axis=-1, keepdims=True)
    return tk.div(tk.mul(x, gain), tk.sqrt(tk.add(ms, eps)))


def _rope_tables(context: int, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(context, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


_ROPE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
_MASK_CACHE: dict[tuple, np.ndarray] = {}


def _rope_for(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    key = (cfg.context_length, cfg.head_dim, cfg.rope_base, cfg.dtype)
    if key not in _ROPE_CACHE:
        _ROPE_CACHE[key] = _rope_tables(
            cfg.context_length, cfg.head_dim, cfg.rope_base, cfg.np_dtype
        )
    return _ROPE_CACHE[key]


def _causal_mask(context: int, dtype) -> np.ndarray:
    """(C, C) additive mask: 0 on/below the diagonal, -inf strictly above."""
    key = (context, np.dtype(dtype).str)
    if key not in _MASK_CACHE:
        mask = np.zeros((context, context), dtype=dtype)
        mask[np.triu_indices(context, k=1)] = -np.inf
        _MASK_CACHE[key] = mask
    return _MASK_CACHE[key]


def rope_rotate(vec: np.ndarray, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotate one head vector to encode `position` (pairs (2i, 2i+1))."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size % 2 != 0:
        raise InputError(f"rope_rotate needs an even-length vector, got shape {vec.shape}")
    half = vec.size // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / vec.size)
    angle = position * inv_freq
    cos, sin = np.cos(angle), np.sin(angle)
    even, odd = vec[0::2], vec[1::2]
    out = np.empty_like(vec)
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def _apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (B, H, C, head_dim) pairs by the cached per-position angles."""
    b, h, c, hd = x.shape
    pairs = tk.reshape(x, (b, h, c, hd // 2, 2))
    even = pairs[..., 0]
    odd = pairs[..., 1]
    new_even = tk.sub(tk.mul(even, cos), tk.mul(odd, sin))
    new_odd = tk.add(tk.mul(even, sin), tk.mul(odd, cos))
    stacked = tk.concat(
        [
            tk.reshape(new_even, (b, h, c, hd // 2, 1)),
            tk.reshape(new_odd, (b, h, c, hd // 2, 1)),
        ],
        axis=-1,
    )
    return tk.reshape(stacked, (b, h, c, hd))


def _project(
    x: Tensor, params: ModelParams, name: str, adapters: Mapping | None
) -> Tensor:
    out = tk.matmul(x, params[name])
    if adapters and name in adapters:
        ad = adapters[name]
        low = tk.matmul(tk.matmul(x, tk.transpose(ad.a)), tk.transpose(ad.b))
        out = tk.add(out, tk.mul(low, ad.scale))
    return out


def _attention_block(
    x: Tensor, params: ModelParams, layer: int, cfg: ModelConfig, adapters
) -> Tensor:
    b, c, d = x.shape
    h, hd = cfg.n_heads, cfg.head_dim
    cos, sin = _rope_for(cfg)
    cos, sin = cos[:c], sin[:c]

    def split_heads(t: Tensor) -> Tensor:
        return tk.transpose(tk.reshape(t, (b, c, h, hd)), (0, 2, 1, 3))

    prefix = f"layers.{layer}.attn"
    q = _apply_rope(split_heads(_project(x, params, f"{prefix}.wq", adapters)), cos, sin)
    k = _apply_rope(split_heads(_project(x, params, f"{prefix}.wk", adapters)), cos, sin)
    v = split_heads(_project(x, params, f"{prefix}.wv", adapters))

    scores = tk.mul(tk.matmul(q, tk.transpose(k)), 1.0 / math.sqrt(hd))
    scores = tk.add(scores, _causal_mask(c, cfg.np_dtype))
    probs = tk.softmax(scores)
    mixed = tk.matmul(probs, v)  # (B, H, C, hd)
    merged = tk.reshape(tk.transpose(mixed, (0, 2, 1, 3)), (b, c, d))
    return tk.matmul(merged, params[f"{prefix}.wo"])


def _ffn_block(x: Tensor, params: ModelParams, layer: int) -> Tensor:
    hidden = tk.silu(tk.matmul(x, params[f"layers.{layer}.ffn.w1"]))
    return tk.matmul(hidden, params[f"layers.{layer}.ffn.w2"])


def forward_batch(
    params: ModelParams,
    tokens,
    adapters: Mapping | None = None,
    return_hidden: bool = False,
):
    """Run a (B, C, token_dim) batch; returns (nu, mu, sigma) tensors (B, C).

    With `return_hidden` the final-RMSNorm output (B, C, d_model) is appended.
    """
    cfg = params.cfg
    if not isinstance(tokens, Tensor):
        tokens = Tensor(np.asarray(tokens, dtype=cfg.np_dtype))
    if tokens.ndim != 3:
        raise InputError(f"tokens must be (batch, context, token_dim), got {tokens.shape}")
    if tokens.shape[2] != cfg.token_dim:
        raise InputError(
            f"token_dim mismatch: tokens have {tokens.shape[2]}, config says {cfg.token_dim}"
        )
    if tokens.shape[1] > cfg.context_length:
        raise InputError(
            f"sequence length {tokens.shape[1]} exceeds context {cfg.context_length}"
        )

    x = tk.matmul(tokens, params["input_proj.w"])
    for i in range(cfg.n_layers):
        normed = rmsnorm(x, params[f"layers.{i}.attn_norm.gain"], cfg.rmsnorm_eps)
        x = tk.add(x, _attention_block(normed, params, i, cfg, adapters))
        normed = rmsnorm(x, params[f"layers.{i}.ffn_norm.gain"], cfg.rmsnorm_eps)
        x = tk.add(x, _ffn_block(normed, params, i))
    hidden = rmsnorm(x, params["final_norm.gain"], cfg.rmsnorm_eps)

    raw = tk.add(tk.matmul(hidden, params["head.w"]), params["head.b"])
    nu = tk.add(tk.softplus(raw[..., 0]), NU_FLOOR + cfg.dof_offset)
    mu = raw[..., 1]
    sigma = tk.add(tk.softplus(raw[..., 2]), SIGMA_FLOOR)
    if return_hidden:
        return nu, mu, sigma, hidden
    return nu, mu, sigma


def forward(params: ModelParams, tokens: np.ndarray, adapters=None) -> list[StudentTParams]:
    """Single-sequence convenience wrapper: (C, token_dim) -> per-position dists."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"expected (context, token_dim), got {tokens.shape}")
    nu, mu, sigma = forward_batch(params, tokens[None], adapters=adapters)
    return [
        StudentTParams(float(n), float(m), float(s))
        for n, m, s in zip(nu.data[0], mu.data[0], sigma.data[0])
    ]


# ---------------------------------------------------------------------------
# Student-t density, loss, and sampling


def student_t_nll_terms(nu: Tensor, mu: Tensor, sigma: Tensor, y) -> Tensor:
    """Elementwise negative log density of y under Student-t(nu, mu, sigma)."""
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=nu.dtype))
    z = tk.div(tk.sub(y, mu), sigma)
    half_nu = tk.mul(nu, 0.5)
    half_nu1 = tk.mul(tk.add(nu, 1.0), 0.5)
    log_norm = tk.add(
        tk.sub(tk.lgamma(half_nu), tk.lgamma(half_nu1)),
        tk.mul(tk.add(tk.log(nu), math.log(math.pi)), 0.5),
    )
    quad = tk.mul(half_nu1, tk.log1p(tk.div(tk.mul(z, z), nu)))
    return tk.add(tk.add(log_norm, tk.log(sigma)), quad)


def student_t_nll(p: StudentTParams, y: float) -> float:
    """Scalar negative log likelihood of one observation."""
    if p.nu <= 0.0 or p.sigma <= 0.0:
        raise InputError(f"invalid Student-t params nu={p.nu}, sigma={p.sigma}")
    z = (y - p.mu) / p.sigma
    return float(
        -math.lgamma((p.nu + 1.0) / 2.0)
        + math.lgamma(p.nu / 2.0)
        + 0.5 * math.log(p.nu * math.pi)
        + math.log(p.sigma)
        + (p.nu + 1.0) / 2.0 * math.log1p(z * z / p.nu)
    )


def sample_student_t(p: StudentTParams, stream: RngStream, shape=None) -> np.ndarray:
    """Draw from the distribution via the stream (exact Student-t sampling)."""
    if p.nu <= 0.0 or p.sigma <= 0.0:
        raise InputError(f"invalid Student-t params nu={p.nu}, sigma={p.sigma}")
    return p.mu + p.sigma * stream.standard_t(p.nu, shape)
