"""Dual-mode attention: exact dot-product and kernel-feature approximation.

The exact path materializes the full token-by-token score matrix; the
approximate path reassociates the product so only feature-dimension
matrices are formed. A per-block rule selects between them by comparing
token count against embedding width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigError, NumericError, Tensor


@dataclass(frozen=True)
class FeatureMap:
    """Nonnegative elementwise map applied to queries and keys."""
    kind: str  # elu | relu | softplus

    def __post_init__(self):
        if self.kind not in ("elu", "relu", "softplus"):
            raise ConfigError(f"unknown feature map {self.kind!r}")

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "elu":
            return T.elu_plus_one(x)
        if self.kind == "relu":
            return T.relu(x)
        return T.softplus(x)


@dataclass(frozen=True)
class AttentionKind:
    variant: str  # dot | approx
    feature_map: FeatureMap | None = None

    def __post_init__(self):
        if self.variant not in ("dot", "approx"):
            raise ConfigError(f"unknown attention variant {self.variant!r}")
        if self.variant == "approx" and self.feature_map is None:
            object.__setattr__(self, "feature_map", FeatureMap("elu"))


DOT = AttentionKind("dot")


def select_attention(n_tokens: int, dim: int,
                     feature_map: FeatureMap | None = None) -> AttentionKind:
    """Approximate attention when tokens outnumber features, exact otherwise.

    The tie goes to the exact path: equal quadratic cost, exact result.
    """
    if n_tokens > dim:
        return AttentionKind("approx", feature_map or FeatureMap("elu"))
    return DOT


@dataclass
class AttentionInputs:
    """Per-head Q/K/V stacks of shape (..., heads, N, d_head)."""
    q: Tensor
    k: Tensor
    v: Tensor
    tau: float = 1.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.q.shape != self.k.shape or self.q.shape != self.v.shape:
            raise ConfigError(
                f"Q/K/V shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


def dot_attention(inp: AttentionInputs) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V per head. Scores are (N, N) per head."""
    d_head = inp.q.shape[-1]
    scores = T.scale(T.matmul(inp.q, T.transpose(inp.k, _swap_axes(inp.k))),
                     1.0 / math.sqrt(d_head))
    attn = T.softmax_rows(scores)
    return T.matmul(attn, inp.v)


def approx_attention(inp: AttentionInputs, psi: FeatureMap) -> Tensor:
    """Reassociated kernel attention; never forms an N-by-N array.

    With Qf = psi(Q), Kf = psi(K): S = Kf^T V / tau, z = Kf^T 1 / tau, and
    row i of the output is (Qf_i S) / (Qf_i z + eps/tau). tau cancels between
    numerator and normalizer in exact arithmetic (the floor scales with it),
    so it exists purely to keep the accumulated feature sums in range.
    Accumulation runs in f64 even when the inputs are f32: the sums grow
    with sequence length.
    """
    in_dtype = inp.q.dtype
    qf = psi(inp.q)
    kf = psi(inp.k)
    v = inp.v
    if in_dtype == np.float32:
        qf = T.astype(qf, np.float64)
        kf = T.astype(kf, np.float64)
        v = T.astype(v, np.float64)
    kft = T.transpose(kf, _swap_axes(kf))
    s = T.scale(T.matmul(kft, v), 1.0 / inp.tau)            # (..., h, d, d)
    z = T.scale(T.tsum(kf, axis=-2, keepdims=True), 1.0 / inp.tau)  # (..., h, 1, d)
    num = T.matmul(qf, s)                                    # (..., h, N, d)
    den = T.add(T.tsum(T.mul(qf, z), axis=-1, keepdims=True), inp.eps / inp.tau)
    if not np.isfinite(den.data).all():
        bad = np.argwhere(~np.isfinite(den.data))[0]
        raise NumericError(f"approx_attention: non-finite normalizer at row {tuple(bad)}")
    out = T.div(num, den)
    if in_dtype == np.float32:
        out = T.astype(out, np.float32)
    return out


def attend(inp: AttentionInputs, kind: AttentionKind) -> Tensor:
    if kind.variant == "dot":
        return dot_attention(inp)
    return approx_attention(inp, kind.feature_map)


def naive_approx_oracle(inp: AttentionInputs, psi: FeatureMap) -> np.ndarray:
    """Left-hand form of the kernel attention: materializes the N-by-N matrix.

    Test oracle only; numpy-only, no graph participation.
    """
    qf = psi(Tensor(inp.q.data.astype(np.float64))).data
    kf = psi(Tensor(inp.k.data.astype(np.float64))).data
    v = inp.v.data.astype(np.float64)
    kernel = np.matmul(qf, np.swapaxes(kf, -1, -2)) / inp.tau   # (..., h, N, N)
    norm = kernel.sum(axis=-1, keepdims=True) + inp.eps / inp.tau
    return np.matmul(kernel / norm, v)


def _swap_axes(t: Tensor) -> tuple[int, ...]:
    axes = list(range(t.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def init_mhsa_weights(dim: int, rng: np.random.Generator, dtype=np.float32,
                      std: float = 0.02) -> dict[str, Tensor]:
    from .encoder import trunc_normal  # shared init helper
    w = {}
    for name in ("wq", "wk", "wv", "wo"):
        w[name] = T.param(trunc_normal(rng, (dim, dim), std), dtype=dtype, name=name)
    w["bo"] = T.param(np.zeros(dim), dtype=dtype, name="bo")
    return w


def mhsa_forward(x: Tensor, weights: dict[str, Tensor], kind: AttentionKind,
                 heads: int, tau: float | None = None, eps: float = 1e-6) -> Tensor:
    """Multi-head attention over tokens (CLS included as an ordinary row).

    x: (N+1, D) or (B, N+1, D). Residual add and normalization belong to the
    caller. tau defaults to sqrt(token count). Q/K/V projections carry no
    bias: a key bias is a null direction under the softmax, so it would be
    an untrainable parameter on the exact path.
    """
    dim = x.shape[-1]
    if dim % heads:
        raise ConfigError(f"heads={heads} does not divide dim={dim}")
    n = x.shape[-2]
    d_head = dim // heads
    if tau is None:
        tau = math.sqrt(n)

    def split(t: Tensor) -> Tensor:
        t = T.reshape(t, t.shape[:-1] + (heads, d_head))
        axes = list(range(t.data.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        return T.transpose(t, axes)  # (..., heads, N, d_head)

    q = split(T.matmul(x, weights["wq"]))
    k = split(T.matmul(x, weights["wk"]))
    v = split(T.matmul(x, weights["wv"]))
    out = attend(AttentionInputs(q, k, v, tau=tau, eps=eps), kind)
    axes = list(range(out.data.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    out = T.reshape(T.transpose(out, axes), x.shape[:-1] + (dim,))
    return T.add(T.matmul(out, weights["wo"]), weights["bo"])
