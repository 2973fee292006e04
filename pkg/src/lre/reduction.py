"""Token merging between blocks and the x2 dimension expansion.

Three merge variants: strided convolution (default), average pooling with
the same window geometry, and a learned linear map across the token axis.
The CLS row bypasses merging and only passes through the dimension
expansion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor


@dataclass(frozen=True)
class ReductionSpec:
    kind: str = "conv"        # conv | pool | linear
    layout: str = "seq1d"     # seq1d | grid2d
    grid: tuple[int, int] | None = None  # (h, w) for grid2d, CLS excluded
    nu: int = 4

    def __post_init__(self):
        if self.kind not in ("conv", "pool", "linear"):
            raise ConfigError(f"unknown reduction kind {self.kind!r}")
        if self.layout not in ("seq1d", "grid2d"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if self.nu < 2:
            raise ConfigError("nu must be >= 2")
        if self.layout == "grid2d" and self.nu % 2:
            raise ConfigError("grid2d reduction needs even nu (per-axis stride nu/2)")


def reduced_count(n: int, spec: ReductionSpec) -> int:
    """Token-count law: ceil(N/nu) for seq1d conv/pool, per-axis ceil-halving
    for grid2d, exact N/nu for linear."""
    if spec.kind == "linear":
        if n % spec.nu:
            raise ConfigError(f"linear merge needs nu | N, got N={n}, nu={spec.nu}")
        return n // spec.nu
    if spec.layout == "seq1d":
        return -(-n // spec.nu)
    h, w = spec.grid
    s = spec.nu // 2
    return (-(-h // s)) * (-(-w // s))


def reduced_grid(spec: ReductionSpec) -> tuple[int, int]:
    h, w = spec.grid
    s = spec.nu // 2
    return -(-h // s), -(-w // s)


def init_reduction_weights(dim: int, n_tokens: int, spec: ReductionSpec,
                           rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    from .encoder import trunc_normal
    w: dict[str, Tensor] = {}
    if spec.kind == "conv":
        if spec.layout == "seq1d":
            k = 2 * spec.nu + 1
            w["w"] = T.param(trunc_normal(rng, (k, dim, dim), 0.02), dtype=dtype)
        else:
            w["w"] = T.param(trunc_normal(rng, (3, 3, dim, dim), 0.02), dtype=dtype)
        w["b"] = T.param(np.zeros(dim), dtype=dtype)
    elif spec.kind == "linear":
        n_out = n_tokens // spec.nu
        w["w"] = T.param(trunc_normal(rng, (n_out, n_tokens), 0.02), dtype=dtype)
    return w


def reduce_tokens(x: Tensor, spec: ReductionSpec,
                  weights: dict[str, Tensor] | None = None) -> Tensor:
    """Merge the N non-CLS rows of x (..., N+1, D); CLS row 0 passes through."""
    n = x.shape[-2] - 1
    dim = x.shape[-1]
    lead = x.data.ndim - 2
    cls_key = (slice(None),) * lead + (slice(0, 1),)
    rest_key = (slice(None),) * lead + (slice(1, None),)
    cls = T.index(x, cls_key)
    rest = T.index(x, rest_key)

    if spec.layout == "grid2d":
        h, w = spec.grid
        if h * w != n:
            raise ShapeError(f"grid2d layout {h}x{w} does not match N={n}")

    if spec.kind == "conv":
        if spec.layout == "seq1d":
            k = 2 * spec.nu + 1
            merged = T.conv1d(rest, weights["w"], stride=spec.nu, pad=(k - 1) // 2)
        else:
            grid = T.reshape(rest, rest.shape[:-2] + (h, w, dim))
            merged = T.conv2d(grid, weights["w"],
                              stride=(spec.nu // 2, spec.nu // 2), pad=(1, 1))
            merged = T.reshape(merged, merged.shape[:-3]
                               + (merged.shape[-3] * merged.shape[-2], dim))
        merged = T.add(merged, weights["b"])
    elif spec.kind == "pool":
        if spec.layout == "seq1d":
            k = 2 * spec.nu + 1
            merged = T.avg_pool1d(rest, k, stride=spec.nu, pad=(k - 1) // 2)
        else:
            grid = T.reshape(rest, rest.shape[:-2] + (h, w, dim))
            merged = T.avg_pool2d(grid, (3, 3),
                                  stride=(spec.nu // 2, spec.nu // 2), pad=(1, 1))
            merged = T.reshape(merged, merged.shape[:-3]
                               + (merged.shape[-3] * merged.shape[-2], dim))
    else:
        if n % spec.nu:
            raise ConfigError(f"linear merge needs nu | N, got N={n}, nu={spec.nu}")
        merged = T.matmul(weights["w"], rest)

    return T.concat([cls, merged], axis=-2)


def init_expand_weights(dim: int, rng: np.random.Generator,
                        dtype=np.float32) -> dict[str, Tensor]:
    from .encoder import trunc_normal
    return {
        "w": T.param(trunc_normal(rng, (dim, 2 * dim), 0.02), dtype=dtype),
        "b": T.param(np.zeros(2 * dim), dtype=dtype),
    }


def expand_dim(x: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """Per-token affine map doubling the feature width (CLS included)."""
    w = weights["w"]
    if w.shape[0] != x.shape[-1] or w.shape[1] != 2 * x.shape[-1]:
        raise ShapeError(f"expand_dim: weight {w.shape} vs tokens {x.shape}")
    return T.add(T.matmul(x, w), weights["b"])
