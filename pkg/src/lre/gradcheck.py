"""Central-difference gradient checking for the tensor substrate."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import (GRAPH, ConfigError, OracleError, Tensor, backward,
                     no_grad, zero_grads)

KINK_MARGIN = 1e-3


def nudge_from_kinks(t: Tensor, margin: float = KINK_MARGIN) -> None:
    """Shift entries near activation kinks (|a| < margin) by +margin.

    Subgradient ambiguity at ReLU/ELU corners is not a bug; finite differences
    straddling a corner would report one anyway.
    """
    mask = np.abs(t.data) < margin
    t.data = t.data + margin * mask


def gradcheck(builder: Callable[[], Tensor], params: Sequence[Tensor],
              h: float = 1e-5, max_elems: int | None = None,
              seed: int = 0) -> float:
    """Compare analytic gradients of a scalar-valued builder to central differences.

    Returns max over checked entries of |analytic - numeric| /
    max(|analytic|, |numeric|, 1e-8). ``max_elems`` caps the entries checked
    per parameter (deterministic subsample) to bound runtime on large graphs.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError("gradcheck requires f64 parameters")
        nudge_from_kinks(p)

    zero_grads(params)
    mark = len(GRAPH.nodes)
    loss = builder()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    del GRAPH.nodes[mark:]

    rng = np.random.default_rng(seed)
    max_err = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idxs = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                lp = float(builder().data)
                flat[i] = orig - h
                lm = float(builder().data)
                flat[i] = orig
            num = (lp - lm) / (2 * h)
            if not np.isfinite(num):
                raise OracleError(f"non-finite numeric gradient at element {i}")
            a = float(ana.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            max_err = max(max_err, err)
    zero_grads(params)
    return max_err
