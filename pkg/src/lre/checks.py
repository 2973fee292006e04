"""Self-check batteries shared by the CLI and the test suite.

Gradient checks run every differentiable op against central differences;
the oracle battery compares the reassociated attention against the naive
matrix-materializing form and the convolutions against sliding-window
loops.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .attention import (AttentionInputs, AttentionKind, FeatureMap,
                        approx_attention, dot_attention, mhsa_forward,
                        naive_approx_oracle)
from .encoder import EncoderConfig, StemSpec, build
from .gradcheck import gradcheck
from .reduction import (ReductionSpec, expand_dim, init_expand_weights,
                        init_reduction_weights, reduce_tokens)
from .tensor import Tensor, param

F64 = np.float64


def _p(rng, shape, scale=1.0):
    return param(rng.standard_normal(shape) * scale, dtype=F64)


def gradcheck_ops(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}

    x = _p(rng, (3, 4))
    w = _p(rng, (4, 2))
    out["matmul"] = gradcheck(lambda: T.tsum(T.mul(T.matmul(x, w),
                                                   T.matmul(x, w))), [x, w])

    xc = _p(rng, (12, 2))
    wc = _p(rng, (3, 2, 3))
    out["conv1d"] = gradcheck(
        lambda: T.tsum(T.mul(T.conv1d(xc, wc, 2, 1), T.conv1d(xc, wc, 2, 1))),
        [xc, wc])

    x2 = _p(rng, (6, 6, 2))
    w2 = _p(rng, (3, 3, 2, 2))
    out["conv2d"] = gradcheck(
        lambda: T.tsum(T.mul(T.conv2d(x2, w2, (2, 2), (1, 1)),
                             T.conv2d(x2, w2, (2, 2), (1, 1)))), [x2, w2])

    xa = _p(rng, (4, 5))
    for name, fn in (("relu", T.relu), ("elu_plus_one", T.elu_plus_one),
                     ("softplus", T.softplus), ("exp", T.texp)):
        out[name] = gradcheck(lambda fn=fn: T.tsum(T.mul(fn(xa), fn(xa))), [xa])

    probe = Tensor(rng.standard_normal((4, 5)))
    out["softmax_rows"] = gradcheck(
        lambda: T.tsum(T.mul(T.softmax_rows(xa), probe)), [xa])
    out["log_softmax"] = gradcheck(
        lambda: T.tsum(T.mul(T.log_softmax(xa), probe)), [xa])

    g = _p(rng, (5,))
    b = _p(rng, (5,))
    out["layer_norm"] = gradcheck(
        lambda: T.tsum(T.mul(T.layer_norm(xa, g, b), probe)), [xa, g, b])

    xp = _p(rng, (10, 3))
    out["avg_pool1d"] = gradcheck(
        lambda: T.tsum(T.mul(T.avg_pool1d(xp, 3, 2, 1), T.avg_pool1d(xp, 3, 2, 1))),
        [xp])
    return out


def gradcheck_attention(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}
    q = _p(rng, (2, 5, 3), 0.5)
    k = _p(rng, (2, 5, 3), 0.5)
    v = _p(rng, (2, 5, 3), 0.5)
    probe = Tensor(rng.standard_normal((2, 5, 3)))
    out["dot_attention"] = gradcheck(
        lambda: T.tsum(T.mul(dot_attention(AttentionInputs(q, k, v)), probe)),
        [q, k, v])
    for fm in ("elu", "relu", "softplus"):
        out[f"approx_attention_{fm}"] = gradcheck(
            lambda fm=fm: T.tsum(T.mul(
                approx_attention(AttentionInputs(q, k, v, tau=math.sqrt(5)),
                                 FeatureMap(fm)), probe)),
            [q, k, v])
    dim, heads = 6, 2
    x = _p(rng, (5, dim), 0.5)
    w = {nm: _p(rng, (dim, dim), 0.3) for nm in ("wq", "wk", "wv", "wo")}
    w["bo"] = _p(rng, (dim,), 0.1)
    probe2 = Tensor(rng.standard_normal((5, dim)))
    out["mhsa_dot"] = gradcheck(
        lambda: T.tsum(T.mul(mhsa_forward(x, w, AttentionKind("dot"), heads), probe2)),
        [x] + list(w.values()), max_elems=12)
    out["mhsa_approx"] = gradcheck(
        lambda: T.tsum(T.mul(mhsa_forward(
            x, w, AttentionKind("approx", FeatureMap("elu")), heads), probe2)),
        [x] + list(w.values()), max_elems=12)
    return out


def gradcheck_reduction(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}
    dim = 3
    x = _p(rng, (9, dim), 0.5)  # 8 tokens + CLS

    spec = ReductionSpec(kind="conv", layout="seq1d", nu=4)
    w = init_reduction_weights(dim, 8, spec, rng, dtype=F64)
    probe = Tensor(rng.standard_normal((3, dim)))
    out["conv_merge"] = gradcheck(
        lambda: T.tsum(T.mul(reduce_tokens(x, spec, w), probe)),
        [x] + list(w.values()))

    pspec = ReductionSpec(kind="pool", layout="seq1d", nu=4)
    out["pool_merge"] = gradcheck(
        lambda: T.tsum(T.mul(reduce_tokens(x, pspec), probe)), [x])

    lspec = ReductionSpec(kind="linear", layout="seq1d", nu=4)
    lw = init_reduction_weights(dim, 8, lspec, rng, dtype=F64)
    out["linear_merge"] = gradcheck(
        lambda: T.tsum(T.mul(reduce_tokens(x, lspec, lw), probe)),
        [x] + list(lw.values()))

    ew = init_expand_weights(dim, rng, dtype=F64)
    eprobe = Tensor(rng.standard_normal((9, 2 * dim)))
    out["expand_dim"] = gradcheck(
        lambda: T.tsum(T.mul(expand_dim(x, ew), eprobe)),
        [x] + list(ew.values()))
    return out


def toy_two_block_config(mlp_act: str = "softplus") -> tuple[EncoderConfig, int]:
    cfg = EncoderConfig(
        num_classes=3,
        stem=StemSpec(kind="seq1d", in_channels=1, kernel=3, stride=2),
        layers=(1, 1), d0=4, nu=4, heads=(1, 2), mlp_ratio=2,
        mlp_act=mlp_act, attention_policy="mixed", pos_embed="learned")
    return cfg, 16


def gradcheck_encoder(seed: int = 0, max_elems: int = 6) -> dict[str, float]:
    """Central-difference check through a full 2-block toy encoder."""
    rng = np.random.default_rng(seed)
    cfg, length = toy_two_block_config()
    model = build(cfg, length, seed=seed, dtype=F64)
    # check at a generic point: the std-0.02 init leaves attention gradients
    # too close to the finite-difference noise floor
    for p in model.params.values():
        p.data = rng.standard_normal(p.shape) * 0.4
    x = Tensor(rng.standard_normal((length, 1)))
    probe = np.arange(cfg.num_classes, dtype=F64) + 1.0

    def builder():
        cls, _ = model.forward(x)
        from .encoder import classify
        return T.tsum(T.mul(classify(cls, model), Tensor(probe)))

    err = gradcheck(builder, list(model.params.values()), max_elems=max_elems,
                    seed=seed)
    return {"encoder_2block": err}


# ---------------------------------------------------------------------------
# forward oracles

def conv1d_oracle(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Explicit sliding-window cross-correlation loop."""
    k, c_in, c_out = w.shape
    n = x.shape[0]
    xp = np.pad(x, ((pad, pad), (0, 0)))
    n_out = (n + 2 * pad - k) // stride + 1
    y = np.zeros((n_out, c_out), dtype=x.dtype)
    for i in range(n_out):
        for t in range(k):
            for ci in range(c_in):
                y[i] += xp[i * stride + t, ci] * w[t, ci]
    return y


def conv2d_oracle(x: np.ndarray, w: np.ndarray, stride, pad) -> np.ndarray:
    kh, kw, c_in, c_out = w.shape
    h, wd = x.shape[:2]
    sh, sw = stride
    ph, pw = pad
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    h_out = (h + 2 * ph - kh) // sh + 1
    w_out = (wd + 2 * pw - kw) // sw + 1
    y = np.zeros((h_out, w_out, c_out), dtype=x.dtype)
    for i in range(h_out):
        for j in range(w_out):
            for a in range(kh):
                for b in range(kw):
                    for ci in range(c_in):
                        y[i, j] += xp[i * sh + a, j * sw + b, ci] * w[a, b, ci]
    return y


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Schoolbook triple loop with innermost-axis sequential accumulation."""
    m, k = a.shape
    k2, n = b.shape
    y = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            y[i, j] = acc
    return y


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.abs(b).max()), 1e-30)
    return float(np.abs(a - b).max()) / denom


def oracle_attention(trials: int = 200, seed: int = 0,
                     n_max: int = 64, d_max: int = 16) -> dict[str, float]:
    """Max relative error of approx_attention vs the naive N-by-N oracle."""
    rng = np.random.default_rng(seed)
    worst = {fm: 0.0 for fm in ("elu", "relu", "softplus")}
    with T.no_grad():
        for _ in range(trials):
            n = int(rng.integers(1, n_max + 1))
            d = int(rng.integers(1, d_max + 1))
            q = Tensor(rng.standard_normal((1, n, d)))
            k = Tensor(rng.standard_normal((1, n, d)))
            v = Tensor(rng.standard_normal((1, n, d)))
            inp = AttentionInputs(q, k, v, tau=math.sqrt(n))
            for fm in worst:
                got = approx_attention(inp, FeatureMap(fm)).data
                want = naive_approx_oracle(inp, FeatureMap(fm))
                worst[fm] = max(worst[fm], _rel_err(got, want))
    return worst


def oracle_tau_invariance(trials: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.no_grad():
        for _ in range(trials):
            n = int(rng.integers(2, 48))
            d = int(rng.integers(1, 12))
            q = Tensor(rng.standard_normal((1, n, d)))
            k = Tensor(rng.standard_normal((1, n, d)))
            v = Tensor(rng.standard_normal((1, n, d)))
            outs = []
            for tau in (1.0, math.sqrt(n), 10 * math.sqrt(n)):
                outs.append(approx_attention(
                    AttentionInputs(q, k, v, tau=tau), FeatureMap("elu")).data)
            worst = max(worst, _rel_err(outs[1], outs[0]),
                        _rel_err(outs[2], outs[0]))
    return worst


def oracle_conv(trials: int = 20, seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    worst = {"conv1d": 0.0, "conv2d": 0.0, "matmul": 0.0}
    with T.no_grad():
        for _ in range(trials):
            x = rng.standard_normal((12, 2))
            w = rng.standard_normal((3, 2, 3))
            got = T.conv1d(Tensor(x), Tensor(w), 2, 1).data
            worst["conv1d"] = max(worst["conv1d"],
                                  _rel_err(got, conv1d_oracle(x, w, 2, 1)))
            x2 = rng.standard_normal((6, 6, 2))
            w2 = rng.standard_normal((3, 3, 2, 2))
            got2 = T.conv2d(Tensor(x2), Tensor(w2), (2, 2), (1, 1)).data
            worst["conv2d"] = max(worst["conv2d"],
                                  _rel_err(got2, conv2d_oracle(x2, w2, (2, 2), (1, 1))))
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((4, 2))
            gotm = T.matmul(Tensor(a), Tensor(b)).data
            worst["matmul"] = max(worst["matmul"], _rel_err(gotm, matmul_oracle(a, b)))
    return worst
