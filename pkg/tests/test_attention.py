"""Attention equivalence oracles, selection rule, structural properties."""

import math

import numpy as np
import pytest

from lre import tensor as T
from lre.attention import (AttentionInputs, AttentionKind, FeatureMap,
                           approx_attention, attend, dot_attention,
                           init_mhsa_weights, mhsa_forward,
                           naive_approx_oracle, select_attention)
from lre.tensor import (AllocationTracker, ConfigError, NumericError, Tensor,
                        no_grad)

PSIS = ("elu", "relu", "softplus")


def _qkv(rng, n=12, d=5, heads=1):
    shape = (heads, n, d)
    return (Tensor(rng.standard_normal(shape)),
            Tensor(rng.standard_normal(shape)),
            Tensor(rng.standard_normal(shape)))


@pytest.mark.parametrize("psi", PSIS)
def test_approx_matches_naive_oracle(psi, rng):
    with no_grad():
        for _ in range(20):
            n = int(rng.integers(1, 40))
            d = int(rng.integers(1, 12))
            q, k, v = _qkv(rng, n, d)
            inp = AttentionInputs(q, k, v, tau=math.sqrt(n))
            got = approx_attention(inp, FeatureMap(psi)).data
            want = naive_approx_oracle(inp, FeatureMap(psi))
            assert np.abs(got - want).max() <= 1e-10 * max(1, np.abs(want).max())


def test_tau_invariance(rng):
    with no_grad():
        q, k, v = _qkv(rng, 24, 6)
        outs = [approx_attention(AttentionInputs(q, k, v, tau=tau),
                                 FeatureMap("elu")).data
                for tau in (1.0, math.sqrt(24), 10 * math.sqrt(24))]
    np.testing.assert_allclose(outs[1], outs[0], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(outs[2], outs[0], rtol=1e-10, atol=1e-12)


def test_selection_rule_threshold():
    fm = FeatureMap("relu")
    assert select_attention(65, 64, fm).variant == "approx"
    assert select_attention(64, 64, fm).variant == "dot"   # tie -> exact
    assert select_attention(63, 64, fm).variant == "dot"
    assert select_attention(65, 64, fm).feature_map.kind == "relu"


def test_dot_rows_are_convex_combinations(rng):
    """Each output row of exact attention lies in the convex hull of V rows."""
    with no_grad():
        q, k, v = _qkv(rng, 10, 4)
        out = dot_attention(AttentionInputs(q, k, v)).data
    lo = v.data.min(axis=-2, keepdims=True)
    hi = v.data.max(axis=-2, keepdims=True)
    assert (out >= lo - 1e-6).all() and (out <= hi + 1e-6).all()


def test_dot_permutation_equivariance(rng):
    """Permuting the token axis permutes the output identically."""
    with no_grad():
        q, k, v = _qkv(rng, 9, 4)
        out = dot_attention(AttentionInputs(q, k, v)).data
        perm = rng.permutation(9)
        out_p = dot_attention(AttentionInputs(
            Tensor(q.data[:, perm]), Tensor(k.data[:, perm]),
            Tensor(v.data[:, perm]))).data
    np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-10)


def test_approx_permutation_invariant_normalizer(rng):
    """Kernel attention is equivariant under joint token permutation too."""
    with no_grad():
        q, k, v = _qkv(rng, 9, 4)
        inp = AttentionInputs(q, k, v, tau=3.0)
        out = approx_attention(inp, FeatureMap("elu")).data
        perm = rng.permutation(9)
        out_p = approx_attention(AttentionInputs(
            Tensor(q.data[:, perm]), Tensor(k.data[:, perm]),
            Tensor(v.data[:, perm]), tau=3.0), FeatureMap("elu")).data
    np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-10, atol=1e-12)


def test_attention_inputs_validation(rng):
    q, k, v = _qkv(rng, 4, 2)
    with pytest.raises(ConfigError):
        AttentionInputs(q, k, Tensor(np.zeros((1, 4, 3))))
    with pytest.raises(ConfigError):
        AttentionInputs(q, k, v, tau=0.0)
    with pytest.raises(ConfigError):
        AttentionInputs(q, k, v, eps=-1.0)


def test_feature_map_nonnegative(rng):
    x = Tensor(rng.standard_normal((5, 5)) * 4)
    for psi in PSIS:
        assert (FeatureMap(psi)(x).data >= 0).all()
    with pytest.raises(ConfigError):
        FeatureMap("gelu")


def test_approx_nonfinite_normalizer_raises():
    q = Tensor(np.full((1, 2, 2), 1e308))
    k = Tensor(np.full((1, 2, 2), 1e308))
    v = Tensor(np.ones((1, 2, 2)))
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        approx_attention(AttentionInputs(q, k, v), FeatureMap("relu"))


def test_mhsa_heads_must_divide(rng):
    x = Tensor(rng.standard_normal((5, 6)))
    w = init_mhsa_weights(6, rng, dtype=np.float64)
    with pytest.raises(ConfigError):
        mhsa_forward(x, w, AttentionKind("dot"), heads=4)


def test_mhsa_batched_matches_single(rng):
    dim, heads = 8, 2
    w = init_mhsa_weights(dim, rng, dtype=np.float64, std=0.5)
    xb = rng.standard_normal((3, 7, dim))
    with no_grad():
        for kind in (AttentionKind("dot"),
                     AttentionKind("approx", FeatureMap("elu"))):
            batched = mhsa_forward(Tensor(xb), w, kind, heads).data
            for i in range(3):
                single = mhsa_forward(Tensor(xb[i]), w, kind, heads).data
                np.testing.assert_allclose(batched[i], single,
                                           rtol=1e-9, atol=1e-10)


def test_attend_dispatches(rng):
    q, k, v = _qkv(rng, 4, 3)
    inp = AttentionInputs(q, k, v)
    with no_grad():
        np.testing.assert_array_equal(
            attend(inp, AttentionKind("dot")).data, dot_attention(inp).data)


def test_approx_never_allocates_quadratic(rng):
    """Allocation inside approx is linear in N; dot is quadratic."""
    d = 16
    totals = {"dot": [], "approx": []}
    with no_grad():
        for n in (128, 256):
            q, k, v = _qkv(rng, n, d)
            inp = AttentionInputs(q, k, v, tau=math.sqrt(n))
            with AllocationTracker() as tr:
                dot_attention(inp)
            totals["dot"].append(tr.total)
            with AllocationTracker() as tr:
                approx_attention(inp, FeatureMap("elu"))
            totals["approx"].append(tr.total)
    assert totals["dot"][1] / totals["dot"][0] > 3.4        # ~4x
    assert totals["approx"][1] / totals["approx"][0] < 2.6  # ~2x
