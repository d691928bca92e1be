import math

import numpy as np
import pytest

from vista import numerics as nx
from vista.layers import LN_EPS, TransformerLayerParams, layer_norm, mhsa, mlp, transformer_layer


def params(d=8, h=2, seed=0, scale_ln=True):
    p = TransformerLayerParams.init(d, h, np.random.default_rng(seed))
    if scale_ln:
        # non-trivial LN affine so the gradient check touches it
        r = np.random.default_rng(seed + 100)
        for t in (p.ln1_gain, p.ln2_gain):
            t.data += 0.3 * r.normal(size=d)
        for t in (p.ln1_bias, p.ln2_bias, p.b1, p.b2):
            t.data += 0.1 * r.normal(size=t.shape)
    return p


def ln(x, g=None, b=None):
    d = len(x[0])
    g = np.ones(d) if g is None else g
    b = np.zeros(d) if b is None else b
    return layer_norm(nx.tensor(x), nx.tensor(g), nx.tensor(b)).data


def test_layer_norm_examples():
    assert ln([[5.0, 5.0, 5.0, 5.0]]).tolist() == [[0.0, 0.0, 0.0, 0.0]]
    np.testing.assert_allclose(ln([[1.0, -1.0]]), [[1.0, -1.0]], atol=1e-5)
    x = np.random.default_rng(0).normal(size=(1, 6))
    direct = 2 * (x - x.mean()) / np.sqrt(x.var() + LN_EPS) + 1
    np.testing.assert_allclose(ln(x, np.full(6, 2.0), np.ones(6)), direct, rtol=1e-13)


def test_layer_norm_rejects_width_one():
    with pytest.raises(nx.ContractError):
        ln([[1.0]])


def per_head_reference(X, p):
    """Unbatched attention, one head and one query row at a time."""
    n, d = X.shape
    dh = d // p.heads
    heads = []
    for i in range(p.heads):
        Q, K, V = X @ p.wq[i].data, X @ p.wk[i].data, X @ p.wv[i].data
        out = np.zeros((n, dh))
        for r in range(n):
            scores = [float(Q[r] @ K[c]) / math.sqrt(dh) for c in range(n)]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = math.fsum(e)
            for c in range(n):
                out[r] += e[c] / z * V[c]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ p.wo.data


def test_mhsa_single_token():
    p = params(4, 2)
    x = np.random.default_rng(1).normal(size=(1, 4))
    out, weights = mhsa(nx.tensor(x), p, return_attention=True)
    assert all(w.data.tolist() == [[1.0]] for w in weights)
    value = np.concatenate([x @ p.wv[i].data for i in range(2)], axis=1)
    np.testing.assert_allclose(out.data, value @ p.wo.data, rtol=1e-13)


def test_mhsa_identical_rows_give_identical_outputs():
    p = params(8, 2)
    x = np.tile(np.random.default_rng(2).normal(size=(1, 8)), (5, 1))
    out = mhsa(nx.tensor(x), p).data
    np.testing.assert_allclose(out, np.tile(out[:1], (5, 1)), rtol=0, atol=1e-14)


def test_mhsa_matches_per_head_reference():
    p = params(4, 2, seed=3)
    x = np.random.default_rng(3).normal(size=(3, 4))
    np.testing.assert_allclose(mhsa(nx.tensor(x), p).data, per_head_reference(x, p), rtol=1e-12, atol=1e-14)


def test_mhsa_permutation_equivariant():
    p = params(8, 2, seed=4)
    x = np.random.default_rng(4).normal(size=(6, 8))
    perm = np.random.default_rng(5).permutation(6)
    out = mhsa(nx.tensor(x), p).data
    np.testing.assert_allclose(mhsa(nx.tensor(x[perm]), p).data, out[perm], atol=1e-13)


def test_zero_parameters_give_identity():
    p = TransformerLayerParams.init(8, 2, np.random.default_rng(0))
    for name, t in p.named().items():
        if name not in ("ln1_gain", "ln2_gain"):
            t.data[...] = 0.0
    x = np.random.default_rng(6).normal(size=(4, 8))
    assert np.array_equal(transformer_layer(nx.tensor(x), p).data, x)


@pytest.mark.parametrize("n", [1, 4, 17])
def test_shape_preserved(n):
    x = nx.tensor(np.random.default_rng(n).normal(size=(n, 8)))
    assert transformer_layer(x, params()).shape == (n, 8)


def test_layer_matches_manual_composition():
    p = params(8, 2, seed=7)
    X = np.random.default_rng(7).normal(size=(4, 8))

    def ln_np(x, g, b):
        return g * (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + LN_EPS) + b

    def gelu_np(u):
        return 0.5 * u * (1 + np.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u ** 3)))

    Y = per_head_reference(ln_np(X, p.ln1_gain.data, p.ln1_bias.data), p) + X
    H = ln_np(Y, p.ln2_gain.data, p.ln2_bias.data)
    out = gelu_np(H @ p.w1.data + p.b1.data) @ p.w2.data + p.b2.data + Y
    np.testing.assert_allclose(transformer_layer(nx.tensor(X), p).data, out, rtol=1e-11, atol=1e-12)


def test_mlp_widths():
    p = params(8, 2)
    assert p.w1.shape == (8, 32) and p.w2.shape == (32, 8)
    assert mlp(nx.tensor(np.ones((3, 8))), p).shape == (3, 8)


def test_width_mismatch_raises():
    with pytest.raises(nx.DimensionError):
        mhsa(nx.tensor(np.ones((2, 4))), params(8, 2))
    with pytest.raises(nx.ContractError):
        TransformerLayerParams.init(6, 4, np.random.default_rng(0))


def test_named_round_trip():
    p = params()
    q = TransformerLayerParams.from_named(p.named())
    assert q.heads == 2 and all(a is b for a, b in zip(p.named().values(), q.named().values()))


def test_single_layer_gradient_check():
    p = params(8, 2, seed=8)
    x = nx.parameter(np.random.default_rng(8).normal(size=(4, 8)))
    w = nx.tensor(np.random.default_rng(9).normal(size=(4, 8)))
    f = lambda: nx.sum_all(nx.mul(transformer_layer(x, p), w))
    assert nx.grad_check(f, [x, *p.named().values()], eps=1e-5) < 1e-4
