import math

import numpy as np
import pytest
from scipy.special import erf

from trimodal import numerics as nm
from trimodal.encoder import EncoderParams, TransformerConfig, encode, ffn, msa
from trimodal.featurize import TokenSequence
from trimodal.numerics import Tape, ValidationError, tensor


def _cfg(d=4, k=2, L=1, max_tokens=8):
    return TransformerConfig(d=d, k=k, d_h=d // k, L=L, max_tokens=max_tokens)


def _params(cfg, seed=0, prefix="enc"):
    return EncoderParams.init(cfg, np.random.default_rng(seed), prefix=prefix)


def _seq(x, modality="visual"):
    return TokenSequence(tokens=tensor(np.asarray(x)), modality=modality)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------


def msa_loop_oracle(x, w_qkv, w_msa, k, d_h):
    """Per-head attention with explicit loops over rows and heads."""
    l, d = x.shape
    qkv = x @ w_qkv
    q, kk, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    head_outs = []
    for h in range(k):
        qh = q[:, h * d_h : (h + 1) * d_h]
        kh = kk[:, h * d_h : (h + 1) * d_h]
        vh = v[:, h * d_h : (h + 1) * d_h]
        out = np.zeros((l, d_h))
        for i in range(l):
            scores = np.array([qh[i] @ kh[j] / math.sqrt(d_h) for j in range(l)])
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            for j in range(l):
                out[i] += w[j] * vh[j]
        head_outs.append(out)
    return np.concatenate(head_outs, axis=1) @ w_msa


def gelu_np(x):
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def ln_np(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def encoder_block_oracle(tokens, params, cfg):
    """Straight-line single-block forward in plain numpy."""
    z = np.vstack([params.x_cls.data, tokens]) + params.e_pos.data[: tokens.shape[0] + 1]
    layer = params.layers[0]
    z_attn = msa_loop_oracle(
        ln_np(z, layer.ln1_gamma.data, layer.ln1_beta.data),
        layer.w_qkv.data, layer.w_msa.data, cfg.k, cfg.d_h,
    ) + z
    hidden = gelu_np(ln_np(z_attn, layer.ln2_gamma.data, layer.ln2_beta.data) @ layer.w1.data + layer.b1.data)
    return hidden @ layer.w2.data + layer.b2.data + z_attn


# ---------------------------------------------------------------------------
# msa
# ---------------------------------------------------------------------------


def test_msa_single_token_is_value_projection():
    cfg = _cfg()
    params = _params(cfg, seed=1)
    layer = params.layers[0]
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 4))
    with Tape():
        out = msa(tensor(x), layer, cfg)
    v = (x @ layer.w_qkv.data)[:, 8:]
    np.testing.assert_allclose(out.data, v @ layer.w_msa.data, atol=1e-12)


def test_msa_permutation_equivariant():
    cfg = _cfg()
    layer = _params(cfg, seed=3).layers[0]
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    with Tape():
        out = msa(tensor(x), layer, cfg)
    with Tape():
        out_perm = msa(tensor(x[perm]), layer, cfg)
    np.testing.assert_allclose(out_perm.data, out.data[perm], atol=1e-10)


def test_msa_matches_loop_oracle():
    cfg = _cfg(d=4, k=2)
    layer = _params(cfg, seed=5).layers[0]
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 4))
    with Tape():
        out = msa(tensor(x), layer, cfg)
    expected = msa_loop_oracle(x, layer.w_qkv.data, layer.w_msa.data, cfg.k, cfg.d_h)
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


# ---------------------------------------------------------------------------
# ffn
# ---------------------------------------------------------------------------


def test_ffn_zero_input_zero_biases():
    cfg = _cfg()
    layer = _params(cfg, seed=7).layers[0]
    with Tape():
        out = ffn(tensor(np.zeros((3, 4))), layer)
    np.testing.assert_array_equal(out.data, np.zeros((3, 4)))


def test_ffn_bias_only():
    cfg = _cfg()
    layer = _params(cfg, seed=8).layers[0]
    layer.w1.data[:] = 0.0
    layer.w2.data[:] = 0.0
    layer.b2.data[:] = np.array([1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(9)
    with Tape():
        out = ffn(tensor(rng.normal(size=(3, 4))), layer)
    np.testing.assert_allclose(out.data, np.tile(layer.b2.data, (3, 1)))


def test_ffn_matches_primitive_composition():
    cfg = _cfg()
    layer = _params(cfg, seed=10).layers[0]
    rng = np.random.default_rng(11)
    z = rng.normal(size=(3, 4))
    with Tape():
        out = ffn(tensor(z), layer)
    expected = gelu_np(z @ layer.w1.data + layer.b1.data) @ layer.w2.data + layer.b2.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def test_encode_zero_layers_summary_is_cls_plus_position():
    cfg = _cfg(L=0)
    params = _params(cfg, seed=12)
    rng = np.random.default_rng(13)
    with Tape():
        summary, _ = encode(_seq(rng.normal(size=(3, 4))), params, cfg)
    np.testing.assert_allclose(summary.values.data, params.x_cls.data + params.e_pos.data[0], atol=1e-12)


@pytest.mark.parametrize("n", [1, 8, 64])
def test_encode_summary_width(n):
    cfg = _cfg(d=8, k=2, L=1, max_tokens=64)
    params = _params(cfg, seed=14)
    rng = np.random.default_rng(n)
    with Tape():
        summary, states = encode(_seq(rng.normal(size=(n, 8))), params, cfg)
    assert summary.values.shape == (8,)
    assert states.shape == (n + 1, 8)


def test_encode_matches_single_block_oracle():
    cfg = _cfg(d=4, k=2, L=1)
    params = _params(cfg, seed=15)
    rng = np.random.default_rng(16)
    toks = rng.normal(size=(2, 4))
    with Tape():
        summary, states = encode(_seq(toks), params, cfg)
    expected = encoder_block_oracle(toks, params, cfg)
    np.testing.assert_allclose(states.data, expected, atol=1e-8)
    np.testing.assert_allclose(summary.values.data, expected[0], atol=1e-8)


def test_encode_token_overflow_names_counts():
    cfg = _cfg(max_tokens=4)
    params = _params(cfg, seed=17)
    with Tape():
        with pytest.raises(ValidationError) as exc:
            encode(_seq(np.zeros((5, 4))), params, cfg)
    assert "5" in str(exc.value) and "4" in str(exc.value)


def test_encode_finite_at_scale():
    cfg = _cfg(d=8, k=4, L=2, max_tokens=32)
    params = _params(cfg, seed=18)
    rng = np.random.default_rng(19)
    with Tape():
        summary, states = encode(_seq(rng.normal(size=(32, 8)) * 10), params, cfg)
    assert np.all(np.isfinite(states.data))


def test_encode_zero_positions_permutation_invariant_summary():
    cfg = _cfg(d=4, k=2, L=2, max_tokens=8)
    params = _params(cfg, seed=20)
    params.e_pos.data[:] = 0.0
    rng = np.random.default_rng(21)
    toks = rng.normal(size=(6, 4))
    with Tape():
        s1, _ = encode(_seq(toks), params, cfg)
    with Tape():
        s2, _ = encode(_seq(toks[rng.permutation(6)]), params, cfg)
    np.testing.assert_allclose(s1.values.data, s2.values.data, atol=1e-6)


def test_encode_end_to_end_gradient_check():
    cfg = TransformerConfig(d=8, k=2, d_h=4, L=2, max_tokens=4)
    params = _params(cfg, seed=22)
    rng = np.random.default_rng(23)
    toks = rng.normal(size=(4, 8))
    mixer = rng.normal(size=8)
    names = list(params.named())
    tensors = [t for _, t in names]

    def fn(ps):
        summary, _ = encode(_seq(toks), params, cfg)
        return nm.sum_all(nm.mul(summary.values, nm.tensor(mixer)))

    report = nm.grad_check(fn, tensors, tolerance=1e-4)
    assert report.passed, max((e.name, e.max_rel_err) for e in report.entries if not e.passed)
