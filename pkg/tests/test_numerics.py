import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trimodal import numerics as nm
from trimodal.numerics import (
    AdamState,
    ShapeError,
    Tape,
    ValidationError,
    adam_step,
    bce_with_logits,
    grad_check,
    param,
    tensor,
    unary_op,
    zero_grads,
)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------


def matmul_loop_oracle(a, b):
    m, n = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            for k in range(n):
                out[i, j] += a[i, k] * b[k, j]
    return out


def erf_series(x, terms=40):
    # erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


def bce_direct_oracle(z, t):
    s = 1.0 / (1.0 + np.exp(-z))
    return float(np.mean(-(t * np.log(s) + (1 - t) * np.log(1 - s))))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    with Tape():
        a = tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = tensor(np.eye(2))
        out = eye @ a
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_selection_row():
    with Tape():
        sel = tensor([[1.0, 0.0]])
        col = tensor([[5.0], [7.0]])
        out = sel @ col
    assert out.data.tolist() == [[5.0]]


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    with Tape():
        out = tensor(a) @ tensor(b)
    np.testing.assert_allclose(out.data, matmul_loop_oracle(a, b), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with Tape():
        with pytest.raises(ShapeError) as exc:
            tensor(np.zeros((2, 3))) @ tensor(np.zeros((4, 2)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_flops_count():
    with Tape() as tape:
        tensor(np.zeros((3, 4))) @ tensor(np.zeros((4, 2)))
    assert tape.flops == 2 * 3 * 4 * 2


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_symmetry():
    with Tape():
        out = nm.softmax(tensor([0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_ln3():
    with Tape():
        out = nm.softmax(tensor([math.log(3.0), 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [0.75, 0.25], atol=1e-12)


def test_softmax_large_inputs_stable():
    with Tape():
        out = nm.softmax(tensor([1000.0, 1000.0]), axis=0)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=2, max_size=6),
    st.lists(st.floats(-50, 50), min_size=2, max_size=6),
)
def test_softmax_slices_sum_to_one(row_a, row_b):
    n = min(len(row_a), len(row_b))
    x = np.array([row_a[:n], row_b[:n]])
    for axis in (0, 1):
        with Tape():
            out = nm.softmax(tensor(x), axis=axis)
        np.testing.assert_allclose(out.data.sum(axis=axis), 1.0, atol=1e-6)
        assert np.all(out.data >= 0)


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------


def _ln(x, gamma=None, beta=None):
    d = np.asarray(x).shape[-1]
    g = np.ones(d) if gamma is None else gamma
    b = np.zeros(d) if beta is None else beta
    with Tape():
        return nm.layer_norm(tensor(x), tensor(g), tensor(b)).data


def test_layer_norm_constant_row_is_zero():
    np.testing.assert_allclose(_ln([5.0, 5.0, 5.0]), [0.0, 0.0, 0.0])


def test_layer_norm_already_normalized():
    out = _ln([1.0, -1.0])
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-4)


def test_layer_norm_affine_collapse():
    out = _ln(np.arange(6.0).reshape(3, 2), gamma=np.zeros(2), beta=np.array([2.0, 2.0]))
    np.testing.assert_allclose(out, np.full((3, 2), 2.0))


def test_layer_norm_row_statistics():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 16))
    out = _ln(x)
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


# ---------------------------------------------------------------------------
# gelu
# ---------------------------------------------------------------------------


def test_gelu_zero():
    with Tape():
        assert nm.gelu(tensor(np.array(0.0))).data == 0.0


def test_gelu_asymptote():
    with Tape():
        out = nm.gelu(tensor(np.array(10.0)))
    assert abs(out.data - 10.0) < 1e-6


def test_gelu_at_one_matches_erf_series_oracle():
    phi_1 = 0.5 * (1.0 + erf_series(1.0 / math.sqrt(2.0)))
    with Tape():
        out = nm.gelu(tensor(np.array(1.0)))
    assert abs(float(out.data) - 1.0 * phi_1) < 1e-12


# ---------------------------------------------------------------------------
# bce_with_logits
# ---------------------------------------------------------------------------


def test_bce_zero_logits_is_ln2():
    with Tape():
        out = bce_with_logits(tensor([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 1.0]))
    assert abs(float(out.data) - math.log(2.0)) < 1e-12


def test_bce_saturated_positive():
    with Tape():
        out = bce_with_logits(tensor([50.0]), np.array([1.0]))
    assert float(out.data) < 1e-12


def test_bce_matches_direct_formula_oracle():
    rng = np.random.default_rng(2)
    z = rng.normal(size=8) * 3
    t = (rng.random(8) > 0.5).astype(float)
    with Tape():
        out = bce_with_logits(tensor(z), t)
    assert abs(float(out.data) - bce_direct_oracle(z, t)) < 1e-10


def test_bce_rejects_non_binary_targets():
    with Tape():
        with pytest.raises(ValidationError):
            bce_with_logits(tensor([0.0]), np.array([0.5]))


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------


def test_adam_zero_grad_leaves_params_unchanged():
    p = param(np.array([1.0, -2.0]))
    state = AdamState.init([p])
    before = p.data.copy()
    adam_step([p], state, lr=1e-2)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_magnitude_is_lr():
    p = param(np.array(1.0))
    p.grad = np.array(0.37)
    state = AdamState.init([p])
    adam_step([p], state, lr=1e-3)
    assert abs(abs(1.0 - float(p.data)) - 1e-3) < 1e-6


def test_adam_descends_on_quadratic():
    w = param(np.array(1.0))
    state = AdamState.init([w])
    values = []
    for _ in range(2):
        zero_grads([w])
        with Tape() as tape:
            loss = nm.mul(w, w)
            tape.backward(loss)
        values.append(float(w.data) ** 2)
        adam_step([w], state, lr=1e-2)
    assert float(w.data) ** 2 < values[0]


# ---------------------------------------------------------------------------
# grad_check harness
# ---------------------------------------------------------------------------


def test_grad_check_sum_is_exact():
    x = param(np.arange(6.0).reshape(2, 3), name="x")
    report = grad_check(lambda ps: nm.sum_all(ps[0]), [x])
    assert report.passed
    assert report.max_rel_err < 1e-9


def test_grad_check_softmax_pooled_bce():
    rng = np.random.default_rng(3)
    toks = param(rng.normal(size=(3, 2)), name="tokens")
    w = param(rng.normal(size=(3, 1)), name="w")
    targets = np.array([1.0, 0.0])

    def fn(ps):
        t, wt = ps
        att = nm.softmax(wt, axis=0)
        pooled = nm.transpose(att) @ t
        return bce_with_logits(nm.reshape(pooled, (2,)), targets)

    report = grad_check(fn, [toks, w])
    assert report.passed
    assert report.max_rel_err <= 1e-4


def test_grad_check_detects_sign_flipped_backward():
    x = param(np.array([0.3, -0.7, 1.2]), name="x")

    def broken_gelu(t):
        return unary_op(
            t,
            lambda d: d * 0.5 * (1.0 + np.vectorize(math.erf)(d / math.sqrt(2))),
            lambda g, d, out: -g,  # wrong on purpose
            flops_per_elem=nm.GELU_FLOPS_PER_ELEM,
        )

    report = grad_check(lambda ps: nm.sum_all(broken_gelu(ps[0])), [x])
    assert not report.passed
    assert report.entries[0].failures


def test_grad_check_reports_all_failures_not_just_first():
    x = param(np.array([1.0, 2.0, 3.0]), name="x")

    def doubled_backward(t):
        return unary_op(t, lambda d: d * 2.0, lambda g, d, out: 4.0 * g)

    report = grad_check(lambda ps: nm.sum_all(doubled_backward(ps[0])), [x])
    assert len(report.entries[0].failures) == 3


# ---------------------------------------------------------------------------
# per-primitive finite-difference property (many seeds)
# ---------------------------------------------------------------------------


def _fd_cases(seed):
    rng = np.random.default_rng(seed)
    a = param(rng.normal(size=(2, 3)), name="a")
    a2 = param(rng.normal(size=(2, 3)), name="a2")
    b = param(rng.normal(size=(3, 2)), name="b")
    v = param(rng.normal(size=3), name="v")
    g = param(rng.normal(size=3), name="g")
    be = param(rng.normal(size=3), name="be")
    bias = param(rng.normal(size=3), name="bias")
    table = param(rng.normal(size=(2, 3)), name="table")
    ids = np.array([0, 1, 0])
    t = (rng.random(3) > 0.5).astype(float)
    # fixed mixing weights so losses depend on every output coordinate
    w23 = rng.normal(size=(2, 3))
    w43 = rng.normal(size=(4, 3))
    w33 = rng.normal(size=(3, 3))

    def mix(out, w):
        return nm.sum_all(nm.mul(out, tensor(w)))

    return {
        "matmul": (lambda ps: nm.sum_all(ps[0] @ ps[1]), [a, b]),
        "add_broadcast": (lambda ps: mix(nm.add(ps[0], ps[1]), w23), [a, bias]),
        "sub": (lambda ps: mix(nm.sub(ps[0], ps[1]), w23), [a, a2]),
        "mul": (lambda ps: mix(nm.mul(ps[0], ps[1]), w23), [a, a2]),
        "softmax": (lambda ps: mix(nm.softmax(ps[0], axis=1), w23), [a]),
        "layer_norm": (lambda ps: mix(nm.layer_norm(ps[0], ps[1], ps[2]), w23), [a, g, be]),
        "gelu": (lambda ps: nm.sum_all(nm.gelu(ps[0])), [a]),
        "sigmoid": (lambda ps: nm.sum_all(nm.sigmoid(ps[0])), [a]),
        "bce": (lambda ps: bce_with_logits(ps[0], t), [v]),
        "concat_slice": (lambda ps: mix(nm.slice_rows(nm.concat([ps[0], ps[1]], axis=0), 1, 3), w23), [a, a2]),
        "tile_rows": (lambda ps: mix(nm.tile_rows(ps[0], 4), w43), [v]),
        "gather_rows": (lambda ps: mix(nm.gather_rows(ps[0], ids), w33), [table]),
        "transpose_scale": (lambda ps: nm.sum_all(nm.scale(nm.transpose(ps[0]), 1.7)), [a]),
    }


@pytest.mark.parametrize("seed", range(100))
def test_every_primitive_matches_finite_differences(seed):
    for name, (fn, params) in _fd_cases(seed).items():
        report = grad_check(fn, params)
        assert report.passed, f"{name} (seed {seed}): max rel err {report.max_rel_err}"


# ---------------------------------------------------------------------------
# tape accounting
# ---------------------------------------------------------------------------


def test_flop_counter_is_exact_sum_of_primitive_counts():
    m, n, p = 3, 4, 2
    with Tape() as tape:
        a = tensor(np.ones((m, n)))
        b = tensor(np.ones((n, p)))
        c = a @ b                       # 2*m*n*p
        d = nm.add(c, tensor(np.ones(p)))  # m*p
        nm.softmax(d, axis=1)           # 5*m*p
    assert tape.flops == 2 * m * n * p + m * p + 5 * m * p


def test_flop_counter_monotone_within_pass():
    with Tape() as tape:
        a = tensor(np.ones((4, 4)))
        seen = [tape.flops]
        for _ in range(3):
            a = a @ a
            seen.append(tape.flops)
    assert seen == sorted(seen)


def test_alloc_counter_tracks_tensor_bytes():
    with Tape() as tape:
        a = tensor(np.zeros((8, 8)))       # 512 bytes float64
        before = tape.alloc_bytes
        a @ a                              # result: another 512
    assert before == 512
    assert tape.alloc_bytes == 1024


def test_backward_visits_ops_in_reverse_order():
    order = []
    x = param(np.array([1.0]))
    with Tape() as tape:
        y = unary_op(x, lambda d: d * 2, lambda g, d, o: (order.append("first"), 2 * g)[1])
        unary_op(y, lambda d: d + 1, lambda g, d, o: (order.append("second"), g)[1])
        loss = nm.sum_all(tape.ops[-1][0])
        tape.backward(loss)
    assert order == ["second", "first"]


def test_forward_ops_deterministic_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        with Tape():
            a = tensor(rng.normal(size=(5, 5)))
            out = nm.softmax(nm.gelu(a @ a), axis=1)
        return out.data.tobytes()

    assert run() == run()


def test_no_nan_inf_on_finite_inputs():
    rng = np.random.default_rng(8)
    with Tape():
        x = tensor(rng.normal(size=(4, 4)) * 100)
        for out in (
            nm.softmax(x, axis=1),
            nm.layer_norm(x, tensor(np.ones(4)), tensor(np.zeros(4))),
            nm.gelu(x),
            nm.sigmoid(x),
        ):
            assert np.all(np.isfinite(out.data))


def test_tape_dtype_modes():
    with Tape(np.float32):
        a = tensor(np.ones(3))
        assert a.data.dtype == np.float32
    with Tape(np.float64):
        a = tensor(np.ones(3))
        assert a.data.dtype == np.float64
