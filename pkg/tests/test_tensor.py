"""Numeric core: forward values against plain-math oracles, gradients
against central differences, determinism of the discrete ops."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grainmoe import tensor as tt
from grainmoe.gradcheck import grad_check
from grainmoe.tensor import Tensor

from oracles import ref_layer_norm, ref_softmax, ref_swiglu


def t64(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_on_equal_logits():
    out = tt.softmax(t64([0.0, 0.0, 0.0]))
    npt.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_softmax_analytic_two_class():
    # e^0 = 1, e^{ln 2} = 2  ->  [1/3, 2/3]
    out = tt.softmax(t64([0.0, math.log(2.0)]))
    npt.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_shift_invariance():
    v = [2.0, 1.0, 0.0]
    # scalar oracle: exp / sum computed directly
    exps = [math.exp(x) for x in v]
    expected = [e / sum(exps) for e in exps]
    npt.assert_allclose(expected, [0.66524096, 0.24472847, 0.09003057], atol=1e-8)
    shifted = tt.softmax(t64([x + 100.0 for x in v]))
    npt.assert_allclose(shifted.data, expected, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite logits"):
        tt.softmax(t64([0.0, np.nan]))
    with pytest.raises(ValueError, match="non-finite logits"):
        tt.softmax(t64([np.inf, 0.0]))


def test_softmax_axis_and_oracle(rng):
    x = rng.normal(size=(4, 7))
    out = tt.softmax(t64(x), axis=1)
    npt.assert_allclose(out.data, ref_softmax(x, axis=1), atol=1e-14)


def test_softmax_mask_zeroes_excluded_slots(rng):
    x = rng.normal(size=(3, 5))
    mask = np.tril(np.ones((3, 5), dtype=bool), k=1)[:, :5]
    out = tt.softmax(t64(x), axis=1, mask=mask[:3])
    assert (out.data[~mask[:3]] == 0.0).all()
    npt.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=-60, max_value=60), min_size=1, max_size=12))
def test_softmax_sums_to_one_property(logits):
    out = tt.softmax(t64(logits))
    assert abs(out.data.sum() - 1.0) <= 1e-12
    assert (out.data > 0).all()


# ---------------------------------------------------------------------------
# top-k selection


def test_topk_basic():
    idx, vals = tt.topk_select(t64([0.1, 0.5, 0.3, 0.2]), k=2)
    assert idx == [1, 2]
    npt.assert_allclose(vals.data, [0.5, 0.3])


def test_topk_tie_breaks_to_lower_index():
    idx, _ = tt.topk_select(t64([0.4, 0.4, 0.4]), k=2)
    assert idx == [0, 1]


def test_topk_full_selection_sorts_by_value():
    idx, vals = tt.topk_select(t64([0.2, 0.9, 0.1, 0.5]), k=4)
    assert idx == [1, 3, 0, 2]
    assert list(vals.data) == sorted(vals.data, reverse=True)


def test_topk_k_out_of_range():
    with pytest.raises(ValueError, match="k exceeds expert count"):
        tt.topk_select(t64([1.0, 2.0]), k=3)


def test_topk_deterministic_across_runs(rng):
    scores = rng.normal(size=64)
    first = tt.topk_select(t64(scores), k=8)[0]
    for _ in range(5):
        assert tt.topk_select(t64(scores), k=8)[0] == first


def test_topk_gradient_only_through_selected():
    s = t64([0.1, 0.5, 0.3, 0.2], requires_grad=True)
    _, vals = tt.topk_select(s, k=2)
    tt.sum_(vals).backward()
    npt.assert_array_equal(s.grad, [0.0, 1.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# swiglu


def test_swiglu_zero_input():
    w = t64(np.ones((3, 4)))
    down = t64(np.ones((4, 3)))
    out = tt.swiglu(t64(np.zeros(3)), w, w, down)
    npt.assert_array_equal(out.data, np.zeros(3))


def test_swiglu_scalar_case():
    one = lambda: t64(np.ones((1, 1)))
    out = tt.swiglu(t64(np.ones(1)), one(), one(), one())
    silu_1 = 1.0 / (1.0 + math.exp(-1.0))  # scalar oracle
    npt.assert_allclose(out.data, [silu_1], atol=1e-9)
    npt.assert_allclose(out.data, [0.731059], atol=1e-6)


def test_swiglu_zero_gate_kills_output():
    out = tt.swiglu(t64(np.ones(1)), t64(np.zeros((1, 1))), t64(np.ones((1, 1))), t64(np.ones((1, 1))))
    npt.assert_array_equal(out.data, [0.0])


def test_swiglu_matches_reference(rng):
    x = rng.normal(size=(5, 6))
    wg, wu = rng.normal(size=(2, 6, 8))
    wd = rng.normal(size=(8, 6))
    out = tt.swiglu(t64(x), t64(wg), t64(wu), t64(wd))
    npt.assert_allclose(out.data, ref_swiglu(x, wg, wu, wd), atol=1e-12)


# ---------------------------------------------------------------------------
# other forward oracles


def test_layer_norm_matches_reference(rng):
    x, gain, bias = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    out = tt.layer_norm(t64(x), t64(gain), t64(bias))
    npt.assert_allclose(out.data, ref_layer_norm(x, gain, bias), atol=1e-12)


def test_log_sum_exp_matches_reduce(rng):
    x = rng.normal(size=(4, 9)) * 10
    out = tt.log_sum_exp(t64(x), axis=1)
    npt.assert_allclose(out.data, np.logaddexp.reduce(x, axis=1), atol=1e-12)


def test_cross_entropy_matches_manual(rng):
    x = rng.normal(size=(6, 5))
    targets = rng.integers(0, 5, size=6)
    out = tt.cross_entropy_from_logits(t64(x), targets)
    manual = np.mean([-np.log(ref_softmax(row)[t]) for row, t in zip(x, targets)])
    npt.assert_allclose(out.item(), manual, atol=1e-12)


def test_mean_and_sum_axis(rng):
    x = rng.normal(size=(3, 4))
    npt.assert_allclose(tt.mean(t64(x)).item(), x.mean(), atol=1e-15)
    npt.assert_allclose(tt.mean(t64(x), axis=0).data, x.mean(axis=0), atol=1e-15)
    npt.assert_allclose(tt.sum_(t64(x), axis=1).data, x.sum(axis=1), atol=1e-15)


# ---------------------------------------------------------------------------
# dropout


def test_dropout_identity_at_zero(rng):
    x = t64(rng.normal(size=(4, 4)))
    assert tt.dropout(x, 0.0, seed=1) is x


def test_dropout_mask_reproducible():
    x = t64(np.ones((8, 8)))
    a = tt.dropout(x, 0.4, seed=99)
    b = tt.dropout(x, 0.4, seed=99)
    npt.assert_array_equal(a.data, b.data)
    c = tt.dropout(x, 0.4, seed=100)
    assert not np.array_equal(a.data, c.data)


def test_dropout_inverted_scaling():
    x = t64(np.ones(20000))
    out = tt.dropout(x, 0.25, seed=3)
    kept = out.data != 0
    npt.assert_allclose(out.data[kept], 1.0 / 0.75, atol=1e-12)
    assert abs(kept.mean() - 0.75) < 0.02


def test_dropout_rate_bounds():
    with pytest.raises(ValueError):
        tt.dropout(t64([1.0]), 1.0, seed=0)
    with pytest.raises(ValueError):
        tt.dropout(t64([1.0]), -0.1, seed=0)


# ---------------------------------------------------------------------------
# shape errors and graph behavior


def test_shape_mismatches_raise(rng):
    a, b = t64(rng.normal(size=(2, 3))), t64(rng.normal(size=(3, 2)))
    with pytest.raises(ValueError):
        tt.add(a, b)
    with pytest.raises(ValueError):
        tt.mul(a, b)
    with pytest.raises(ValueError):
        tt.matmul(a, a)


def test_mixed_dtypes_raise():
    a = Tensor([1.0], dtype=np.float32)
    b = Tensor([1.0], dtype=np.float64)
    with pytest.raises(TypeError):
        tt.add(a, b)


def test_reused_node_accumulates_gradient():
    x = t64([3.0], requires_grad=True)
    y = tt.add(tt.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1
    tt.sum_(y).backward()
    npt.assert_allclose(x.grad, [7.0])


def test_no_grad_skips_graph():
    x = t64([2.0], requires_grad=True)
    with tt.no_grad():
        y = tt.mul(x, x)
    assert y._backward is None and not y.requires_grad


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        tt.mul(x, x).backward()


# ---------------------------------------------------------------------------
# per-op gradient checks (64-bit, h=1e-5, rel err < 1e-4)

TOL = 1e-4
H = 1e-5


def _check(f, params):
    assert grad_check(f, params, h=H) < TOL


def test_grad_matmul_add_mul(rng):
    a = t64(rng.normal(size=(3, 4)), requires_grad=True)
    b = t64(rng.normal(size=(4, 2)), requires_grad=True)
    c = t64(rng.normal(size=(3, 2)), requires_grad=True)
    w = t64(rng.normal(size=(3, 2)))
    _check(lambda: tt.sum_(tt.mul(tt.add(tt.matmul(a, b), c), w)), [a, b, c])


def test_grad_softmax_and_lse(rng):
    x = t64(rng.normal(size=(3, 5)), requires_grad=True)
    w = t64(rng.normal(size=(3, 5)))
    _check(lambda: tt.sum_(tt.mul(tt.softmax(x, axis=1), w)), [x])
    w2 = t64(rng.normal(size=3))
    _check(lambda: tt.sum_(tt.mul(tt.log_sum_exp(x, axis=1), w2)), [x])


def test_grad_masked_softmax(rng):
    x = t64(rng.normal(size=(4, 4)), requires_grad=True)
    mask = np.tril(np.ones((4, 4), dtype=bool))
    w = t64(rng.normal(size=(4, 4)))
    _check(lambda: tt.sum_(tt.mul(tt.softmax(x, axis=1, mask=mask), w)), [x])


def test_grad_layer_norm(rng):
    x = t64(rng.normal(size=(4, 6)), requires_grad=True)
    gain = t64(rng.normal(size=6), requires_grad=True)
    bias = t64(rng.normal(size=6), requires_grad=True)
    w = t64(rng.normal(size=(4, 6)))
    _check(lambda: tt.sum_(tt.mul(tt.layer_norm(x, gain, bias), w)), [x, gain, bias])


def test_grad_cross_entropy(rng):
    x = t64(rng.normal(size=(5, 7)), requires_grad=True)
    targets = rng.integers(0, 7, size=5)
    _check(lambda: tt.cross_entropy_from_logits(x, targets), [x])


def test_grad_mean_sum_silu_scale(rng):
    x = t64(rng.normal(size=(3, 4)), requires_grad=True)
    _check(lambda: tt.mean(tt.silu(tt.scale(x, 1.7))), [x])
    _check(lambda: tt.sum_(tt.mean(x, axis=0)), [x])


def test_grad_dropout_fixed_mask(rng):
    x = t64(rng.normal(size=(4, 4)), requires_grad=True)
    w = t64(rng.normal(size=(4, 4)))
    _check(lambda: tt.sum_(tt.mul(tt.dropout(x, 0.3, seed=7), w)), [x])


def test_grad_bmm_reshape_transpose(rng):
    a = t64(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = t64(rng.normal(size=(2, 4, 3)), requires_grad=True)
    w = t64(rng.normal(size=(3, 2, 3)))
    _check(
        lambda: tt.sum_(tt.mul(tt.transpose(tt.bmm(a, b), (1, 0, 2)), w)),
        [a, b],
    )
    _check(lambda: tt.sum_(tt.mul(tt.reshape(a, (6, 4)), t64(np.ones((6, 4))))), [a])


def test_grad_rope(rng):
    x = t64(rng.normal(size=(2, 5, 6)), requires_grad=True)
    w = t64(rng.normal(size=(2, 5, 6)))
    _check(lambda: tt.sum_(tt.mul(tt.rope(x, np.arange(5), 4), w)), [x])


def test_grad_gather_scatter(rng):
    x = t64(rng.normal(size=(6, 3)), requires_grad=True)
    idx = np.array([0, 2, 2, 5])
    w = t64(rng.normal(size=(4, 3)))
    _check(lambda: tt.sum_(tt.mul(tt.take_rows(x, idx), w)), [x])

    rows = t64(rng.normal(size=(4, 3)), requires_grad=True)
    w2 = t64(rng.normal(size=(6, 3)))
    _check(lambda: tt.sum_(tt.mul(tt.scatter_rows(rows, idx, 6), w2)), [rows])

    g = t64(rng.normal(size=(4, 5)), requires_grad=True)
    cols = rng.integers(0, 5, size=(4, 2))
    w3 = t64(rng.normal(size=(4, 2)))
    _check(lambda: tt.sum_(tt.mul(tt.take_cols(g, cols), w3)), [g])

    w4 = t64(rng.normal(size=3))
    _check(lambda: tt.sum_(tt.mul(tt.take_elements(g, [0, 1, 3], [4, 0, 2]), w4)), [g])


def test_grad_scale_rows_and_multi_scatter(rng):
    x = t64(rng.normal(size=(4, 3)), requires_grad=True)
    s = t64(rng.normal(size=4), requires_grad=True)
    w = t64(rng.normal(size=(4, 3)))
    _check(lambda: tt.sum_(tt.mul(tt.scale_rows(x, s), w)), [x, s])

    a = t64(rng.normal(size=(2, 3)), requires_grad=True)
    b = t64(rng.normal(size=(3, 3)), requires_grad=True)
    w2 = t64(rng.normal(size=(5, 3)))
    _check(
        lambda: tt.sum_(
            tt.mul(tt.scatter_rows_multi([(a, np.array([0, 4])), (b, np.array([1, 2, 4]))], 5), w2)
        ),
        [a, b],
    )


def test_grad_swiglu(rng):
    x = t64(rng.normal(size=(3, 4)), requires_grad=True)
    wg = t64(rng.normal(size=(4, 5)), requires_grad=True)
    wu = t64(rng.normal(size=(4, 5)), requires_grad=True)
    wd = t64(rng.normal(size=(5, 4)), requires_grad=True)
    w = t64(rng.normal(size=(3, 4)))
    _check(lambda: tt.sum_(tt.mul(tt.swiglu(x, wg, wu, wd), w)), [x, wg, wu, wd])
