"""Tape, ops, and backward semantics."""

import math

import numpy as np
import pytest

from hreb import autodiff as ad
from hreb.errors import DegenerateRowError, NumericsError, VerificationError
from hreb.gradcheck import finite_diff_check, finite_diff_params


def erf_series(x, terms=40):
    """Maclaurin series for erf, accurate to well under 1e-12 for |x| <= 3."""
    acc = 0.0
    for n in range(terms):
        acc += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * acc


def scalar(x, requires_grad=False):
    return ad.Tensor(np.float64(x), requires_grad=requires_grad)


def test_tensor_coerces_to_float64():
    t = ad.Tensor(np.array([1, 2, 3], dtype=np.int32))
    assert t.data.dtype == np.float64


def test_tensor_ids_are_unique_and_increasing():
    a, b, c = ad.Tensor(1.0), ad.Tensor(2.0), ad.Tensor(3.0)
    assert a.id < b.id < c.id


def test_record_op_rejects_nonfinite_output_naming_the_op():
    tape = ad.Tape()
    x = ad.Tensor(np.array([0.0]), requires_grad=True)
    with np.errstate(divide="ignore"):
        with pytest.raises(NumericsError) as e:
            ad.log(tape, x)
    assert "log" in str(e.value)


def test_constant_inputs_may_carry_minus_inf():
    # -inf is legal in data (masks, forbidden transitions); only op OUTPUTS
    # must stay finite
    t = ad.Tensor(np.array([[0.0, -np.inf], [1.0, 2.0]]))
    out = ad.logsumexp(None, t, 1)
    assert np.allclose(out.data, [0.0, np.logaddexp(1.0, 2.0)])


def test_logsumexp_entirely_masked_row_trips_finite_check():
    # a fully -inf row has no mass at all; the generic op refuses rather
    # than emit -inf (the CRF kernels handle that case internally)
    t = ad.Tensor(np.array([[-np.inf, -np.inf]]))
    with np.errstate(invalid="ignore"):
        with pytest.raises(NumericsError):
            ad.logsumexp(None, t, 1)


def test_backward_requires_scalar_loss():
    tape = ad.Tape()
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.mul(tape, x, x)
    with pytest.raises(ValueError):
        ad.backward(tape, y)


def test_backward_accumulates_grad_oncem_per_tensor():
    # x feeds two ops; .grad must equal the true total, not double-count
    tape = ad.Tape()
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(tape, ad.mul(tape, x, x), x)  # x^2 + x -> dy/dx = 2x + 1
    loss = ad.sum_all(tape, y)
    grads = ad.backward(tape, loss)
    assert np.allclose(grads[x.id], [5.0])
    assert np.allclose(x.grad, [5.0])


def test_backward_second_call_doubles_stored_grad_only():
    tape = ad.Tape()
    x = ad.Tensor(np.array([3.0]), requires_grad=True)
    loss = ad.sum_all(tape, ad.mul(tape, x, x))
    g1 = ad.backward(tape, loss)
    g2 = ad.backward(tape, loss)
    assert np.allclose(g1[x.id], g2[x.id])
    assert np.allclose(x.grad, 2 * g1[x.id])
    ad.zero_grads([x])
    assert x.grad is None


def test_backward_keep_retains_intermediate_gradients():
    tape = ad.Tape()
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    mid = ad.mul(tape, x, x)
    loss = ad.sum_all(tape, mid)
    grads = ad.backward(tape, loss, keep=(mid.id,))
    assert np.allclose(grads[mid.id], [1.0, 1.0])
    grads2 = ad.backward(tape, loss)
    assert mid.id not in grads2


def test_broadcast_gradients_unbroadcast_correctly():
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal(4)

    def f(b):
        tape = ad.Tape()
        bt = ad.Tensor(b, requires_grad=True)
        out = ad.add(tape, ad.Tensor(a0), bt)
        loss = ad.sum_all(tape, ad.mul(tape, out, out))
        grads = ad.backward(tape, loss)
        return float(loss.data), grads[bt.id]

    assert finite_diff_check(f, b0) < 1e-8


def test_matmul_rejects_bad_shapes_naming_them():
    with pytest.raises(ValueError) as e:
        ad.matmul(None, ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(e.value)


def test_sigmoid_saturates_exactly_at_large_inputs():
    out = ad.sigmoid(None, ad.Tensor(np.array([1000.0, -1000.0])))
    assert out.data[0] == 1.0
    assert out.data[1] == 0.0


def test_frozen_activation_values():
    x = ad.Tensor(np.array([1.0]))
    assert abs(ad.silu_standard(None, x).data[0] - 0.7310585786300049) < 1e-15
    assert abs(ad.silu_paper(None, x).data[0] - 0.9276705118714868) < 1e-15
    assert abs(ad.erf(None, x).data[0] - 0.8427007929497149) < 1e-15


def test_silu_paper_is_derivative_of_standard_silu():
    # d/dx [x*sigmoid(x)] = sigmoid(x) + x*sigmoid(x)*(1-sigmoid(x))
    xs = np.linspace(-4, 4, 33)
    eps = 1e-6
    up = ad.silu_standard(None, ad.Tensor(xs + eps)).data
    dn = ad.silu_standard(None, ad.Tensor(xs - eps)).data
    paper = ad.silu_paper(None, ad.Tensor(xs)).data
    assert np.abs((up - dn) / (2 * eps) - paper).max() < 1e-8


def test_silu_dispatcher_rejects_unknown_variant():
    with pytest.raises(ValueError):
        ad.silu(None, ad.Tensor(np.array([1.0])), "fast")


def test_erf_matches_series_oracle():
    xs = np.linspace(-2.5, 2.5, 21)
    got = ad.erf(None, ad.Tensor(xs)).data
    want = np.array([erf_series(float(x)) for x in xs])
    assert np.abs(got - want).max() < 1e-12


def test_softplus_values_and_gradient():
    x = ad.Tensor(np.array([0.0, 2.0, -3.0]))
    got = ad.softplus(None, x).data
    assert np.allclose(got, np.log1p(np.exp([0.0, 2.0, -3.0])))

    def f(v):
        tape = ad.Tape()
        t = ad.Tensor(v, requires_grad=True)
        loss = ad.sum_all(tape, ad.softplus(tape, t))
        grads = ad.backward(tape, loss)
        return float(loss.data), grads[t.id]

    assert finite_diff_check(f, np.array([0.3, -1.2, 2.0])) < 1e-8


def test_clamp_min_gradient_gates_on_strict_comparison():
    tape = ad.Tape()
    x = ad.Tensor(np.array([0.5, 2.0]), requires_grad=True)
    out = ad.clamp_min(tape, x, 1.0)
    assert np.allclose(out.data, [1.0, 2.0])
    loss = ad.sum_all(tape, out)
    grads = ad.backward(tape, loss)
    assert np.allclose(grads[x.id], [0.0, 1.0])


def test_layer_norm_standardizes_each_row():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 8)) * 3 + 1
    out = ad.layer_norm(None, ad.Tensor(x), ad.Tensor(np.ones(8)),
                        ad.Tensor(np.zeros(8))).data
    assert np.abs(out.mean(axis=1)).max() < 1e-12
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-4  # eps shrinks it slightly


def test_feature_norm_statistics_come_from_masked_rows_only():
    x = np.array([[1.0, 10.0], [3.0, 30.0], [100.0, -100.0]])
    mask = np.array([True, True, False])
    out = ad.feature_norm(None, ad.Tensor(x), ad.Tensor(np.ones(2)),
                          ad.Tensor(np.zeros(2)), row_mask=mask).data
    mu = x[:2].mean(axis=0)
    sd = np.sqrt(x[:2].var(axis=0) + 1e-5)
    assert np.allclose(out, (x - mu) / sd)


def test_feature_norm_rejects_empty_statistics_mask():
    with pytest.raises(DegenerateRowError):
        ad.feature_norm(None, ad.Tensor(np.ones((2, 2))), ad.Tensor(np.ones(2)),
                        ad.Tensor(np.zeros(2)), row_mask=np.array([False, False]))


def test_softmax_rows_simplex_and_masked_zeros():
    rng = np.random.default_rng(2)
    s = rng.standard_normal((5, 5))
    mask = np.ones((5, 5), dtype=bool)
    mask[2, 3] = mask[2, 4] = False
    w = ad.softmax_rows(None, ad.Tensor(s), mask).data
    assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12
    assert w[2, 3] == 0.0 and w[2, 4] == 0.0
    assert (w >= 0).all()


def test_softmax_identity_scores_frozen_weights():
    w = ad.softmax_rows(None, ad.Tensor(np.eye(2))).data
    e = math.e
    assert np.allclose(w, [[e / (e + 1), 1 / (e + 1)],
                           [1 / (e + 1), e / (e + 1)]], atol=1e-15)


def test_fully_masked_row_raises_degenerate_row():
    s = np.zeros((2, 2))
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(DegenerateRowError):
        ad.softmax_rows(None, ad.Tensor(s), mask)


def test_mask_broadcasts_over_leading_axis():
    # one key mask shared by every query row
    s = np.zeros((3, 4))
    w = ad.softmax_rows(None, ad.Tensor(s), np.array([True, False, True, False])).data
    assert np.allclose(w[:, 0], 0.5)
    assert np.allclose(w[:, 1], 0.0)


def test_laplace_frozen_value_and_range():
    s = ad.Tensor(np.array([[1.0]]))
    mu = scalar(0.0)
    sigma_raw = scalar(np.log(np.expm1(1.0)))  # softplus^-1(1)
    w = ad.laplace_map(None, s, mu, sigma_raw).data
    assert abs(w[0, 0] - 0.8413447460685429) < 1e-12
    rng = np.random.default_rng(3)
    big = ad.laplace_map(None, ad.Tensor(rng.standard_normal((6, 6)) * 4),
                         mu, sigma_raw).data
    assert (big >= 0).all() and (big <= 1).all()
    # strictly interior while the erf argument stays unsaturated
    mid = ad.laplace_map(None, ad.Tensor(rng.uniform(-2, 2, (6, 6))),
                         mu, sigma_raw).data
    assert (mid > 0).all() and (mid < 1).all()


def test_laplace_rows_are_not_renormalized():
    s = ad.Tensor(np.full((2, 3), 2.0))
    w = ad.laplace_map(None, s, scalar(0.0), scalar(0.0)).data
    assert w.sum(axis=1).max() > 1.5


def test_normalize_rows_sums_to_one_and_errors_on_nonpositive():
    rng = np.random.default_rng(4)
    a = rng.uniform(0.5, 2.0, (4, 4))
    w = ad.normalize_rows(None, ad.Tensor(a)).data
    assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12
    with pytest.raises(DegenerateRowError) as e:
        ad.normalize_rows(None, ad.Tensor(np.array([[1.0, 1.0], [-1.0, 0.5]])))
    assert "row 1" in str(e.value)


def test_add_rel_bias_bucket_structure():
    n, w = 4, 1
    s = np.zeros((n, n))
    bias = np.array([10.0, 20.0, 30.0])
    out = ad.add_rel_bias(None, ad.Tensor(s), ad.Tensor(bias)).data
    offs = np.arange(n)[None, :] - np.arange(n)[:, None]
    want = bias[np.clip(offs + w, 0, 2 * w)]
    assert np.array_equal(out, want)
    assert out[0, 3] == 30.0  # clipped far-right offset
    assert out[3, 0] == 10.0  # clipped far-left offset


def test_slice_pad_reverse_concat_roundtrip():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((5, 3))
    sl = ad.slice_rows(None, ad.Tensor(a), 1, 4)
    assert np.array_equal(sl.data, a[1:4])
    padded = ad.pad_rows(None, sl, 5)
    assert padded.data.shape == (5, 3)
    assert np.array_equal(padded.data[3:], np.zeros((2, 3)))
    rev = ad.reverse_rows(None, ad.Tensor(a))
    assert np.array_equal(rev.data, a[::-1])
    cc = ad.concat_cols(None, ad.Tensor(a), rev)
    assert cc.data.shape == (5, 6)
    assert np.array_equal(cc.data[:, 3:], a[::-1])


def test_gather_rows_repeated_index_accumulates_gradient():
    tape = ad.Tape()
    table = ad.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = ad.gather_rows(tape, table, np.array([2, 2, 0]))
    loss = ad.sum_all(tape, out)
    grads = ad.backward(tape, loss)
    assert np.array_equal(grads[table.id], [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])


def test_pick_per_row_selects_one_entry_per_row():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.pick_per_row(None, ad.Tensor(a), np.array([1, 0]))
    assert np.array_equal(out.data, [2.0, 3.0])


def test_repeat_entries_tiles_and_sums_back():
    tape = ad.Tape()
    v = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = ad.repeat_entries(tape, v, 3)
    assert np.array_equal(out.data, [1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
    loss = ad.sum_all(tape, ad.mul(tape, out, ad.Tensor(np.arange(6.0))))
    grads = ad.backward(tape, loss)
    assert np.array_equal(grads[v.id], [0.0 + 1 + 2, 3.0 + 4 + 5])


def test_tape_records_only_gradient_relevant_ops():
    tape = ad.Tape()
    const = ad.Tensor(np.ones(3))
    ad.exp(tape, const)
    assert len(tape.records) == 0
    live = ad.Tensor(np.ones(3), requires_grad=True)
    ad.exp(tape, live)
    assert len(tape.records) == 1


def test_finite_diff_check_flags_nondeterministic_function():
    state = {"n": 0}

    def f(x):
        state["n"] += 1
        return float(x.sum()) + state["n"], np.ones_like(x)

    with pytest.raises(VerificationError):
        finite_diff_check(f, np.zeros(2))


def test_finite_diff_params_reports_per_parameter_errors():
    rng = np.random.default_rng(6)
    w = ad.Tensor(rng.standard_normal((3, 3)), requires_grad=True, name="w")
    b = ad.Tensor(rng.standard_normal(3), requires_grad=True, name="b")
    x = rng.standard_normal((2, 3))

    def build():
        tape = ad.Tape()
        out = ad.add(tape, ad.matmul(tape, ad.Tensor(x), w), b)
        return ad.sum_all(tape, ad.mul(tape, out, out)), tape

    errs = finite_diff_params(build, [w, b])
    assert set(errs) == {"w", "b"}
    assert max(errs.values()) < 1e-7
