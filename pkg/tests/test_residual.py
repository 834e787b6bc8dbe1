"""Residual modes: classic sum, static scaling, gradient-gated dynamic mix."""

import numpy as np
import pytest

from hreb import autodiff as ad
from hreb import residual
from hreb.errors import DivergenceError


def double_branch(x):
    return ad.scale(None, x, 2.0)


def make_state(mode, d=3, seed=0, **kw):
    return residual.GateState(d, mode, np.random.default_rng(seed), **kw)


def test_classic_is_bitwise_branch_plus_skip():
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.standard_normal((4, 3)))
    state = make_state("classic")
    out = residual.apply(None, x, double_branch, state)
    assert np.array_equal(out.data, 2.0 * x.data + x.data)


def test_classic_rejects_nonunit_weights():
    with pytest.raises(ValueError):
        make_state("classic", alpha=0.5)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        make_state("adaptive")


def test_static_scales_each_side():
    rng = np.random.default_rng(1)
    x = ad.Tensor(rng.standard_normal((4, 3)))
    state = make_state("static", alpha=0.25, beta=2.0)
    out = residual.apply(None, x, double_branch, state)
    assert np.array_equal(out.data, 0.25 * (2.0 * x.data) + 2.0 * x.data)


def test_static_unit_weights_match_classic_bitwise():
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.standard_normal((5, 3)))
    a = residual.apply(None, x, double_branch, make_state("classic"))
    b = residual.apply(None, x, double_branch, make_state("static"))
    assert np.array_equal(a.data, b.data)


def test_dynamic_with_zero_caches_and_zero_params_halves_both_sides():
    # zero caches through zero weights give sigmoid(0) = 0.5 on every feature
    rng = np.random.default_rng(3)
    x = ad.Tensor(rng.standard_normal((4, 3)))
    state = make_state("dynamic")
    out = residual.apply(None, x, double_branch, state)
    assert np.abs(out.data - 0.5 * (2.0 * x.data) - 0.5 * x.data).max() < 1e-15


def test_dynamic_gates_respond_to_cached_gradients():
    state = make_state("dynamic", d=2)
    state.b_alpha.data[:] = 0.0
    state.w_alpha.data[:] = np.eye(2) * 1000.0
    state.cache_f = np.array([1.0, -1.0])  # drives gate_f to sigmoid(+-1000)
    x = ad.Tensor(np.ones((1, 2)))
    out = residual.apply(None, x, double_branch, state)
    # gate_f saturates exactly; gate_x stays at 0.5
    assert np.array_equal(out.data, [[2.0 * 1.0 + 0.5, 2.0 * 0.0 + 0.5]])


def test_dynamic_records_pending_only_under_a_tape():
    state = make_state("dynamic")
    x = ad.Tensor(np.ones((2, 3)), requires_grad=True)
    residual.apply(None, x, double_branch, state)
    assert state.pending == []
    tape = ad.Tape()
    out = residual.apply(tape, x, lambda t: ad.scale(tape, t, 2.0), state)
    assert len(state.pending) == 1
    f, skip = state.pending[0]
    assert skip is x
    assert np.array_equal(f.data, 2.0 * x.data)
    assert set(state.pending_ids()) == {f.id, x.id}
    assert out.data.shape == x.data.shape


def test_params_exposed_only_in_dynamic_mode():
    assert make_state("classic").params() == []
    assert make_state("static").params() == []
    names = [p.name for p in make_state("dynamic", prefix="L.").params()]
    assert names == ["L.rb.w_alpha", "L.rb.b_alpha", "L.rb.w_beta", "L.rb.b_beta"]


def test_update_gate_cache_is_momentum_mean():
    state = make_state("dynamic", d=2)
    g1f = np.array([[1.0, 2.0], [3.0, 4.0]])
    g1x = np.array([[10.0, 20.0]])
    residual.update_gate_cache(state, g1f, g1x, 0.9)
    assert np.allclose(state.cache_f, 0.1 * np.array([2.0, 3.0]))
    assert np.allclose(state.cache_x, 0.1 * np.array([10.0, 20.0]))
    residual.update_gate_cache(state, np.zeros((1, 2)), np.zeros((1, 2)), 0.9)
    assert np.allclose(state.cache_f, 0.09 * np.array([2.0, 3.0]))


def test_update_gate_cache_validates_inputs():
    state = make_state("dynamic", d=2)
    with pytest.raises(ValueError):
        residual.update_gate_cache(state, np.zeros((1, 2)), np.zeros((1, 2)), 1.0)
    with pytest.raises(DivergenceError):
        residual.update_gate_cache(state, np.array([[np.inf, 0.0]]),
                                   np.zeros((1, 2)), 0.9)


def test_commit_folds_backward_gradients_and_clears_pending():
    state = make_state("dynamic", d=2)
    tape = ad.Tape()
    x = ad.Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    out = residual.apply(tape, x, lambda t: ad.mul(tape, t, t), state)
    loss = ad.sum_all(tape, out)
    grads = ad.backward(tape, loss, keep=state.pending_ids())
    f, skip = state.pending[0]
    gf = grads[f.id]
    gx = grads[skip.id]
    residual.commit_gate_caches([state], grads, 0.9)
    assert state.pending == []
    assert np.allclose(state.cache_f, 0.1 * gf.mean(axis=0))
    assert np.allclose(state.cache_x, 0.1 * gx.mean(axis=0))


def test_commit_uses_zeros_for_absent_gradients():
    state = make_state("dynamic", d=2)
    tape = ad.Tape()
    x = ad.Tensor(np.ones((1, 2)), requires_grad=True)
    residual.apply(tape, x, lambda t: ad.scale(tape, t, 2.0), state)
    state.cache_f[:] = 1.0
    residual.commit_gate_caches([state], {}, 0.5)
    assert np.allclose(state.cache_f, 0.5)
    assert state.pending == []


def test_commit_clears_pending_on_nondynamic_states_too():
    state = make_state("classic")
    state.pending = [("sentinel", "sentinel")]
    residual.commit_gate_caches([state], {}, 0.9)
    assert state.pending == []


def test_dynamic_gate_gradcheck():
    from hreb.gradcheck import finite_diff_params

    rng = np.random.default_rng(4)
    state = make_state("dynamic", d=3, seed=4)
    state.cache_f = rng.standard_normal(3) * 0.5
    state.cache_x = rng.standard_normal(3) * 0.5
    state.w_alpha.data[:] = rng.standard_normal((3, 3)) * 0.3
    state.w_beta.data[:] = rng.standard_normal((3, 3)) * 0.3
    x_data = rng.standard_normal((4, 3))

    def build():
        state.pending = []
        tape = ad.Tape()
        x = ad.Tensor(x_data, requires_grad=True)
        out = residual.apply(tape, x, lambda t: ad.silu_standard(tape, t), state)
        return ad.sum_all(tape, ad.mul(tape, out, out)), tape

    errs = finite_diff_params(build, state.params())
    assert max(errs.values()) < 1e-6
