from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featreplay import autodiff as ad
from featreplay.autodiff import AdamState, ParameterSet
from featreplay.errors import ContractViolation, NumericFailure


def _params(**arrays):
    return ParameterSet.from_arrays({k: np.asarray(v, dtype=float) for k, v in arrays.items()}, prefix="t")


def test_square_sum_gradient():
    p = _params(x=[1.0, 2.0])
    ad.backward(ad.tsum(ad.square(p["x"])))
    np.testing.assert_array_equal(p["x"].grad, [2.0, 4.0])


def test_sum_gradient_is_ones():
    p = _params(x=np.random.default_rng(0).normal(size=(3, 4)))
    ad.backward(p["x"].sum())
    np.testing.assert_array_equal(p["x"].grad, np.ones((3, 4)))


def test_gradient_zero_before_backward_and_after_reset():
    p = _params(x=[1.0, 2.0])
    assert np.all(p["x"].grad == 0)
    ad.backward(ad.tsum(p["x"]))
    p.zero_grad()
    assert np.all(p["x"].grad == 0)


def test_backward_accumulates():
    p = _params(x=[1.0, -3.0])
    ad.backward(ad.tsum(ad.square(p["x"])))
    ad.backward(ad.tsum(ad.square(p["x"])))
    np.testing.assert_array_equal(p["x"].grad, [4.0, -12.0])


def test_non_scalar_loss_rejected():
    p = _params(x=[1.0, 2.0])
    with pytest.raises(ContractViolation):
        ad.backward(ad.square(p["x"]))


def test_nan_loss_reports_offending_node():
    p = _params(x=[-1.0, 4.0])
    with np.errstate(invalid="ignore"):
        root = ad.sqrt(p["x"])
    with pytest.raises(NumericFailure) as info:
        ad.backward(ad.tsum(root))
    assert info.value.node is root


def test_nan_gradient_reports_node():
    # sqrt(0) is finite but its derivative is not
    p = _params(x=[0.0, 4.0])
    with np.errstate(divide="ignore"), pytest.raises(NumericFailure) as info:
        ad.backward(ad.tsum(ad.sqrt(p["x"])))
    assert info.value.node is not None


def test_mlp_gradient_against_finite_differences():
    rng = np.random.default_rng(7)
    p = _params(W1=rng.normal(size=(3, 5)), b1=rng.normal(size=5), W2=rng.normal(size=(5, 1)), b2=rng.normal(size=1))
    x = rng.normal(size=(4, 3))

    def loss():
        h = ad.tanh(ad.affine(x, p["W1"], p["b1"]))
        return ad.mean(ad.square(ad.affine(h, p["W2"], p["b2"])))

    assert ad.grad_check(loss, p) < 1e-6


def test_grad_check_cubic():
    p = _params(x=[2.0])
    assert ad.grad_check(lambda: ad.tsum(ad.power(p["x"], 3.0)), p) < 1e-6


def test_grad_check_frozen_is_exactly_zero():
    p = _params(x=[2.0, 1.0])
    p.freeze()
    assert ad.grad_check(lambda: ad.tsum(ad.exp(p["x"])), p) == 0.0


def test_grad_check_detects_nondeterminism():
    p = _params(x=[2.0])
    rng = np.random.default_rng(0)
    with pytest.raises(ContractViolation):
        ad.grad_check(lambda: ad.tsum(ad.mul(p["x"], rng.normal())), p)


def test_grad_check_eps_must_be_positive():
    p = _params(x=[2.0])
    with pytest.raises(ContractViolation):
        ad.grad_check(lambda: ad.tsum(p["x"]), p, eps=0.0)


def test_no_grad_records_nothing():
    p = _params(x=[1.0])
    with ad.no_grad():
        y = ad.square(p["x"])
    assert not y.requires_grad and y.parents == ()
    assert ad.grad_enabled()


# ---------------------------------------------------------------- Adam


def test_adam_first_step_on_square():
    # bias-corrected first step is lr * g / |g| = 0.1 whatever the gradient size
    p = _params(x=[1.0])
    state = AdamState.for_params(p, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    ad.backward(ad.tsum(ad.square(p["x"])))
    ad.adam_step(p, state)
    assert p["x"].data[0] == pytest.approx(0.9, abs=1e-7)
    assert state.step == 1
    assert p["x"].grad[0] == 2.0  # gradients are left for the caller to reset


def test_adam_zero_gradient_and_zero_lr_are_no_ops():
    p = _params(x=[1.0, -2.0])
    before = p.values.copy()
    ad.adam_step(p, AdamState.for_params(p))
    np.testing.assert_array_equal(p.values, before)
    p["x"].grad[...] = [3.0, 1.0]
    ad.adam_step(p, AdamState.for_params(p, lr=0.0))
    np.testing.assert_array_equal(p.values, before)


def test_adam_shape_mismatch():
    p = _params(x=[1.0, 2.0])
    with pytest.raises(ContractViolation):
        ad.adam_step(p, AdamState(np.zeros(3), np.zeros(3)))


def test_adam_refuses_frozen_set():
    p = _params(x=[1.0])
    p.freeze()
    with pytest.raises(ContractViolation):
        ad.adam_step(p, AdamState.for_params(p))


def test_adam_defaults():
    s = AdamState.for_params(_params(x=[0.0]))
    assert (s.lr, s.beta1, s.beta2, s.eps, s.step) == (1e-4, 0.5, 0.999, 1e-8, 0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lr=st.floats(1e-5, 1e-1))
def test_adam_magnitude_symmetry(seed, lr):
    rng = np.random.default_rng(seed)
    start, grads = rng.normal(size=6), rng.normal(size=(3, 6))
    deltas = []
    for sign in (1.0, -1.0):
        p = _params(x=start)
        state = AdamState.for_params(p, lr=sign * lr)
        for g in grads:
            p["x"].grad[...] = sign * g
            ad.adam_step(p, state)
        deltas.append(p.values - start)
    np.testing.assert_allclose(np.abs(deltas[0]), np.abs(deltas[1]), rtol=1e-12, atol=0)


# ---------------------------------------------------------------- primitive property tests

UNARY = {
    "relu": (ad.relu, lambda x: x),
    "leaky_relu": (lambda t: ad.leaky_relu(t, 0.2), lambda x: x),
    "sigmoid": (ad.sigmoid, lambda x: x),
    "tanh": (ad.tanh, lambda x: x),
    "exp": (ad.exp, lambda x: np.clip(x, -3, 3)),
    "log": (ad.log, lambda x: np.abs(x) + 0.5),
    "sqrt": (ad.sqrt, lambda x: np.abs(x) + 0.5),
    "square": (ad.square, lambda x: x),
    "power": (lambda t: ad.power(t, 2.5), lambda x: np.abs(x) + 0.5),
    "neg": (ad.neg, lambda x: x),
    "transpose": (ad.transpose, lambda x: x),
    "norm": (lambda t: ad.norm(t, axis=1), lambda x: x),
    "logsumexp": (lambda t: ad.logsumexp(t, axis=1), lambda x: x),
    "mean": (lambda t: ad.mean(t, axis=0), lambda x: x),
    "slice": (lambda t: ad.getitem(t, (slice(1, 3), [0, 2, 2])), lambda x: x),
}


def _kinks_away(x: np.ndarray) -> np.ndarray:
    # keep rectifier inputs away from 0 so central differences straddle no kink
    return np.where(np.abs(x) < 0.05, x + 0.1 * np.sign(x + 1e-12), x)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), name=st.sampled_from(sorted(UNARY)))
def test_unary_primitive_gradients(seed, name):
    op, domain = UNARY[name]
    rng = np.random.default_rng(seed)
    p = _params(x=_kinks_away(domain(rng.normal(size=(3, 4)))))
    weights = rng.normal(size=op(ad.Tensor(p["x"].data)).shape)
    assert ad.grad_check(lambda: ad.tsum(ad.mul(op(p["x"]), weights)), p) < 1e-5


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": ad.div,
}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), name=st.sampled_from(sorted(BINARY)), broadcast=st.booleans())
def test_binary_primitive_gradients(seed, name, broadcast):
    rng = np.random.default_rng(seed)
    b_shape = (4,) if broadcast else (3, 4)
    p = _params(a=rng.normal(size=(3, 4)), b=rng.uniform(0.5, 2.0, size=b_shape) * rng.choice([-1, 1], size=b_shape))
    weights = rng.normal(size=(3, 4))
    op = BINARY[name]
    assert ad.grad_check(lambda: ad.tsum(ad.mul(op(p["a"], p["b"]), weights)), p) < 1e-5


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), per_row=st.booleans())
def test_structured_primitive_gradients(seed, per_row):
    rng = np.random.default_rng(seed)
    p = _params(
        x=rng.normal(size=(4, 3)),
        W=rng.normal(size=(3, 5)),
        b=rng.normal(size=5),
        scale=rng.normal(size=(3, 5)),
        shift=rng.normal(size=(3, 5)),
        y=rng.normal(size=(4, 2)),
    )
    index = rng.integers(0, 3, 4) if per_row else int(rng.integers(0, 3))
    weights = rng.normal(size=(4, 7))

    def loss():
        h = ad.affine(p["x"], p["W"], p["b"])
        h = ad.add(h, ad.matmul(p["x"], p["W"]))
        h = ad.modulate(h, p["scale"], p["shift"], index)
        return ad.tsum(ad.mul(ad.concat([h, p["y"]], axis=1), weights))

    assert ad.grad_check(loss, p) < 1e-5


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gradient_linearity(seed):
    rng = np.random.default_rng(seed)
    p = _params(x=rng.normal(size=(3, 2)))
    w = rng.normal(size=(3, 2))

    def f():
        return ad.tsum(ad.tanh(ad.mul(p["x"], w)))

    def g():
        return ad.mean(ad.square(p["x"]))

    ad.backward(ad.add(f(), g()))
    together = p.grads.copy()
    p.zero_grad()
    ad.backward(f())
    ad.backward(g())
    np.testing.assert_allclose(together, p.grads, rtol=1e-12, atol=1e-14)


def test_norm_of_zero_vector_has_zero_gradient():
    p = _params(x=np.zeros((2, 3)))
    ad.backward(ad.tsum(ad.norm(p["x"], axis=1)))
    assert np.all(p["x"].grad == 0)


def test_parameter_set_views_share_buffers():
    p = _params(a=np.ones((2, 2)), b=np.zeros(3))
    p.values[:] = np.arange(7)
    np.testing.assert_array_equal(p["a"].data, [[0, 1], [2, 3]])
    np.testing.assert_array_equal(p["b"].data, [4, 5, 6])
    clone = p.copy(frozen=True)
    p.values[:] = -1
    assert clone["b"].data[0] == 4 and clone.frozen
