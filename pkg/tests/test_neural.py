import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causalpush import neural


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        neural.MlpSpec((3, 2))
    with pytest.raises(ValueError):
        neural.MlpSpec((3, 0, 2))
    assert neural.MlpSpec((3, 4, 2)).n_params == 3 * 4 + 4 + 4 * 2 + 2


def test_params_length_checked():
    with pytest.raises(ValueError):
        neural.Params(neural.MlpSpec((3, 4, 2)), np.zeros(5))


def test_elu_and_its_derivative():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
    y = neural.elu(x)
    np.testing.assert_allclose(y, np.where(x > 0, x, np.expm1(x)))
    np.testing.assert_allclose(neural.elu_grad_from_output(y), np.where(x > 0, 1.0, np.exp(x)))


def test_orthogonal_init():
    spec = neural.MlpSpec((6, 16, 8, 3), output_gain=0.01)
    p = neural.init_params(spec, 0)
    (w0, b0), (w1, _), (w2, _) = p.layers()
    np.testing.assert_allclose(w0 @ w0.T, 2.0 * np.eye(6), atol=1e-12)
    np.testing.assert_allclose(w1.T @ w1, 2.0 * np.eye(8), atol=1e-12)
    np.testing.assert_allclose(w2.T @ w2, 1e-4 * np.eye(3), atol=1e-15)
    assert np.all(b0 == 0)


def test_forward_single_and_batch_agree():
    p = neural.init_params(neural.MlpSpec((4, 8, 2)), 1)
    x = np.random.default_rng(0).normal(size=(5, 4))
    batch = neural.forward(p, x)
    for i in range(5):
        np.testing.assert_allclose(neural.forward(p, x[i]), batch[i], rtol=1e-12, atol=1e-14)
    with pytest.raises(ValueError):
        neural.forward(p, np.zeros((2, 3)))
    np.testing.assert_allclose(neural.forward(p, x, dtype=np.float32), batch, rtol=1e-5, atol=1e-6)


def _net_and_loss(seed):
    rng = np.random.default_rng(seed)
    sizes = (int(rng.integers(2, 6)), int(rng.integers(3, 9)), int(rng.integers(3, 9)), int(rng.integers(1, 4)))
    p = neural.init_params(neural.MlpSpec(sizes), seed)
    p.flat[:] += rng.normal(0, 0.1, p.flat.size)  # non-zero biases
    x = rng.normal(size=(7, sizes[0]))
    c = rng.normal(size=(7, sizes[-1]))

    def loss(flat):
        y = neural.forward(neural.Params(p.spec, flat), x)
        return float(np.sum(np.tanh(y) * c))

    y, cache = neural.forward(p, x, return_cache=True)
    upstream = c * (1.0 - np.tanh(y) ** 2)
    return p, x, loss, cache, upstream


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    p, x, loss, cache, upstream = _net_and_loss(seed)
    analytic = neural.backward(p, cache, upstream)
    numeric = neural.finite_difference_grad(loss, p.flat, h=1e-6)
    assert neural.max_relative_error(analytic, numeric, floor=1e-6) < 1e-4


def test_input_gradient():
    p, x, _, cache, upstream = _net_and_loss(7)
    _, gx = neural.backward(p, cache, upstream, need_input_grad=True)

    def loss_x(flat_x):
        y = neural.forward(p, flat_x.reshape(x.shape))
        return float(np.sum(y * upstream))

    # upstream held fixed makes the loss linear in the output, so d/dx is exactly gx
    numeric = neural.finite_difference_grad(loss_x, x.ravel(), h=1e-6).reshape(x.shape)
    assert neural.max_relative_error(gx, numeric, floor=1e-6) < 1e-4


def test_backward_rejects_wrong_upstream():
    p = neural.init_params(neural.MlpSpec((3, 4, 2)), 0)
    _, cache = neural.forward(p, np.zeros((5, 3)), return_cache=True)
    with pytest.raises(ValueError):
        neural.backward(p, cache, np.zeros((5, 3)))


def test_adam_first_step_is_lr_times_sign():
    st_ = neural.AdamState.zeros(3, lr=0.1)
    _, new = neural.adam_step(st_, np.zeros(3), np.array([2.0, -0.5, 0.0]))
    np.testing.assert_allclose(new, [-0.1, 0.1, 0.0], atol=1e-8)


def test_adam_minimizes_quadratic():
    st_ = neural.AdamState.zeros(2, lr=0.05)
    x = np.array([3.0, -2.0])
    for _ in range(800):
        st_, x = neural.adam_step(st_, x, 2 * x)
    assert np.linalg.norm(x) < 1e-2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=6), st.floats(0.01, 10.0))
def test_clip_grad_norm_property(vals, max_norm):
    g = [np.array(vals[: len(vals) // 2 + 1]), np.array(vals[len(vals) // 2 + 1:])]
    out, total = neural.clip_grad_norm(g, max_norm)
    new = np.sqrt(sum(float(np.dot(a, a)) for a in out))
    assert new <= max_norm * (1 + 1e-9)
    if total <= max_norm:
        for a, b in zip(g, out):
            np.testing.assert_array_equal(a, b)


def test_mlp_bundle_reduces_regression_loss():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(256, 2))
    y = (x[:, :1] - 0.5 * x[:, 1:]) * 0.3
    net = neural.Mlp.create((2, 16, 1), seed=0, lr=1e-2)
    first = float(np.mean((net(x) - y) ** 2))
    for _ in range(200):
        pred, cache = neural.forward(net.params, x, return_cache=True)
        net.apply_grads(neural.backward(net.params, cache, 2 * (pred - y) / len(x)))
    assert float(np.mean((net(x) - y) ** 2)) < 0.05 * first
