import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foldkws.tensor import (
    SGD,
    Adam,
    BatchNormState,
    Tensor,
    batchnorm1d,
    conv1d,
    finite_diff_check,
    global_avgpool1d,
    linear,
    maxpool1d,
    no_grad,
    parameter,
    relu,
    weighted_cross_entropy,
)

from .oracles import conv1d_loop


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=grad)


# -- conv1d --------------------------------------------------------------------------


def test_conv1d_worked_example():
    y = conv1d(t([[1, 2, 3, 4]]), t([[[1, 0, -1]]]), t([0]), padding=1)
    np.testing.assert_array_equal(y.data, [[-2, -2, -2, 3]])


def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 9)).astype(np.float32)
    y = conv1d(t(x), t([[[0, 1, 0]]]), t([0]), padding=1)
    np.testing.assert_array_equal(y.data, x)


def test_conv1d_full_width_layer_shape():
    rng = np.random.default_rng(1)
    x = t(rng.standard_normal((128, 128)))
    w = t(rng.standard_normal((128, 128, 5)) * 0.01)
    assert conv1d(x, w, t(np.zeros(128)), padding=2).shape == (128, 128)


def test_conv1d_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        conv1d(t(np.zeros((3, 8))), t(np.zeros((2, 4, 3))), t(np.zeros(2)), padding=1)


@pytest.mark.parametrize("seed", range(5))
def test_conv1d_exact_matches_loop_bitwise(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out, k = rng.integers(1, 9), rng.integers(1, 9), rng.choice([1, 3, 5])
    length = rng.integers(k, 33)
    x = rng.standard_normal((c_in, length)).astype(np.float32)
    w = rng.standard_normal((c_out, c_in, k)).astype(np.float32)
    b = rng.standard_normal(c_out).astype(np.float32)
    y = conv1d(t(x), t(w), t(b), padding=(k - 1) // 2, exact=True)
    assert np.array_equal(y.data, conv1d_loop(x, w, b, (k - 1) // 2))


def test_conv1d_fast_path_close_to_loop():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 6, 20)).astype(np.float32)
    w = rng.standard_normal((4, 6, 5)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    y = conv1d(t(x), t(w), t(b), padding=2)
    for n in range(2):
        np.testing.assert_allclose(y.data[n], conv1d_loop(x[n], w, b, 2), rtol=1e-5, atol=1e-5)


def test_no_grad_forward_identical():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 16)).astype(np.float32)
    w = parameter(rng.standard_normal((3, 4, 3)).astype(np.float32))
    b = parameter(np.zeros(3, np.float32))
    y1 = conv1d(t(x), w, b, padding=1)
    with no_grad():
        y2 = conv1d(t(x), w, b, padding=1)
    assert not y2.requires_grad
    assert np.array_equal(y1.data, y2.data)


# -- elementwise / pooling -----------------------------------------------------


def test_relu_values_and_grad():
    x = t([-1.0, 0.0, 2.0], grad=True)
    y = relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_maxpool_examples():
    np.testing.assert_array_equal(maxpool1d(t([[1, 3, 2, 4]]), 2, 2).data, [[3, 4]])
    np.testing.assert_array_equal(maxpool1d(t(np.full((2, 6), 5.0)), 2, 2).data, np.full((2, 3), 5.0))
    assert maxpool1d(t(np.zeros((3, 128))), 2, 2).shape == (3, 64)
    with pytest.raises(ValueError):
        maxpool1d(t(np.zeros((1, 2))), 3, 1)


def test_maxpool_tie_goes_to_first():
    x = t([[2.0, 2.0, 1.0, 1.0]], grad=True)
    maxpool1d(x, 2, 2).sum().backward()
    np.testing.assert_array_equal(x.grad, [[1, 0, 1, 0]])


def test_global_avgpool():
    np.testing.assert_array_equal(global_avgpool1d(t([[2, 4]])).data, [3])
    x = t([[1.5]], grad=False)
    np.testing.assert_array_equal(global_avgpool1d(x).data, [1.5])
    x = t(np.ones((2, 4)), grad=True)
    global_avgpool1d(x).sum().backward()
    np.testing.assert_allclose(x.grad, np.full((2, 4), 0.25))


# -- batchnorm ---------------------------------------------------------------------


def test_batchnorm_identity_eval():
    x = np.random.default_rng(0).standard_normal((2, 3, 5)).astype(np.float32)
    st_ = BatchNormState(np.zeros(3, np.float32), np.ones(3, np.float32))
    y = batchnorm1d(t(x), t(np.ones(3)), t(np.zeros(3)), st_, training=False, eps=0.0)
    np.testing.assert_array_equal(y.data, x)


def test_batchnorm_train_normalizes_and_updates():
    rng = np.random.default_rng(1)
    x = (rng.standard_normal((8, 3, 20)) * [[[2.0], [0.5], [3.0]]] + [[[1.0], [-2.0], [5.0]]]).astype(np.float32)
    st_ = BatchNormState(np.zeros(3, np.float32), np.ones(3, np.float32), momentum=0.1)
    y = batchnorm1d(t(x), t(np.ones(3)), t(np.zeros(3)), st_, training=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(y.data.var(axis=(0, 2)), 1, atol=1e-3)
    np.testing.assert_allclose(st_.mean, 0.1 * x.mean(axis=(0, 2)), rtol=1e-5)


def test_batchnorm_updates_views_in_place():
    mean = np.zeros(6, np.float32)
    var = np.ones(6, np.float32)
    st_ = BatchNormState(mean[:2], var[:2])
    x = np.full((2, 2, 4), 3.0, np.float32)
    batchnorm1d(t(x), t(np.ones(2)), t(np.zeros(2)), st_, training=True)
    np.testing.assert_allclose(mean[:2], 0.3, rtol=1e-6)
    assert np.all(mean[2:] == 0)


# -- linear / loss -----------------------------------------------------------------


def test_linear_identity_and_param_count():
    x = np.arange(4, dtype=np.float32)
    np.testing.assert_array_equal(linear(t(x), t(np.eye(4)), t(np.zeros(4))).data, x)
    assert 128 * 12 + 12 == 1548
    with pytest.raises(ValueError):
        linear(t(np.zeros(5)), t(np.zeros((2, 4))), t(np.zeros(2)))


def test_cross_entropy_uniform_logits():
    loss = weighted_cross_entropy(t(np.zeros((3, 12))), [0, 5, 11], np.ones(12))
    assert loss.item() == pytest.approx(np.log(12), abs=1e-6)
    assert np.log(12) == pytest.approx(2.4849, abs=1e-4)


def test_cross_entropy_confident_limit():
    logits = np.zeros((1, 12), np.float32)
    logits[0, 4] = 100.0
    assert weighted_cross_entropy(t(logits), [4], np.ones(12)).item() < 1e-6


def test_cross_entropy_weight_scaling():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((2, 12)).astype(np.float32)
    w = np.ones(12)
    w[11] = 0.25
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    expected = -(1.0 * lp[0, 3] + 0.25 * lp[1, 11]) / 1.25
    assert weighted_cross_entropy(t(logits), [3, 11], w).item() == pytest.approx(expected, rel=1e-5)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        weighted_cross_entropy(t(np.zeros((1, 12))), [12], np.ones(12))


# -- optimizers --------------------------------------------------------------------


def _param(v, g):
    p = parameter(np.array([v], np.float32))
    p.grad = np.array([g], np.float32)
    return p


def test_sgd_plain_step():
    p = _param(1.0, 1.0)
    SGD([p], lr=0.001, momentum=0).step()
    assert p.data[0] == pytest.approx(0.999)


def test_sgd_zero_grad_noop():
    p = _param(1.0, 0.0)
    SGD([p], lr=0.1).step()
    assert p.data[0] == 1.0


def test_sgd_momentum_unrolled():
    p = _param(0.0, 1.0)
    opt = SGD([p], lr=0.001, momentum=0.9)
    opt.step()
    opt.step()
    assert p.data[0] == pytest.approx(-0.001 * 1 - 0.001 * 1.9, rel=1e-6)


def test_sgd_rejects_missing_grad():
    with pytest.raises(RuntimeError):
        SGD([parameter(np.zeros(2, np.float32))]).step()


def test_adam_first_step():
    p = _param(0.0, 1.0)
    Adam([p], lr=0.001).step()
    assert p.data[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-6)


def test_adam_zero_grad_noop():
    p = _param(0.5, 0.0)
    Adam([p]).step()
    assert p.data[0] == 0.5


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-2, 1e3), st.floats(0.5, 1e3))
def test_adam_first_step_scale_invariant(g, scale):
    a, b = _param(0.0, g), _param(0.0, g * scale)
    Adam([a]).step()
    Adam([b]).step()
    assert abs(a.data[0]) == pytest.approx(0.001, rel=1e-4)
    assert a.data[0] == pytest.approx(b.data[0], rel=1e-4)


def test_optimizers_deterministic():
    def run(cls):
        p = parameter(np.linspace(-1, 1, 7, dtype=np.float32))
        opt = cls([p], lr=0.01)
        for i in range(5):
            p.grad = np.sin(np.arange(7, dtype=np.float32) + i)
            opt.step()
        return p.data.copy()

    for cls in (SGD, Adam):
        assert np.array_equal(run(cls), run(cls))


def test_adam_step_counter_increments():
    p = _param(0.0, 1.0)
    opt = Adam([p])
    for i in range(3):
        opt.step()
        assert opt.steps == i + 1


# -- gradient suite ----------------------------------------------------------------


def _away_from_zero(rng, shape):
    x = rng.uniform(0.05, 1.0, size=shape) * rng.choice([-1, 1], size=shape)
    return x


def test_gradcheck_conv1d():
    rng = np.random.default_rng(0)
    rep = finite_diff_check(
        lambda x, w, b: conv1d(x, w, b, padding=1),
        [rng.standard_normal((2, 3, 8)), rng.standard_normal((4, 3, 3)), rng.standard_normal(4)],
    )
    assert rep.passed, rep.failures


def test_gradcheck_linear():
    rng = np.random.default_rng(1)
    rep = finite_diff_check(linear, [rng.standard_normal((3, 6)), rng.standard_normal((5, 6)), rng.standard_normal(5)])
    assert rep.passed, rep.failures


def test_gradcheck_batchnorm_train():
    rng = np.random.default_rng(2)

    def op(x, g, b):
        return batchnorm1d(x, g, b, None, training=True)

    rep = finite_diff_check(op, [rng.standard_normal((3, 4, 6)), rng.uniform(0.5, 2, 4), rng.standard_normal(4)])
    assert rep.passed, rep.failures
