import numpy as np
import pytest

from afnet_m import functional as F
from afnet_m.errors import LabelError, ShapeError
from afnet_m.tensor import Tape, Tensor, backward
from conftest import fd_check, naive_conv2d, naive_linear, naive_pool2d, random_tensor

TOL = 1e-4


def _projected(out, rng):
    """Scalar loss sum(out * R) with a fixed random R, so every output entry matters."""
    r = F.constant(rng.standard_normal(out.shape))
    return F.reduce_sum(F.mul(out, r))


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 3)])
def test_conv2d_gradients(seed, stride, pad):
    rng = np.random.default_rng(seed)
    k = 3 if pad < 3 else 7
    x = random_tensor(rng, 2, 3, 9, 9)
    w = random_tensor(rng, 4, 3, k, k, scale=0.3)
    b = random_tensor(rng, 4)
    r = rng.standard_normal((2, 4, (9 + 2 * pad - k) // stride + 1, (9 + 2 * pad - k) // stride + 1))
    errors = fd_check(lambda: F.reduce_sum(F.mul(F.conv2d(x, w, b, stride, pad), F.constant(r))),
                      dict(x=x, w=w, b=b), entries=25, seed=seed)
    assert max(errors.values()) < TOL, errors


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("mode", ["max", "avg"])
def test_pool2d_gradients(seed, mode):
    rng = np.random.default_rng(100 + seed)
    x = random_tensor(rng, 2, 2, 8, 8)
    r = rng.standard_normal((2, 2, 4, 4))
    errors = fd_check(lambda: F.reduce_sum(F.mul(F.pool2d(x, mode, 3, 3, 2, 1), F.constant(r))), dict(x=x))
    assert errors["x"] < TOL, errors


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("mode", ["max", "avg"])
def test_global_pool_gradients(seed, mode):
    rng = np.random.default_rng(200 + seed)
    x = random_tensor(rng, 2, 3, 4, 5)
    r = rng.standard_normal((2, 3, 1, 1))
    errors = fd_check(lambda: F.reduce_sum(F.mul(F.global_pool(x, mode), F.constant(r))), dict(x=x))
    assert errors["x"] < TOL, errors


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["relu", "sigmoid"])
def test_activation_gradients(seed, kind):
    rng = np.random.default_rng(300 + seed)
    x = random_tensor(rng, 3, 7)
    errors = fd_check(lambda: _projected(F.activation(x, kind), np.random.default_rng(seed)), dict(x=x))
    assert errors["x"] < TOL, errors


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["add", "mul"])
def test_broadcast_elementwise_gradients(seed, kind):
    rng = np.random.default_rng(400 + seed)
    a = random_tensor(rng, 2, 3, 4, 4)
    b = random_tensor(rng, 2, 3, 1, 1)
    errors = fd_check(lambda: _projected(F.elementwise(a, b, kind), np.random.default_rng(seed)), dict(a=a, b=b))
    assert max(errors.values()) < TOL, errors


@pytest.mark.parametrize("seed", range(10))
def test_linear_gradients(seed):
    rng = np.random.default_rng(500 + seed)
    x, w, b = random_tensor(rng, 4, 5), random_tensor(rng, 5, 3), random_tensor(rng, 3)
    errors = fd_check(lambda: _projected(F.linear(x, w, b), np.random.default_rng(seed)), dict(x=x, w=w, b=b))
    assert max(errors.values()) < TOL, errors


@pytest.mark.parametrize("seed", range(10))
def test_batchnorm_gradients(seed):
    rng = np.random.default_rng(600 + seed)
    x = random_tensor(rng, 3, 2, 3, 3)
    scale, shift = random_tensor(rng, 2), random_tensor(rng, 2)
    stats = F.RunningStats.fresh(2)
    errors = fd_check(lambda: _projected(F.batchnorm2d(x, scale, shift, stats, training=True),
                                         np.random.default_rng(seed)),
                      dict(x=x, scale=scale, shift=shift))
    assert max(errors.values()) < TOL, errors


@pytest.mark.parametrize("seed", range(10))
def test_softmax_cross_entropy_gradients(seed):
    rng = np.random.default_rng(700 + seed)
    logits = random_tensor(rng, 5, 6)
    labels = rng.integers(0, 6, 5)
    errors = fd_check(lambda: F.softmax_cross_entropy(logits, labels)[0], dict(logits=logits))
    assert errors["logits"] < TOL, errors


@pytest.mark.parametrize("seed", range(10))
def test_softmax_log_concat_gradients(seed):
    rng = np.random.default_rng(800 + seed)
    a, b = random_tensor(rng, 3, 2), random_tensor(rng, 3, 4)
    errors = fd_check(lambda: _projected(F.log(F.softmax(F.concat([a, b], axis=1))), np.random.default_rng(seed)),
                      dict(a=a, b=b))
    assert max(errors.values()) < TOL, errors


@pytest.mark.parametrize("seed", range(10))
def test_composed_graph_gradients(seed):
    """conv -> batchnorm -> relu -> max pool -> global avg -> linear -> cross-entropy."""
    rng = np.random.default_rng(900 + seed)
    x = random_tensor(rng, 2, 3, 8, 8)
    w, b = random_tensor(rng, 4, 3, 3, 3, scale=0.3), random_tensor(rng, 4)
    scale, shift = random_tensor(rng, 4), random_tensor(rng, 4)
    fc_w, fc_b = random_tensor(rng, 4, 6), random_tensor(rng, 6)
    stats = F.RunningStats.fresh(4)
    labels = np.array([1, 4])

    def loss():
        h = F.relu(F.batchnorm2d(F.conv2d(x, w, b, 1, 1), scale, shift, stats, training=True))
        h = F.flatten(F.global_pool(F.pool2d(h, "max", 3, 3, 2, 1), "avg"))
        return F.softmax_cross_entropy(F.linear(h, fc_w, fc_b), labels)[0]

    errors = fd_check(loss, dict(x=x, w=w, b=b, scale=scale, shift=shift, fc_w=fc_w, fc_b=fc_b), entries=20)
    assert max(errors.values()) < TOL, errors


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for case in range(50):
        k = int(rng.choice([1, 3, 5, 7]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        H = int(rng.integers(k, k + 6))
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), H, H))
        w = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], k, k))
        b = rng.standard_normal(w.shape[0])
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        assert np.allclose(out, naive_conv2d(x, w, b, stride, pad), rtol=0, atol=1e-10), f"case {case}"


def test_pool2d_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for case in range(50):
        k = int(rng.choice([2, 3]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        mode = ["max", "avg"][case % 2]
        x = rng.standard_normal((2, 2, int(rng.integers(k, k + 6)), int(rng.integers(k, k + 6))))
        out = F.pool2d(Tensor(x), mode, k, k, stride, pad).data
        ref = naive_pool2d(x, mode, k, stride, pad)
        assert np.allclose(out, ref, rtol=0, atol=1e-10), f"case {case} ({mode})"


def test_linear_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for case in range(50):
        n, i, o = (int(v) for v in rng.integers(1, 6, 3))
        x, w, b = rng.standard_normal((n, i)), rng.standard_normal((i, o)), rng.standard_normal(o)
        out = F.linear(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.allclose(out, naive_linear(x, w, b), rtol=0, atol=1e-10), f"case {case}"


def test_max_pool_routes_gradient_to_first_maximum():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = F.reduce_sum(F.pool2d(x, "max", 2, 2, 2))
    backward(tape, loss)
    assert np.array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_shape_errors():
    x = Tensor(np.zeros((1, 3, 5, 5)))
    with pytest.raises(ShapeError):
        F.conv2d(x, Tensor(np.zeros((2, 4, 3, 3))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        F.conv2d(x, Tensor(np.zeros((2, 3, 7, 7))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        F.pool2d(x, "max", 3, 3, 2, pad=2)
    with pytest.raises(ShapeError):
        F.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ShapeError):
        F.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


def test_label_errors():
    logits = Tensor(np.zeros((2, 6)))
    with pytest.raises(LabelError):
        F.softmax_cross_entropy(logits, [0, 6])
    with pytest.raises(LabelError):
        F.softmax_cross_entropy(logits, [0, 1, 2])


def test_cross_entropy_of_uniform_logits():
    loss, probs = F.softmax_cross_entropy(Tensor(np.zeros((3, 6))), [0, 2, 5])
    assert np.isclose(loss.item(), np.log(6))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_batchnorm_needs_two_values_per_channel_in_training():
    x = Tensor(np.ones((1, 2, 1, 1)))
    scale, shift = Tensor(np.ones(2)), Tensor(np.zeros(2))
    with pytest.raises(ShapeError):
        F.batchnorm2d(x, scale, shift, F.RunningStats.fresh(2), training=True)
    out = F.batchnorm2d(x, scale, shift, F.RunningStats.fresh(2), training=False)
    assert np.allclose(out.data, 1.0 / np.sqrt(1.0 + 1e-5))


def test_batchnorm_running_stats_use_unbiased_variance():
    x = np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2)
    stats = F.RunningStats.fresh(1)
    F.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), stats, training=True)
    assert np.isclose(stats.mean[0], 0.1 * x.mean())
    assert np.isclose(stats.var[0], 0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_of_a_constant_channel_is_the_shift():
    x = np.zeros((2, 2, 3, 3))
    x[:, 0] = 4.0
    x[:, 1] = np.random.default_rng(0).standard_normal((2, 3, 3))
    scale, shift = Tensor(np.array([2.0, 1.0])), Tensor(np.array([0.3, 0.0]))
    out = F.batchnorm2d(Tensor(x), scale, shift, F.RunningStats.fresh(2), training=True).data
    assert np.array_equal(out[:, 0], np.full((2, 3, 3), 0.3))
    assert np.isfinite(out).all()
    assert abs(out[:, 1].mean()) < 1e-6 and abs(out[:, 1].var() - 1) < 1e-3


def test_saturated_logits():
    logits = np.full((2, 6), -1000.0)
    logits[0, 3] = 1000.0
    logits[1, 0] = 1000.0
    loss, probs = F.softmax_cross_entropy(Tensor(logits), [3, 0])
    assert np.isfinite(loss.item()) and loss.item() < 1e-12
    assert np.array_equal(probs.argmax(axis=1), [3, 0])
    assert np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    wrong, _ = F.softmax_cross_entropy(Tensor(logits), [0, 3])
    assert np.isclose(wrong.item(), 2000.0)


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_global_pool_is_a_full_window_pool(mode):
    x = Tensor(np.random.default_rng(4).standard_normal((2, 3, 5, 7)))
    assert np.allclose(F.global_pool(x, mode).data, F.pool2d(x, mode, 5, 7, stride=1).data, rtol=0, atol=1e-12)


def test_batchnorm_census_installs_population_moments():
    rng = np.random.default_rng(2)
    batches = [rng.standard_normal((n, 2, 2, 2)) + 3.0 for n in (3, 5)]
    stats = F.RunningStats.fresh(2)
    stats.start_census()
    for b in batches:
        F.batchnorm2d(Tensor(b), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=True)
    stats.end_census()
    everything = np.concatenate(batches)
    assert np.allclose(stats.mean, everything.mean(axis=(0, 2, 3)), rtol=0, atol=1e-12)
    assert np.allclose(stats.var, everything.var(axis=(0, 2, 3)), rtol=0, atol=1e-10)
    assert stats.census is None
