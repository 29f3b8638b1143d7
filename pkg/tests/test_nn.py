import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdilab.nn import Adam, Mlp, TrainConfig, mlp_backward, mlp_forward, minibatches, schedule


def numeric_grads(net, x, upstream, h=1e-5):
    """Central differences of sum(upstream * net(x)) w.r.t. every parameter and x."""
    def loss():
        return float(np.sum(upstream * net(x)))
    out = []
    for p in net.params + [x]:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            a = loss()
            p[i] = old - h
            b = loss()
            p[i] = old
            g[i] = (a - b) / (2 * h)
        out.append(g)
    return out[:-1], out[-1]


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)


@pytest.mark.parametrize("dims", [[3, 4, 2], [5, 6, 6, 3], [2, 1], [4, 8, 8, 8, 8, 2]])
def test_backprop_matches_finite_difference(dims):
    rng = np.random.default_rng(len(dims))
    net = Mlp.init(dims, rng)
    for b in net.biases:
        b += rng.normal(0, 0.1, b.shape)
    x = rng.standard_normal((7, dims[0]))
    up = rng.standard_normal((7, dims[-1]))
    _, cache = mlp_forward(net, x)
    grads, gx = mlp_backward(net, cache, up)
    num, num_x = numeric_grads(net, x, up)
    for g, n in zip(grads, num):
        assert rel_err(g, n) <= 1e-4
    assert rel_err(gx, num_x) <= 1e-4


def test_zero_network_gives_zero():
    net = Mlp([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
    np.testing.assert_array_equal(net(np.ones((5, 3))), 0.0)


def test_single_layer_is_affine(rng):
    W, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
    net = Mlp([W], [b])
    x = rng.standard_normal((4, 3))
    np.testing.assert_allclose(net(x), x @ W + b)
    g = rng.standard_normal((4, 2))
    _, cache = net.forward(x)
    (gW, gb), gx = net.backward(cache, g)
    np.testing.assert_allclose(gW, x.T @ g)
    np.testing.assert_allclose(gb, g.sum(0))
    np.testing.assert_allclose(gx, g @ W.T)


def test_tanh_saturation(rng):
    net = Mlp.init([3, 5, 2], rng)
    _, cache = net.forward(1e3 * rng.standard_normal((10, 3)))
    hidden = cache[1]
    assert np.all(np.abs(hidden) <= 1.0)


def test_zero_upstream_zero_grads(rng):
    net = Mlp.init([3, 5, 2], rng)
    _, cache = net.forward(rng.standard_normal((4, 3)))
    grads, _ = net.backward(cache, np.zeros((4, 2)))
    assert all(not g.any() for g in grads)


def test_width_mismatch(rng):
    net = Mlp.init([3, 2], rng)
    with pytest.raises(ValueError):
        net(np.ones((1, 4)))
    with pytest.raises(ValueError):
        Mlp([np.ones((3, 4)), np.ones((5, 2))], [np.ones(4), np.ones(2)])


@settings(max_examples=30, deadline=None)
@given(g=st.lists(st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=8))
def test_first_adam_step_is_signed_lr(g):
    cfg = TrainConfig()
    p = np.zeros(len(g))
    opt = Adam([p], cfg)
    opt.step([np.array(g)])
    np.testing.assert_allclose(p, -cfg.learning_rate * np.sign(g), rtol=1e-4)


def test_zero_gradient_keeps_params():
    cfg = TrainConfig()
    p = np.ones(3)
    opt = Adam([p], cfg)
    opt.step([np.zeros(3)])
    np.testing.assert_array_equal(p, 1.0)
    opt.step([np.array([1.0, -1.0, 2.0])])
    m1, v1 = opt.m[0].copy(), opt.v[0].copy()
    opt.step([np.zeros(3)])
    np.testing.assert_allclose(opt.m[0], cfg.beta1 * m1)
    np.testing.assert_allclose(opt.v[0], cfg.beta2 * v1)


def _fit(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((100, 3))
    Y = np.sin(X @ np.array([[1.0], [-0.5], [0.25]]))
    cfg = TrainConfig(learning_rate=1e-2, max_iterations=40, seed=seed)
    net = Mlp.init([3, 8, 1], np.random.default_rng(seed))
    opt = Adam(net.params, cfg)
    losses = []
    for _, rows in schedule(len(X), cfg, np.random.default_rng(seed)):
        out, cache = net.forward(X[rows])
        r = out - Y[rows]
        grads, _ = net.backward(cache, 2 * r / len(rows))
        opt.step(grads)
        losses.append(float(np.mean((net(X) - Y) ** 2)))
    return net, losses


def test_training_deterministic_and_decreasing():
    a, la = _fit(7)
    b, lb = _fit(7)
    for p, q in zip(a.params, b.params):
        assert np.array_equal(p, q)
    assert la[-1] < la[0]


def test_json_round_trip(rng):
    net = Mlp.init([3, 4, 2], rng)
    again = Mlp.from_json(net.to_json())
    x = rng.standard_normal((2, 3))
    assert np.array_equal(net(x), again(x))


def test_schedule_units():
    cfg = TrainConfig(max_iterations=3, batch_size=4, iteration_unit="epoch")
    its = [i for i, _ in schedule(10, cfg, np.random.default_rng(0))]
    assert its == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    cfg = TrainConfig(max_iterations=5, batch_size=4, iteration_unit="step")
    its = [i for i, _ in schedule(10, cfg, np.random.default_rng(0))]
    assert its == [0, 1, 2, 3, 4]


def test_minibatches_cover_everything():
    rows = np.concatenate(list(minibatches(23, 5, np.random.default_rng(0))))
    assert sorted(rows.tolist()) == list(range(23))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(iteration_unit="batch")
