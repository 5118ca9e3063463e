"""Network forward/backward against finite differences, Adam against a hand loop."""

import numpy as np
import pytest

from bspdelab.fem import NumericFailure
from bspdelab.mlp import (
    MlpGrads,
    adam_step,
    backward,
    forward,
    init,
    init_adam,
    load_net,
    save_net,
)


def test_init_determinism_and_bounds():
    a = init([3, 8, 1], seed=42)
    b = init([3, 8, 1], seed=42)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)
    c = init([3, 8, 1], seed=43)
    assert not np.array_equal(a.weights[0], c.weights[0])
    for fan_in, w, bias in zip([3, 8], a.weights, a.biases):
        bound = np.sqrt(6.0 / fan_in)
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.5 * bound
        np.testing.assert_array_equal(bias, 0.0)


def test_init_rejects_bad_shapes():
    with pytest.raises(ValueError):
        init([], seed=0)
    with pytest.raises(ValueError):
        init([4], seed=0)
    with pytest.raises(ValueError):
        init([4, 0, 1], seed=0)


def test_forward_zero_weights_yields_bias():
    net = init([2, 4, 3], seed=0)
    for w in net.weights:
        w[:] = 0.0
    net.biases[-1][:] = [1.0, -2.0, 0.5]
    out = forward(net, np.array([3.0, -1.0]))
    np.testing.assert_allclose(out, [1.0, -2.0, 0.5])


def test_forward_single_linear_layer_is_affine():
    net = init([3, 2], seed=1)
    net.biases[0][:] = [0.5, -0.25]
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(forward(net, x), net.weights[0] @ x + net.biases[0],
                               rtol=1e-14)


def test_forward_batch_matches_per_sample():
    net = init([4, 7, 7, 2], seed=2)
    xs = np.random.default_rng(3).standard_normal((6, 4))
    batch = forward(net, xs)
    for i in range(6):
        np.testing.assert_allclose(batch[i], forward(net, xs[i]), rtol=1e-12)


def test_forward_dimension_mismatch():
    net = init([4, 3, 1], seed=0)
    with pytest.raises(ValueError):
        forward(net, np.zeros(5))


def test_local_linearity_within_activation_pattern():
    # piecewise-linear exactness: while the ReLU pattern is unchanged the map
    # is exactly affine, so a finite step agrees with the input gradient
    net = init([3, 10, 10, 1], seed=5)
    x = np.array([0.3, -0.2, 0.8])
    y0 = forward(net, x)
    g = backward(net, x, np.ones(1))
    d = np.array([0.5, 0.25, -0.4])
    eps = 1e-7
    y1 = forward(net, x + eps * d)
    np.testing.assert_allclose((y1 - y0) / eps, g.x @ d, rtol=1e-6)


def test_backward_linear_unit():
    net = init([1, 1], seed=0)
    net.weights[0][:] = 2.0
    net.biases[0][:] = 0.3
    x = np.array([1.7])
    forward(net, x)
    g = backward(net, x, np.ones(1))
    np.testing.assert_allclose(g.weights[0], [[1.7]])
    np.testing.assert_allclose(g.biases[0], [1.0])
    np.testing.assert_allclose(g.x, [2.0])


def _fd_check(shape, seed, n_probes=4):
    net = init(shape, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    x = rng.standard_normal(shape[0])
    up = rng.standard_normal(shape[-1])
    forward(net, x)
    grads = backward(net, x, up)
    eps = 1e-5
    worst = 0.0
    for w, dw in zip(net.weights, grads.weights):
        flat = w.ravel()
        dflat = dw.ravel()
        idx = rng.choice(flat.size, size=min(n_probes, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(forward(net, x) @ up)
            flat[i] = keep - eps
            lo = float(forward(net, x) @ up)
            flat[i] = keep
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(dflat[i]), 1e-8)
            worst = max(worst, abs(fd - dflat[i]) / denom)
    return worst


def test_gradients_match_central_differences():
    shapes = [[3, 8, 8, 1], [2, 5, 1], [4, 6, 6, 6, 2], [1, 3, 1]]
    for k in range(20):
        worst = _fd_check(shapes[k % len(shapes)], seed=100 + k)
        assert worst <= 1e-5


def test_dead_unit_blocks_gradient():
    net = init([1, 2, 1], seed=0)
    net.weights[0][:] = [[1.0], [-1.0]]   # second unit dead for x > 0
    net.weights[1][:] = [[1.0, 1.0]]
    x = np.array([2.0])
    forward(net, x)
    g = backward(net, x, np.ones(1))
    np.testing.assert_allclose(g.weights[0][1], 0.0)
    np.testing.assert_allclose(g.weights[0][0], 2.0)


def test_backward_requires_matching_cache():
    net = init([2, 3, 1], seed=0)
    with pytest.raises(RuntimeError):
        backward(net, np.zeros(2), np.ones(1))
    forward(net, np.array([1.0, 2.0]))
    with pytest.raises(RuntimeError):
        backward(net, np.array([1.0, 2.5]), np.ones(1))


def test_adam_first_step_and_zero_grad():
    net = init([2, 2], seed=7)
    before = [p.copy() for p in net.parameters()]
    state = init_adam(net, lr=1e-3)
    ones = MlpGrads(weights=[np.ones_like(net.weights[0])],
                    biases=[np.ones_like(net.biases[0])], x=None)
    adam_step(state, net, ones)
    for p, q in zip(net.parameters(), before):
        np.testing.assert_allclose(p - q, -1e-3, rtol=1e-6)
    assert state.step == 1
    # zero gradient into a fresh state moves nothing
    fresh = init([2, 2], seed=7)
    fstate = init_adam(fresh)
    snapshot = [p.copy() for p in fresh.parameters()]
    zeros = MlpGrads(weights=[np.zeros_like(fresh.weights[0])],
                     biases=[np.zeros_like(fresh.biases[0])], x=None)
    adam_step(fstate, fresh, zeros)
    assert fstate.step == 1
    for p, q in zip(fresh.parameters(), snapshot):
        np.testing.assert_array_equal(p, q)


def test_adam_quadratic_against_hand_loop():
    # minimize 0.5 theta^2 with a plain-python Adam shadowing the module
    net = init([1, 1], seed=0)
    net.weights[0][:] = 1.0
    net.biases[0][:] = 0.0
    state = init_adam(net, lr=0.1)
    theta, m, v = 1.0, 0.0, 0.0
    for t in range(1, 201):
        grad = theta
        g = MlpGrads(weights=[np.array([[net.weights[0][0, 0]]])],
                     biases=[np.zeros(1)], x=None)
        adam_step(state, net, g)
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad * grad
        theta -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(net.weights[0][0, 0], theta, rtol=1e-12, atol=1e-12)
    assert abs(theta) < 0.05


def test_adam_rejects_nonfinite():
    net = init([1, 1], seed=0)
    state = init_adam(net)
    bad = MlpGrads(weights=[np.array([[np.nan]])], biases=[np.zeros(1)], x=None)
    with pytest.raises(NumericFailure):
        adam_step(state, net, bad)


def test_checkpoint_roundtrip_and_layout(tmp_path):
    net = init([3, 5, 2], seed=11)
    path = tmp_path / "net.bin"
    save_net(path, net)
    raw = path.read_bytes()
    header = np.frombuffer(raw[:32], dtype="<i8")
    assert header[0] == 3 and tuple(header[1:]) == (3, 5, 2)
    n_params = 3 * 5 + 5 + 5 * 2 + 2
    assert len(raw) == 32 + 8 * n_params
    w0 = np.frombuffer(raw[32:32 + 8 * 15], dtype="<f8").reshape(5, 3)
    np.testing.assert_array_equal(w0, net.weights[0])
    twin = load_net(path)
    for a, b in zip(net.parameters(), twin.parameters()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_corruption(tmp_path):
    net = init([2, 2], seed=0)
    path = tmp_path / "net.bin"
    save_net(path, net)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_net(path)


def test_float32_toggle(tmp_path):
    net = init([3, 4, 1], seed=9, dtype=np.float32)
    assert net.dtype == np.float32
    out = forward(net, np.ones(3, dtype=np.float32))
    assert out.dtype == np.float32
    g = backward(net, np.ones(3, dtype=np.float32), np.ones(1))
    assert g.weights[0].dtype == np.float32
    state = init_adam(net)
    adam_step(state, net, g)
    assert net.weights[0].dtype == np.float32
    path = tmp_path / "net32.bin"
    save_net(path, net)
    twin = load_net(path, dtype=np.float32)
    for a, b in zip(net.parameters(), twin.parameters()):
        np.testing.assert_array_equal(a, b)
