import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prism_rm.diff_net import (
    Adam,
    DualBatch,
    FieldNet,
    NonFiniteError,
    adam_step,
    load_checkpoint,
    read_container,
    save_checkpoint,
    write_container,
)
from prism_rm.losses import ncc


def net64(seed=0, hidden=(16, 16), n_s=2, omega0=30.0, **kw):
    return FieldNet.create(n_s=n_s, hidden=hidden, omega0=omega0, seed=seed, dtype=np.float64, **kw)


def points(seed, n=8, n_s=2):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.8, 0.8, size=(n, 3)), rng.uniform(-0.8, 0.8, size=(n, n_s))


# --- forward -------------------------------------------------------------------------

def test_zero_final_layer_gives_zero_output():
    net = net64()
    net.weights[-1][:] = 0
    net.biases[-1][:] = 0
    x, s = points(1)
    np.testing.assert_array_equal(net.forward(x, s), 0.0)
    np.testing.assert_array_equal(net.input_jacobian(x, s), 0.0)


def test_forward_is_deterministic():
    net = net64(3)
    x, s = points(2)
    assert np.array_equal(net.forward(x, s), net.forward(x, s))


def test_hand_computed_two_layer_chain():
    net = FieldNet.create(n_s=2, hidden=(4, 4), omega0=30.0, seed=42, dtype=np.float64)
    x = np.array([[0.3, -0.2, 0.5]])
    s = np.array([0.25, -0.1])
    u = np.array([0.3, -0.2, 0.5, 0.25, -0.1])
    h1 = np.sin(30.0 * (net.weights[0] @ u + net.biases[0]))
    h2 = np.sin(30.0 * (net.weights[1] @ h1 + net.biases[1]))
    chain = net.weights[2] @ h2 + net.biases[2]
    out = net.forward(x, s)[0]
    np.testing.assert_allclose(out, chain, rtol=1e-13)
    # frozen reference value for this seed
    np.testing.assert_allclose(out, [-0.0745292320731219, 0.05655854237221409, -0.3550995374713354], rtol=1e-12)


def test_scalers_are_applied():
    net = net64(5, in_center=[1, 2, 3, 0.5, 0], in_scale=[10, 10, 10, 0.5, 2], out_scale=[2, 3, 4])
    x = np.array([[4.0, -3.0, 8.0]])
    s = np.array([0.6, 1.0])
    plain = net64(5)
    u = (np.array([4.0, -3.0, 8.0, 0.6, 1.0]) - [1, 2, 3, 0.5, 0]) / [10, 10, 10, 0.5, 2]
    np.testing.assert_allclose(net.forward(x, s)[0], plain.forward(u[None, :3], u[3:])[0] * [2, 3, 4])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_batched_equals_per_point_bitwise_in_fixed_order_mode(dtype):
    net = FieldNet.create(hidden=(32, 32), seed=9, dtype=dtype, fixed_order=True)
    x, s = points(4, n=40)
    batch = net.forward(x, s)
    single = np.array([net.forward(x[i:i + 1], s[i])[0] for i in range(len(x))])
    assert np.array_equal(batch, single)


def test_blas_order_agrees_with_fixed_order():
    a = FieldNet.create(hidden=(32, 32), seed=9, dtype=np.float64)
    b = a.copy()
    b.fixed_order = True
    x, s = points(4, n=40)
    np.testing.assert_allclose(a.forward(x, s), b.forward(x, s), rtol=1e-12, atol=1e-14)


def test_non_finite_input_rejected():
    net = net64()
    with pytest.raises(NonFiniteError):
        net.forward([[np.nan, 0, 0]], [0, 0])


def test_initialisation_bounds():
    net = FieldNet.create(hidden=(256, 256, 256), omega0=30.0, seed=1)
    assert net.hidden == (256, 256, 256)
    assert np.abs(net.weights[0]).max() <= 1.0 / 5
    for w in net.weights[1:]:
        assert np.abs(w).max() <= np.sqrt(6.0 / w.shape[1]) / 30.0
    assert all(np.all(np.isfinite(p)) for p in net.params())


def test_dual_batch_seed_shapes():
    d = DualBatch.unit(np.zeros((4, 5)), [0, 3])
    assert d.tangents.shape == (2, 4, 5)
    assert d.tangents[1, 2, 3] == 1.0
    with pytest.raises(ValueError):
        DualBatch(np.zeros((4, 5)), np.zeros((2, 3, 5)))


# --- input derivatives -----------------------------------------------------------------

def test_linear_network_jacobian_is_exact():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 5))
    net = FieldNet([A], [np.zeros(3)], n_s=2, activation="linear", dtype=np.float64)
    x, s = points(1)
    jac = net.input_jacobian(x, s)
    np.testing.assert_array_equal(jac, np.broadcast_to(A[:, :3], jac.shape))


def fd_jacobian(net, x, s, h=1e-6):
    jac = np.empty((len(x), 3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        jac[:, :, j] = (net.forward(x + e, s) - net.forward(x - e, s)) / (2 * h)
    return jac


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_input_jacobian_matches_finite_differences(seed):
    net = net64(seed, in_scale=[20, 20, 20, 1, 1], out_scale=[5, 5, 5])
    x, s = points(seed)
    x = x * 20
    jac = net.input_jacobian(x, s)
    fd = fd_jacobian(net, x, s)
    for a, b in zip(jac, fd):
        assert np.linalg.norm(a - b) <= 1e-4 * max(np.linalg.norm(b), 1e-8)


def test_surrogate_derivative_trivial_cases():
    net = net64(2)
    x, s = points(3)
    np.testing.assert_array_equal(net.surrogate_directional_derivative(x, s, [0.0, 0.0]), 0.0)
    net.weights[0][:, 3:] = 0
    np.testing.assert_array_equal(net.surrogate_directional_derivative(x, s, [1.0, -2.0]), 0.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_surrogate_derivative_matches_path_differences(seed):
    net = net64(seed, in_scale=[1, 1, 1, 0.5, 2.0], out_scale=[3, 3, 3])
    x, s0 = points(seed)
    d = np.random.default_rng(seed + 1).normal(size=2)
    t, h = 0.2, 1e-4
    path = lambda tt: s0 + tt * d  # noqa: E731
    an = net.surrogate_directional_derivative(x, path(t), d)
    fd = (net.forward(x, path(t + h)) - net.forward(x, path(t - h))) / (2 * h)
    for a, b in zip(an, fd):
        assert np.linalg.norm(a - b) <= 1e-4 * max(np.linalg.norm(b), 1e-8)


def test_forward_reverse_consistency():
    net = net64(11, in_scale=[7, 7, 7, 1, 1], out_scale=[2, 3, 4])
    x, s = points(5, n=6)
    jac = net.input_jacobian(x, s)
    for i in range(3):
        up = np.zeros((len(x), 3))
        up[:, i] = 1.0
        _, _, tape = net.propagate(net.normalize(x, s), keep_tape=True)
        _, g_u = net.backprop(tape, up * net.out_scale)
        rev = g_u[:, :3] / net.in_scale[:3]
        np.testing.assert_allclose(jac[:, i, :], rev, rtol=0, atol=1e-10)


# --- reverse mode --------------------------------------------------------------------------

def test_zero_upstream_gives_zero_gradients():
    net = net64(1)
    x, s = points(1)
    for g in net.backward(x, s, np.zeros((len(x), 3))):
        assert not np.any(g)


def test_linear_probe_gradient_is_input_activation():
    rng = np.random.default_rng(4)
    net = FieldNet([rng.normal(size=(3, 5))], [np.zeros(3)], n_s=2, activation="linear", dtype=np.float64)
    x, s = points(2, n=1)
    up = np.array([[1.0, 0.0, 0.0]])
    gW, gb = net.backward(x, s, up)
    np.testing.assert_allclose(gW[0], np.concatenate([x[0], s[0]]))
    np.testing.assert_allclose(gW[1:], 0.0)
    np.testing.assert_allclose(gb, [1.0, 0.0, 0.0])


def test_backward_rejects_shape_mismatch():
    net = net64()
    x, s = points(1)
    with pytest.raises(ValueError):
        net.backward(x, s, np.zeros((len(x), 2)))


def ncc_composite(net, x, s, fixed):
    """1 - NCC between a fixed signal and a sine of the warped coordinates."""
    warped = x + net.forward(x, s)
    vals = np.sin(warped @ np.array([0.7, -0.4, 0.9]))
    return 1.0 - ncc(fixed, vals)[0], warped


def test_ncc_composite_gradient_against_finite_differences():
    net = net64(21, hidden=(12, 12), in_scale=[2, 2, 2, 1, 1], out_scale=[0.5, 0.5, 0.5])
    rng = np.random.default_rng(8)
    x = rng.uniform(-1.5, 1.5, size=(32, 3))
    s = rng.uniform(-1, 1, size=(32, 2))
    fixed = rng.normal(size=32)
    loss, warped = ncc_composite(net, x, s, fixed)
    w = np.array([0.7, -0.4, 0.9])
    vals = np.sin(warped @ w)
    _, g_vals, _ = ncc(fixed, vals, return_grad=True)
    upstream = (-g_vals * np.cos(warped @ w))[:, None] * w
    grads = net.backward(x, s, upstream)
    params = net.params()
    for _ in range(20):
        k = rng.integers(len(params))
        idx = tuple(rng.integers(n) for n in params[k].shape)
        old = params[k][idx]
        h = 1e-6
        params[k][idx] = old + h
        lp = ncc_composite(net, x, s, fixed)[0]
        params[k][idx] = old - h
        lm = ncc_composite(net, x, s, fixed)[0]
        params[k][idx] = old
        fd = (lp - lm) / (2 * h)
        an = grads[k][idx]
        assert abs(an - fd) <= 1e-4 * max(abs(fd), abs(an), 1e-7)


# --- optimizer ------------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    w = np.array([1.0, -2.0])
    opt = Adam([w], lr=0.1)
    adam_step(opt, [w], [np.zeros(2)])
    np.testing.assert_array_equal(w, [1.0, -2.0])
    assert opt.step_count == 1


def test_adam_first_step_magnitude():
    w = np.array([1.0, -2.0, 3.0])
    opt = Adam([w], lr=1e-3)
    opt.step([w], [np.array([5.0, -0.01, 0.0])])
    np.testing.assert_allclose(w, [1.0 - 1e-3, -2.0 + 1e-3, 3.0], rtol=0, atol=1e-8)


def test_adam_quadratic_bowl():
    w = np.array([1.0])
    opt = Adam([w], lr=1e-2)
    for _ in range(1000):
        opt.step([w], [2 * w])
    assert abs(w[0]) < 1e-3


def test_adam_rejects_non_finite_gradient():
    w = np.array([1.0])
    opt = Adam([w], lr=1e-2)
    with pytest.raises(NonFiniteError):
        opt.step([w], [np.array([np.inf])])
    assert w[0] == 1.0 and opt.step_count == 0 and not opt.m[0].any()


def test_adam_deterministic():
    def run():
        w = np.array([0.3, -0.7])
        opt = Adam([w], lr=1e-2)
        for i in range(50):
            opt.step([w], [np.sin(w * (i + 1))])
        return w
    assert np.array_equal(run(), run())


# --- checkpoints ------------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    net = FieldNet.create(hidden=(8, 8), seed=3, in_scale=[2, 2, 2, 1, 1], out_scale=[1, 2, 3])
    path = save_checkpoint(tmp_path / "n.prism", net, seed=3, epoch=7, mode="velocity")
    raw = path.read_bytes()
    assert raw[:8] == b"PRISMNET"
    back, header = load_checkpoint(path)
    assert header["epoch"] == 7 and header["seed"] == 3
    assert header["architecture"]["omega0"] == 30.0 and header["architecture"]["n_s"] == 2
    for a, b in zip(net.params(), back.params()):
        assert np.array_equal(a, b)
    x, s = points(1)
    np.testing.assert_array_equal(net.forward(x, s), back.forward(x, s))


def test_checkpoint_payload_length_validated(tmp_path):
    path = write_container(tmp_path / "c.prism", {"k": 1}, {"a": np.zeros((2, 3), dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError, match="payload"):
        read_container(path)


def test_container_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(ValueError, match="magic"):
        read_container(tmp_path / "x")


def test_container_float64_is_lossless(tmp_path):
    a = np.random.default_rng(0).normal(size=(4, 5))
    path = write_container(tmp_path / "d.prism", {}, {"a": a, "b": a.astype(np.float32)})
    _, arrays = read_container(path)
    assert arrays["a"].dtype == np.float64 and np.array_equal(arrays["a"], a)
    assert arrays["b"].dtype == np.float32
