"""MLP forward/backward against finite differences; Adam, Polyak, checkpoints."""

import numpy as np
import pytest

from beamtune.nets import (
    AdamState,
    CheckpointError,
    Mlp,
    adam_step,
    backward,
    forward,
    load_arrays,
    load_mlp,
    mlp_init,
    polyak,
    save_arrays,
    save_mlp,
)


def small_net(rng, layer_sizes=(6, 16, 16, 16, 3), output_scale=None):
    return mlp_init(layer_sizes, rng, output_scale=output_scale)


# --- forward ----------------------------------------------------------------


def test_single_affine_identity():
    net = Mlp(
        layer_sizes=(3, 3),
        weights=[np.eye(3)],
        biases=[np.zeros(3)],
        ln_scale=[],
        ln_shift=[],
    )
    x = np.array([0.3, -1.2, 2.5])
    assert np.array_equal(forward(net, x), x)


def test_layernorm_constant_vector_maps_to_shift():
    # constant pre-activation has zero variance; eps keeps it finite and
    # the normalized value is exactly zero, so the hidden output is the shift
    net = Mlp(
        layer_sizes=(4, 4, 4),
        weights=[np.eye(4), np.eye(4)],
        biases=[np.zeros(4), np.array([1.0, 2.0, 3.0, 4.0])],
        ln_scale=[np.full(4, 5.0)],
        ln_shift=[np.zeros(4)],
    )
    y = forward(net, np.full(4, 7.3))
    assert np.array_equal(y, np.array([1.0, 2.0, 3.0, 4.0]))


def test_tanh_output_strictly_inside_bounds():
    rng = np.random.default_rng(0)
    scale = np.array([2.0, 0.5])
    net = small_net(rng, (4, 8, 2), output_scale=scale)
    net.weights[-1] *= 1e6  # enormous pre-activation
    for _ in range(20):
        y = forward(net, rng.normal(size=4))
        assert np.all(np.abs(y) <= scale)  # tanh can round to exactly 1
    net.biases[-1] = np.array([50.0, -50.0])
    y = forward(net, np.zeros(4))
    assert np.all(np.abs(y) <= scale)
    assert np.all(np.abs(y) > scale * 0.999)


def test_batch_matches_single():
    rng = np.random.default_rng(1)
    net = small_net(rng)
    xs = rng.normal(size=(5, 6))
    batch = forward(net, xs)
    singles = np.stack([forward(net, x) for x in xs])
    # batched and single evaluation may use different BLAS kernels; each
    # path is individually deterministic
    assert np.allclose(batch, singles, rtol=1e-12, atol=1e-15)


def test_shape_mismatch_raises():
    rng = np.random.default_rng(2)
    net = small_net(rng)
    with pytest.raises(ValueError):
        forward(net, np.zeros(7))


# --- backward ---------------------------------------------------------------


def test_linear_gradient_outer_product():
    net = Mlp(
        layer_sizes=(3, 2),
        weights=[np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])],
        biases=[np.zeros(2)],
        ln_scale=[],
        ln_shift=[],
    )
    x = np.array([0.5, -1.0, 2.0])
    up = np.array([1.5, -0.5])
    grads, dx = backward(net, x, up)
    assert np.allclose(grads[0], np.outer(up, x))
    assert np.allclose(grads[1], up)
    assert np.allclose(dx, net.weights[0].T @ up)


def finite_difference_probe(net, x, upstream, params, flat_index, h=1e-5):
    p = params[flat_index[0]]
    old = p.flat[flat_index[1]]
    p.flat[flat_index[1]] = old + h
    fp = float(np.dot(upstream, forward(net, x)))
    p.flat[flat_index[1]] = old - h
    fm = float(np.dot(upstream, forward(net, x)))
    p.flat[flat_index[1]] = old
    return (fp - fm) / (2.0 * h)


def run_gradcheck(layer_sizes, output_scale, seed, probes=64):
    rng = np.random.default_rng(seed)
    net = mlp_init(layer_sizes, rng, output_scale=output_scale)
    x = rng.normal(size=layer_sizes[0])
    upstream = rng.normal(size=layer_sizes[-1])
    params = net.params()
    grads, _ = backward(net, x, upstream)
    worst = 0.0
    for _ in range(probes):
        pi = int(rng.integers(0, len(params)))
        fi = int(rng.integers(0, params[pi].size))
        fd = finite_difference_probe(net, x, upstream, params, (pi, fi))
        bw = grads[pi].flat[fi]
        rel = abs(bw - fd) / max(abs(bw), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst


def test_gradcheck_small_net():
    assert run_gradcheck((6, 16, 16, 16, 3), None, seed=11) < 1e-5


def test_gradcheck_tanh_scaled():
    assert run_gradcheck((6, 16, 16, 2), np.array([1.5, 0.7]), seed=12) < 1e-5


def test_input_gradient_matches_fd():
    rng = np.random.default_rng(13)
    net = small_net(rng)
    x = rng.normal(size=6)
    up = rng.normal(size=3)
    _, dx = backward(net, x, up)
    h = 1e-6
    for i in range(6):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (np.dot(up, forward(net, xp)) - np.dot(up, forward(net, xm))) / (2 * h)
        assert abs(dx[i] - fd) / max(abs(fd), 1e-8) < 1e-4


def test_relu_at_zero_uses_subgradient_zero():
    # craft a hidden pre-activation that lands exactly on 0 after LayerNorm
    net = Mlp(
        layer_sizes=(3, 3, 1),
        weights=[np.eye(3), np.array([[1.0, 1.0, 1.0]])],
        biases=[np.zeros(3), np.zeros(1)],
        ln_scale=[np.ones(3)],
        ln_shift=[np.zeros(3)],
    )
    x = np.array([1.0, -1.0, 0.0])  # mean 0 exactly, unit 2 normalizes to 0
    grads, _ = backward(net, x, np.array([1.0]))
    dshift = grads[3]
    # unit 2 sits exactly at h=0: its gradient must be the left limit, 0
    assert dshift[2] == 0.0
    assert dshift[0] != 0.0  # positive unit passes gradient


# --- adam -------------------------------------------------------------------


def test_adam_zero_gradient_is_identity_from_fresh_state():
    p = [np.array([1.0, -2.0])]
    st = AdamState.for_params(p, 1e-3)
    adam_step(p, [np.zeros(2)], st)
    assert np.array_equal(p[0], np.array([1.0, -2.0]))


def test_adam_moments_decay_on_zero_gradient():
    p = [np.array([1.0])]
    st = AdamState.for_params(p, 1e-3)
    adam_step(p, [np.array([2.0])], st)
    m_after_first = st.m[0].copy()
    adam_step(p, [np.array([0.0])], st)
    assert abs(st.m[0][0]) < abs(m_after_first[0])


def test_adam_first_step_is_sign_like():
    g = np.array([3.0, -0.25])
    p = [np.array([0.0, 0.0])]
    lr = 1e-2
    st = AdamState.for_params(p, lr)
    adam_step(p, [g.copy()], st)
    expected = -lr * g / (np.abs(g) + st.epsilon)
    assert np.allclose(p[0], expected, rtol=1e-12)


def test_adam_lr_zero_identity():
    p = [np.array([5.0])]
    st = AdamState.for_params(p, 0.0)
    adam_step(p, [np.array([100.0])], st)
    assert p[0][0] == 5.0


def test_adam_rejects_nonfinite():
    p = [np.array([1.0])]
    st = AdamState.for_params(p, 1e-3)
    with pytest.raises(ValueError, match="non-finite"):
        adam_step(p, [np.array([np.nan])], st)


# --- polyak -----------------------------------------------------------------


def test_polyak_endpoints():
    t = [np.array([1.0, 2.0])]
    o = [np.array([3.0, 4.0])]
    polyak(t, o, 1.0)
    assert np.array_equal(t[0], o[0])
    t = [np.array([1.0, 2.0])]
    polyak(t, o, 0.0)
    assert np.array_equal(t[0], np.array([1.0, 2.0]))


def test_polyak_paper_tau():
    t = [np.zeros(1)]
    o = [np.ones(1)]
    polyak(t, o, 0.005)
    assert t[0][0] == pytest.approx(0.005, rel=1e-15)


def test_polyak_closed_form_lag():
    rng = np.random.default_rng(4)
    theta = rng.normal(size=(3, 3))
    target0 = rng.normal(size=(3, 3))
    tau = 0.005
    t = [target0.copy()]
    n = 200
    for _ in range(n):
        polyak(t, [theta], tau)
    decay = (1.0 - tau) ** n
    expected = decay * target0 + (1.0 - decay) * theta
    assert np.allclose(t[0], expected, rtol=1e-12, atol=1e-14)


# --- determinism ------------------------------------------------------------


def test_seeded_init_is_bit_identical():
    a = mlp_init((5, 8, 2), np.random.default_rng(42))
    b = mlp_init((5, 8, 2), np.random.default_rng(42))
    for pa, pb in zip(a.params(), b.params()):
        assert np.array_equal(pa, pb)


# --- checkpoints ------------------------------------------------------------


def test_array_container_round_trip(tmp_path):
    p = tmp_path / "c.ckpt"
    arrays = {
        "a": np.arange(6, dtype=float).reshape(2, 3),
        "b": np.array([1.5]),
    }
    save_arrays(p, arrays, {"note": "x", "n": 3})
    loaded, meta = load_arrays(p)
    assert meta == {"note": "x", "n": 3}
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])


def test_mlp_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    net = small_net(rng, (4, 8, 8, 2), output_scale=np.array([1.0, 2.0]))
    p = tmp_path / "net.ckpt"
    save_mlp(p, net, {"kind": "actor"})
    loaded, meta = load_mlp(p)
    assert meta["kind"] == "actor"
    assert loaded.layer_sizes == net.layer_sizes
    x = rng.normal(size=4)
    assert np.array_equal(forward(net, x), forward(loaded, x))


def test_checkpoint_rejects_corruption(tmp_path):
    p = tmp_path / "net.ckpt"
    save_mlp(p, small_net(np.random.default_rng(1)), {})
    blob = bytearray(p.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_mlp(p)


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "net.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_arrays(p)


def test_checkpoint_rejects_version_mismatch(tmp_path):
    p = tmp_path / "net.ckpt"
    save_mlp(p, small_net(np.random.default_rng(1)), {})
    blob = bytearray(p.read_bytes())
    blob[4] = 99  # bump the on-disk version field
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_arrays(p)


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    rng = np.random.default_rng(1)
    net = small_net(rng, (4, 8, 2))
    p = tmp_path / "net.ckpt"
    save_mlp(p, net, {})
    arrays, meta = load_arrays(p)
    meta["layer_sizes"] = [4, 9, 2]
    p2 = tmp_path / "bad.ckpt"
    save_arrays(p2, arrays, meta)
    with pytest.raises(CheckpointError, match="shape|sizes"):
        load_mlp(p2)
