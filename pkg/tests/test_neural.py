import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabfix import kernels, neural
from fabfix.errors import FormatError, OptimizerError, ShapeError
from fabfix.neural import (AdamState, ModelWeights, adam_step, avgpool2, bce, conv2d_forward,
                           forward, init_weights, load_weights, loss_and_grads, param_count,
                           relu, save_weights, sigmoid)


@pytest.fixture(params=kernels.available_backends())
def backend(request, monkeypatch):
    monkeypatch.setattr(kernels, "_impl", kernels.get_backend(request.param))
    return request.param


def conv_reference(x, k, b):
    """Direct loops: zero same-padding, stride 1, correlation."""
    n, h, w, cin = x.shape
    cout = k.shape[3]
    out = np.zeros((n, h, w, cout))
    for i in range(n):
        for y in range(h):
            for xx in range(w):
                for c in range(cout):
                    s = b[c]
                    for dy in range(3):
                        for dx in range(3):
                            yy, xc = y + dy - 1, xx + dx - 1
                            if 0 <= yy < h and 0 <= xc < w:
                                for ci in range(cin):
                                    s += x[i, yy, xc, ci] * k[dy, dx, ci, c]
                    out[i, y, xx, c] = s
    return out


def pool_reference(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    for y in range(h // 2):
        for xx in range(w // 2):
            out[:, y, xx] = x[:, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2].mean(axis=(1, 2))
    return out


def forward_reference(wts, batch):
    a = batch.astype(np.float64)
    for i in range(1, 5):
        a = np.maximum(pool_reference(conv_reference(a, wts.blocks[f"k{i}"], wts.blocks[f"b{i}"])), 0)
    z = a.reshape(len(a), -1) @ wts.blocks["W"] + wts.blocks["b"]
    s = wts.patch_size
    return (1 / (1 + np.exp(-z))).reshape(-1, s, s, 1)


def small_weights(seed=0, dtype=np.float64, patch=16, scale_bias=0.1):
    w = init_weights(seed, patch, dtype)
    rng = np.random.default_rng(seed + 100)
    for name, a in w.blocks.items():
        if name.startswith("b"):
            a[...] = rng.normal(0, scale_bias, a.shape)
    return w


# -- architecture --------------------------------------------------------------

def test_parameter_count():
    expected = (9 * 1 * 8 + 8) + (9 * 8 * 8 + 8) + (9 * 8 * 16 + 16) + (9 * 16 * 16 + 16) \
        + 1024 * 16384 + 16384
    assert param_count() == expected == 16797752
    w = init_weights(0)
    assert sum(a.size for a in w.blocks.values()) == expected
    assert w.blocks["W"].shape == (1024, 16384)


def test_wrong_block_shape_rejected():
    w = init_weights(0, 16)
    blocks = dict(w.blocks)
    blocks["k2"] = np.zeros((3, 3, 8, 9), np.float32)
    with pytest.raises(ShapeError):
        ModelWeights(blocks, 16)


def test_init_is_glorot_uniform_and_seeded():
    a, b, c = init_weights(1), init_weights(1), init_weights(2)
    assert a.digest() == b.digest() != c.digest()
    lim = math.sqrt(6 / (1024 + 16384))
    assert np.abs(a.blocks["W"]).max() <= lim
    assert np.abs(a.blocks["W"]).max() > 0.99 * lim
    assert not a.blocks["b"].any()


# -- layers ----------------------------------------------------------------------

def test_conv_delta_kernel_is_identity(backend):
    x = np.random.default_rng(0).random((2, 7, 9, 3))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[1, 1, c, c] = 1
    np.testing.assert_array_equal(conv2d_forward(x, k, np.zeros(3)), x)


def test_conv_ones_kernel_interior_sum(backend):
    x = np.full((1, 6, 6, 1), 2.5)
    out = conv2d_forward(x, np.ones((3, 3, 1, 1)), np.zeros(1))
    assert out[0, 2, 3, 0] == pytest.approx(22.5)
    assert out[0, 0, 0, 0] == pytest.approx(10.0)


@pytest.mark.parametrize("cin,cout", [(2, 3), (1, 8), (8, 8), (8, 16), (16, 16), (3, 1)])
def test_conv_matches_loop_reference(backend, cin, cout):
    rng = np.random.default_rng(cin * 10 + cout)
    x = rng.normal(size=(1, 5, 5, cin))
    k = rng.normal(size=(3, 3, cin, cout))
    b = rng.normal(size=cout)
    np.testing.assert_allclose(conv2d_forward(x, k, b), conv_reference(x, k, b), atol=1e-12, rtol=0)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 4)), np.zeros(4))
    assert "(1, 4, 4, 2)" in str(info.value) and "(3, 3, 3, 4)" in str(info.value)


def test_avgpool():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert avgpool2(x)[0, 0, 0, 0] == 2.5
    np.testing.assert_array_equal(avgpool2(np.full((2, 6, 4, 3), 1.5)), np.full((2, 3, 2, 3), 1.5))
    a = np.zeros((1, 128, 128, 1))
    for _ in range(4):
        a = avgpool2(a)
    assert a.shape == (1, 8, 8, 1)
    with pytest.raises(ShapeError):
        avgpool2(np.zeros((1, 5, 4, 1)))


def test_relu_and_sigmoid():
    np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])
    assert sigmoid(np.array(0.0)) == 0.5
    with np.errstate(all="raise"):
        hi, lo = sigmoid(np.array([40.0, -40.0]))
    assert hi == pytest.approx(1 / (1 + math.exp(-40)), rel=1e-15)
    assert lo == pytest.approx(math.exp(-40) / (1 + math.exp(-40)), rel=1e-12)
    assert sigmoid(np.array(-1000.0)) == 0.0 and sigmoid(np.array(1000.0)) == 1.0


# -- forward ---------------------------------------------------------------------

def test_zero_weights_give_half():
    w = init_weights(0, 16)
    for a in w.blocks.values():
        a[...] = 0
    out = forward(w, np.random.default_rng(0).random((3, 16, 16, 1)))
    assert out.shape == (3, 16, 16, 1)
    assert (out == 0.5).all()


def test_forward_shape_full_size():
    w = init_weights(0)
    out = forward(w, np.zeros((2, 128, 128, 1), np.float32))
    assert out.shape == (2, 128, 128, 1) and out.dtype == np.float32
    assert ((out > 0) & (out < 1)).all()


def test_forward_matches_layer_reference(backend):
    w = small_weights(3)
    x = (np.random.default_rng(4).random((2, 16, 16, 1)) < 0.5).astype(np.float64)
    np.testing.assert_allclose(forward(w, x), forward_reference(w, x), rtol=1e-12, atol=1e-14)


def test_forward_is_deterministic():
    w = init_weights(5)
    x = (np.random.default_rng(0).random((4, 128, 128, 1)) < 0.5).astype(np.float32)
    assert forward(w, x).tobytes() == forward(w, x).tobytes()


def test_forward_rejects_bad_batch_shape():
    with pytest.raises(ShapeError):
        forward(init_weights(0, 16), np.zeros((1, 16, 8, 1)))


# -- loss ------------------------------------------------------------------------

def test_bce_special_cases():
    y = (np.random.default_rng(0).random((2, 4, 4, 1)) < 0.5).astype(float)
    assert bce(y, y) == pytest.approx(-math.log(1 - 1e-7), rel=1e-9)
    assert bce(np.full_like(y, 0.5), y) == pytest.approx(math.log(2), rel=1e-12)


def test_bce_matches_formula():
    p = np.array([[0.2, 0.9], [0.6, 0.01]])
    y = np.array([[0.0, 1.0], [0.0, 1.0]])
    terms = [-math.log(0.8), -math.log(0.9), -math.log(0.4), -math.log(0.01)]
    assert bce(p, y) == pytest.approx(sum(terms) / 4, abs=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_bce_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((3, 5))
    p[0, 0] = 0.0
    p[0, 1] = 1.0
    assert bce(p, (rng.random((3, 5)) < 0.5).astype(float)) >= 0


# -- gradients -------------------------------------------------------------------

def _numeric_grad(f, a, h=1e-5):
    g = np.zeros_like(a)
    flat, gflat = a.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def _rel(a, n):
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-30)


def test_gradcheck_every_block_and_input(backend):
    w = small_weights(7)
    rng = np.random.default_rng(8)
    x = rng.random((2, 16, 16, 1))
    y = (rng.random((2, 16, 16, 1)) < 0.5).astype(np.float64)
    loss = lambda: bce(forward(w, x), y)
    _, grads = loss_and_grads(w, x, y)
    for name in neural.BLOCK_NAMES:
        num = _numeric_grad(loss, w.blocks[name])
        assert _rel(grads[name], num) <= 1e-4, name
    logits, cache = neural.forward_logits(w, x)
    g = neural.bce_grad_logits(neural.sigmoid(logits), y.reshape(logits.shape))
    _, gx = neural.backward_from_logits(w, cache, g, param_grads=False, input_grad=True)
    assert _rel(gx, _numeric_grad(loss, x)) <= 1e-4


def test_saturated_predictions_have_zero_gradient():
    w = init_weights(0, 16, np.float64)
    for a in w.blocks.values():
        a[...] = 0
    w.blocks["b"][:] = 40.0            # sigmoid(40) is clamped
    x = np.zeros((1, 16, 16, 1))
    _, grads = loss_and_grads(w, x, np.ones_like(x))
    assert all(not g.any() for g in grads.values())


def test_duplicated_batch_keeps_mean_gradients():
    w = small_weights(2)
    rng = np.random.default_rng(3)
    x = rng.random((2, 16, 16, 1))
    y = (rng.random(x.shape) < 0.5).astype(float)
    l1, g1 = loss_and_grads(w, x, y)
    l2, g2 = loss_and_grads(w, np.concatenate([x, x]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, rel=1e-12)
    for name in neural.BLOCK_NAMES:
        np.testing.assert_allclose(g1[name], g2[name], rtol=1e-9, atol=1e-15)


# -- Adam ------------------------------------------------------------------------

def test_adam_zero_gradient_is_noop(backend):
    w = init_weights(0, 16)
    before = w.digest()
    zeros = {k: np.zeros_like(a) for k, a in w.blocks.items()}
    adam_step(w, zeros, AdamState.for_weights(w))
    assert w.digest() == before


@pytest.mark.parametrize("g", [0.3, -2.0, 1e-3])
def test_adam_first_step_magnitude(backend, g):
    w = init_weights(0, 16, np.float64)
    before = w.copy()
    grads = {k: np.full_like(a, g) for k, a in w.blocks.items()}
    st_ = AdamState.for_weights(w)
    adam_step(w, grads, st_)
    expected = 1e-3 * abs(g) / (abs(g) + 1e-8)
    for name in neural.BLOCK_NAMES:
        step = before.blocks[name] - w.blocks[name]
        np.testing.assert_allclose(step, math.copysign(expected, g), rtol=1e-9)
    assert st_.t == 1 and (st_.v["W"] >= 0).all()


def test_adam_constant_gradient_steady_steps(backend):
    w = init_weights(0, 16, np.float64)
    st_ = AdamState.for_weights(w)
    grads = {k: np.full_like(a, 0.7) for k, a in w.blocks.items()}
    w0 = w.blocks["b1"].copy()
    adam_step(w, grads, st_)
    w1 = w.blocks["b1"].copy()
    adam_step(w, grads, st_)
    # bias-corrected moments of a constant gradient are exactly g and g^2
    np.testing.assert_allclose(w1 - w.blocks["b1"], w0 - w1, rtol=1e-9)


def test_adam_non_finite_gradient_names_block():
    w = init_weights(0, 16)
    grads = {k: np.zeros_like(a) for k, a in w.blocks.items()}
    grads["k3"][0, 0, 0, 0] = np.nan
    with pytest.raises(OptimizerError) as info:
        adam_step(w, grads, AdamState.for_weights(w))
    assert info.value.block == "k3"


def test_adam_backends_agree():
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(0)
    p = rng.normal(size=1000).astype(np.float32)
    g = rng.normal(size=1000).astype(np.float32)
    outs = []
    for name in ("python", "cython"):
        q, m, v = p.copy(), np.zeros_like(p), np.zeros_like(p)
        kernels.get_backend(name).adam_update(q, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
        outs.append(q)
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-6, atol=1e-9)


# -- backend parity --------------------------------------------------------------

@pytest.mark.parametrize("cin,cout", [(1, 8), (8, 8), (8, 16), (16, 16), (4, 5)])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv_backends_agree(cin, cout, dtype):
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(cin + cout)
    x = rng.normal(size=(3, 12, 10, cin)).astype(dtype)
    k = rng.normal(size=(3, 3, cin, cout)).astype(dtype)
    b = rng.normal(size=cout).astype(dtype)
    g = rng.normal(size=(3, 12, 10, cout)).astype(dtype)
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")
    tol = 1e-4 if dtype == np.float32 else 1e-11
    np.testing.assert_allclose(cy.conv3x3_forward(x, k, b), py.conv3x3_forward(x, k, b),
                               rtol=tol, atol=tol)
    for a, r in zip(cy.conv3x3_backward(x, k, g, True), py.conv3x3_backward(x, k, g, True)):
        np.testing.assert_allclose(a, r, rtol=tol, atol=tol * 10)
    np.testing.assert_array_equal(cy.avgpool2_forward(x[:, :12, :10]), py.avgpool2_forward(x))
    np.testing.assert_array_equal(cy.avgpool2_backward(g), py.avgpool2_backward(g))


# -- weight files ----------------------------------------------------------------

def test_weight_file_round_trip_bit_exact(tmp_path):
    w = init_weights(11)
    save_weights(w, tmp_path / "w.fxw", note="x")
    r = load_weights(tmp_path / "w.fxw")
    assert r.digest() == w.digest() and r.seed == 11 and r.meta["note"] == "x"
    raw = (tmp_path / "w.fxw").read_bytes()
    assert raw[:8] == b"FABFIXW1"
    (n,) = struct.unpack("<I", raw[8:12])
    assert len(raw) == 12 + n + 4 * param_count()


def test_weight_file_small_geometry_round_trip(tmp_path):
    w = small_weights(1, np.float32)
    save_weights(w, tmp_path / "s.fxw")
    assert load_weights(tmp_path / "s.fxw").digest() == w.digest()


def _rewrite_manifest(path, edit):
    raw = path.read_bytes()
    (n,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12:12 + n])
    edit(manifest)
    new = json.dumps(manifest).encode()
    path.write_bytes(raw[:8] + struct.pack("<I", len(new)) + new + raw[12 + n:])


def test_corrupt_magic(tmp_path):
    p = tmp_path / "w.fxw"
    save_weights(init_weights(0, 16), p)
    p.write_bytes(b"XXXXXXXX" + p.read_bytes()[8:])
    with pytest.raises(FormatError) as info:
        load_weights(p)
    assert info.value.offset == 0


def test_wrong_version(tmp_path):
    p = tmp_path / "w.fxw"
    save_weights(init_weights(0, 16), p)
    _rewrite_manifest(p, lambda m: m.update(format_version=2))
    with pytest.raises(FormatError):
        load_weights(p)


def test_manifest_wrong_kernel_shape_fails_before_payload(tmp_path):
    p = tmp_path / "w.fxw"
    save_weights(init_weights(0, 16), p)

    def edit(m):
        m["blocks"][2]["shape"] = [5, 5, 8, 8]
    _rewrite_manifest(p, edit)
    # drop the payload entirely: the shape check must fire first
    raw = p.read_bytes()
    (n,) = struct.unpack("<I", raw[8:12])
    p.write_bytes(raw[:12 + n])
    with pytest.raises(ShapeError):
        load_weights(p)


@pytest.mark.parametrize("cut", [5, 11, 40, -1])
def test_truncated_file(tmp_path, cut):
    p = tmp_path / "w.fxw"
    save_weights(init_weights(0, 16), p)
    p.write_bytes(p.read_bytes()[:cut])
    with pytest.raises(FormatError):
        load_weights(p)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "w.fxw"
    save_weights(init_weights(0, 16), p)
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        load_weights(p)
