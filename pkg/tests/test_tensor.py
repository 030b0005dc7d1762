import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gppllie import tensor as T
from gppllie.errors import DimensionError, FormatError, UsageError, ValidationError
from gppllie.tensor import Tensor

F64 = np.float64


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=F64), dtype=F64, requires_grad=requires_grad)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = t64([[1.5, -2.0], [0.25, 7.0]])
    eye = t64(np.eye(2))
    assert np.array_equal(T.matmul(eye, a).data, a.data)


def test_matmul_hand_values():
    a = t64([[1, 2], [3, 4]])
    b = t64([[5, 6], [7, 8]])
    assert np.array_equal(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_grad_is_ones_bt():
    a = t64(np.arange(6).reshape(2, 3), requires_grad=True)
    b = t64(np.arange(12).reshape(3, 4))
    T.backward(T.tsum(T.matmul(a, b)))
    expected = np.ones((2, 4)) @ b.data.T
    np.testing.assert_allclose(a.grad, expected)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_associativity_chains():
    rng = np.random.default_rng(7)
    for _ in range(30):
        m, k, l, n = rng.integers(2, 6, size=4)
        a, b, c = (t64(rng.normal(size=s)) for s in [(m, k), (k, l), (l, n)])
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        np.testing.assert_allclose(left, right, rtol=1e-5, atol=1e-12)


def test_matmul_batched_broadcast_grad():
    rng = np.random.default_rng(3)
    a = t64(rng.normal(size=(4, 3, 2)), requires_grad=True)
    b = t64(rng.normal(size=(2, 5)), requires_grad=True)
    T.backward(T.tsum(T.matmul(a, b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    err = T.finite_diff_check(lambda x: T.tsum(T.matmul(x, b)), a)
    assert err < 1e-6


# ---------------------------------------------------------------- conv2d

def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = t64(rng.normal(size=(3, 6, 6)))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c, 0, 0] = 1.0
    out = T.conv2d(x, t64(k), stride=1, pad=0)
    np.testing.assert_array_equal(out.data, x.data)


def conv2d_oracle(x, k, stride, pad):
    """Direct sliding-window cross-correlation."""
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[co, i, j] = np.sum(patch * k[co])
    return out


def test_conv2d_averaging_kernel_matches_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 4, 4))
    k = np.full((1, 1, 3, 3), 1.0 / 9.0)
    got = T.conv2d(t64(x), t64(k), stride=1, pad=0).data
    np.testing.assert_allclose(got, conv2d_oracle(x, k, 1, 0), rtol=1e-12)


def test_conv2d_strided_matches_oracle():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 8, 8))
    k = rng.normal(size=(4, 2, 3, 3))
    got = T.conv2d(t64(x), t64(k), stride=2, pad=1)
    assert got.shape == (4, 4, 4)
    np.testing.assert_allclose(got.data, conv2d_oracle(x, k, 2, 1), rtol=1e-10, atol=1e-12)


def test_conv2d_floor_convention_5x5_stride2():
    # (5-3)//2+1 = 2 output positions per axis
    out = T.conv2d(t64(np.ones((1, 5, 5))), t64(np.ones((1, 1, 3, 3))), stride=2, pad=0)
    assert out.shape == (1, 2, 2)


def test_conv2d_rejects_undefined_output():
    with pytest.raises(DimensionError):
        T.conv2d(t64(np.ones((1, 2, 2))), t64(np.ones((1, 1, 5, 5))), stride=1, pad=0)


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ValidationError):
        T.conv2d(t64(np.ones((1, 4, 4))), t64(np.ones((1, 1, 2, 2))), stride=1, pad=0)


# ---------------------------------------------------------------- softmax

def test_softmax_constant_is_uniform():
    out = T.softmax(t64([3.0, 3.0, 3.0, 3.0]), axis=-1)
    np.testing.assert_allclose(out.data, 0.25)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5))
    a = T.softmax(t64(x), axis=-1).data
    b = T.softmax(t64(x + 17.3), axis=-1).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_softmax_closed_form_pair():
    out = T.softmax(t64([0.0, np.log(3.0)]), axis=-1)
    np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(F64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-100, 100)))
def test_softmax_sums_to_one(x):
    out = T.softmax(Tensor(x, dtype=F64), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
    assert (out.data > 0).all()


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm_normalize(t64([[4.0, 4.0, 4.0]]))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_moments():
    rng = np.random.default_rng(2)
    x = t64(rng.normal(size=(7, 9)) * 3 + 1)
    out = T.layer_norm_normalize(x).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1).max() < 1e-3


def test_layer_norm_direct_oracle():
    x = np.array([1.0, 2.0, 3.0])
    mu, var = x.mean(), x.var()
    expected = (x - mu) / np.sqrt(var + 1e-5)
    out = T.layer_norm_normalize(t64(x)).data
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_layer_norm_rejects_single_element_axis():
    with pytest.raises(DimensionError):
        T.layer_norm_normalize(t64([[1.0]]))


# ---------------------------------------------------------------- bilinear resize

def bilinear_oracle(x, oh, ow):
    c, h, w = x.shape
    out = np.zeros((c, oh, ow))
    for o in range(oh):
        for p in range(ow):
            sy = (o + 0.5) * h / oh - 0.5
            sx = (p + 0.5) * w / ow - 0.5
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            wy, wx = sy - y0, sx - x0
            y0c, y1c = np.clip([y0, y0 + 1], 0, h - 1)
            x0c, x1c = np.clip([x0, x0 + 1], 0, w - 1)
            out[:, o, p] = ((1 - wy) * (1 - wx) * x[:, y0c, x0c]
                            + (1 - wy) * wx * x[:, y0c, x1c]
                            + wy * (1 - wx) * x[:, y1c, x0c]
                            + wy * wx * x[:, y1c, x1c])
    return out


def test_bilinear_constant_stays_constant():
    x = t64(np.full((3, 2, 2), 0.7))
    out = T.bilinear_resize(x, 5, 3).data
    np.testing.assert_allclose(out, 0.7, rtol=1e-12)


def test_bilinear_same_size_identity():
    rng = np.random.default_rng(4)
    x = t64(rng.normal(size=(2, 4, 6)))
    out = T.bilinear_resize(x, 4, 6).data
    np.testing.assert_array_equal(out, x.data)


def test_bilinear_2x2_to_4x4_oracle():
    x = np.arange(4, dtype=F64).reshape(1, 2, 2)
    got = T.bilinear_resize(t64(x), 4, 4).data
    np.testing.assert_allclose(got, bilinear_oracle(x, 4, 4), rtol=1e-12)


# ---------------------------------------------------------------- concat/slice

def test_concat_slice_round_trip_bit_exact():
    rng = np.random.default_rng(8)
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(3, 2)))
    cat = T.concat([a, b], axis=1)
    assert cat.shape == (3, 6)
    back = T.slice_axis(cat, 1, 0, 4)
    assert np.array_equal(back.data, a.data)


def test_concat_channel_count():
    a = t64(np.ones((4, 2, 2)))
    assert T.concat([a, a], axis=0).shape == (8, 2, 2)


def test_slice_gradient_routing():
    x = t64(np.arange(12).reshape(3, 4), requires_grad=True)
    T.backward(T.tsum(T.slice_axis(x, 1, 1, 3)))
    expected = np.zeros((3, 4))
    expected[:, 1:3] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_concat_extent_mismatch():
    with pytest.raises(DimensionError):
        T.concat([t64(np.ones((2, 3))), t64(np.ones((3, 3)))], axis=1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.data())
def test_concat_slice_round_trip_property(rows, ca, cb, data):
    a = np.asarray(data.draw(st.lists(
        st.floats(-1e3, 1e3), min_size=rows * ca, max_size=rows * ca)), dtype=F64)
    b = np.asarray(data.draw(st.lists(
        st.floats(-1e3, 1e3), min_size=rows * cb, max_size=rows * cb)), dtype=F64)
    ta, tb = t64(a.reshape(rows, ca)), t64(b.reshape(rows, cb))
    cat = T.concat([ta, tb], axis=1)
    assert np.array_equal(T.slice_axis(cat, 1, 0, ca).data, ta.data)
    assert np.array_equal(T.slice_axis(cat, 1, ca, ca + cb).data, tb.data)


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = t64(np.arange(6).reshape(2, 3), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x():
    x = t64([1.0, -2.0, 3.5], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_until_cleared():
    x = t64([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(x))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        T.backward(T.mul(x, x))


def test_backward_composite_ln_matmul_softmax():
    rng = np.random.default_rng(11)
    w = t64(rng.normal(size=(4, 4)))
    scal = t64(rng.normal(size=(3, 4)))

    def f(x):
        y = T.layer_norm_normalize(x)
        y = T.matmul(y, w)
        y = T.softmax(y, axis=-1)
        return T.tsum(T.mul(y, scal))

    err = T.finite_diff_check(f, t64(rng.normal(size=(3, 4))))
    assert err < 1e-6


def test_diamond_graph_grad():
    # x feeds two branches that later merge; gradient must sum both paths
    x = t64([2.0], requires_grad=True)
    y = T.add(T.mul(x, x), T.mul(x, 3.0))
    T.backward(T.tsum(y))
    np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0])


# ---------------------------------------------------------------- finite_diff_check

def test_fdc_sum_is_tiny():
    x = t64(np.random.default_rng(0).normal(size=(4,)))
    assert T.finite_diff_check(T.tsum, x) < 1e-9


def test_fdc_softmax_constant_function():
    x = t64(np.random.default_rng(1).normal(size=(6,)))
    err = T.finite_diff_check(lambda v: T.tsum(T.softmax(v, -1)), x)
    assert err < 1e-6


def test_fdc_requires_f64():
    with pytest.raises(ValidationError):
        T.finite_diff_check(T.tsum, Tensor([1.0, 2.0], dtype=np.float32))


# ---------------------------------------------------------------- op-wide invariants

def test_all_ops_pass_gradcheck_20_seeds():
    from gppllie.gradcheck import OP_TOLERANCE, check_ops
    worst = check_ops(seeds=20)
    bad = {k: v for k, v in worst.items() if v >= OP_TOLERANCE}
    assert not bad, f"ops above tolerance: {bad}"


def test_finite_inputs_finite_outputs():
    rng = np.random.default_rng(13)
    x = t64(rng.uniform(-1e3, 1e3, size=(4, 6)))
    outs = [
        T.add(x, x), T.mul(x, x), T.tanh(x), T.gelu(x),
        T.softmax(x, -1), T.layer_norm_normalize(x),
        T.matmul(x, t64(rng.uniform(-1e3, 1e3, size=(6, 2)))),
    ]
    for o in outs:
        assert np.isfinite(o.data).all()


def test_nonfinite_result_detected():
    big = Tensor(np.array([1e38], dtype=np.float32))
    with np.errstate(over="ignore"), pytest.raises(ValidationError):
        T.mul(big, big)  # overflows f32 to inf


def test_grad_shape_and_dtype_match():
    x = t64(np.ones((3, 2)), requires_grad=True)
    T.backward(T.tsum(T.tanh(x)))
    assert x.grad.shape == x.shape and x.grad.dtype == x.dtype


# ---------------------------------------------------------------- misc ops

def test_l2_normalize_unit_norm():
    rng = np.random.default_rng(14)
    x = t64(rng.normal(size=(5, 8)) + 0.1)
    out = T.l2_normalize(x, axis=-1).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-6)


def test_variance_matches_numpy():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(4, 7))
    out = T.variance(t64(x), axis=-1).data
    np.testing.assert_allclose(out, x.var(axis=-1), rtol=1e-12)


def test_sinusoidal_table_t0_and_distances():
    tab = T.sinusoidal_table(1000, 64)
    np.testing.assert_allclose(tab[0, :32], 0.0, atol=1e-12)
    np.testing.assert_allclose(tab[0, 32:], 1.0, atol=1e-12)
    rows = tab[[1, 500, 999]]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(rows[i] - rows[j]) > 0.1
    assert np.linalg.norm(tab, axis=1).max() <= np.sqrt(64) + 1e-6


def test_no_grad_blocks_graph():
    x = t64([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad


# ---------------------------------------------------------------- tensor dump

def test_tensor_dump_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    for dtype in (np.float32, np.float64):
        x = Tensor(rng.normal(size=(2, 3, 4)).astype(dtype), dtype=dtype)
        p = tmp_path / f"t_{np.dtype(dtype).name}.gptn"
        T.save_tensor(x, p)
        back = T.load_tensor(p)
        assert back.dtype == x.dtype and back.shape == x.shape
        assert np.array_equal(back.data, x.data)


def test_tensor_dump_header_fields(tmp_path):
    x = Tensor(np.zeros((5, 2), dtype=np.float32))
    p = tmp_path / "t.gptn"
    T.save_tensor(x, p)
    blob = p.read_bytes()
    assert blob[:4] == b"GPTN"
    assert blob[4] == 1 and blob[6] == 2  # version, rank
    assert int.from_bytes(blob[7:15], "little") == 5
    assert int.from_bytes(blob[15:23], "little") == 2


def test_tensor_dump_rejects_corruption(tmp_path):
    x = Tensor(np.zeros(4, dtype=np.float32))
    p = tmp_path / "t.gptn"
    T.save_tensor(x, p)
    blob = bytearray(p.read_bytes())
    (tmp_path / "bad_magic.gptn").write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(FormatError):
        T.load_tensor(tmp_path / "bad_magic.gptn")
    (tmp_path / "trunc.gptn").write_bytes(bytes(blob[:-3]))
    with pytest.raises(FormatError):
        T.load_tensor(tmp_path / "trunc.gptn")
