import numpy as np
import pytest

from dat_ctta import numerics as nx
from dat_ctta.errors import ContractError, NonFiniteError, ShapeError
from dat_ctta.numerics import AdamState, Graph, Tensor, adam_step, backward


def conv_oracle(x, w, b, stride, pad):
    C, H, W = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((co, Ho, Wo))
    for o in range(co):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(C):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


def bilinear_oracle(img, new_h, new_w):
    """Direct half-pixel bilinear sampling with edge clamping."""
    C, H, W = img.shape
    out = np.zeros((C, new_h, new_w))
    for y in range(new_h):
        sy = min(max((y + 0.5) * H / new_h - 0.5, 0.0), H - 1)
        y0 = int(np.floor(sy)); y1 = min(y0 + 1, H - 1); fy = sy - y0
        for x in range(new_w):
            sx = min(max((x + 0.5) * W / new_w - 0.5, 0.0), W - 1)
            x0 = int(np.floor(sx)); x1 = min(x0 + 1, W - 1); fx = sx - x0
            out[:, y, x] = ((1 - fy) * (1 - fx) * img[:, y0, x0] + (1 - fy) * fx * img[:, y0, x1]
                            + fy * (1 - fx) * img[:, y1, x0] + fy * fx * img[:, y1, x1])
    return out


# conv2d

def test_conv_identity_1x1(rng):
    x = rng.standard_normal((3, 5, 7)).astype(np.float32)
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    out = nx.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_sum():
    out = nx.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 9.0


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_nested_loops(rng, stride, pad):
    for n in range(2):
        x = rng.standard_normal((3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        want = conv_oracle(x.astype(np.float64), w, b, stride, pad)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_conv_shape_errors():
    x = Tensor(np.zeros((3, 8, 8)))
    with pytest.raises(ShapeError, match="channels"):
        nx.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError, match="odd"):
        nx.conv2d(x, Tensor(np.zeros((4, 3, 2, 2))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError, match="bias"):
        nx.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(5)))
    with pytest.raises(ShapeError, match="smaller than kernel"):
        nx.conv2d(Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)))


# elementwise and friends

def test_bilinear_matches_direct_formula(rng):
    img = rng.standard_normal((2, 2, 2))
    got = nx.bilinear_resize(Tensor(img, dtype=np.float64), 4, 4).data
    np.testing.assert_allclose(got, bilinear_oracle(img, 4, 4), atol=1e-6)
    img = rng.standard_normal((3, 5, 7))
    for h, w in [(10, 14), (3, 4), (9, 2)]:
        got = nx.bilinear_resize(Tensor(img, dtype=np.float64), h, w).data
        np.testing.assert_allclose(got, bilinear_oracle(img, h, w), atol=1e-9)


def test_bilinear_exact_on_constants():
    x = np.full((2, 6, 6), 0.3, dtype=np.float32)
    for h, w in [(12, 12), (3, 3), (5, 9)]:
        out = nx.bilinear_resize(Tensor(x), h, w).data
        assert np.all(out == np.float32(0.3))


def test_softmax_uniform_and_normalised(rng):
    p = nx.softmax_over_channels(Tensor(np.zeros((4, 2, 2)))).data
    np.testing.assert_allclose(p, 0.25)
    p = nx.softmax_over_channels(Tensor(rng.standard_normal((6, 9, 9)) * 10)).data
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)


def test_relu_variants():
    x = Tensor(np.array([-2.0, 0.0, 3.0]))
    np.testing.assert_array_equal(nx.relu(x).data, [0, 0, 3])
    np.testing.assert_allclose(nx.leaky_relu(x, 0.1).data, [-0.2, 0, 3])


def test_dropout(rng):
    x = Tensor(rng.standard_normal((4, 8, 8)).astype(np.float32))
    np.testing.assert_array_equal(nx.dropout(x, 0.0, np.random.default_rng(0)).data, x.data)
    np.testing.assert_array_equal(nx.dropout(x, 0.5, None).data, x.data)
    out = nx.dropout(x, 0.25, np.random.default_rng(0)).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], x.data[kept] / 0.75, rtol=1e-6)
    again = nx.dropout(x, 0.25, np.random.default_rng(0)).data
    np.testing.assert_array_equal(out, again)
    for bad in (1.0, -0.1, 1.5):
        with pytest.raises(ContractError):
            nx.dropout(x, bad, np.random.default_rng(0))


def test_channel_norm_statistics(rng):
    x = Tensor(rng.standard_normal((3, 6, 6)) * 4 + 2, dtype=np.float64)
    out = nx.channel_norm(x, Tensor(np.ones(3), dtype=np.float64), Tensor(np.zeros(3), dtype=np.float64)).data
    np.testing.assert_allclose(out.mean(axis=(1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=(1, 2)), 1, atol=1e-5)


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        nx.add(Tensor(np.array([1.0])), Tensor(np.array([np.inf])))


# backward

def test_backward_linear_and_square():
    x = Tensor(np.full((2, 3), 3.0), requires_grad=True)
    with Graph() as g:
        loss = nx.sum_all(x)
    np.testing.assert_array_equal(backward(g, loss)[x], 1.0)
    with Graph() as g:
        loss = nx.sum_all(nx.mul(x, x))
    np.testing.assert_array_equal(backward(g, loss)[x], 6.0)


def test_backward_contracts():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with Graph() as g:
        y = nx.mul_scalar(x, 2.0)
        loss = nx.mean_all(y)
    with pytest.raises(ContractError, match="scalar"):
        backward(g, y)
    grads = backward(g, loss)
    np.testing.assert_array_equal(grads[unused], 0.0)
    with pytest.raises(ContractError):
        backward(Graph(), loss)


def _fd_check(params, loss_fn, grad, h=1e-3):
    rel = np.empty(params.size)
    for i in range(params.size):
        keep = params[i]
        params[i] = keep + h
        up = loss_fn()
        params[i] = keep - h
        down = loss_fn()
        params[i] = keep
        num = (up - down) / (2 * h)
        rel[i] = abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-6)
    return rel


def test_two_layer_convnet_matches_finite_differences(rng):
    x = rng.standard_normal((2, 6, 6))
    w1 = rng.standard_normal((3, 2, 3, 3)) * 0.5
    b1 = rng.standard_normal(3) * 0.1
    w2 = rng.standard_normal((2, 3, 3, 3)) * 0.5
    b2 = rng.standard_normal(2) * 0.1
    flat = np.concatenate([a.ravel() for a in (w1, b1, w2, b2)])
    shapes = [w1.shape, b1.shape, w2.shape, b2.shape]

    def leaves():
        out, off = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(Tensor(flat[off:off + n].reshape(s), requires_grad=True))
            off += n
        return out

    def run(record_grad):
        lw1, lb1, lw2, lb2 = leaves()
        with Graph() as g:
            hdn = nx.relu(nx.conv2d(Tensor(x), lw1, lb1, pad=1))
            out = nx.conv2d(hdn, lw2, lb2, pad=1)
            loss = nx.sum_all(nx.mul(out, out))
        if not record_grad:
            return loss.item()
        gr = backward(g, loss)
        return np.concatenate([gr[t].ravel() for t in (lw1, lb1, lw2, lb2)])

    grad = run(True)
    rel = _fd_check(flat, lambda: run(False), grad)
    assert np.mean(rel < 1e-4) >= 0.999, np.sort(rel)[-5:]


# adam

def test_adam_first_step_closed_form():
    params = np.array([0.5, -1.0, 2.0], dtype=np.float32)
    grads = np.array([1.0, 7.0, -3.0], dtype=np.float32)
    state = AdamState.zeros(3, lr=0.001)
    adam_step(params, grads, state, np.array([0]))
    # m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert params[0] == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-7)
    assert params[1] == np.float32(-1.0) and params[2] == np.float32(2.0)
    assert state.m[1] == 0 and state.v[2] == 0 and state.step_count == 1


def test_adam_second_step_closed_form():
    params = np.zeros(1, dtype=np.float64)
    state = AdamState.zeros(1, dtype=np.float64, lr=0.01)
    adam_step(params, np.array([1.0]), state, None)
    adam_step(params, np.array([-2.0]), state, None)
    m = 0.9 * 0.1 + 0.1 * -2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    step2 = 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert params[0] == pytest.approx(-0.01 / (1 + 1e-8) - step2, rel=1e-10)


def test_adam_masks_and_fixed_points(rng):
    params = rng.standard_normal(50).astype(np.float32)
    before = params.copy()
    state = AdamState.zeros(50)
    adam_step(params, rng.standard_normal(50).astype(np.float32), state, np.zeros(0, np.int64))
    assert params.tobytes() == before.tobytes()
    adam_step(params, np.zeros(50, np.float32), state, np.arange(10))
    assert params.tobytes() == before.tobytes()
    mask = np.array([3, 17, 40])
    grads = rng.standard_normal(50).astype(np.float32)
    adam_step(params, grads, state, mask)
    changed = np.flatnonzero(params.view(np.uint32) ^ before.view(np.uint32))
    assert set(changed) <= set(mask)
    outside = np.setdiff1d(np.arange(50), mask)
    assert np.all(state.m[outside] == 0) and np.all(state.v >= 0)


def test_adam_length_mismatch():
    with pytest.raises(ContractError):
        adam_step(np.zeros(3, np.float32), np.zeros(4, np.float32), AdamState.zeros(3), None)
