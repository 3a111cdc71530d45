import numpy as np
import pytest

from arcomp import ndcore as nd
from arcomp.attention import attend, unpack_params
from arcomp.controller import GlimpseProjection, LstmCell, lstm_step, orthogonal, project_glimpse_params
from arcomp.errors import DimensionError
from arcomp.gradcheck import check_gradients


def test_zero_weights_give_zero_state():
    cell = LstmCell(9, 5)
    cell.W.data[:] = 0.0
    cell.b.data[:] = 0.0
    h, c = lstm_step(cell, np.random.default_rng(0).normal(size=9), cell.initial_state())
    np.testing.assert_array_equal(h.data, np.zeros(5))


def test_saturated_gates_hold_memory():
    rng = np.random.default_rng(1)
    cell = LstmCell(4, 6, rng)
    cell.b.data[:] = 0.0
    cell.b.data[0:6] = -50.0      # input gate shut
    cell.b.data[6:12] = 50.0      # forget gate open
    c0 = rng.normal(size=6)
    _, c1 = cell.step(rng.normal(size=4) * 0.1, (nd.Tensor(rng.normal(size=6) * 0.1), nd.Tensor(c0)))
    np.testing.assert_allclose(c1.data, c0, atol=1e-12)


def test_default_initialisation():
    cell = LstmCell(16, 8, np.random.default_rng(2))
    np.testing.assert_array_equal(cell.b.data[8:16], np.ones(8))
    np.testing.assert_array_equal(np.delete(cell.b.data, np.s_[8:16]), np.zeros(24))
    W = cell.W.data                              # 24 x 32: orthonormal rows
    np.testing.assert_allclose(W @ W.T, np.eye(24), atol=1e-12)
    Q = orthogonal(5, 3, np.random.default_rng(0))
    np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-12)


def test_lstm_gradients():
    rng = np.random.default_rng(3)
    cell = LstmCell(9, 8, rng)
    x = rng.normal(size=(2, 9))
    h0, c0 = rng.normal(size=(2, 8)) * 0.3, rng.normal(size=(2, 8)) * 0.3

    def loss():
        h, _ = cell.step(x, (nd.Tensor(h0), nd.Tensor(c0)))
        return h.sum()

    errors = check_gradients(loss, cell.parameters())
    assert max(errors.values()) < 1e-5, errors


def test_lstm_shape_mismatch():
    cell = LstmCell(4, 3)
    with pytest.raises(DimensionError):
        cell.step(np.ones(5), cell.initial_state())


class TestProjection:
    def test_zero_state_gives_full_centred_window(self):
        proj = GlimpseProjection(7, np.random.default_rng(0))
        omega = project_glimpse_params(proj, np.zeros(7))
        np.testing.assert_array_equal(omega.data, np.zeros(3))
        p = unpack_params(omega, 32, 4)
        assert p.x.item() == 15.5 and p.y.item() == 15.5 and p.delta.item() == 8.0

    def test_zero_matrix_is_constant(self):
        proj = GlimpseProjection(5, use_bias=True)
        proj.W.data[:] = 0.0
        proj.b.data[:] = [0.1, -0.2, 0.3]
        rng = np.random.default_rng(1)
        for _ in range(3):
            np.testing.assert_array_equal(proj(rng.normal(size=5)).data, [0.1, -0.2, 0.3])

    def test_matches_dot_products(self):
        rng = np.random.default_rng(2)
        proj = GlimpseProjection(6, rng, scale=1.0)
        h = rng.normal(size=6)
        expected = [sum(proj.W.data[r, k] * h[k] for k in range(6)) for r in range(3)]
        np.testing.assert_allclose(proj(h).data, expected, atol=1e-12, rtol=0)
        batch = rng.normal(size=(4, 6))
        for row, out in zip(batch, proj(batch).data):
            np.testing.assert_allclose(out, proj(row).data, atol=1e-12, rtol=0)

    def test_no_bias_by_default(self):
        assert list(GlimpseProjection(3).parameters()) == ["glimpse.W"]


def test_bptt_gradients():
    """Unrolled attention + controller, H = 8, T = 4, S = 8, N = 3."""
    rng = np.random.default_rng(4)
    S, N, H, T = 8, 3, 8, 4
    cell = LstmCell(N * N, H, rng)
    proj = GlimpseProjection(H, rng, scale=0.5)
    images = rng.random((T, 2, S, S))
    weights = rng.normal(size=(2, H))

    def loss():
        h, c = cell.initial_state(2)
        for t in range(T):
            omega = proj(h)
            h, c = cell.step(attend(images[t], omega, N), (h, c))
        return (h * weights).sum()

    params = {**cell.parameters(), **proj.parameters()}
    errors = check_gradients(loss, params)
    assert max(errors.values()) < 1e-4, errors
