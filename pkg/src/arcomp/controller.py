"""Recurrent controller: an LSTM cell with forget gates and the linear map
from hidden state to raw glimpse parameters."""

from __future__ import annotations

import numpy as np

from . import ndcore as nd
from .errors import DimensionError
from .ndcore import Tensor


def orthogonal(rows: int, cols: int, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """(Semi-)orthogonal matrix via QR of a Gaussian draw."""
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class LstmCell:
    """Single LSTM layer with forget gates.

    Gates are packed column-wise in the order input, forget, output,
    candidate, so ``W`` has shape (input_size + hidden_size, 4 * hidden_size).
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None,
                 forget_bias: float = 1.0, prefix: str = "lstm"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.input_size = int(input_size)
        self.hidden_size = int(hidden_size)
        H = self.hidden_size
        bias = np.zeros(4 * H)
        bias[H:2 * H] = forget_bias
        self.W = nd.parameter(orthogonal(self.input_size + H, 4 * H, rng), name=f"{prefix}.W")
        self.b = nd.parameter(bias, name=f"{prefix}.b")

    def parameters(self) -> dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}

    def initial_state(self, batch: int | None = None) -> tuple[Tensor, Tensor]:
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return nd.Tensor(np.zeros(shape)), nd.Tensor(np.zeros(shape))

    def step(self, x, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        """One update.  ``x`` is (input,) or (B, input); state matches."""
        h, c = state
        x, h, c = nd.as_tensor(x), nd.as_tensor(h), nd.as_tensor(c)
        single = x.ndim == 1
        if single:
            x, h, c = x.reshape(1, -1), h.reshape(1, -1), c.reshape(1, -1)
        B = x.shape[0]
        H = self.hidden_size
        if x.shape != (B, self.input_size) or h.shape != (B, H) or c.shape != (B, H):
            raise DimensionError(
                f"lstm_step: input {x.shape}, h {h.shape}, c {c.shape} do not fit "
                f"cell ({self.input_size} -> {H})")
        z = nd.concat([x, h], axis=1) @ self.W + self.b.expand(B, 4 * H)
        i = nd.sigmoid(z[:, :H])
        f = nd.sigmoid(z[:, H:2 * H])
        o = nd.sigmoid(z[:, 2 * H:3 * H])
        g = nd.tanh(z[:, 3 * H:])
        c_new = f * c + i * g
        h_new = o * nd.tanh(c_new)
        if single:
            return h_new.reshape(H), c_new.reshape(H)
        return h_new, c_new

    __call__ = step


def lstm_step(cell: LstmCell, g, state):
    return cell.step(g, state)


class GlimpseProjection:
    """Omega = W_g h (3 raw window parameters per step).  No bias by default."""

    def __init__(self, hidden_size: int, rng: np.random.Generator | None = None,
                 use_bias: bool = False, scale: float = 0.01, prefix: str = "glimpse"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.hidden_size = int(hidden_size)
        self.W = nd.parameter(scale * rng.standard_normal((3, self.hidden_size)), name=f"{prefix}.W")
        self.b = nd.parameter(np.zeros(3), name=f"{prefix}.b") if use_bias else None

    def parameters(self) -> dict[str, Tensor]:
        out = {self.W.name: self.W}
        if self.b is not None:
            out[self.b.name] = self.b
        return out

    def project(self, h) -> Tensor:
        h = nd.as_tensor(h)
        if h.shape[-1] != self.hidden_size:
            raise DimensionError(f"hidden state of size {h.shape[-1]}, projection expects {self.hidden_size}")
        if h.ndim == 1:
            omega = self.W @ h
            return omega + self.b if self.b is not None else omega
        omega = h @ nd.transpose(self.W)
        if self.b is not None:
            omega = omega + self.b.expand(h.shape[0], 3)
        return omega

    __call__ = project


def project_glimpse_params(projection: GlimpseProjection, h) -> Tensor:
    return projection.project(h)
