"""Differentiable Cauchy-kernel attention.

An N x N grid of Cauchy kernels is laid over an S x S image.  The grid is
described by three numbers coming out of the controller: a centre and a
stride (plus a kernel scale derived from the stride).  Two row-normalised
filterbank matrices turn the image into an N x N glimpse,
``F_Y @ image @ F_X.T``.

All functions accept either a single image / parameter vector or a leading
batch dimension.  Batched inputs keep one graph per call; results match
per-example execution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndcore as nd
from .errors import DimensionError, NumericError
from .ndcore import Tensor

ROW_MASS_FLOOR = 1e-12


@dataclass
class GlimpseParams:
    """Window for one time step.

    ``x_hat``, ``y_hat`` and ``delta_hat`` are the squashed controller
    outputs (in [-1, 1]); ``x``/``y`` are the window centre in pixels,
    ``delta`` the kernel stride and ``gamma`` the Cauchy scale.  Every field
    has shape (B, 1).
    """

    x_hat: Tensor
    y_hat: Tensor
    delta_hat: Tensor
    x: Tensor
    y: Tensor
    delta: Tensor
    gamma: Tensor
    S: int
    N: int
    batched: bool = True

    @property
    def batch(self) -> int:
        return self.x.shape[0]

    def as_rows(self) -> np.ndarray:
        """(B, 7) array of x_hat, y_hat, delta_hat, x, y, delta, gamma."""
        cols = [self.x_hat, self.y_hat, self.delta_hat, self.x, self.y, self.delta, self.gamma]
        return np.concatenate([c.data for c in cols], axis=1)


@dataclass
class Filterbank:
    F_X: Tensor
    F_Y: Tensor
    Z_X: Tensor
    Z_Y: Tensor


def _check_sizes(S: int, N: int) -> None:
    if not (isinstance(S, (int, np.integer)) and isinstance(N, (int, np.integer))):
        raise TypeError("S and N must be integers")
    if not S >= N >= 1:
        raise DimensionError(f"need S >= N >= 1, got S={S}, N={N}")


def window_params(bounded, S: int, N: int, batched: bool | None = None) -> GlimpseParams:
    """Map already-bounded (x_hat, y_hat, delta_hat) to a pixel-space window."""
    _check_sizes(S, N)
    bounded = nd.as_tensor(bounded)
    if batched is None:
        batched = bounded.ndim == 2
    if bounded.ndim == 1:
        bounded = bounded.reshape(1, bounded.shape[0])
    if bounded.ndim != 2 or bounded.shape[1] != 3:
        raise DimensionError(f"glimpse parameters must have 3 entries, got shape {bounded.shape}")
    x_hat = bounded[:, 0:1]
    y_hat = bounded[:, 1:2]
    delta_hat = bounded[:, 2:3]
    half_span = (S - 1) / 2.0
    x = (x_hat + 1.0) * half_span
    y = (y_hat + 1.0) * half_span
    spread = nd.absolute(delta_hat)
    delta = (1.0 - spread) * (S / N)
    gamma = nd.exp(1.0 - 2.0 * spread)
    return GlimpseParams(x_hat, y_hat, delta_hat, x, y, delta, gamma, S, N, batched)


def unpack_params(omega, S: int, N: int) -> GlimpseParams:
    """Squash raw controller outputs with tanh, then build the window."""
    omega = nd.as_tensor(omega)
    if omega.shape[-1:] != (3,) or omega.ndim not in (1, 2):
        raise DimensionError(f"omega must have exactly 3 entries per row, got shape {omega.shape}")
    if not np.all(np.isfinite(omega.data)):
        raise NumericError("glimpse parameters contain non-finite values")
    return window_params(nd.tanh(omega), S, N, batched=omega.ndim == 2)


def _offsets(N: int) -> np.ndarray:
    return np.arange(1, N + 1, dtype=float) - (N + 1) / 2.0


def kernel_centers(p: GlimpseParams, N: int | None = None) -> tuple[Tensor, Tensor]:
    """Kernel centres along x and y, shape (B, N) (or (N,) when unbatched)."""
    N = p.N if N is None else N
    B = p.batch
    off = nd.Tensor(np.broadcast_to(_offsets(N), (B, N)).copy())
    step = p.delta.expand(B, N) * off
    mu_x = p.x.expand(B, N) + step
    mu_y = p.y.expand(B, N) + step
    if not p.batched:
        mu_x, mu_y = mu_x.reshape(N), mu_y.reshape(N)
    return mu_x, mu_y


def cauchy_kernel(dist: Tensor, gamma: Tensor) -> Tensor:
    """Cauchy density 1 / (pi * gamma * (1 + (dist / gamma)^2))."""
    return gamma / ((nd.square(gamma) + nd.square(dist)) * math.pi)


def _row_filters(mu: Tensor, gamma: Tensor, S: int, kernel: Callable) -> tuple[Tensor, Tensor]:
    """Row-normalised filters for centres ``mu`` (B, R) and scale ``gamma`` (B, 1)."""
    B, R = mu.shape
    pixels = nd.Tensor(np.broadcast_to(np.arange(S, dtype=float), (B, R, S)))
    dist = pixels - mu.reshape(B, R, 1).expand(B, R, S)
    raw = kernel(dist, gamma.reshape(B, 1, 1).expand(B, R, S))
    Z = nd.clamp(raw.sum(axis=2, keepdims=True), low=ROW_MASS_FLOOR)
    return raw / Z.expand(B, R, S), Z


def build_filterbanks(p: GlimpseParams, S: int | None = None, N: int | None = None,
                      kernel: Callable = cauchy_kernel) -> Filterbank:
    """Horizontal and vertical filterbanks, each (B, N, S) (or (N, S) unbatched)."""
    S = p.S if S is None else S
    N = p.N if N is None else N
    B = p.batch
    mu_x, mu_y = kernel_centers(p, N)
    mu = nd.concat([mu_x.reshape(B, N), mu_y.reshape(B, N)], axis=1)
    F, Z = _row_filters(mu, p.gamma, S, kernel)
    F_X, F_Y = F[:, :N, :], F[:, N:, :]
    Z_X, Z_Y = Z[:, :N, 0], Z[:, N:, 0]
    if not p.batched:
        F_X, F_Y = F_X.reshape(N, S), F_Y.reshape(N, S)
        Z_X, Z_Y = Z_X.reshape(N), Z_Y.reshape(N)
    return Filterbank(F_X, F_Y, Z_X, Z_Y)


def attend(image, omega, N: int, params: GlimpseParams | None = None) -> Tensor:
    """Extract the flattened N*N glimpse ``F_Y @ image @ F_X.T``.

    ``image`` is (S, S) or (B, S, S); ``omega`` is the matching (3,) or
    (B, 3) raw parameter vector.  A precomputed ``params`` may be passed to
    avoid unpacking twice.
    """
    image = nd.as_tensor(image)
    omega = nd.as_tensor(omega)
    single = image.ndim == 2
    if single:
        if omega.shape != (3,):
            raise DimensionError(f"single image needs omega of shape (3,), got {omega.shape}")
        image = image.reshape(1, *image.shape)
        omega = omega.reshape(1, 3)
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise DimensionError(f"image must be square (S, S) or (B, S, S), got {image.shape}")
    B, S, _ = image.shape
    if omega.shape != (B, 3):
        raise DimensionError(f"omega shape {omega.shape} does not match {B} image(s)")
    p = params if params is not None else unpack_params(omega, S, N)
    fb = build_filterbanks(p if p.batched else _rebatch(p), S, N)
    patch = fb.F_Y @ image @ nd.transpose(fb.F_X)
    out = patch.reshape(B, N * N)
    return out.reshape(N * N) if single else out


def _rebatch(p: GlimpseParams) -> GlimpseParams:
    return GlimpseParams(p.x_hat, p.y_hat, p.delta_hat, p.x, p.y, p.delta, p.gamma, p.S, p.N, True)


def window_box(x: float, y: float, delta: float, gamma: float, N: int) -> tuple[float, float, float, float]:
    """Drawing rectangle (left, top, right, bottom) in pixel coordinates:
    the kernel-centre bounding box grown by gamma on every side."""
    reach = abs((N - 1) / 2.0 * delta) + gamma
    return x - reach, y - reach, x + reach, y + reach
