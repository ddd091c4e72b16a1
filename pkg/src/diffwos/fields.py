"""Spatial parameter fields and their reverse-mode accumulation buffers.

Parameter fields (source, screening, diffusion) are grid textures with
uniform cubic B-spline interpolation.  Texel values are used directly as
spline coefficients (no prefiltering), so the interpolant is C-squared,
which the transformed screening coefficient needs (it takes a Laplacian of
the diffusion field).  Points outside the texture extent clamp to the edge
texels.

The backward operations scatter adjoint values into a
:class:`GradientBuffer` with the same footprint weights the forward
evaluation uses, so ``<buffer, dtheta>`` equals the directional derivative
of the forward evaluation exactly.
"""

from __future__ import annotations

import numpy as np


def _bspline_weights(t: np.ndarray):
    """Uniform cubic B-spline tap weights and their t-derivatives.

    Returns (w, dw, d2w), each of shape (n, 4), for taps at offsets
    -1, 0, 1, 2 relative to the base texel; t in [0, 1).
    Weights sum to 1, dw and d2w sum to 0.
    """
    t2 = t * t
    t3 = t2 * t
    w = np.stack(
        [
            (1.0 - 3.0 * t + 3.0 * t2 - t3) / 6.0,
            (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0,
            (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0,
            t3 / 6.0,
        ],
        axis=-1,
    )
    dw = np.stack(
        [
            (-1.0 + 2.0 * t - t2) / 2.0,
            (-4.0 * t + 3.0 * t2) / 2.0,
            (1.0 + 2.0 * t - 3.0 * t2) / 2.0,
            t2 / 2.0,
        ],
        axis=-1,
    )
    d2w = np.stack([1.0 - t, 3.0 * t - 2.0, 1.0 - 3.0 * t, t], axis=-1)
    return w, dw, d2w


class GridTexture:
    """2D texture over an axis-aligned extent, cubic B-spline interpolated.

    ``values`` has shape (ny, nx), row-major with rows along y.
    """

    def __init__(self, values: np.ndarray, extent):
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("texture values must be 2D")
        self.extent = tuple(float(v) for v in extent)  # (x0, x1, y0, y1)
        x0, x1, y0, y1 = self.extent
        if x1 <= x0 or y1 <= y0:
            raise ValueError("texture extent must be non-degenerate")
        self.ny, self.nx = self.values.shape
        self.hx = (x1 - x0) / self.nx
        self.hy = (y1 - y0) / self.ny

    @classmethod
    def constant(cls, value: float, extent, nx: int = 16, ny: int = 16) -> "GridTexture":
        return cls(np.full((ny, nx), float(value)), extent)

    def copy(self) -> "GridTexture":
        return GridTexture(self.values.copy(), self.extent)

    def _taps(self, x: np.ndarray):
        x0, _, y0, _ = self.extent
        u = (x[:, 0] - x0) / self.hx - 0.5
        v = (x[:, 1] - y0) / self.hy - 0.5
        iu = np.floor(u)
        iv = np.floor(v)
        tu = u - iu
        tv = v - iv
        offs = np.arange(-1, 3)
        ix = np.clip(iu[:, None].astype(np.int64) + offs[None, :], 0, self.nx - 1)
        iy = np.clip(iv[:, None].astype(np.int64) + offs[None, :], 0, self.ny - 1)
        return ix, iy, tu, tv

    def eval(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ix, iy, tu, tv = self._taps(x)
        wx, _, _ = _bspline_weights(tu)
        wy, _, _ = _bspline_weights(tv)
        vals = self.values[iy[:, :, None], ix[:, None, :]]  # (n, 4y, 4x)
        return np.einsum("nj,nk,njk->n", wy, wx, vals)

    def grad_laplacian(self, x: np.ndarray):
        """Value, spatial gradient and Laplacian of the interpolant.

        Derivatives are analytic in the spline basis, not finite
        differences of texels.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ix, iy, tu, tv = self._taps(x)
        wx, dwx, d2wx = _bspline_weights(tu)
        wy, dwy, d2wy = _bspline_weights(tv)
        vals = self.values[iy[:, :, None], ix[:, None, :]]
        val = np.einsum("nj,nk,njk->n", wy, wx, vals)
        gx = np.einsum("nj,nk,njk->n", wy, dwx, vals) / self.hx
        gy = np.einsum("nj,nk,njk->n", dwy, wx, vals) / self.hy
        lap = (
            np.einsum("nj,nk,njk->n", wy, d2wx, vals) / (self.hx * self.hx)
            + np.einsum("nj,nk,njk->n", d2wy, wx, vals) / (self.hy * self.hy)
        )
        return val, np.stack([gx, gy], axis=1), lap

    def backward(self, buf: "GradientBuffer", x: np.ndarray, delta: np.ndarray) -> None:
        """Scatter d(loss)/d(eval) into per-texel gradients: g += delta * w."""
        self.backward_full(buf, x, d_value=delta)

    def backward_full(
        self,
        buf: "GradientBuffer",
        x: np.ndarray,
        d_value: np.ndarray | None = None,
        d_grad: np.ndarray | None = None,
        d_lap: np.ndarray | None = None,
    ) -> None:
        """Scatter adjoints of value, gradient and Laplacian in one pass.

        Accumulates ``d_value * w + d_grad . grad(w) + d_lap * lap(w)`` per
        footprint texel; duplicated (clamped) taps accumulate additively,
        matching finite differences of the clamped evaluation.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        ix, iy, tu, tv = self._taps(x)
        wx, dwx, d2wx = _bspline_weights(tu)
        wy, dwy, d2wy = _bspline_weights(tv)
        contrib = np.zeros((n, 4, 4))
        if d_value is not None:
            contrib += np.asarray(d_value).reshape(n, 1, 1) * (
                wy[:, :, None] * wx[:, None, :]
            )
        if d_grad is not None:
            d_grad = np.atleast_2d(np.asarray(d_grad, dtype=np.float64))
            contrib += (d_grad[:, 0] / self.hx).reshape(n, 1, 1) * (
                wy[:, :, None] * dwx[:, None, :]
            )
            contrib += (d_grad[:, 1] / self.hy).reshape(n, 1, 1) * (
                dwy[:, :, None] * wx[:, None, :]
            )
        if d_lap is not None:
            d_lap = np.asarray(d_lap).reshape(n, 1, 1)
            contrib += d_lap * (
                wy[:, :, None] * d2wx[:, None, :] / (self.hx * self.hx)
                + d2wy[:, :, None] * wx[:, None, :] / (self.hy * self.hy)
            )
        flat = (iy[:, :, None] * self.nx + ix[:, None, :]).ravel()
        buf.values += np.bincount(
            flat, weights=contrib.ravel(), minlength=self.nx * self.ny
        ).reshape(self.ny, self.nx)


class GradientBuffer:
    """Additive per-texel gradient accumulator matching one texture."""

    def __init__(self, texture: GridTexture):
        self.values = np.zeros_like(texture.values)

    def clear(self) -> None:
        self.values[:] = 0.0

    def finalized(self, n_walks: int) -> np.ndarray:
        """Mean per-walk contribution: the Monte Carlo gradient estimate."""
        return self.values / float(n_walks)


class ConstantField:
    """Spatially constant parameter field."""

    def __init__(self, value: float):
        self.value = float(value)

    def eval(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.full(x.shape[0], self.value)

    def grad_laplacian(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        return (
            np.full(n, self.value),
            np.zeros((n, x.shape[1])),
            np.zeros(n),
        )


Field = GridTexture | ConstantField

# spec-level operation aliases


def tex_eval(t: GridTexture, x: np.ndarray) -> np.ndarray:
    return t.eval(x)


def tex_grad_laplacian(t: GridTexture, x: np.ndarray):
    return t.grad_laplacian(x)


def tex_backward(t: GridTexture, g: GradientBuffer, x: np.ndarray, delta) -> None:
    t.backward(g, x, np.asarray(delta, dtype=np.float64))


class BoundaryCondition:
    """Dirichlet boundary values.

    kinds:
      constant        one value everywhere
      per_primitive   one value per domain primitive index
      linear          g(x) = a . x + b (analytic preset, e.g. harmonic)
      texture         GridTexture evaluated at the boundary point
    """

    def __init__(self, kind: str, **params):
        self.kind = kind
        if kind == "constant":
            self.value = float(params["value"])
        elif kind == "per_primitive":
            self.values = [float(v) for v in params["values"]]
        elif kind == "linear":
            self.a = np.asarray(params["a"], dtype=np.float64)
            self.b = float(params.get("b", 0.0))
        elif kind == "texture":
            self.texture = params["texture"]
        else:
            raise ValueError(f"unknown boundary condition kind {kind!r}")

    @classmethod
    def constant(cls, value: float) -> "BoundaryCondition":
        return cls("constant", value=value)

    def eval(self, x: np.ndarray, prim_idx: np.ndarray | None = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == "constant":
            return np.full(x.shape[0], self.value)
        if self.kind == "per_primitive":
            if prim_idx is None:
                raise ValueError("per-primitive boundary values need primitive ids")
            table = np.asarray(self.values)
            return table[np.asarray(prim_idx)]
        if self.kind == "linear":
            return x @ self.a + self.b
        return self.texture.eval(x)


# Positive reparameterization for fields with physical sign constraints
# (screening >= 0, diffusion > 0): value = softplus(latent), smooth and
# strictly increasing, so optimization runs on the unconstrained latent.


def positive_map(latent: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, latent)


def positive_map_derivative(latent: np.ndarray) -> np.ndarray:
    # d softplus / d latent = sigmoid(latent)
    out = np.empty_like(np.asarray(latent, dtype=np.float64))
    lat = np.asarray(latent, dtype=np.float64)
    pos = lat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-lat[pos]))
    e = np.exp(lat[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def positive_map_inverse(value: np.ndarray) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("positive map inverse needs strictly positive values")
    return v + np.log1p(-np.exp(-v))
