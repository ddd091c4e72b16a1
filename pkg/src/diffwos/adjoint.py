"""Reverse-mode derivative estimators by path replay.

A gradient pass reruns each walk from its primal PathSeed.  The replay
visits the identical vertex sequence (same engine, same draws) while
carrying the primal walk value ``u`` as the remaining-tail estimate: every
step subtracts the local source contribution and divides out the detached
throughput factor, so at each vertex ``u`` estimates the solution there.
Per step the pass emits

* source-term parameter gradients, weighted by loss gradient and
  throughput, scattered through the texture footprints, and
* throughput-factor gradients, weighted by loss gradient and the remaining
  ``u`` divided by the detached factor,

all with detached sampling: the random positions and densities are never
differentiated, only the integrand factors.  Memory per walk is constant
in the walk length; cost is linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import GradientBuffer, GridTexture
from .rng import PathSeed
from .solvers import (
    ELLIPTIC,
    POISSON,
    SCREENED,
    MaxStepsExceeded,
    PDEProblem,
    ReplayDivergence,
    WalkTrace,
    _AdjointCtx,
    _point_chunks,
    _walk_pass,
)


@dataclass
class AdjointInput:
    """Pairing of one primal walk with its loss sensitivity.

    ``u_primal`` is the value returned by that walk (not a per-point
    mean) and ``seed`` must equal the primal walk's seed; the replay cannot
    reproduce the trajectory otherwise.
    """

    x0: np.ndarray
    u_primal: float
    delta_u: float
    seed: PathSeed
    first_move: int | None = None


class ParamGradients:
    """Gradient accumulators for the optimized parameter set.

    One buffer per optimized field plus a scalar slot for the scalar
    screening coefficient; contributions are additive across walks and
    cleared between optimizer iterations.
    """

    def __init__(
        self,
        f: GradientBuffer | None = None,
        sigma_tex: GradientBuffer | None = None,
        alpha: GradientBuffer | None = None,
        track_sigma_scalar: bool = False,
    ):
        self.f = f
        self.sigma_tex = sigma_tex
        self.alpha = alpha
        self.track_sigma_scalar = track_sigma_scalar
        self.sigma_scalar = 0.0

    @classmethod
    def for_problem(cls, problem: PDEProblem, params: list[str]) -> "ParamGradients":
        kwargs = {}
        for p in params:
            if p == "f":
                kwargs["f"] = GradientBuffer(problem.f)
            elif p == "sigma":
                kwargs["sigma_tex"] = GradientBuffer(problem.sigma)
            elif p == "alpha":
                kwargs["alpha"] = GradientBuffer(problem.alpha)
            elif p == "sigma_scalar":
                kwargs["track_sigma_scalar"] = True
            else:
                raise ValueError(f"unknown parameter {p!r}")
        return cls(**kwargs)

    def clear(self) -> None:
        for buf in (self.f, self.sigma_tex, self.alpha):
            if buf is not None:
                buf.clear()
        self.sigma_scalar = 0.0

    def add(self, other: "ParamGradients") -> None:
        for mine, theirs in (
            (self.f, other.f),
            (self.sigma_tex, other.sigma_tex),
            (self.alpha, other.alpha),
        ):
            if mine is not None:
                mine.values += theirs.values
        self.sigma_scalar += other.sigma_scalar

    def spawn_empty(self) -> "ParamGradients":
        out = ParamGradients(track_sigma_scalar=self.track_sigma_scalar)
        for name in ("f", "sigma_tex", "alpha"):
            buf = getattr(self, name)
            if buf is not None:
                fresh = GradientBuffer.__new__(GradientBuffer)
                fresh.values = np.zeros_like(buf.values)
                setattr(out, name, fresh)
        return out


def _grad_single(problem: PDEProblem, a: AdjointInput, grads: ParamGradients) -> None:
    expect = None
    if a.first_move is not None:
        expect = np.asarray([a.first_move], dtype=np.uint64)
    ctx = _AdjointCtx(
        delta_u=np.asarray([a.delta_u], dtype=np.float64),
        u_primal=np.asarray([a.u_primal], dtype=np.float64),
        grads=grads,
        expect_first_move=expect,
    )
    res = _walk_pass(
        problem,
        np.asarray(a.x0, dtype=np.float64)[None, :],
        np.asarray([a.seed.walk_index], dtype=np.uint64),
        a.seed.experiment_seed,
        adjoint=ctx,
    )
    if res.aborted[0]:
        raise MaxStepsExceeded(f"walk exceeded {problem.max_steps} steps")


def grad_poisson(problem: PDEProblem, a: AdjointInput, grads: ParamGradients) -> None:
    """Differential WoS for the Poisson equation.

    The throughput is parameter independent, so the primal value in ``a``
    is not consulted beyond the replay-consistency check; the replay
    scatters the per-step source weights directly.
    """
    if problem.kind != POISSON:
        raise ValueError("grad_poisson needs a Poisson problem")
    _grad_single(problem, a, grads)


def grad_screened(problem: PDEProblem, a: AdjointInput, grads: ParamGradients) -> None:
    """Path-replay gradients for the screened Poisson equation."""
    if problem.kind != SCREENED:
        raise ValueError("grad_screened needs a screened-Poisson problem")
    _grad_single(problem, a, grads)


def grad_elliptic(problem: PDEProblem, a: AdjointInput, grads: ParamGradients) -> None:
    """Path-replay delta-tracking gradients for the elliptic equation."""
    if problem.kind != ELLIPTIC:
        raise ValueError("grad_elliptic needs an elliptic problem")
    _grad_single(problem, a, grads)


def gradient_pass(
    problem: PDEProblem,
    points: np.ndarray,
    n_walks: int,
    seed: int,
    delta_u: np.ndarray,
    walk_values: np.ndarray,
    grads: ParamGradients,
    walk_index_offset: int = 0,
    first_move: np.ndarray | None = None,
    trace: WalkTrace | None = None,
    threads: int = 1,
) -> None:
    """Replay every (point, walk) pair and accumulate parameter gradients.

    ``walk_values`` are the per-walk primal values from the paired primal
    pass (same seed and offset); ``delta_u`` is the per-point loss
    gradient.  Buffers receive the sum over walks; divide by ``n_walks``
    (see GradientBuffer.finalized) to get the gradient of the per-point
    mean.  Chunking matches the primal pass, so the reduction order is
    deterministic and independent of the thread count.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n_points = points.shape[0]
    delta_u = np.asarray(delta_u, dtype=np.float64)
    offset = np.uint64(walk_index_offset)
    chunks = _point_chunks(n_points, n_walks)

    def task(bounds):
        lo, hi = bounds
        pts = points[lo:hi]
        m = pts.shape[0]
        x0 = np.repeat(pts, n_walks, axis=0)
        widx = offset + (
            np.arange(lo, hi, dtype=np.uint64)[:, None] * np.uint64(n_walks)
            + np.arange(n_walks, dtype=np.uint64)[None, :]
        ).ravel()
        part = grads.spawn_empty()
        ctx = _AdjointCtx(
            delta_u=np.repeat(delta_u[lo:hi], n_walks),
            u_primal=walk_values[lo:hi].reshape(m * n_walks),
            grads=part,
            expect_first_move=(
                first_move[lo:hi].reshape(m * n_walks)
                if first_move is not None
                else None
            ),
        )
        _walk_pass(problem, x0, widx, seed, adjoint=ctx, trace=trace)
        return part

    from ._parallel import map_ordered

    for part in map_ordered(task, chunks, threads):
        grads.add(part)


def central_difference(fn, x: float, h: float) -> float:
    """Plain central difference; the harness under the FD oracle."""
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


def perturbed_problem(problem: PDEProblem, param: str, index, h: float) -> PDEProblem:
    """Copy of the problem with one parameter entry shifted by h.

    ``param`` is one of f / sigma / alpha / sigma_scalar; ``index`` is the
    flat texel index for texture parameters.  The fictitious screening of
    elliptic problems is carried over unchanged so that both finite
    difference evaluations run the identical estimator.
    """
    import copy

    p = copy.copy(problem)
    if param == "sigma_scalar":
        p.sigma = float(problem.sigma) + h
        return p
    field = getattr(problem, "f" if param == "f" else param)
    if not isinstance(field, GridTexture):
        raise ValueError(f"{param} is not a texture field")
    tex = field.copy()
    tex.values.flat[index] += h
    setattr(p, "f" if param == "f" else param, tex)
    return p


def fd_oracle(
    problem: PDEProblem,
    loss,
    theta_index: tuple[str, int | None],
    h: float,
    seed: int,
    n_walks: int = 1024,
    walk_index_offset: int = 0,
    threads: int = 1,
) -> float:
    """Central finite difference of the loss with common random numbers.

    Both evaluations run with identical seeds, which cancels most of the
    Monte Carlo noise; this estimator is the ground truth the replay
    gradients are validated against.
    """
    param, index = theta_index
    from .solvers import run_point_walks

    def loss_at(signed_h: float) -> float:
        p = perturbed_problem(problem, param, index, signed_h)
        res = run_point_walks(
            p,
            loss.points,
            n_walks,
            seed,
            walk_index_offset=walk_index_offset,
            threads=threads,
        )
        return loss.value(res.means)

    return (loss_at(h) - loss_at(-h)) / (2.0 * h)
