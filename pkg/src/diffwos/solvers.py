"""Primal walk-on-spheres estimators and the shared walk engine.

Three estimators run on one engine: plain WoS for the Poisson equation
(zero screening), screened-Poisson WoS with a throughput factor per step,
and delta-tracking WoS for the heterogeneous elliptic equation, where each
step samples either a volume event (null-collision style reweighting) or a
surface event, mutually exclusively.

The engine is batched: a lane per walk, index-compressed as walks
terminate.  A batch of one lane is bit-identical to any larger batch
because every operation is elementwise per lane.  The same engine also
runs the gradient replay passes (driven from :mod:`diffwos.adjoint`); a
single code path for primal and replay is what guarantees that a replayed
walk consumes the exact same draw sequence and visits a bitwise-identical
vertex sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as kr
from .fields import BoundaryCondition, ConstantField, Field, GridTexture
from .geometry import Domain, EpsilonShell
from .rng import PathSeed, SamplerBatch, _GOLDEN, _mix64


class SolverError(RuntimeError):
    pass


class MaxStepsExceeded(SolverError):
    pass


class NonpositiveAlpha(SolverError):
    pass


class ReplayDivergence(SolverError):
    pass


POISSON = "poisson"
SCREENED = "screened"
ELLIPTIC = "elliptic"
_KINDS = (POISSON, SCREENED, ELLIPTIC)

# Aborted walks contribute their accumulated estimate without a boundary
# term; beyond this fraction the run is considered biased and fails loudly.
ABORT_FRACTION_LIMIT = 1e-4

# Lane-chunk size for point passes; fixed so that reductions are
# deterministic regardless of thread count.
CHUNK_LANES = 1 << 17


@dataclass(eq=False)
class PDEProblem:
    kind: str
    domain: Domain
    f: Field
    g: BoundaryCondition
    sigma: "float | Field" = 0.0
    alpha: Field | None = None
    sigma_bar: float | None = None
    eps: float | None = None
    max_steps: int = 10_000
    radial_tol: float = 1e-10

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown PDE kind {self.kind!r}")
        if self.eps is None:
            self.eps = self.domain.default_epsilon()
        EpsilonShell(self.eps).validate_for(self.domain)
        if self.kind == SCREENED and not np.isscalar(self.sigma):
            raise ValueError("screened problems take a scalar screening coefficient")
        if self.kind == SCREENED and self.sigma < 0:
            raise ValueError("screening coefficient must be nonnegative")
        if self.kind == ELLIPTIC:
            if self.alpha is None:
                raise ValueError("elliptic problems need a diffusion field")
            if np.isscalar(self.sigma):
                self.sigma = ConstantField(float(self.sigma))
            if self.sigma_bar is None:
                self.sigma_bar = pick_sigma_bar(self)
            if self.sigma_bar <= 0:
                raise ValueError("fictitious screening must be positive")

    @property
    def kernel_sigma(self) -> float:
        """Screening used by kernel evaluations (constant per problem)."""
        if self.kind == POISSON:
            return 0.0
        if self.kind == SCREENED:
            return float(self.sigma)
        return float(self.sigma_bar)


@dataclass
class Estimate:
    mean: float
    variance_of_mean: float
    n_walks: int

    @property
    def std_error(self) -> float:
        return float(np.sqrt(self.variance_of_mean))


@dataclass
class WalkState:
    """Snapshot of one walk after a step (debug/instrumentation surface)."""

    position: np.ndarray
    beta: float
    u_acc: float
    step: int
    seed: PathSeed


class WalkTrace:
    """Per-step instrumentation: vertex sequence, events, throughput."""

    def __init__(self):
        self.steps: list[dict] = []

    def record(self, **arrays) -> None:
        self.steps.append({k: np.copy(v) for k, v in arrays.items()})

    def bitwise_equal(self, other: "WalkTrace") -> bool:
        if len(self.steps) != len(other.steps):
            return False
        for a, b in zip(self.steps, other.steps):
            if a.keys() != b.keys():
                return False
            for k in a:
                if not np.array_equal(a[k], b[k]):
                    return False
        return True


@dataclass
class WalkBatchResult:
    values: np.ndarray
    aborted: np.ndarray
    n_steps: np.ndarray
    first_move: np.ndarray


@dataclass
class _AdjointCtx:
    """Replay-mode context threaded through the engine by diffwos.adjoint."""

    delta_u: np.ndarray
    u_primal: np.ndarray
    grads: object  # ParamGradients, duck-typed to avoid import cycles
    expect_first_move: np.ndarray | None = None


def _hash_positions(x: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(x, dtype=np.float64).view(np.uint64)
    bits = bits.reshape(x.shape[0], -1)
    with np.errstate(over="ignore"):
        h = bits[:, 0] + _GOLDEN
        for c in range(1, bits.shape[1]):
            h = _mix64(h) ^ (bits[:, c] + _GOLDEN)
    return _mix64(h)


def sigma_prime_values(problem: PDEProblem, x: np.ndarray) -> np.ndarray:
    """Transformed screening of the elliptic-to-screened reduction."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sval = problem.sigma.eval(x)
    aval, agrad, alap = problem.alpha.grad_laplacian(x)
    if np.any(aval <= 0.0):
        raise NonpositiveAlpha("diffusion coefficient must stay positive")
    grad2 = np.sum(agrad * agrad, axis=1)
    return sval / aval + 0.5 * (alap / aval - 0.5 * grad2 / (aval * aval))


def sigma_prime(problem: PDEProblem, x) -> float:
    return float(sigma_prime_values(problem, np.asarray(x, dtype=np.float64))[0])


def pick_sigma_bar(problem: PDEProblem, probe: int = 64, safety: float = 1.5) -> float:
    """Fictitious screening: safety margin over the densest probe of sigma'.

    Keeping sigma_bar above sigma' keeps volume weights nonnegative (a
    variance choice, not a correctness requirement); the floor keeps it
    strictly positive when sigma' is everywhere tiny or negative.
    """
    dom = problem.domain
    axes = [
        np.linspace(dom.bbox_lo[d], dom.bbox_hi[d], probe) for d in range(dom.dim)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    inside = dom.signed_distance(pts) > problem.eps
    if not np.any(inside):
        raise ValueError("no interior probe points for sigma_bar selection")
    sp = sigma_prime_values(problem, pts[inside])
    return max(safety * float(sp.max()), 1e-2)


# ----------------------------------------------------------------------
# the walk engine


def _draw_direction(sb: SamplerBatch, lanes: np.ndarray, dim: int) -> np.ndarray:
    u1 = sb.draw(lanes)
    if dim == 2:
        return kr.uniform_direction(2, u1)
    u2 = sb.draw(lanes)
    return kr.uniform_direction(3, u1, u2)


def _walk_pass(
    problem: PDEProblem,
    x0: np.ndarray,
    walk_indices: np.ndarray,
    experiment_seed: int,
    adjoint: _AdjointCtx | None = None,
    trace: WalkTrace | None = None,
) -> WalkBatchResult:
    dom = problem.domain
    dim = dom.dim
    kind = problem.kind
    sigma_k = problem.kernel_sigma
    eps = problem.eps
    tol = problem.radial_tol

    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    x = x0.copy()
    beta = np.ones(n)
    u = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    aborted = np.zeros(n, dtype=bool)
    first_move = np.zeros(n, dtype=np.uint64)
    sb = SamplerBatch(experiment_seed, walk_indices)

    grads = adjoint.grads if adjoint is not None else None
    if adjoint is not None:
        u_rem = adjoint.u_primal.astype(np.float64).copy()
        delta_u = np.asarray(adjoint.delta_u, dtype=np.float64)

    if kind == ELLIPTIC:
        ax = problem.alpha.eval(x)
        if np.any(ax <= 0.0):
            raise NonpositiveAlpha("diffusion coefficient must stay positive")
        sigma_bar = float(problem.sigma_bar)

    idx = np.arange(n)
    while idx.size:
        d = dom.signed_distance(x[idx])
        shell = d < eps
        if np.any(shell):
            fin = idx[shell]
            bp, prim = dom.closest_boundary(x[fin])
            u[fin] += beta[fin] * problem.g.eval(bp, prim)
            idx = idx[~shell]
            d = d[~shell]
        if idx.size == 0:
            break
        over = steps[idx] >= problem.max_steps
        if np.any(over):
            aborted[idx[over]] = True
            idx = idx[~over]
            d = d[~over]
        if idx.size == 0:
            break
        # zero throughput: every remaining contribution is exactly zero
        dead = beta[idx] == 0.0
        if np.any(dead):
            idx = idx[~dead]
            d = d[~dead]
        if idx.size == 0:
            break

        R = d
        # source sample inside the current ball, proportional to the kernel
        u_r = sb.draw(idx)
        r = kr.sample_green_radius(u_r, R, sigma_k, dim, tol)
        y = x[idx] + r[:, None] * _draw_direction(sb, idx, dim)
        gn = kr.green_norm(R, sigma_k, dim)
        fy = problem.f.eval(y)
        if kind == ELLIPTIC:
            ay = problem.alpha.eval(y)
            if np.any(ay <= 0.0):
                raise NonpositiveAlpha("diffusion coefficient must stay positive")
            a_here = ax[idx]
            src_fac = 1.0 / np.sqrt(a_here * ay)
            ek = fy * gn * src_fac
        else:
            ek = fy * gn
        u[idx] += beta[idx] * ek

        if adjoint is not None:
            wsrc = delta_u[idx] * beta[idx]
            if grads.f is not None and isinstance(problem.f, GridTexture):
                fac = gn * src_fac if kind == ELLIPTIC else gn
                problem.f.backward(grads.f, y, wsrc * fac)
            if kind == ELLIPTIC and grads.alpha is not None and isinstance(
                problem.alpha, GridTexture
            ):
                # d ek / d alpha texels through (alpha(x) alpha(y))^(-1/2)
                problem.alpha.backward(grads.alpha, y, wsrc * ek * (-0.5) / ay)
                problem.alpha.backward(grads.alpha, x[idx], wsrc * ek * (-0.5) / a_here)
            if kind == SCREENED and grads.track_sigma_scalar and sigma_k > 0.0:
                # detached integrand derivative: f(y) dG/dsigma / pdf_detached
                gv = kr.green_value(r, R, sigma_k, dim)
                dgv = kr.d_green_dsigma(r, R, sigma_k, dim)
                grads.sigma_scalar += float(
                    np.sum(wsrc * fy * dgv * gn / gv)
                )
            u_rem[idx] -= ek

        if trace is not None:
            trace.record(lanes=idx, y=y, radius=r, beta=beta[idx])

        # transition to the next vertex
        if kind == ELLIPTIC:
            u_ev = sb.draw(idx)
            vol = u_ev < gn * sigma_bar
            x_new = np.empty((idx.size, dim))
            mu = np.empty(idx.size)
            a_new = np.empty(idx.size)
            ev = np.where(vol, 1, 0)
            if np.any(vol):
                iv = idx[vol]
                u_r2 = sb.draw(iv)
                r2 = kr.sample_green_radius(u_r2, R[vol], sigma_k, dim, tol)
                xv = x[iv] + r2[:, None] * _draw_direction(sb, iv, dim)
                sv = problem.sigma.eval(xv)
                av, agv, alv = problem.alpha.grad_laplacian(xv)
                if np.any(av <= 0.0):
                    raise NonpositiveAlpha("diffusion coefficient must stay positive")
                g2 = np.sum(agv * agv, axis=1)
                sp = sv / av + 0.5 * (alv / av - 0.5 * g2 / (av * av))
                ratio = np.sqrt(av / a_here[vol])
                mu_v = (sigma_bar - sp) / sigma_bar * ratio
                if adjoint is not None:
                    safe = mu_v != 0.0
                    wmu = np.where(
                        safe,
                        delta_u[iv] * beta[iv] * u_rem[iv] / np.where(safe, mu_v, 1.0),
                        0.0,
                    )
                    if grads.sigma_tex is not None and isinstance(
                        problem.sigma, GridTexture
                    ):
                        problem.sigma.backward(
                            grads.sigma_tex, xv, wmu * (-ratio / (sigma_bar * av))
                        )
                    if grads.alpha is not None and isinstance(problem.alpha, GridTexture):
                        # mu = (1 - sigma'/sbar) sqrt(a'/a); chain through the
                        # ratio and through sigma' (value, gradient, Laplacian)
                        dmu_da_val = mu_v / (2.0 * av) + (-ratio / sigma_bar) * (
                            -sv / (av * av)
                            - alv / (2.0 * av * av)
                            + g2 / (2.0 * av**3)
                        )
                        dmu_dgrad = (ratio / (2.0 * sigma_bar * av * av))[:, None] * agv
                        dmu_dlap = -ratio / (2.0 * sigma_bar * av)
                        problem.alpha.backward_full(
                            grads.alpha,
                            xv,
                            d_value=wmu * dmu_da_val,
                            d_grad=wmu[:, None] * dmu_dgrad,
                            d_lap=wmu * dmu_dlap,
                        )
                        problem.alpha.backward(
                            grads.alpha, x[iv], wmu * mu_v * (-0.5) / a_here[vol]
                        )
                x_new[vol] = xv
                mu[vol] = mu_v
                a_new[vol] = av
            if np.any(~vol):
                isf = idx[~vol]
                xs = x[isf] + R[~vol][:, None] * _draw_direction(sb, isf, dim)
                asf = problem.alpha.eval(xs)
                if np.any(asf <= 0.0):
                    raise NonpositiveAlpha("diffusion coefficient must stay positive")
                mu_s = np.sqrt(asf / a_here[~vol])
                if adjoint is not None and grads.alpha is not None and isinstance(
                    problem.alpha, GridTexture
                ):
                    wmu = delta_u[isf] * beta[isf] * u_rem[isf] / mu_s
                    problem.alpha.backward(grads.alpha, xs, wmu * mu_s / (2.0 * asf))
                    problem.alpha.backward(
                        grads.alpha, x[isf], -wmu * mu_s / (2.0 * a_here[~vol])
                    )
                x_new[~vol] = xs
                mu[~vol] = mu_s
                a_new[~vol] = asf
            ax[idx] = a_new
        else:
            x_new = x[idx] + R[:, None] * _draw_direction(sb, idx, dim)
            mu = kr.throughput_factor(R, sigma_k, dim)
            ev = np.zeros(idx.size, dtype=np.int64)
            if (
                adjoint is not None
                and kind == SCREENED
                and grads.track_sigma_scalar
                and sigma_k > 0.0
            ):
                dmu = kr.d_throughput_dsigma(R, sigma_k, dim)
                grads.sigma_scalar += float(
                    np.sum(delta_u[idx] * beta[idx] * u_rem[idx] * dmu / mu)
                )

        fresh = steps[idx] == 0
        if np.any(fresh):
            digest = _hash_positions(x_new[fresh])
            first_move[idx[fresh]] = digest
            if adjoint is not None and adjoint.expect_first_move is not None:
                expect = adjoint.expect_first_move[idx[fresh]]
                if np.any(expect != digest):
                    raise ReplayDivergence(
                        "replayed first step differs from the primal walk"
                    )

        beta[idx] = beta[idx] * mu
        if adjoint is not None:
            safe_mu = mu != 0.0
            u_rem[idx] = np.where(safe_mu, u_rem[idx] / np.where(safe_mu, mu, 1.0), 0.0)
        if trace is not None:
            trace.record(lanes=idx, x_new=x_new, event=ev)
        x[idx] = x_new
        steps[idx] += 1

    if adjoint is not None and not np.array_equal(u, adjoint.u_primal):
        raise ReplayDivergence("replayed walk value differs from the primal value")
    return WalkBatchResult(u, aborted, steps, first_move)


# ----------------------------------------------------------------------
# public single-walk estimators


def _solve_single(problem: PDEProblem, x0, seed: PathSeed, trace=None) -> float:
    res = _walk_pass(
        problem,
        np.asarray(x0, dtype=np.float64)[None, :],
        np.asarray([seed.walk_index], dtype=np.uint64),
        seed.experiment_seed,
        trace=trace,
    )
    if res.aborted[0]:
        raise MaxStepsExceeded(f"walk exceeded {problem.max_steps} steps")
    return float(res.values[0])


def solve_poisson(problem: PDEProblem, x0, seed: PathSeed) -> float:
    """One-sample unbiased WoS estimate of the Poisson solution at x0."""
    if problem.kind != POISSON:
        raise ValueError("solve_poisson needs a Poisson problem")
    return _solve_single(problem, x0, seed)


def solve_screened(problem: PDEProblem, x0, seed: PathSeed) -> float:
    """One-sample unbiased estimate for the screened Poisson equation."""
    if problem.kind != SCREENED:
        raise ValueError("solve_screened needs a screened-Poisson problem")
    return _solve_single(problem, x0, seed)


def solve_elliptic(problem: PDEProblem, x0, seed: PathSeed) -> float:
    """One-sample delta-tracking estimate for the elliptic equation."""
    if problem.kind != ELLIPTIC:
        raise ValueError("solve_elliptic needs an elliptic problem")
    return _solve_single(problem, x0, seed)


def walk_states(problem: PDEProblem, x0, seed: PathSeed) -> list[WalkState]:
    """Instrumented single walk: state after every step (debug surface)."""
    trace = WalkTrace()
    _solve_single(problem, x0, seed, trace=trace)
    states = []
    acc = 0.0
    for rec in trace.steps:
        if "x_new" not in rec:
            continue
        states.append(
            WalkState(
                position=rec["x_new"][0],
                beta=float("nan"),
                u_acc=acc,
                step=len(states) + 1,
                seed=seed,
            )
        )
    # beta per step is recorded on the source half of the trace
    betas = [float(rec["beta"][0]) for rec in trace.steps if "beta" in rec]
    for st, b in zip(states, betas):
        st.beta = b
    return states


# ----------------------------------------------------------------------
# point passes


@dataclass
class PointPass:
    estimates: list[Estimate]
    walk_values: np.ndarray | None
    first_move: np.ndarray | None
    aborted: int
    total_steps: int
    n_lanes: int

    @property
    def means(self) -> np.ndarray:
        return np.array([e.mean for e in self.estimates])

    @property
    def mean_steps(self) -> float:
        return self.total_steps / max(1, self.n_lanes)


def _point_chunks(n_points: int, n_walks: int) -> list[tuple[int, int]]:
    per = max(1, CHUNK_LANES // max(1, n_walks))
    return [(i, min(i + per, n_points)) for i in range(0, n_points, per)]


def _run_chunk(problem, points, n_walks, seed, offset, lo, hi, keep_values, trace):
    pts = points[lo:hi]
    m = pts.shape[0]
    x0 = np.repeat(pts, n_walks, axis=0)
    widx = offset + (
        np.arange(lo, hi, dtype=np.uint64)[:, None] * np.uint64(n_walks)
        + np.arange(n_walks, dtype=np.uint64)[None, :]
    ).ravel()
    res = _walk_pass(problem, x0, widx, seed, trace=trace)
    vals = res.values.reshape(m, n_walks)
    means = vals.mean(axis=1)
    if n_walks > 1:
        dev = vals - means[:, None]
        var_mean = np.sum(dev * dev, axis=1) / (n_walks - 1) / n_walks
    else:
        var_mean = np.zeros(m)
    return (
        means,
        var_mean,
        vals if keep_values else None,
        res.first_move.reshape(m, n_walks) if keep_values else None,
        int(res.aborted.sum()),
        int(res.n_steps.sum()),
    )


def run_point_walks(
    problem: PDEProblem,
    points: np.ndarray,
    n_walks: int,
    seed: int,
    walk_index_offset: int = 0,
    keep_values: bool = False,
    trace: WalkTrace | None = None,
    threads: int = 1,
) -> PointPass:
    """Independent walks per query point with deterministic reduction.

    Walk ``j`` of point ``i`` uses PathSeed ``(seed, offset + i*n_walks + j)``.
    Chunk boundaries depend only on (n_points, n_walks), so results are
    identical for any thread count.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n_points = points.shape[0]
    offset = np.uint64(walk_index_offset)
    chunks = _point_chunks(n_points, n_walks)

    def task(bounds):
        lo, hi = bounds
        return _run_chunk(
            problem, points, n_walks, seed, offset, lo, hi, keep_values, trace
        )

    from ._parallel import map_ordered

    parts = map_ordered(task, chunks, threads)

    estimates: list[Estimate] = []
    values = np.empty((n_points, n_walks)) if keep_values else None
    digests = np.empty((n_points, n_walks), dtype=np.uint64) if keep_values else None
    aborted = 0
    total_steps = 0
    for (lo, hi), (means, var_mean, vals, digs, ab, st) in zip(chunks, parts):
        for k in range(hi - lo):
            estimates.append(Estimate(float(means[k]), float(var_mean[k]), n_walks))
        if keep_values:
            values[lo:hi] = vals
            digests[lo:hi] = digs
        aborted += ab
        total_steps += st

    n_lanes = n_points * n_walks
    if aborted > ABORT_FRACTION_LIMIT * n_lanes:
        raise MaxStepsExceeded(
            f"{aborted}/{n_lanes} walks exceeded max_steps={problem.max_steps}"
        )
    return PointPass(estimates, values, digests, aborted, total_steps, n_lanes)


def estimate_solution(
    problem: PDEProblem,
    points: np.ndarray,
    n_walks: int,
    seed: int,
    walk_index_offset: int = 0,
    threads: int = 1,
) -> list[Estimate]:
    """Per-point mean and standard-error estimates over n_walks walks."""
    return run_point_walks(
        problem,
        points,
        n_walks,
        seed,
        walk_index_offset=walk_index_offset,
        threads=threads,
    ).estimates
