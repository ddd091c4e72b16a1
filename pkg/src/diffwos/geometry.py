"""Domain geometry: primitives, signed distances, closest-boundary queries.

A :class:`Domain` is a fixed collection of primitives (balls, axis-aligned
boxes, 2D polygons, open 2D segment walls).  The convention throughout is
that the domain interior is where the combined signed distance is
positive; each primitive contributes its own signed distance (flipped for
``hole`` primitives, which carve obstacles out of the interior) and the
domain takes the pointwise minimum.

All queries are pure and vectorized over an ``(n, dim)`` array of points;
the domain never mutates after construction, so queries are safe from any
thread.
"""

from __future__ import annotations

import numpy as np


class ExteriorPoint(ValueError):
    """A query point lies outside the domain interior."""


def _as_points(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x, False


class Ball:
    """Circle (2D) or sphere (3D). Interior of the shape is inside."""

    def __init__(self, center, radius: float, hole: bool = False):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.hole = bool(hole)
        if self.radius <= 0:
            raise ValueError("ball radius must be positive")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(x - self.center, axis=-1)
        sd = self.radius - d
        return -sd if self.hole else sd

    def closest_point(self, x: np.ndarray) -> np.ndarray:
        v = x - self.center
        d = np.linalg.norm(v, axis=-1, keepdims=True)
        # Tie-break at the exact center: project along +x (then the result
        # is the lexicographic choice among all equidistant points only for
        # hole-free use; it is documented and deterministic).
        unit = np.zeros_like(v)
        unit[:, 0] = 1.0
        safe = d > 0
        dirn = np.where(safe, np.divide(v, np.where(safe, d, 1.0)), unit)
        return self.center + self.radius * dirn

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.radius, self.center + self.radius

    def boundary_points(self, k: int) -> np.ndarray:
        if self.dim == 2:
            t = np.linspace(0.0, 2.0 * np.pi, k, endpoint=False)
            return self.center + self.radius * np.stack([np.cos(t), np.sin(t)], axis=1)
        # Fibonacci sphere
        i = np.arange(k, dtype=np.float64)
        z = 1.0 - 2.0 * (i + 0.5) / k
        phi = np.pi * (1.0 + np.sqrt(5.0)) * i
        r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
        return self.center + self.radius * pts


class AxisBox:
    """Axis-aligned box; interior of the shape is inside."""

    def __init__(self, lo, hi, hole: bool = False):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.hole = bool(hole)
        if np.any(self.hi <= self.lo):
            raise ValueError("box must have hi > lo on every axis")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        inside_gap = np.minimum(x - self.lo, self.hi - x)  # (n, dim)
        min_gap = inside_gap.min(axis=-1)
        clamped = np.clip(x, self.lo, self.hi)
        outside = np.linalg.norm(x - clamped, axis=-1)
        sd = np.where(min_gap >= 0.0, min_gap, -outside)
        return -sd if self.hole else sd

    def closest_point(self, x: np.ndarray) -> np.ndarray:
        n, dim = x.shape
        inside_gap = np.minimum(x - self.lo, self.hi - x)
        min_gap = inside_gap.min(axis=-1)
        out = np.clip(x, self.lo, self.hi)  # exterior points: clamp is on the boundary
        interior = min_gap > 0.0
        if np.any(interior):
            xi = x[interior]
            # candidate projections onto each face, lexicographic tie-break
            best = None
            best_d = None
            for axis in range(dim):
                for face_val in (self.lo[axis], self.hi[axis]):
                    cand = xi.copy()
                    cand[:, axis] = face_val
                    d = np.abs(xi[:, axis] - face_val)
                    if best is None:
                        best, best_d = cand, d
                    else:
                        closer = d < best_d - 1e-15
                        tie = np.abs(d - best_d) <= 1e-15
                        if np.any(tie):
                            closer = closer | (tie & _lex_less(cand, best))
                        best = np.where(closer[:, None], cand, best)
                        best_d = np.where(closer, d, best_d)
            out[interior] = best
        return out

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo.copy(), self.hi.copy()

    def boundary_points(self, k: int) -> np.ndarray:
        if self.dim == 2:
            w, h = self.hi - self.lo
            perim = 2 * (w + h)
            t = np.linspace(0.0, perim, k, endpoint=False)
            pts = np.empty((k, 2))
            for i, ti in enumerate(t):
                if ti < w:
                    pts[i] = (self.lo[0] + ti, self.lo[1])
                elif ti < w + h:
                    pts[i] = (self.hi[0], self.lo[1] + ti - w)
                elif ti < 2 * w + h:
                    pts[i] = (self.hi[0] - (ti - w - h), self.hi[1])
                else:
                    pts[i] = (self.lo[0], self.hi[1] - (ti - 2 * w - h))
            return pts
        # 3D: coarse grids on each face
        per_face = max(1, int(np.sqrt(k / 6)))
        u = np.linspace(0, 1, per_face + 2)[1:-1]
        uu, vv = np.meshgrid(u, u, indexing="ij")
        faces = []
        for axis in range(3):
            o = [i for i in range(3) if i != axis]
            for val in (self.lo[axis], self.hi[axis]):
                f = np.empty((uu.size, 3))
                f[:, axis] = val
                f[:, o[0]] = self.lo[o[0]] + uu.ravel() * (self.hi[o[0]] - self.lo[o[0]])
                f[:, o[1]] = self.lo[o[1]] + vv.ravel() * (self.hi[o[1]] - self.lo[o[1]])
                faces.append(f)
        return np.concatenate(faces, axis=0)


def _lex_less(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rowwise lexicographic a < b."""
    out = np.zeros(a.shape[0], dtype=bool)
    decided = np.zeros(a.shape[0], dtype=bool)
    for c in range(a.shape[1]):
        lt = ~decided & (a[:, c] < b[:, c])
        gt = ~decided & (a[:, c] > b[:, c])
        out |= lt
        decided |= lt | gt
    return out


class _SegmentSoup:
    """Shared distance/projection math over a set of 2D segments."""

    def __init__(self, a: np.ndarray, b: np.ndarray):
        self.a = a  # (m, 2)
        self.b = b  # (m, 2)
        self.ab = b - a
        self.len2 = np.maximum(np.sum(self.ab * self.ab, axis=1), 1e-300)

    def project(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Closest point on any segment and its distance, per query row."""
        # (n, m, 2) broadcast; segment soups stay small in practice
        ap = x[:, None, :] - self.a[None, :, :]
        t = np.clip(np.sum(ap * self.ab[None, :, :], axis=2) / self.len2[None, :], 0.0, 1.0)
        proj = self.a[None, :, :] + t[:, :, None] * self.ab[None, :, :]
        d = np.linalg.norm(x[:, None, :] - proj, axis=2)
        j = np.argmin(d, axis=1)
        rows = np.arange(x.shape[0])
        return proj[rows, j], d[rows, j]


class Polygon:
    """Closed 2D polygon (vertex loop); interior of the loop is inside."""

    def __init__(self, vertices, hole: bool = False):
        v = np.asarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs at least 3 2D vertices")
        self.vertices = v
        self.hole = bool(hole)
        self._soup = _SegmentSoup(v, np.roll(v, -1, axis=0))

    dim = 2

    def _inside(self, x: np.ndarray) -> np.ndarray:
        # even-odd crossing test
        v0 = self.vertices
        v1 = np.roll(v0, -1, axis=0)
        px, py = x[:, 0][:, None], x[:, 1][:, None]
        y0, y1 = v0[:, 1][None, :], v1[:, 1][None, :]
        x0, x1 = v0[:, 0][None, :], v1[:, 0][None, :]
        cond = (y0 <= py) != (y1 <= py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        crossing = cond & (px < xint)
        return (np.sum(crossing, axis=1) % 2) == 1

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        _, d = self._soup.project(x)
        sd = np.where(self._inside(x), d, -d)
        return -sd if self.hole else sd

    def closest_point(self, x: np.ndarray) -> np.ndarray:
        p, _ = self._soup.project(x)
        return p

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def boundary_points(self, k: int) -> np.ndarray:
        segs = np.linalg.norm(self._soup.ab, axis=1)
        total = segs.sum()
        t = np.linspace(0.0, total, k, endpoint=False)
        cum = np.concatenate([[0.0], np.cumsum(segs)])
        idx = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(segs) - 1)
        local = (t - cum[idx]) / segs[idx]
        return self._soup.a[idx] + local[:, None] * self._soup.ab[idx]


class Segments:
    """Open 2D polyline wall: both sides are interior, the wall is boundary."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 2:
            raise ValueError("segment wall needs at least 2 2D vertices")
        self.vertices = v
        self._soup = _SegmentSoup(v[:-1], v[1:])

    dim = 2
    hole = False

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        _, d = self._soup.project(x)
        return d

    def closest_point(self, x: np.ndarray) -> np.ndarray:
        p, _ = self._soup.project(x)
        return p

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def boundary_points(self, k: int) -> np.ndarray:
        segs = np.linalg.norm(self._soup.ab, axis=1)
        total = segs.sum()
        t = np.linspace(0.0, total, k, endpoint=True)
        cum = np.concatenate([[0.0], np.cumsum(segs)])
        idx = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(segs) - 1)
        local = np.clip((t - cum[idx]) / segs[idx], 0.0, 1.0)
        return self._soup.a[idx] + local[:, None] * self._soup.ab[idx]


Primitive = Ball | AxisBox | Polygon | Segments


class Domain:
    """Fixed closed region; interior is where min primitive sd is positive."""

    def __init__(self, primitives: list):
        if not primitives:
            raise ValueError("domain needs at least one primitive")
        dims = {p.dim for p in primitives}
        if len(dims) != 1:
            raise ValueError("all primitives must share one dimension")
        self.primitives = list(primitives)
        self.dim = dims.pop()
        los, his = zip(*(p.bounding_box() for p in self.primitives))
        # Hole primitives do not extend the domain; bound with non-holes only
        solid = [
            (lo, hi)
            for p, lo, hi in zip(self.primitives, los, his)
            if not getattr(p, "hole", False)
        ]
        if solid:
            los, his = zip(*solid)
        self.bbox_lo = np.min(np.stack(los), axis=0)
        self.bbox_hi = np.max(np.stack(his), axis=0)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bbox_hi - self.bbox_lo))

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        x, single = _as_points(x, self.dim)
        sd = self.primitives[0].signed_distance(x)
        for p in self.primitives[1:]:
            sd = np.minimum(sd, p.signed_distance(x))
        return sd[0] if single else sd

    def distance_to_boundary(self, x: np.ndarray) -> np.ndarray:
        """Radius of the largest ball around x inside the domain.

        Raises :class:`ExteriorPoint` if any query point is outside.
        """
        x, single = _as_points(x, self.dim)
        sd = self.primitives[0].signed_distance(x)
        for p in self.primitives[1:]:
            sd = np.minimum(sd, p.signed_distance(x))
        if np.any(sd < -1e-12):
            raise ExteriorPoint("query point outside the domain")
        sd = np.maximum(sd, 0.0)
        return float(sd[0]) if single else sd

    def in_epsilon_shell(self, x: np.ndarray, eps: "EpsilonShell | float") -> np.ndarray:
        e = eps.epsilon if isinstance(eps, EpsilonShell) else float(eps)
        x, single = _as_points(x, self.dim)
        res = self.distance_to_boundary(x) < e
        return bool(res[0]) if single else res

    def closest_boundary(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Closest boundary point and the index of its primitive.

        Ties between primitives resolve to the lowest primitive index;
        within a primitive the projection tie-breaks are documented on the
        primitive (lexicographically smallest point).
        """
        x, single = _as_points(x, self.dim)
        sds = np.stack([np.abs(p.signed_distance(x)) for p in self.primitives])
        prim = np.argmin(sds, axis=0)  # argmin keeps the lowest index on ties
        out = np.empty_like(x)
        for i, p in enumerate(self.primitives):
            m = prim == i
            if np.any(m):
                out[m] = p.closest_point(x[m])
        if single:
            return out[0], int(prim[0])
        return out, prim

    def closest_boundary_point(self, x: np.ndarray) -> np.ndarray:
        x_arr, single = _as_points(x, self.dim)
        sd = self.signed_distance(x_arr)
        if np.any(sd < -1e-12):
            raise ExteriorPoint("query point outside the domain")
        pts, _ = self.closest_boundary(x_arr)
        return pts[0] if single else pts

    def boundary_points(self, k: int) -> np.ndarray:
        per = max(2, k // len(self.primitives))
        return np.concatenate([p.boundary_points(per) for p in self.primitives], axis=0)

    def default_epsilon(self) -> float:
        return 1e-3 * self.diameter


class EpsilonShell:
    """Termination shell width; must stay well below the domain scale."""

    __slots__ = ("epsilon",)

    def __init__(self, epsilon: float):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.epsilon = float(epsilon)

    def validate_for(self, domain: Domain) -> None:
        if self.epsilon >= domain.diameter / 100.0:
            raise ValueError(
                f"epsilon {self.epsilon} too large for domain diameter {domain.diameter}"
            )


def unit_disk(hole: Ball | None = None) -> Domain:
    prims: list = [Ball((0.0, 0.0), 1.0)]
    if hole is not None:
        prims.append(hole)
    return Domain(prims)
