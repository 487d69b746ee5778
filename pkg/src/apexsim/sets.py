"""Zonotope calculus and the disturbance-invariant-set machinery.

Zonotopes are closed under the two operations the truncated invariant-set
sum needs (linear maps, Minkowski sums) and their support function is a dot
product plus an L1 norm, which makes Pontryagin constraint tightening one
line per halfspace row. Conservatism from the interval hull and generator
compression only enlarges safety margins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UncontrollableError(ValueError):
    """Pole placement requested on an uncontrollable pair."""


class UnstableError(ValueError):
    """Closed-loop map is not a contraction; the invariant sum diverges."""


class NotConvergedError(RuntimeError):
    """Invariant-set iteration did not settle within the iteration budget."""


class EmptyResultError(RuntimeError):
    """Pontryagin difference removed everything between a pair of opposing rows."""


@dataclass(frozen=True)
class Zonotope:
    """Center plus generator matrix: {c + G xi : |xi_i| <= 1}."""

    c: np.ndarray  # (n,)
    G: np.ndarray  # (n, m)

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        G = np.asarray(self.G, dtype=float)
        if G.ndim != 2 or G.shape[0] != c.shape[0]:
            raise ValueError("generator matrix must be (n, m) with n matching the center")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(G))):
            raise ValueError("zonotope data must be finite")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "G", G)

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    @property
    def order(self) -> int:
        return self.G.shape[1]

    @classmethod
    def point(cls, c) -> "Zonotope":
        c = np.asarray(c, dtype=float).ravel()
        return cls(c=c, G=np.zeros((c.shape[0], 0)))

    @classmethod
    def from_box(cls, lo, hi) -> "Zonotope":
        lo = np.asarray(lo, dtype=float).ravel()
        hi = np.asarray(hi, dtype=float).ravel()
        if np.any(lo > hi):
            raise ValueError("box requires lo <= hi")
        return cls(c=0.5 * (lo + hi), G=np.diag(0.5 * (hi - lo)))

    def interval_hull(self) -> tuple[np.ndarray, np.ndarray]:
        radius = np.sum(np.abs(self.G), axis=1)
        return self.c - radius, self.c + radius

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Points inside the set (rows), for sampling-based soundness checks."""
        xi = rng.uniform(-1.0, 1.0, size=(count, self.order))
        return self.c + xi @ self.G.T

    def to_csv(self, path):
        """First row the center, one generator per subsequent row."""
        rows = np.vstack([self.c[None, :], self.G.T]) if self.order else self.c[None, :]
        with open(path, "w", newline="") as f:
            for row in rows:
                f.write(",".join(format(v, ".17g") for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Zonotope":
        rows = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(c=rows[0], G=rows[1:].T)


def linear_map(M: np.ndarray, z: Zonotope) -> Zonotope:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != z.dim:
        raise ValueError(f"map has {M.shape[1]} columns for a {z.dim}-dim zonotope")
    return Zonotope(c=M @ z.c, G=M @ z.G)


def minkowski_sum(z1: Zonotope, z2: Zonotope) -> Zonotope:
    if z1.dim != z2.dim:
        raise ValueError("Minkowski sum requires matching dimensions")
    return Zonotope(c=z1.c + z2.c, G=np.hstack([z1.G, z2.G]))


def support(z: Zonotope, d: np.ndarray) -> float:
    """max_{x in Z} d.x = d.c + sum_i |d.G_i|."""
    d = np.asarray(d, dtype=float).ravel()
    if d.shape[0] != z.dim or not np.any(d):
        raise ValueError("direction must be nonzero and of matching dimension")
    return float(d @ z.c + np.sum(np.abs(d @ z.G)))


def _support_many(z: Zonotope, dirs: np.ndarray) -> np.ndarray:
    return dirs @ z.c + np.sum(np.abs(dirs @ z.G), axis=1)


def compress(z: Zonotope, max_generators: int) -> Zonotope:
    """Interval-hull compression of the smallest generators down to the budget.

    Keeps the largest-norm generators and boxes the rest; the result contains
    the input (conservative).
    """
    if z.order <= max_generators:
        return z
    keep = max(max_generators - z.dim, 0)
    norms = np.linalg.norm(z.G, axis=0)
    order = np.argsort(-norms, kind="stable")
    kept = z.G[:, np.sort(order[:keep])]
    boxed = np.diag(np.sum(np.abs(z.G[:, np.sort(order[keep:])]), axis=1))
    return Zonotope(c=z.c, G=np.hstack([kept, boxed]))


@dataclass(frozen=True)
class HalfspaceSet:
    """{x : C x <= d} with no zero-norm rows."""

    C: np.ndarray  # (m, n)
    d: np.ndarray  # (m,)

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        d = np.asarray(self.d, dtype=float).ravel()
        if C.shape[0] != d.shape[0]:
            raise ValueError("row count mismatch between C and d")
        if C.shape[0] and np.min(np.linalg.norm(C, axis=1)) <= 0.0:
            raise ValueError("zero-norm halfspace rows are not allowed")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "d", d)

    @property
    def dim(self) -> int:
        return self.C.shape[1]

    @classmethod
    def box(cls, lo, hi) -> "HalfspaceSet":
        lo = np.asarray(lo, dtype=float).ravel()
        hi = np.asarray(hi, dtype=float).ravel()
        n = lo.shape[0]
        return cls(C=np.vstack([np.eye(n), -np.eye(n)]), d=np.concatenate([hi, -lo]))

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(np.all(self.C @ x <= self.d + tol))

    def box_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Recover (lo, hi) from an axis-aligned box representation."""
        n = self.dim
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        for row, bound in zip(self.C, self.d):
            nz = np.nonzero(row)[0]
            if nz.shape[0] != 1:
                raise ValueError("not an axis-aligned box: row couples several axes")
            j = int(nz[0])
            if row[j] > 0:
                hi[j] = min(hi[j], bound / row[j])
            else:
                lo[j] = max(lo[j], bound / row[j])
        if np.any(~np.isfinite(lo)) or np.any(~np.isfinite(hi)):
            raise ValueError("box is unbounded")
        return lo, hi


@dataclass(frozen=True)
class UncertainModel:
    """Vertex models of a convex parameter set with their arithmetic means."""

    vertices: tuple[tuple[np.ndarray, np.ndarray], ...]
    a_mean: np.ndarray
    b_mean: np.ndarray

    @classmethod
    def from_vertices(cls, vertices) -> "UncertainModel":
        verts = []
        for A, B in vertices:
            A = np.asarray(A, dtype=float)
            B = np.asarray(B, dtype=float).ravel()
            if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
                raise ValueError("vertex dimensions are inconsistent")
            verts.append((A, B))
        if not verts:
            raise ValueError("need at least one vertex")
        n = verts[0][0].shape[0]
        if any(A.shape != (n, n) for A, _ in verts):
            raise ValueError("all vertices must share dimensions")
        a_mean = sum(A for A, _ in verts) / len(verts)
        b_mean = sum(B for _, B in verts) / len(verts)
        return cls(vertices=tuple(verts), a_mean=a_mean, b_mean=b_mean)

    @property
    def dim(self) -> int:
        return self.a_mean.shape[0]

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)


def disturbance_set(model: UncertainModel, state_box: HalfspaceSet, input_box) -> Zonotope:
    """Outer box enclosure of {(A - A_mean) x + (B - B_mean) u} over the boxes.

    For each vertex the image of the state x input box is an exact zonotope;
    the returned set is the interval hull of their union, a conservative
    superset of the true disturbance set.
    """
    lo_x, hi_x = state_box.box_bounds()
    lo_u, hi_u = float(input_box[0]), float(input_box[1])
    if lo_u > hi_u:
        raise ValueError("input interval must have lo <= hi")
    center = np.concatenate([0.5 * (lo_x + hi_x), [0.5 * (lo_u + hi_u)]])
    radius = np.concatenate([0.5 * (hi_x - lo_x), [0.5 * (hi_u - lo_u)]])

    lo = np.full(model.dim, np.inf)
    hi = np.full(model.dim, -np.inf)
    for A, B in model.vertices:
        M = np.hstack([A - model.a_mean, (B - model.b_mean)[:, None]])
        c = M @ center
        r = np.sum(np.abs(M * radius), axis=1)
        lo = np.minimum(lo, c - r)
        hi = np.maximum(hi, c + r)
    return Zonotope.from_box(lo, hi)


@dataclass(frozen=True)
class FeedbackGain:
    """Single-input state feedback with closed loop A_cl = A + B k."""

    k: np.ndarray          # (n,)
    a_cl: np.ndarray       # (n, n)
    eigenvalues: np.ndarray

    def __post_init__(self):
        if np.max(np.abs(self.eigenvalues)) >= 1.0:
            raise UnstableError("closed-loop spectral radius must be < 1")


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    cols = [B]
    for _ in range(n - 1):
        cols.append(A @ cols[-1])
    return np.column_stack(cols)


def pole_place(A: np.ndarray, B: np.ndarray, poles) -> FeedbackGain:
    """Ackermann's formula for the single-input pair, sign such that A_cl = A + B k.

    Poles must be closed under conjugation with |pole| < 1.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).ravel()
    n = A.shape[0]
    poles = np.asarray(poles, dtype=complex).ravel()
    if poles.shape[0] != n:
        raise ValueError(f"need exactly {n} poles")
    coeffs = np.poly(poles)
    if np.max(np.abs(coeffs.imag)) > 1e-9:
        raise ValueError("poles must be closed under conjugation")
    coeffs = coeffs.real

    ctrb = controllability_matrix(A, B)
    sv = np.linalg.svd(ctrb, compute_uv=False)
    if sv[-1] <= 1e-8 * sv[0]:
        raise UncontrollableError("controllability matrix is rank deficient")

    phi = np.zeros_like(A)  # characteristic polynomial evaluated at A (Horner)
    for c in coeffs:
        phi = phi @ A + c * np.eye(n)
    k_acker = np.linalg.solve(ctrb.T, np.eye(n)[:, -1]) @ phi
    k = -k_acker
    a_cl = A + np.outer(B, k)
    return FeedbackGain(k=k, a_cl=a_cl, eigenvalues=np.linalg.eigvals(a_cl))


def contracted_poles(A: np.ndarray, B: np.ndarray, factor: float = 0.8) -> np.ndarray:
    """Open-loop eigenvalues pulled radially toward the origin."""
    return factor * np.linalg.eigvals(np.asarray(A, dtype=float))


def clipped_poles(A: np.ndarray, radius: float = 0.6) -> np.ndarray:
    """Open-loop eigenvalues with magnitudes clipped to ``radius``, phase kept.

    Moves only the slow (integrator-like) modes, which keeps the gain small;
    contracting the already-fast modes needs violent gains whose transients
    inflate the invariant set.
    """
    lam = np.linalg.eigvals(np.asarray(A, dtype=float))
    return lam * np.minimum(1.0, radius / np.abs(lam))


_PROBE_SEED = 20230817
_PROBE_RANDOM_COUNT = 64


def probe_directions(dim: int) -> np.ndarray:
    """2n axis directions plus 64 deterministic pseudo-random unit directions."""
    rng = np.random.default_rng(_PROBE_SEED)
    randoms = rng.normal(size=(_PROBE_RANDOM_COUNT, dim))
    randoms /= np.linalg.norm(randoms, axis=1, keepdims=True)
    return np.vstack([np.eye(dim), -np.eye(dim), randoms])


def invariant_set(
    gain: FeedbackGain,
    w: Zonotope,
    tol: float = 1e-6,
    i_max: int = 200,
    max_generators: int = 200,
) -> tuple[Zonotope, int]:
    """Truncated sum S(i+1) = S(i) + A_cl^i W until the supports stop moving.

    Convergence is measured as the largest support-function increase over the
    fixed probe direction set. Generator count is kept in check by interval
    hull compression, which only adds conservatism.
    """
    a_cl = gain.a_cl
    if np.max(np.abs(np.linalg.eigvals(a_cl))) >= 1.0:
        raise UnstableError("invariant sum requires a stable closed loop")
    if w.dim != a_cl.shape[0]:
        raise ValueError("disturbance set dimension mismatch")

    dirs = probe_directions(w.dim)
    s = w
    term = w
    supports = _support_many(s, dirs)
    for i in range(1, i_max + 1):
        term = linear_map(a_cl, term)
        s = minkowski_sum(s, term)
        if s.order > max_generators:
            s = compress(s, max_generators)
        new_supports = _support_many(s, dirs)
        if np.max(new_supports - supports) < tol:
            return s, i
        supports = new_supports
    raise NotConvergedError(f"supports still moving after {i_max} iterations")


def tighten(constraints: HalfspaceSet, s: Zonotope) -> HalfspaceSet:
    """Pontryagin difference row-wise: c.x <= d becomes c.z <= d - h_S(c).

    Exact for an H-representation against a convex subtrahend. Raises
    EmptyResultError when opposing rows cross after tightening.
    """
    if constraints.dim != s.dim:
        raise ValueError("dimension mismatch")
    shrink = _support_many(s, constraints.C)
    d_new = constraints.d - shrink
    C = constraints.C
    norms = np.linalg.norm(C, axis=1)
    unit = C / norms[:, None]
    scaled = d_new / norms
    for i in range(C.shape[0]):
        opposing = np.nonzero(np.all(np.abs(unit + unit[i]) < 1e-12, axis=1))[0]
        for j in opposing:
            if scaled[i] + scaled[j] < 0.0:
                raise EmptyResultError(f"rows {i} and {j} cross after tightening")
    return HalfspaceSet(C=C.copy(), d=d_new)
