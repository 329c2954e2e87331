"""Shared numerical kernels: B-spline bases, quadrature rules, root finding
and step-function / product-integral algebra."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import brentq


class ExtrapolationError(ValueError):
    """Evaluation time falls outside the spline knot range."""


# ---------------------------------------------------------------------------
# B-splines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BSplineBasis:
    """B-spline basis on a clamped knot vector.

    ``knots`` is the full non-decreasing knot vector with the boundary knots
    repeated ``degree + 1`` times; ``n_basis = len(knots) - degree - 1``.
    """

    degree: int
    knots: np.ndarray
    n_basis: int = field(init=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2 * (self.degree + 1):
            raise ValueError("knot vector too short for degree %d" % self.degree)
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be non-decreasing")
        d = self.degree
        if not (np.all(knots[: d + 1] == knots[0]) and np.all(knots[-(d + 1):] == knots[-1])):
            raise ValueError("boundary knots must have multiplicity degree+1")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "n_basis", knots.size - d - 1)

    @classmethod
    def from_interior(cls, degree, lo, hi, interior=()):
        """Build a clamped basis from boundary knots and interior knots."""
        interior = np.asarray(interior, dtype=float)
        if interior.size and (interior.min() <= lo or interior.max() >= hi):
            raise ValueError("interior knots must lie strictly inside (lo, hi)")
        full = np.concatenate([np.repeat(lo, degree + 1), np.sort(interior),
                               np.repeat(hi, degree + 1)])
        return cls(degree, full)

    @property
    def lo(self) -> float:
        return float(self.knots[0])

    @property
    def hi(self) -> float:
        return float(self.knots[-1])

    def design_matrix(self, t, extrapolate="raise"):
        """Evaluate all basis functions at the times ``t``.

        Returns an ``(len(t), n_basis)`` array.  ``extrapolate`` is one of
        ``"raise"`` (times outside the knot span are an error) or ``"clamp"``
        (evaluation times are clipped to the boundary knots).
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if extrapolate == "clamp":
            t = np.clip(t, self.lo, self.hi)
        elif np.any(t < self.lo) or np.any(t > self.hi):
            raise ExtrapolationError(
                "time outside knot range [%g, %g]" % (self.lo, self.hi))
        d, knots = self.degree, self.knots
        # Knot span per point; the right boundary maps into the last interval.
        span = np.searchsorted(knots, t, side="right") - 1
        span = np.clip(span, d, self.n_basis - 1)
        n = t.size
        vals = np.zeros((n, d + 1))
        vals[:, 0] = 1.0
        left = np.empty((n, d + 1))
        right = np.empty((n, d + 1))
        for j in range(1, d + 1):
            left[:, j] = t - knots[span + 1 - j]
            right[:, j] = knots[span + j] - t
            saved = np.zeros(n)
            for r in range(j):
                denom = right[:, r + 1] + left[:, j - r]
                temp = vals[:, r] / denom
                vals[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, j - r] * temp
            vals[:, j] = saved
        out = np.zeros((n, self.n_basis))
        cols = span[:, None] - d + np.arange(d + 1)[None, :]
        np.put_along_axis(out, cols, vals, axis=1)
        return out


def bspline_eval(basis: BSplineBasis, t: float, extrapolate="raise") -> np.ndarray:
    """Values of all basis functions at a single time ``t``."""
    return basis.design_matrix(np.asarray([t]), extrapolate=extrapolate)[0]


# ---------------------------------------------------------------------------
# Quadrature rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.nodes.shape != self.weights.shape:
            raise ValueError("nodes and weights must have equal length")


def gauss_hermite(n: int) -> QuadratureRule:
    """Gauss-Hermite rule for integrals against exp(-x^2).

    Nodes are the roots of the physicists' Hermite polynomial H_n, computed
    by eigen-decomposition of the Jacobi matrix (Golub-Welsch); exact for
    polynomials of degree <= 2n - 1.
    """
    if n < 1:
        raise ValueError("order must be >= 1")
    if n == 1:
        return QuadratureRule(np.array([0.0]), np.array([np.sqrt(np.pi)]), "hermite")
    off = np.sqrt(np.arange(1, n) / 2.0)
    nodes, vecs = eigh_tridiagonal(np.zeros(n), off)
    weights = np.sqrt(np.pi) * vecs[0] ** 2
    # Enforce the exact +/- symmetry of the rule.
    nodes = (nodes - nodes[::-1]) / 2.0
    weights = (weights + weights[::-1]) / 2.0
    return QuadratureRule(nodes, weights, "hermite")


def pseudo_adaptive_nodes(rule: QuadratureRule, mode, scale):
    """Recenter and rescale a tensor-product Gauss-Hermite grid.

    ``mode`` is a q-vector and ``scale`` a q x q lower-triangular matrix;
    nodes become ``mode + sqrt(2) * scale @ x`` over the tensor grid of
    standard nodes ``x`` and the weights absorb the change of variables so
    that ``sum(w_k g(b_k))`` targets the unweighted integral of ``g``.

    Returns ``(nodes, weights)`` with nodes of shape ``(n^q, q)``.
    """
    if rule.kind != "hermite":
        raise ValueError("pseudo-adaptive transform requires a Hermite rule")
    mode = np.atleast_1d(np.asarray(mode, dtype=float))
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    q = mode.size
    det = np.prod(np.diag(scale))
    if det == 0.0 or not np.isfinite(det):
        raise ValueError("singular scale matrix")
    grids = np.meshgrid(*([rule.nodes] * q), indexing="ij")
    x = np.stack([g.ravel() for g in grids], axis=1)            # (n^q, q)
    wgrids = np.meshgrid(*([rule.weights] * q), indexing="ij")
    w = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    nodes = mode[None, :] + np.sqrt(2.0) * x @ scale.T
    weights = w * np.exp(np.sum(x * x, axis=1)) * 2.0 ** (q / 2.0) * abs(det)
    return nodes, weights


# 15-point Kronrod extension of the 7-point Gauss-Legendre rule on [-1, 1]
# (nodes/weights from the standard tabulation, given to 16 significant digits).
GK15_NODES = np.array([
    -0.9914553711208126, -0.9491079123427585, -0.8648644233597691,
    -0.7415311855993944, -0.5860872354676911, -0.4058451513773972,
    -0.2077849550078985, 0.0, 0.2077849550078985, 0.4058451513773972,
    0.5860872354676911, 0.7415311855993944, 0.8648644233597691,
    0.9491079123427585, 0.9914553711208126,
])
GK15_WEIGHTS = np.array([
    0.02293532201052922, 0.06309209262997855, 0.1047900103222502,
    0.1406532597155259, 0.1690047266392679, 0.1903505780647854,
    0.2044329400752989, 0.2094821410847278, 0.2044329400752989,
    0.1903505780647854, 0.1690047266392679, 0.1406532597155259,
    0.1047900103222502, 0.06309209262997855, 0.02293532201052922,
])
# Embedded 7-point Gauss weights, aligned with every other Kronrod node.
G7_WEIGHTS = np.array([
    0.1294849661688697, 0.2797053914892767, 0.3818300505051189,
    0.4179591836734694, 0.3818300505051189, 0.2797053914892767,
    0.1294849661688697,
])


def gk15_points(a: float, b: float):
    """Kronrod-15 nodes and weights mapped to the interval [a, b]."""
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    return mid + half * GK15_NODES, half * GK15_WEIGHTS


def gauss_kronrod_15(f, a: float, b: float):
    """Integrate ``f`` over [a, b] with the 15-point Kronrod rule.

    Returns ``(integral, error_estimate)`` where the error estimate is the
    absolute difference from the embedded 7-point Gauss value.
    """
    if a > b:
        raise ValueError("requires a <= b")
    if a == b:
        return 0.0, 0.0
    x, w = gk15_points(a, b)
    fx = np.asarray([f(xi) for xi in x], dtype=float)
    if not np.all(np.isfinite(fx)):
        raise ValueError("non-finite integrand value")
    kron = float(np.dot(w, fx))
    gauss = float(0.5 * (b - a) * np.dot(G7_WEIGHTS, fx[1::2]))
    return kron, abs(kron - gauss)


# ---------------------------------------------------------------------------
# Root finding
# ---------------------------------------------------------------------------

def brent_root(f, lo: float, hi: float, tol: float = 1e-8) -> float:
    """Root of ``f`` in [lo, hi] by Brent's method.

    The bracket must satisfy ``f(lo) * f(hi) <= 0``.
    """
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0.0:
        raise ValueError("no sign change in bracket [%g, %g]" % (lo, hi))
    return float(brentq(f, lo, hi, xtol=tol))


# ---------------------------------------------------------------------------
# Step functions and product integrals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepFunctionMatrix:
    """Matrix-valued right-continuous step function given by jump increments."""

    jump_times: np.ndarray
    increments: np.ndarray   # (n_jumps, dim, dim)
    dim: int = field(init=False)

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=float)
        inc = np.asarray(self.increments, dtype=float)
        if times.ndim != 1:
            raise ValueError("jump_times must be one-dimensional")
        if np.any(np.diff(times) <= 0):
            raise ValueError("jump_times must be strictly increasing")
        if inc.ndim != 3 or inc.shape[0] != times.size or inc.shape[1] != inc.shape[2]:
            raise ValueError("increments must be (n_jumps, M, M)")
        object.__setattr__(self, "jump_times", times)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "dim", inc.shape[1] if inc.size else int(inc.shape[1]))


def product_integral(steps: StepFunctionMatrix, s: float, t: float) -> np.ndarray:
    """Ordered product of (I + increment) over jump times in (s, t]."""
    if s > t:
        raise ValueError("requires s <= t")
    out = np.eye(steps.dim)
    lo = np.searchsorted(steps.jump_times, s, side="right")
    hi = np.searchsorted(steps.jump_times, t, side="right")
    for j in range(lo, hi):
        inc = steps.increments[j]
        if np.any(np.diag(inc) < -1.0):
            raise ValueError("diagonal increment below -1 at t=%g"
                             % steps.jump_times[j])
        out = out @ (np.eye(steps.dim) + inc)
    return out
