"""Minimal solvers mapping 2 or 4 lines (plus optional gravity) to Manhattan frames.

Configuration ``x1-x2-x3`` means ``xi`` sample lines belong to VP ``i``.
VP 1 is the vertical (gravity) direction for the gravity solvers.  All
solvers work on scalar floats internally; a solver call is on the hot path
of RANSAC.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigMismatch,
    DenominatorSingularity,
    GravitySingularity,
    NegativeFocalSquared,
    NoCommonRoot,
    NoPositiveFocal,
    NoRealRoot,
    NoRootInBracket,
    ParallelLines,
    SolverError,
    VPsAtInfinity,
)
from .geometry import GravityObservation, ManhattanFrame

# Denominators below this (inputs at unit norm) count as zero.
SINGULAR_TOL = 1e-12
# Max normalized residual for a common root of the 1-1-0g system.
COMMON_ROOT_TOL = 1e-6


class SolverId(enum.Enum):
    S220 = "220"
    S211 = "211"
    S200G = "200g"
    S011G = "011g"
    S110G = "110g"

    @property
    def sample_size(self) -> int:
        return 4 if self in (SolverId.S220, SolverId.S211) else 2

    @property
    def needs_gravity(self) -> bool:
        return self.sample_size == 2

    @property
    def pattern(self) -> tuple[int, ...]:
        """VP index (0-based) of each sample slot."""
        return _PATTERNS[self]

    @property
    def label(self) -> str:
        return _LABELS[self]


_PATTERNS = {
    SolverId.S220: (0, 0, 1, 1),
    SolverId.S211: (0, 0, 1, 2),
    SolverId.S200G: (1, 1),
    SolverId.S011G: (0, 1),
    SolverId.S110G: (1, 2),
}
_LABELS = {
    SolverId.S220: "2-2-0",
    SolverId.S211: "2-1-1",
    SolverId.S200G: "2-0-0g",
    SolverId.S011G: "0-1-1g",
    SolverId.S110G: "1-1-0g",
}

ALL_SOLVERS = tuple(SolverId)
GRAVITY_SOLVERS = (SolverId.S200G, SolverId.S011G, SolverId.S110G)
FOUR_LINE_SOLVERS = (SolverId.S220, SolverId.S211)


@dataclass(frozen=True)
class MinimalSample:
    lines: np.ndarray  # (k, 3)
    assignment: tuple[int, ...] | None = None


@dataclass(frozen=True)
class OrthoBasis:
    b1: np.ndarray
    b2: np.ndarray


# ---------------------------------------------------------------------------
# scalar helpers
# ---------------------------------------------------------------------------

def _unit(v):
    x, y, z = v
    n = math.sqrt(x * x + y * y + z * z)
    if n == 0.0:
        return (0.0, 0.0, 0.0), 0.0
    return (x / n, y / n, z / n), n


def _cross(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def _as_unit(line):
    """Line as a unit-norm float triple (overall scale is irrelevant)."""
    u, n = _unit([float(c) for c in line])
    if not n > 0:
        raise ParallelLines("zero line")
    return u


def _intersect(l1, l2):
    v, n = _unit(_cross(l1, l2))
    if n < SINGULAR_TOL:
        raise ParallelLines("lines coincide")
    return v


def _frame(d1, d2, d3, f) -> ManhattanFrame:
    c = _cross(d2, d3)
    if d1[0] * c[0] + d1[1] * c[1] + d1[2] * c[2] < 0.0:
        d3 = (-d3[0], -d3[1], -d3[2])
    return ManhattanFrame(np.array((d1, d2, d3), dtype=float).T, f)


def solve_quadratic(a: float, b: float, c: float) -> list[float]:
    """Real roots of ``a x^2 + b x + c``, using the cancellation-free form."""
    scale = max(abs(a), abs(b), abs(c))
    if scale == 0.0:
        return []
    a, b, c = a / scale, b / scale, c / scale
    # a tiny leading coefficient still matters when the root is large
    if a == 0.0:
        return [] if b == 0.0 else [-c / b]
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        # tolerate rounding of a double root
        if disc > -1e-14 * max(b * b, abs(4.0 * a * c)):
            disc = 0.0
        else:
            return []
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    roots = [q / a]
    if q != 0.0:
        roots.append(c / q)
    else:
        roots.append(0.0)
    return roots


# ---------------------------------------------------------------------------
# gravity solvers
# ---------------------------------------------------------------------------

def solve_200g(l1, l2, g) -> list[ManhattanFrame]:
    """Two lines of the same horizontal VP plus known vertical ``g``."""
    v2 = _intersect(_as_unit(l1), _as_unit(l2))
    g = _unit([float(c) for c in g])[0]
    if abs(v2[2]) < SINGULAR_TOL:
        raise ParallelLines("lines are parallel in the image")
    if abs(g[2]) < SINGULAR_TOL:
        raise GravitySingularity("gravity has no z component")
    f = -(g[0] * v2[0] + g[1] * v2[1]) / (g[2] * v2[2])
    if not f > 0.0:
        raise NoPositiveFocal(f"focal {f}")
    d2 = _unit((v2[0] / f, v2[1] / f, v2[2]))[0]
    d3 = _unit(_cross(g, d2))[0]
    return [_frame(g, d2, d3, f)]


def solve_011g(l_vertical, l_horizontal, g) -> list[ManhattanFrame]:
    """One vertical line and one horizontal line plus known vertical ``g``."""
    lv = _as_unit(l_vertical)
    lh = _as_unit(l_horizontal)
    g = _unit([float(c) for c in g])[0]
    den = lv[0] * g[0] + lv[1] * g[1]
    if abs(den) < SINGULAR_TOL:
        raise DenominatorSingularity("vertical line orthogonal to gravity in xy")
    f = -lv[2] * g[2] / den
    if not f > 0.0:
        raise NoPositiveFocal(f"focal {f}")
    d2, n = _unit(_cross(g, (f * lh[0], f * lh[1], lh[2])))
    if n < SINGULAR_TOL:
        raise DenominatorSingularity("horizontal line back-projects onto gravity")
    d3 = _unit(_cross(g, d2))[0]
    return [_frame(g, d2, d3, f)]


def build_ortho_basis(g) -> OrthoBasis:
    """Orthonormal basis of the plane orthogonal to the unit vector ``g``."""
    b1, b2 = _basis(_unit([float(c) for c in g])[0])
    return OrthoBasis(np.array(b1), np.array(b2))


def _basis(g):
    k = min(range(3), key=lambda i: abs(g[i]))
    u = [0.0, 0.0, 0.0]
    u[k] = 1.0
    b1p = _cross(g, u)
    b2p = _cross(g, b1p)
    return _unit(b1p)[0], _unit(b2p)[0]


def _deltas(l1, l2, b1, b2):
    return (
        l1[0] * b1[0] + l1[1] * b1[1], l1[2] * b1[2],
        l1[0] * b2[0] + l1[1] * b2[1], l1[2] * b2[2],
        l2[0] * b2[0] + l2[1] * b2[1], l2[2] * b2[2],
        l2[0] * b1[0] + l2[1] * b1[1], l2[2] * b1[2],
    )


def _angle_residuals(f, c, s, d):
    """Normalized residuals of both 1-1-0g constraints at focal ``f``, angle (c, s)."""
    P, Q = f * d[0] + d[1], f * d[2] + d[3]
    S, T = f * d[4] + d[5], f * d[6] + d[7]
    n1, n2 = math.hypot(P, Q), math.hypot(S, T)
    r1 = abs(P * c - Q * s) / n1 if n1 > 0 else 0.0
    r2 = abs(S * c + T * s) / n2 if n2 > 0 else 0.0
    return r1, r2


def _half_angle_roots(A, B):
    """Finite roots t of ``(1 - t^2) A - 2 t B = 0``."""
    h = math.hypot(A, B)
    if h == 0.0:
        return []
    if B >= 0.0:
        big = B + h
        return [A / big] + ([-big / A] if A != 0.0 else [])
    big = h - B
    return [-A / big] + ([big / A] if A != 0.0 else [])


def _frame_110g(g, b1, b2, f, t) -> ManhattanFrame:
    den = 1.0 + t * t
    c, s = (1.0 - t * t) / den, 2.0 * t / den
    d2 = (c * b1[0] - s * b2[0], c * b1[1] - s * b2[1], c * b1[2] - s * b2[2])
    d3 = (s * b1[0] + c * b2[0], s * b1[1] + c * b2[1], s * b1[2] + c * b2[2])
    return _frame(g, d2, d3, f)


def solve_110g(l1, l2, g) -> list[ManhattanFrame]:
    """One line for each horizontal VP plus known vertical ``g``.

    ``t`` is eliminated first, leaving a quadratic in the focal length.
    """
    return [fr for fr, _, _ in _solve_110g_detailed(l1, l2, g)]


def _solve_110g_detailed(l1, l2, g):
    l1 = _as_unit(l1)
    l2 = _as_unit(l2)
    g = _unit([float(c) for c in g])[0]
    b1, b2 = _basis(g)
    d = _deltas(l1, l2, b1, b2)
    qa = d[0] * d[6] + d[2] * d[4]
    qb = d[0] * d[7] + d[1] * d[6] + d[2] * d[5] + d[3] * d[4]
    qc = d[1] * d[7] + d[3] * d[5]
    roots = solve_quadratic(qa, qb, qc)
    if not roots:
        raise NoRealRoot("focal quadratic has no real root")
    focals = [f for f in roots if f > 0.0]
    if not focals:
        raise NoPositiveFocal("both focal roots non-positive")
    out = []
    for f in focals:
        P, Q = f * d[0] + d[1], f * d[2] + d[3]
        S, T = f * d[4] + d[5], f * d[6] + d[7]
        # second equation written as (1 - t^2) S - 2 t (-T) = 0
        cands = _half_angle_roots(P, Q) + _half_angle_roots(S, -T)
        best_t, best_r = None, math.inf
        for t in cands:
            den = 1.0 + t * t
            r = max(_angle_residuals(f, (1.0 - t * t) / den, 2.0 * t / den, d))
            if r < best_r:
                best_t, best_r = t, r
        if best_t is None or best_r > COMMON_ROOT_TOL:
            continue
        # theta and theta + pi give the same frame up to a sign flip; pick one
        if abs(best_t) > 1.0:
            best_t = -1.0 / best_t
        out.append((_frame_110g(g, b1, b2, f, best_t), f, best_t))
    if not out:
        raise NoCommonRoot("no half-angle root satisfies both constraints")
    return out


def solve_110g_quartic(l1, l2, g) -> list[ManhattanFrame]:
    """1-1-0g via the reverse elimination order: a quartic in ``t``, then ``f``."""
    return [fr for fr, _, _ in _solve_110g_quartic_detailed(l1, l2, g)]


def _solve_110g_quartic_detailed(l1, l2, g):
    l1 = _as_unit(l1)
    l2 = _as_unit(l2)
    g = _unit([float(c) for c in g])[0]
    b1, b2 = _basis(g)
    d1, d2, d3, d4, d5, d6, d7, d8 = _deltas(l1, l2, b1, b2)
    e = d1 * d6 - d2 * d5
    h = d4 * d5 + d1 * d8 - d3 * d6 - d2 * d7
    k = d4 * d7 - d3 * d8
    # e (1 - t^2)^2 + 2 h t (1 - t^2) + 4 k t^2
    coeffs = np.array([e, -2.0 * h, 4.0 * k - 2.0 * e, 2.0 * h, e])
    scale = np.max(np.abs(coeffs))
    if scale == 0.0:
        raise NoRealRoot("all quartic coefficients vanish")
    coeffs = coeffs / scale
    nz = np.flatnonzero(np.abs(coeffs) > 1e-14)
    coeffs = coeffs[nz[0]:]
    if len(coeffs) < 2:
        raise NoRealRoot("constant quartic")
    roots = np.roots(coeffs)
    real = [float(r.real) for r in roots if abs(r.imag) <= 1e-7 * max(1.0, abs(r))]
    if not real:
        raise NoRealRoot("quartic has no real root")
    dd = (d1, d2, d3, d4, d5, d6, d7, d8)
    sols = []
    for t in real:
        s = 1.0 - t * t
        num1, den1 = s * d2 - 2.0 * t * d4, s * d1 - 2.0 * t * d3
        num2, den2 = s * d6 + 2.0 * t * d8, s * d5 + 2.0 * t * d7
        if abs(den1) >= abs(den2):
            if den1 == 0.0:
                continue
            f = -num1 / den1
        else:
            f = -num2 / den2
        if f > 0.0:
            sols.append((f, t))
    if not sols:
        raise NoPositiveFocal("no positive focal among quartic roots")
    # t and -1/t describe the same frame up to axis signs; keep |t| <= 1
    sols.sort(key=lambda ft: (abs(ft[1]) > 1.0, ft[0]))
    out = []
    for f, t in sols:
        if any(abs(f - f2) <= 1e-8 * f for _, f2, _ in out):
            continue
        den = 1.0 + t * t
        r = max(_angle_residuals(f, (1.0 - t * t) / den, 2.0 * t / den, dd))
        if r > COMMON_ROOT_TOL:
            continue
        out.append((_frame_110g(g, b1, b2, f, t), f, t))
    if not out:
        raise NoCommonRoot("no quartic root satisfies both constraints")
    return out


# ---------------------------------------------------------------------------
# 4-line solvers
# ---------------------------------------------------------------------------

def solve_220(l1, l2, l3, l4) -> list[ManhattanFrame]:
    """Two lines for each of two VPs; focal from their orthogonality."""
    v1 = _intersect(_as_unit(l1), _as_unit(l2))
    v2 = _intersect(_as_unit(l3), _as_unit(l4))
    den = v1[2] * v2[2]
    if abs(den) < SINGULAR_TOL:
        raise VPsAtInfinity("a VP lies at infinity")
    f2 = -(v1[0] * v2[0] + v1[1] * v2[1]) / den
    if not f2 > 0.0:
        raise NegativeFocalSquared(f"f^2 = {f2}")
    f = math.sqrt(f2)
    d1 = _unit((v1[0] / f, v1[1] / f, v1[2]))[0]
    d2 = _unit((v2[0] / f, v2[1] / f, v2[2]))[0]
    d3 = _unit(_cross(d1, d2))[0]
    return [_frame(d1, d2, d3, f)]


def solve_211(l1, l2, l3, l4, focal_range=None) -> list[ManhattanFrame]:
    """Two lines for VP 1, one for VP 2 and one for VP 3.

    With ``v1 = l1 x l2`` the first direction is ``(v1x, v1y, f v1z)`` up to
    scale.  The second direction is forced to ``d1 x K l3`` and the third
    must satisfy ``l4' K (d1 x d2) = 0``, which expands to a quadratic in
    ``f^2``.  ``focal_range`` optionally restricts the accepted focals.
    """
    v = _intersect(_as_unit(l1), _as_unit(l2))
    a3, b3, c3 = _as_unit(l3)
    a4, b4, c4 = _as_unit(l4)
    alpha = v[0] * a3 + v[1] * b3 + v[2] * c3
    beta = v[0] * a4 + v[1] * b4 + v[2] * c4
    p = a3 * a4 + b3 * b4
    q = c3 * c4
    r = v[0] * v[0] + v[1] * v[1]
    s = v[2] * v[2]
    roots = solve_quadratic(-p * s, alpha * beta - p * r - q * s, -q * r)
    focals = [math.sqrt(F) for F in roots if F > 0.0]
    if not focals:
        raise NoPositiveFocal("no positive f^2 root")
    if focal_range is not None:
        lo, hi = focal_range
        focals = [f for f in focals if lo <= f <= hi]
        if not focals:
            raise NoRootInBracket(f"no focal in [{lo}, {hi}]")
    out = []
    for f in sorted(set(focals)):
        d1 = _unit((v[0], v[1], f * v[2]))[0]
        d2, n = _unit(_cross(d1, (f * a3, f * b3, c3)))
        if n < SINGULAR_TOL:
            continue
        d3 = _unit(_cross(d1, d2))[0]
        out.append(_frame(d1, d2, d3, f))
    if not out:
        raise NoPositiveFocal("all focal roots degenerate")
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def run_solver(
    solver: SolverId, sample: MinimalSample, gravity: GravityObservation | None = None
) -> list[ManhattanFrame]:
    """Run ``solver`` on a sample whose lines are ordered per ``solver.pattern``."""
    lines = np.asarray(sample.lines, dtype=float)
    if lines.shape != (solver.sample_size, 3):
        raise ConfigMismatch(
            f"{solver.label} needs {solver.sample_size} lines, got {lines.shape[0]}"
        )
    if sample.assignment is not None and tuple(sample.assignment) != solver.pattern:
        raise ConfigMismatch(f"assignment {sample.assignment} does not match {solver.label}")
    if solver.needs_gravity:
        if gravity is None or not gravity.present:
            raise ConfigMismatch(f"{solver.label} requires a gravity direction")
        g = gravity.direction
        if solver is SolverId.S200G:
            return solve_200g(lines[0], lines[1], g)
        if solver is SolverId.S011G:
            return solve_011g(lines[0], lines[1], g)
        return solve_110g(lines[0], lines[1], g)
    if solver is SolverId.S220:
        return solve_220(*lines)
    return solve_211(*lines)


def solve_lines(solver: SolverId, lines, g=None) -> list[ManhattanFrame]:
    """Unchecked dispatch used inside RANSAC loops."""
    if solver is SolverId.S200G:
        return solve_200g(lines[0], lines[1], g)
    if solver is SolverId.S011G:
        return solve_011g(lines[0], lines[1], g)
    if solver is SolverId.S110G:
        return solve_110g(lines[0], lines[1], g)
    if solver is SolverId.S220:
        return solve_220(lines[0], lines[1], lines[2], lines[3])
    return solve_211(lines[0], lines[1], lines[2], lines[3])


__all__ = [
    "SolverId",
    "MinimalSample",
    "OrthoBasis",
    "SolverError",
    "ALL_SOLVERS",
    "GRAVITY_SOLVERS",
    "FOUR_LINE_SOLVERS",
    "solve_quadratic",
    "solve_200g",
    "solve_011g",
    "build_ortho_basis",
    "solve_110g",
    "solve_110g_quartic",
    "solve_220",
    "solve_211",
    "run_solver",
    "solve_lines",
]
