"""Larger-than-minimal estimation from per-VP inlier sets.

The main pipeline (:func:`nonminimal_solve`) refits every VP by least
squares, recovers the focal length from the three pairwise orthogonality
constraints and snaps the calibrated directions onto SO(3).
:func:`refine_ls` then polishes rotation and focal with Levenberg-Marquardt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateBundle,
    InsufficientLines,
    NonPositiveFocalSquared,
    RankDeficient,
    VPError,
)
from .geometry import ManhattanFrame, cross_rows, nearest_rotation, normalize_lines, so3_exp

_EMPTY = np.zeros((0, 3))
# one LM step may change the focal by at most a factor e
MAX_LOG_FOCAL_STEP = 1.0


@dataclass(frozen=True, eq=False)
class InlierPartition:
    """Lines assigned to each of the three VPs (a line appears at most once).

    ``weights`` optionally holds one positive weight per line and set (for
    example the segment length); the least-squares refits then minimize the
    weighted squared residuals.  Without weights every line counts once.

    ``segments`` optionally holds the principal-point-centered endpoints
    ``(x1, y1, x2, y2)`` the lines came from.  The refits then reweight
    every residual so that it approximates the endpoint distance to the
    line joining the segment midpoint and the VP (see :func:`effective_weights`).
    """

    L1: np.ndarray = _EMPTY
    L2: np.ndarray = _EMPTY
    L3: np.ndarray = _EMPTY
    weights: tuple | None = None
    segments: tuple | None = None

    def __post_init__(self):
        for name in ("L1", "L2", "L3"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1, 3))
        if self.weights is None:
            W = tuple(np.ones(n) for n in self.counts)
        else:
            W = tuple(np.asarray(w, dtype=float).reshape(-1) for w in self.weights)
            if len(W) != 3 or any(len(w) != n for w, n in zip(W, self.counts)):
                raise ValueError("need one weight per line in each set")
            if any(np.any(~(w > 0)) or np.any(~np.isfinite(w)) for w in W):
                raise ValueError("weights must be positive and finite")
        object.__setattr__(self, "weights", W)
        if self.segments is not None:
            S = tuple(np.asarray(x, dtype=float).reshape(-1, 4) for x in self.segments)
            if len(S) != 3 or any(len(x) != n for x, n in zip(S, self.counts)):
                raise ValueError("need one segment per line in each set")
            object.__setattr__(self, "segments", S)

    @property
    def sets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.L1, self.L2, self.L3

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.L1), len(self.L2), len(self.L3)

    @property
    def total(self) -> int:
        return sum(self.counts)

    @classmethod
    def from_labels(
        cls,
        lines: np.ndarray,
        labels: np.ndarray,
        weights: np.ndarray | None = None,
        segments: np.ndarray | None = None,
    ) -> "InlierPartition":
        """Build from per-line VP labels; labels outside 0..2 are ignored."""
        lines = np.asarray(lines, dtype=float)
        labels = np.asarray(labels)

        def split(a):
            return None if a is None else tuple(np.asarray(a, dtype=float)[labels == i] for i in range(3))

        return cls(*split(lines), weights=split(weights), segments=split(segments))

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All lines as one ``(N, 3)`` array plus the VP index of each row."""
        idx = np.concatenate([np.full(n, i) for i, n in enumerate(self.counts)]).astype(int)
        return np.vstack(self.sets), idx

    def stacked_weights(self) -> np.ndarray:
        """Weights in the row order of :meth:`stacked`."""
        return np.concatenate(self.weights)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def segment_factor(segments: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-segment factor turning ``vp_line_distance`` into an endpoint distance.

    For a segment of length ``len`` with midpoint ``m`` and a VP ``v``
    (homogeneous, any scale) the factor is ``len |v| / |m v_z - v_xy|``,
    i.e. the length times the ratio between the VP's homogeneous norm and
    its distance to the midpoint.  The distance is floored at half the
    segment length, the smallest value a consistent VP can take.
    """
    S = np.asarray(segments, dtype=float).reshape(-1, 4)
    v = np.asarray(v, dtype=float)
    V = np.broadcast_to(v, (len(S), 3))
    length = np.hypot(S[:, 2] - S[:, 0], S[:, 3] - S[:, 1])
    mid = 0.5 * (S[:, :2] + S[:, 2:])
    dist = np.linalg.norm(mid * V[:, 2:3] - V[:, :2], axis=1)
    dist = np.maximum(dist, 0.5 * length * np.abs(V[:, 2]))
    dist = np.maximum(dist, 1e-300)
    return length * np.linalg.norm(V, axis=1) / dist


def endpoint_distance(segments: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Distance (pixels) of each segment's endpoints to the line through its midpoint and ``v``."""
    S = np.asarray(segments, dtype=float).reshape(-1, 4)
    v = np.asarray(v, dtype=float)
    mid = 0.5 * (S[:, :2] + S[:, 2:])
    # line through (mx, my, 1) and v
    l = np.column_stack([
        mid[:, 1] * v[2] - v[1],
        v[0] - mid[:, 0] * v[2],
        mid[:, 0] * v[1] - mid[:, 1] * v[0],
    ])
    num = np.abs(l[:, 0] * S[:, 0] + l[:, 1] * S[:, 1] + l[:, 2])
    return num / np.maximum(np.hypot(l[:, 0], l[:, 1]), 1e-300)


def effective_weights(part: "InlierPartition", frame: ManhattanFrame) -> tuple:
    """Per-set weights used by the refits when linearized around ``frame``."""
    if part.segments is None:
        return part.weights
    V = frame.vps
    return tuple(
        w * segment_factor(S, V[:, i]) for i, (w, S) in enumerate(zip(part.weights, part.segments))
    )


def refit_vp_lsq(lines: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Unit VP minimizing the summed (weighted) squared line-to-VP residuals.

    The minimizer is the right singular vector of the stacked normalized
    lines, each scaled by its weight, with the smallest singular value.
    """
    L = np.asarray(lines, dtype=float).reshape(-1, 3)
    if len(L) < 2:
        raise InsufficientLines(f"need at least 2 lines, got {len(L)}")
    M = normalize_lines(L)
    if weights is not None:
        M = M * np.asarray(weights, dtype=float).reshape(-1, 1)
    # full V so the null vector exists even for two lines
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    if s[1] <= 1e-12 * s[0]:
        raise DegenerateBundle("all lines coincide")
    return Vt[-1]


def focal_from_vps(v1, v2, v3) -> float:
    """Least-squares focal length from three mutually orthogonal VPs.

    Each pair gives ``-vi_z vj_z f^2 = vi_x vj_x + vi_y vj_y``; the single
    unknown ``f^2`` is solved in closed form.  VPs are brought to unit norm
    first so the result does not depend on their homogeneous scale.
    """
    V = [np.asarray(v, dtype=float) / np.linalg.norm(v) for v in (v1, v2, v3)]
    pairs = ((0, 1), (0, 2), (1, 2))
    a = np.array([-V[i][2] * V[j][2] for i, j in pairs])
    b = np.array([V[i][0] * V[j][0] + V[i][1] * V[j][1] for i, j in pairs])
    aa = float(a @ a)
    if aa < 1e-24:
        raise RankDeficient("focal constraints vanish (VPs at infinity)")
    f2 = float(a @ b) / aa
    if not f2 > 0.0:
        raise NonPositiveFocalSquared(f"f^2 = {f2}")
    return math.sqrt(f2)


def _frame_from_vps(V: list[np.ndarray], f: float) -> ManhattanFrame:
    D = np.column_stack([np.array([v[0] / f, v[1] / f, v[2]]) for v in V])
    D /= np.linalg.norm(D, axis=0)
    if np.linalg.det(D) < 0:
        # a reflection would project badly; flip one axis (same Manhattan frame)
        D[:, 2] = -D[:, 2]
    return ManhattanFrame(nearest_rotation(D), f)


def nonminimal_solve(
    part: InlierPartition, fallback: ManhattanFrame, stats: dict | None = None
) -> ManhattanFrame:
    """Refit VPs, focal and rotation from all inliers; ``fallback`` on failure."""
    try:
        if min(part.counts) < 2:
            raise InsufficientLines("every VP needs at least 2 inliers")
        ref = fallback.vps
        V = []
        for i, (L, w) in enumerate(zip(part.sets, effective_weights(part, fallback))):
            v = refit_vp_lsq(L, w)
            # keep orientation consistent with the fallback so D stays near SO(3)
            V.append(v if v @ ref[:, i] >= 0 else -v)
        f = focal_from_vps(*V)
        return _frame_from_vps(V, f)
    except (VPError, np.linalg.LinAlgError, ValueError):
        if stats is not None:
            stats["nms_failures"] = stats.get("nms_failures", 0) + 1
        return fallback


# ---------------------------------------------------------------------------
# residuals shared by the iterative refiners
# ---------------------------------------------------------------------------

def _line_vps(R: np.ndarray, f: float, idx: np.ndarray) -> np.ndarray:
    V = R * np.array([[f], [f], [1.0]])
    return V[:, idx].T


def residuals(frame: ManhattanFrame, lines: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Signed line-to-VP residuals ``l.v / |v|`` (lines normalized)."""
    v = _line_vps(frame.rotation, frame.focal, idx)
    return np.einsum("ij,ij->i", lines, v) / np.linalg.norm(v, axis=1)


def cost(frame: ManhattanFrame, part: InlierPartition) -> float:
    """Weighted sum of squared residuals, weights taken at ``frame``."""
    L, idx = part.stacked()
    if len(L) == 0:
        return 0.0
    r = residuals(frame, normalize_lines(L), idx) * np.concatenate(effective_weights(part, frame))
    return float(r @ r)


def residual_jacobian(
    R: np.ndarray, f: float, lines: np.ndarray, idx: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Residuals and their Jacobian w.r.t. the local chart at ``(R, f)``.

    Chart: ``R(w) = exp([w]x) R`` and ``f(s) = f exp(s)``; columns of the
    Jacobian are ``(w1, w2, w3, s)`` evaluated at ``w = 0, s = 0``.
    """
    v = _line_vps(R, f, idx)
    n = np.linalg.norm(v, axis=1)
    r = np.einsum("ij,ij->i", lines, v) / n
    w = (lines - (r / n)[:, None] * v) / n[:, None]
    cols = R[:, idx].T
    Kw = w * np.array([f, f, 1.0])
    J = np.empty((len(lines), 4))
    # d(exp([w]x) r_i)/dw = -[r_i]x, hence w^T K (-[r_i]x) = (r_i x K w)^T
    J[:, :3] = cross_rows(cols, Kw)
    J[:, 3] = f * (w[:, 0] * cols[:, 0] + w[:, 1] * cols[:, 1])
    return r, J


def residuals_at(
    R: np.ndarray, f: float, lines: np.ndarray, idx: np.ndarray, delta: np.ndarray
) -> np.ndarray:
    """Residuals after applying a chart update ``delta = (w1, w2, w3, s)``."""
    R2 = so3_exp(delta[:3]) @ R
    f2 = f * math.exp(delta[3])
    v = _line_vps(R2, f2, idx)
    return np.einsum("ij,ij->i", lines, v) / np.linalg.norm(v, axis=1)


# ---------------------------------------------------------------------------
# iterative refiners
# ---------------------------------------------------------------------------

def align_to_axis(frame: ManhattanFrame, axis: np.ndarray) -> ManhattanFrame:
    """Rotate ``frame`` minimally so that its column closest to ``axis`` equals it."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    R = frame.rotation
    dots = R.T @ a
    j = int(np.argmax(np.abs(dots)))
    c = R[:, j] * math.copysign(1.0, dots[j])
    w = np.cross(c, a)
    s = float(np.linalg.norm(w))
    if s < 1e-15:
        return frame
    angle = math.atan2(s, float(c @ a))
    return ManhattanFrame(nearest_rotation(so3_exp(w / s * angle) @ R), frame.focal)


def refine_ls(
    frame: ManhattanFrame,
    part: InlierPartition,
    max_iters: int = 50,
    lambda0: float = 1e-3,
    rel_tol: float = 1e-10,
    fixed_axis: np.ndarray | None = None,
) -> ManhattanFrame:
    """Levenberg-Marquardt on (weighted) squared line-to-VP residuals of all inliers.

    With ``fixed_axis`` (a known camera-frame direction such as exact
    gravity) the frame is first aligned to it and the rotation may only
    turn about that axis, leaving two unknowns instead of four.
    """
    L, idx = part.stacked()
    if len(L) < 4:
        return frame
    L = normalize_lines(L)
    if fixed_axis is not None:
        axis = np.asarray(fixed_axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        aligned = align_to_axis(frame, axis)
        # columns of P map the reduced parameters onto (w1, w2, w3, s)
        P = np.zeros((4, 2))
        P[:3, 0] = axis
        P[3, 1] = 1.0
    else:
        aligned = frame
        P = np.eye(4)
    # weights stay fixed during one call; repeated calls reweight
    wts = np.concatenate(effective_weights(part, aligned))

    def evaluate(R, f):
        r, J = residual_jacobian(R, f, L, idx)
        return r * wts, (J * wts[:, None]) @ P

    R, f = aligned.rotation, aligned.focal
    r, J = evaluate(R, f)
    c = float(r @ r)
    if c == 0.0:
        return aligned
    mu = lambda0
    improved = False
    for _ in range(max_iters):
        H = J.T @ J
        g = J.T @ r
        if not np.all(np.isfinite(H)) or float(np.max(np.abs(g))) < 1e-300:
            break
        D = np.maximum(np.diag(H), 1e-12)
        try:
            step = P @ np.linalg.solve(H + mu * np.diag(D), -g)
        except np.linalg.LinAlgError:
            mu *= 10.0
            continue
        if not np.all(np.isfinite(step)) or abs(step[3]) > MAX_LOG_FOCAL_STEP:
            mu *= 10.0
            continue
        R_new = so3_exp(step[:3]) @ R
        f_new = f * math.exp(step[3])
        r_new, J_new = evaluate(R_new, f_new)
        c_new = float(r_new @ r_new)
        if c_new < c:
            rel = (c - c_new) / c
            R, f, r, J, c = R_new, f_new, r_new, J_new, c_new
            improved = True
            mu *= 0.1
            if rel < rel_tol:
                break
        else:
            mu *= 10.0
            if mu > 1e16:
                break
    if not improved:
        return aligned
    # re-orthonormalize against drift from repeated composition
    return ManhattanFrame(nearest_rotation(R), f)


def nonminimal_linearized(
    part: InlierPartition, init: ManhattanFrame, iters: int = 10
) -> ManhattanFrame:
    """Iterative non-minimal solver with a first-order model of ``K R``.

    Each iteration solves ``min |A B dx + A C|^2`` for
    ``dx = (dv1, dv2, dv3, df)``, updates the VPs linearly and re-projects
    them onto a valid frame with :func:`focal_from_vps` and SVD.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    L, idx = part.stacked()
    if len(L) < 4:
        return init
    L = normalize_lines(L)
    best, best_cost = init, cost(init, part)
    cur = init
    for _ in range(iters):
        if best_cost == 0.0:
            break
        R0, f0 = cur.rotation, cur.focal
        wts = np.concatenate(effective_weights(part, cur))
        rows = np.empty((len(L), 4))
        rhs = np.empty(len(L))
        Bs, cs = [], []
        for i in range(3):
            r1, r2, r3 = R0[:, i]
            B = np.array(
                [
                    [0.0, -f0 * r3, f0 * r2, r1],
                    [f0 * r3, 0.0, -f0 * r1, r2],
                    [-r2, r1, 0.0, 0.0],
                ]
            )
            c = np.array([f0 * r1, f0 * r2, r3])
            sel = idx == i
            rows[sel] = L[sel] @ B
            rhs[sel] = -(L[sel] @ c)
            Bs.append(B)
            cs.append(c)
        dx, *_ = np.linalg.lstsq(rows * wts[:, None], rhs * wts, rcond=None)
        V = [Bs[i] @ dx + cs[i] for i in range(3)]
        try:
            f = focal_from_vps(*V)
            cur = _frame_from_vps(V, f)
        except (VPError, np.linalg.LinAlgError, ValueError):
            break
        c_cur = cost(cur, part)
        if c_cur < best_cost:
            best, best_cost = cur, c_cur
    return best
