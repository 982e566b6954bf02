import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manhattan_vp.errors import (
    ConfigMismatch,
    DenominatorSingularity,
    GravitySingularity,
    NegativeFocalSquared,
    NoPositiveFocal,
    NoRealRoot,
    NoRootInBracket,
    ParallelLines,
    SolverError,
    VPsAtInfinity,
)
from manhattan_vp.geometry import GravityObservation, GravityQuality, ManhattanFrame, axis_angle, manhattan_rotation_error_deg
from manhattan_vp.minimal_solvers import (
    ALL_SOLVERS,
    FOUR_LINE_SOLVERS,
    GRAVITY_SOLVERS,
    MinimalSample,
    SolverId,
    _angle_residuals,
    _deltas,
    _basis,
    _solve_110g_detailed,
    build_ortho_basis,
    run_solver,
    solve_011g,
    solve_110g,
    solve_110g_quartic,
    solve_200g,
    solve_211,
    solve_220,
    solve_lines,
    solve_quadratic,
)
from manhattan_vp.synthetic import random_rotation

from conftest import best_error, exact_gravity, noiseless_minimal

TOL_ROT = {s: 1e-6 for s in ALL_SOLVERS} | {SolverId.S211: 1e-5}
TOL_F = {s: 1e-8 for s in ALL_SOLVERS} | {SolverId.S211: 1e-4}


def lines_through(V, dirs, rng, scale=500.0):
    """Noiseless lines through VP columns ``V[:, i]`` and random image points."""
    return [np.cross(V[:, i], np.r_[rng.uniform(-scale, scale, 2), 1.0]) for i in dirs]


def solve(solver, inst, g=None):
    return solve_lines(solver, inst.lines, inst.gravity_gt if g is None else g)


class TestQuadratic:
    @pytest.mark.parametrize(
        "coeffs, roots",
        [((1, -3, 2), [1, 2]), ((1, 0, 1), []), ((0, 2, -4), [2]), ((1, -2, 1), [1, 1]), ((0, 0, 0), [])],
    )
    def test_examples(self, coeffs, roots):
        assert sorted(solve_quadratic(*coeffs)) == pytest.approx(sorted(roots))

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    def test_matches_numpy(self, a, b, c):
        if abs(a) < 1e-6:
            return
        ours = sorted(solve_quadratic(a, b, c))
        ref = sorted(r.real for r in np.roots([a, b, c]) if abs(r.imag) < 1e-9 * max(1, abs(r)))
        if len(ours) == len(ref):
            assert ours == pytest.approx(ref, rel=1e-6, abs=1e-9)

    def test_large_root_with_tiny_leading_coefficient(self):
        # x = 1e6 and x = 1: leading coefficient is tiny after normalization
        r = sorted(solve_quadratic(1.0, -(1e6 + 1.0), 1e6))
        assert r == pytest.approx([1.0, 1e6], rel=1e-12)


class TestRoundTrip:
    @pytest.mark.parametrize("solver", ALL_SOLVERS, ids=lambda s: s.value)
    def test_noiseless(self, solver):
        for i in range(300):
            inst = noiseless_minimal(solver, 1, i)
            frames = solve(solver, inst)
            assert all(fr.is_valid() for fr in frames)
            rot, rel = best_error(frames, inst.gt_frame)
            assert rot < TOL_ROT[solver] and rel < TOL_F[solver], (i, rot, rel)

    def test_quartic_round_trip(self):
        for i in range(300):
            inst = noiseless_minimal(SolverId.S110G, 2, i)
            rot, _ = best_error(solve_110g_quartic(*inst.lines, inst.gravity_gt), inst.gt_frame)
            assert rot < 1e-5

    @pytest.mark.parametrize("solver", ALL_SOLVERS, ids=lambda s: s.value)
    def test_solution_counts(self, solver):
        bound = {SolverId.S110G: 2, SolverId.S211: 2}.get(solver, 1)
        rng = np.random.default_rng(5)
        for _ in range(300):
            lines = rng.normal(size=(solver.sample_size, 3))
            g = rng.normal(size=3)
            try:
                frames = solve_lines(solver, lines, g / np.linalg.norm(g))
            except SolverError:
                continue
            assert len(frames) <= bound
            assert all(fr.is_valid() for fr in frames)


class TestGravitySolvers:
    def test_200g_degenerate(self):
        l = np.array([1.0, 2.0, 3.0])
        with pytest.raises(ParallelLines):
            solve_200g(l, l, [0.0, 0.6, 0.8])
        with pytest.raises(GravitySingularity):
            solve_200g(l, np.array([2.0, -1.0, 0.5]), [0.0, -1.0, 0.0])

    def test_011g_focal_example(self):
        g = np.array([0.0, 1.0, 1.0]) / math.sqrt(2)
        (fr,) = solve_011g(np.array([2.0, 1.0, -2.0]), np.array([1.0, 0.0, 0.0]), g)
        assert fr.focal == pytest.approx(2.0, rel=1e-12)

    def test_011g_denominator(self):
        g = np.array([0.0, 1.0, 1.0]) / math.sqrt(2)
        with pytest.raises(DenominatorSingularity):
            solve_011g(np.array([1.0, 0.0, 3.0]), np.array([1.0, 2.0, 0.0]), g)

    @given(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
    def test_basis_invariants(self, g):
        g = np.array(g)
        if np.linalg.norm(g) < 1e-3:
            return
        g = g / np.linalg.norm(g)
        B = build_ortho_basis(g)
        for a, b in ((B.b1, B.b1), (B.b2, B.b2)):
            assert a @ b == pytest.approx(1.0, abs=1e-10)
        for a, b in ((B.b1, B.b2), (B.b1, g), (B.b2, g)):
            assert abs(a @ b) < 1e-10

    def test_basis_xy_plane(self):
        B = build_ortho_basis([0.0, 0.0, 1.0])
        assert abs(B.b1[2]) < 1e-15 and abs(B.b2[2]) < 1e-15

    def test_basis_generic_axis(self, rng):
        for _ in range(10_000):
            g = rng.normal(size=3) * [100.0, 1.0, 1.0]  # mostly near the x axis
            g /= np.linalg.norm(g)
            k = int(np.argmin(np.abs(g)))
            # the helper axis is the least aligned one, so g x u is well conditioned
            assert np.linalg.norm(np.cross(g, np.eye(3)[k])) > 0.5
            b1, _ = _basis(tuple(g))
            assert abs(b1[k]) < 1e-12

    def test_110g_without_gravity_singularity(self, rng):
        # vertical exactly along -y: the 2-0-0g and 0-1-1g formulas divide by g_z = 0
        for _ in range(50):
            R = axis_angle([0, 1, 0], rng.uniform(0, 2 * math.pi)) @ np.array(
                [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
            )
            assert np.allclose(R[:, 0], [0, -1, 0])
            f = rng.uniform(100, 2000)
            V = np.diag([f, f, 1.0]) @ R
            l1, l2 = lines_through(V, (1, 2), rng)
            frames = solve_110g(l1, l2, [0.0, -1.0, 0.0])
            rot, rel = best_error(frames, ManhattanFrame(R, f))
            assert rot < 1e-6 and rel < 1e-8
        with pytest.raises(GravitySingularity):
            solve_200g(l1, l2 + [0, 0, 1], [0.0, -1.0, 0.0])

    def test_110g_no_positive_focal(self, rng):
        found = 0
        for _ in range(200):
            R = random_rotation(rng)
            f = rng.uniform(100, 2000)
            # lines consistent with a negative focal length
            l1, l2 = lines_through(np.diag([-f, -f, 1.0]) @ R, (1, 2), rng)
            try:
                solve_110g(l1, l2, R[:, 0])
            except NoPositiveFocal:
                found += 1
        assert found > 0

    def test_quartic_all_zero(self):
        with pytest.raises(NoRealRoot):
            solve_110g_quartic(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]), [1.0, 0.0, 0.0])

    @pytest.mark.parametrize("solver", GRAVITY_SOLVERS, ids=lambda s: s.value)
    def test_gravity_fidelity(self, solver, rng):
        for _ in range(300):
            lines = rng.normal(size=(2, 3))
            g = rng.normal(size=3)
            g /= np.linalg.norm(g)
            try:
                frames = solve_lines(solver, lines, g)
            except SolverError:
                continue
            for fr in frames:
                c = fr.rotation[:, 0]
                assert min(np.abs(c - g).max(), np.abs(c + g).max()) < 1e-10

    def test_110g_polynomial_residuals(self):
        for i in range(500):
            inst = noiseless_minimal(SolverId.S110G, 3, i)
            l1, l2 = inst.lines
            g = inst.gravity_gt
            b1, b2 = _basis(tuple(g))
            d = _deltas(tuple(l1 / np.linalg.norm(l1)), tuple(l2 / np.linalg.norm(l2)), b1, b2)
            for _, f, t in _solve_110g_detailed(l1, l2, g):
                den = 1 + t * t
                r = _angle_residuals(f, (1 - t * t) / den, 2 * t / den, d)
                assert max(r) < 1e-8

    def test_elimination_orders_agree(self):
        for i in range(500):
            inst = noiseless_minimal(SolverId.S110G, 4, i)
            a = solve_110g(*inst.lines, inst.gravity_gt)
            b = solve_110g_quartic(*inst.lines, inst.gravity_gt)
            assert len(a) == len(b)
            for fa in a:
                match = [
                    fb for fb in b
                    if abs(fa.focal - fb.focal) <= 1e-6 * fa.focal
                    and manhattan_rotation_error_deg(fa.rotation, fb.rotation) <= 1e-6
                ]
                assert match, i


class TestFourLineSolvers:
    def test_220_degenerate(self, rng):
        l = np.array([1.0, 2.0, 3.0])
        with pytest.raises(ParallelLines):
            solve_220(l, l, *rng.normal(size=(2, 3)))
        R = random_rotation(rng)
        V = np.diag([800.0, 800.0, 1.0]) @ R
        same = lines_through(V, (0, 0, 0, 0), rng)
        with pytest.raises((NegativeFocalSquared, VPsAtInfinity)):
            solve_220(*same)

    def test_220_vp_at_infinity(self):
        # both pairs parallel in the image: VPs on the line at infinity
        with pytest.raises(VPsAtInfinity):
            solve_220([0, 1, 0], [0, 1, 5], [1, 0, 0], [1, 0, 3])

    def test_211_degenerate(self, rng):
        l = np.array([1.0, 2.0, 3.0])
        with pytest.raises(ParallelLines):
            solve_211(l, l, *rng.normal(size=(2, 3)))

    def test_211_known_focal_in_bracket(self, rng):
        for _ in range(50):
            R = random_rotation(rng)
            V = np.diag([500.0, 500.0, 1.0]) @ R
            lines = lines_through(V, (0, 0, 1, 2), rng)
            frames = solve_211(*lines, focal_range=(50, 5000))
            rot, rel = best_error(frames, ManhattanFrame(R, 500.0))
            assert rel < 1e-4 and rot < 1e-5
        with pytest.raises(NoRootInBracket):
            solve_211(*lines, focal_range=(5000, 6000))


class TestScaleInvariance:
    @pytest.mark.parametrize("solver", ALL_SOLVERS, ids=lambda s: s.value)
    def test_positive_rescaling(self, solver):
        rng = np.random.default_rng(11)
        for i in range(50):
            inst = noiseless_minimal(solver, 5, i)
            lines = inst.lines
            k = rng.uniform(0.01, 100.0, size=(len(lines), 1))
            a = solve(solver, inst)
            b = solve_lines(solver, lines * k, inst.gravity_gt)
            assert len(a) == len(b)
            # two roots can share a focal, so match as sets
            for fa in a:
                assert any(
                    np.abs(fa.rotation - fb.rotation).max() < 1e-10
                    and abs(fa.focal - fb.focal) <= 1e-10 * fa.focal
                    for fb in b
                ), i


class TestDispatch:
    def test_matches_direct_call(self):
        inst = noiseless_minimal(SolverId.S200G, 6)
        a = run_solver(SolverId.S200G, MinimalSample(inst.lines, (1, 1)), exact_gravity(inst))
        b = solve_200g(*inst.lines, inst.gravity_gt)
        assert np.array_equal(a[0].rotation, b[0].rotation) and a[0].focal == b[0].focal

    def test_config_mismatch(self):
        inst = noiseless_minimal(SolverId.S200G, 6)
        with pytest.raises(ConfigMismatch):
            run_solver(SolverId.S220, MinimalSample(inst.lines, None))
        with pytest.raises(ConfigMismatch):
            run_solver(SolverId.S110G, MinimalSample(inst.lines, None), GravityObservation.absent())
        with pytest.raises(ConfigMismatch):
            run_solver(SolverId.S200G, MinimalSample(inst.lines, (1, 2)), exact_gravity(inst))

    def test_four_line_ignore_gravity(self):
        inst = noiseless_minimal(SolverId.S220, 7)
        a = run_solver(SolverId.S220, MinimalSample(inst.lines, (0, 0, 1, 1)))
        b = run_solver(SolverId.S220, MinimalSample(inst.lines, (0, 0, 1, 1)),
                       GravityObservation([0, 0, 1], GravityQuality.EXACT))
        assert np.array_equal(a[0].rotation, b[0].rotation)

    def test_solver_metadata(self):
        for s in ALL_SOLVERS:
            assert len(s.pattern) == s.sample_size
            assert s.needs_gravity == (s in GRAVITY_SOLVERS)
        assert {s.sample_size for s in FOUR_LINE_SOLVERS} == {4}
