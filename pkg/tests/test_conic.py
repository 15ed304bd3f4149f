import numpy as np
import pytest
from scipy.optimize import minimize

from voltkernel import conic


def make_kkt_instance(rng, n, cones_spec):
    """Random problem with a known optimal objective, built from KKT.

    Pick x*, choose (s*, z*) complementary per cone block, then read off
    b = A x* + s* and c = -A'z*; strong duality gives objective c'x*.
    """
    m = sum(ln for _, ln in cones_spec)
    A = rng.standard_normal((m, n))
    xstar = rng.standard_normal(n)
    s = np.zeros(m)
    z = np.zeros(m)
    i = 0
    for kind, ln in cones_spec:
        if kind == "zero":
            z[i:i + ln] = rng.standard_normal(ln)
        elif kind == "nonneg":
            active = rng.random(ln) < 0.5
            s[i:i + ln] = np.where(active, 0.0, rng.random(ln) + 0.1)
            z[i:i + ln] = np.where(active, rng.random(ln) + 0.1, 0.0)
        else:
            u = rng.standard_normal(ln - 1)
            mode = rng.integers(3)
            if mode == 0:  # slack interior
                s[i] = np.linalg.norm(u) + 0.5
                s[i + 1:i + ln] = u
            elif mode == 1:  # dual interior
                z[i] = np.linalg.norm(u) + 0.5
                z[i + 1:i + ln] = u
            else:  # both on the boundary, complementary
                t = np.linalg.norm(u) or 1.0
                s[i] = t
                s[i + 1:i + ln] = u
                al = rng.random() + 0.5
                z[i] = al * t
                z[i + 1:i + ln] = -al * u
        i += ln
    prog = conic.ConeProgram(c=-A.T @ z, A=A, b=A @ xstar + s,
                             cones=list(cones_spec))
    return prog, float(prog.c @ xstar)


class TestProjectSoc:
    def test_inside_cone_unchanged(self):
        v, t = conic.project_soc(np.array([1.0, 0.0]), 2.0)
        assert np.allclose(v, [1.0, 0.0]) and t == 2.0

    def test_polar_interior_maps_to_zero(self):
        v, t = conic.project_soc(np.array([1.0, 0.0]), -2.0)
        assert np.allclose(v, 0.0) and t == 0.0

    def test_boundary_formula(self):
        v, t = conic.project_soc(np.array([3.0, 4.0]), 0.0)
        assert np.allclose(v, [1.5, 2.0]) and t == 2.5

    def test_idempotent_and_nonexpansive(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            u = rng.standard_normal(4) * 3
            v = rng.standard_normal(4) * 3
            pu = np.concatenate([[conic.project_soc(u[1:], u[0])[1]],
                                 conic.project_soc(u[1:], u[0])[0]])
            ppu_v, ppu_t = conic.project_soc(pu[1:], pu[0])
            assert np.allclose(np.concatenate([[ppu_t], ppu_v]), pu, atol=1e-12)
            pv = np.concatenate([[conic.project_soc(v[1:], v[0])[1]],
                                 conic.project_soc(v[1:], v[0])[0]])
            assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + 1e-12


class TestSolve:
    def test_norm_epigraph(self):
        # minimize t subject to ||(1,1)|| <= t
        p = conic.ConeProgram(c=[1.0], A=np.array([[-1.0], [0.0], [0.0]]),
                              b=[0.0, 1.0, 1.0], cones=[("soc", 3)])
        sol = conic.solve(p)
        assert sol.optimal
        assert abs(sol.x[0] - np.sqrt(2)) < 1e-5

    def test_lp_corner(self):
        p = conic.ConeProgram(c=[1.0], A=np.array([[-1.0]]), b=[-3.0],
                              cones=[("nonneg", 1)])
        sol = conic.solve(p)
        assert sol.optimal
        assert abs(sol.x[0] - 3.0) < 1e-5

    def test_against_independent_nlp_reference(self):
        # same instance solved by scipy SLSQP on the smooth reformulation
        rng = np.random.default_rng(3)
        cones = [("nonneg", 8), ("soc", 5)]
        prog, _ = make_kkt_instance(rng, 30, cones)

        def neg_slack(x):
            w = prog.b - prog.A @ x
            return np.concatenate([w[:8], [w[8] - np.linalg.norm(w[9:13])]])

        ref = minimize(lambda x: prog.c @ x, np.zeros(30), jac=lambda x: prog.c,
                       constraints=[{"type": "ineq", "fun": neg_slack}],
                       method="SLSQP", options={"maxiter": 500, "ftol": 1e-12})
        assert ref.success
        sol = conic.solve(prog)
        assert sol.optimal
        assert abs(float(prog.c @ sol.x) - ref.fun) <= 1e-5 * (1 + abs(ref.fun))

    @pytest.mark.parametrize("method", ["splitting", "ipm", "hybrid"])
    def test_methods_agree(self, method):
        rng = np.random.default_rng(11)
        prog, obj = make_kkt_instance(rng, 25, [("zero", 3), ("nonneg", 10),
                                                ("soc", 6)])
        sol = conic.solve(prog, method=method)
        assert sol.optimal
        assert abs(float(prog.c @ sol.x) - obj) <= 1e-5 * (1 + abs(obj))

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        prog, _ = make_kkt_instance(rng, 20, [("nonneg", 12), ("soc", 4)])
        a = conic.solve(prog)
        b = conic.solve(prog)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.z, b.z)
        assert a.iterations == b.iterations

    def test_weak_duality_on_optimal_solves(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            prog, _ = make_kkt_instance(rng, 15, [("nonneg", 10), ("soc", 4)])
            sol = conic.solve(prog)
            assert sol.optimal
            primal = float(prog.c @ sol.x)
            dual = -float(prog.b @ sol.z)
            assert primal >= dual - 1e-6 * (1 + abs(primal))

    def test_infeasible_detected(self):
        # x >= 3 and x <= 1
        p = conic.ConeProgram(c=[1.0], A=np.array([[-1.0], [1.0]]),
                              b=[-3.0, 1.0], cones=[("nonneg", 2)])
        assert conic.solve(p).status == "infeasible_detected"

    def test_equality_rows(self):
        # min x s.t. x + y = 2, y <= 1  ->  x* = 1
        p = conic.ConeProgram(c=[1.0, 0.0],
                              A=np.array([[1.0, 1.0], [0.0, 1.0]]),
                              b=[2.0, 1.0], cones=[("zero", 1), ("nonneg", 1)])
        sol = conic.solve(p)
        assert sol.optimal
        assert abs(sol.x[0] - 1.0) < 1e-5


class TestResiduals:
    def test_certified_pair_below_tol(self):
        rng = np.random.default_rng(13)
        prog, _ = make_kkt_instance(rng, 18, [("zero", 2), ("nonneg", 8),
                                              ("soc", 4)])
        sol = conic.solve(prog)
        pres, dres, gap = conic.residuals(prog, sol.x, sol.z)
        assert max(pres, dres, gap) <= 1e-7

    def test_perturbation_grows_linearly(self):
        rng = np.random.default_rng(14)
        prog, _ = make_kkt_instance(rng, 18, [("zero", 4), ("nonneg", 8)])
        sol = conic.solve(prog)
        x2 = sol.x.copy()
        x2[0] += 1e-2
        pres, _, _ = conic.residuals(prog, x2, sol.z)
        grow = abs(prog.A[:4, 0]).max() * 1e-2 / (1 + np.linalg.norm(prog.b))
        assert pres > 0.1 * grow
        assert pres < 1e2 * grow

    def test_zero_problem(self):
        prog = conic.ConeProgram(c=np.zeros(3), A=np.zeros((0, 3)),
                                 b=np.zeros(0), cones=[])
        assert conic.residuals(prog, np.zeros(3), np.zeros(0)) == (0.0, 0.0, 0.0)

    def test_dimension_mismatch(self):
        prog = conic.ConeProgram(c=[1.0], A=np.array([[-1.0]]), b=[0.0],
                                 cones=[("nonneg", 1)])
        with pytest.raises(ValueError):
            conic.residuals(prog, np.zeros(2), np.zeros(1))


class TestProgramValidation:
    def test_cone_lengths_must_partition_rows(self):
        with pytest.raises(ValueError):
            conic.ConeProgram(c=[1.0], A=np.array([[1.0], [1.0]]),
                              b=[0.0, 0.0], cones=[("nonneg", 1)])

    def test_scalar_soc_behaves_as_nonneg(self):
        # min x s.t. x >= 2 written with a length-1 soc row
        p = conic.ConeProgram(c=[1.0], A=np.array([[-1.0]]), b=[-2.0],
                              cones=[("soc", 1)])
        sol = conic.solve(p)
        assert sol.optimal and abs(sol.x[0] - 2.0) < 1e-5


def test_dump_load_round_trip(tmp_path):
    rng = np.random.default_rng(99)
    prog, _ = make_kkt_instance(rng, 8, [("zero", 2), ("nonneg", 4), ("soc", 3)])
    path = tmp_path / "prog.txt"
    conic.dump_program(prog, path)
    back = conic.load_program(path)
    assert np.array_equal(back.A, prog.A)
    assert np.array_equal(back.b, prog.b)
    assert np.array_equal(back.c, prog.c)
    assert back.cones == prog.cones
