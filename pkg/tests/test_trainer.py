import json

import numpy as np
import pytest

from voltkernel import conic, feeder, kernels, scenario, trainer

from conftest import tiny_scenario_set


def one_bus_sens(x):
    return feeder.Sensitivities(R=np.array([[x / 2]]), X=np.array([[x]]), v0=1.0)


def grid_search_q(x, y, tau, q_bar):
    """Two-stage 1-D grid refinement of min [|x q + y| - tau]_+ over the box."""
    def cost(q):
        return np.maximum(np.abs(x * q + y) - tau, 0.0)
    grid = np.linspace(-q_bar, q_bar, 40001)
    q0 = grid[np.argmin(cost(grid))]
    lo = max(-q_bar, q0 - 2e-3)
    hi = min(q_bar, q0 + 2e-3)
    fine = np.linspace(lo, hi, 40001)
    return fine[np.argmin(cost(fine))]


class TestAssembleOracle:
    def _solve_one_bus(self, y_val, q_bar_val, tau, mu=0.0):
        scen = tiny_scenario_set(None, [y_val], [q_bar_val],
                                 z_cols=np.array([[0.3]]))
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_tau", tau),
                                  mu=mu, kernel=kernels.KernelSpec("linear", jitter=1e-3))
        sens = one_bus_sens(0.5)
        inputs = trainer._training_inputs(scen, False)
        grams = kernels.GramSet.build({1: cfg.kernel}, inputs)
        prog, idx = trainer.assemble(scen, grams, sens, cfg)
        sol = conic.solve(prog, tol=1e-9)
        assert sol.optimal
        q = idx.extract_q(sol.x, grams)[1][0]
        return q, sol, prog

    def test_unconstrained_matches_grid_search(self):
        # q* = -y/x when the box allows it
        q, _, _ = self._solve_one_bus(y_val=0.2, q_bar_val=2.0, tau=1e-8)
        oracle = grid_search_q(0.5, 0.2, 1e-8, 2.0)
        assert abs(q - oracle) <= 1e-6
        assert abs(q + 0.4) <= 1e-6

    def test_box_active_matches_grid_search(self):
        q, _, _ = self._solve_one_bus(y_val=0.2, q_bar_val=0.3, tau=1e-8)
        oracle = grid_search_q(0.5, 0.2, 1e-8, 0.3)
        assert abs(q - oracle) <= 1e-6
        assert abs(q + 0.3) <= 1e-6

    def test_wide_deadband_zeroes_everything(self, midday_scen, sens13):
        tau = 1.1 * float(np.linalg.norm(midday_scen.y, axis=1).max())
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_tau", tau),
                                  mu=1e-3,
                                  kernel=kernels.KernelSpec("gaussian", gamma=6.0))
        inputs = trainer._training_inputs(midday_scen, False)
        grams = kernels.GramSet.build(
            {b: cfg.kernel for b in midday_scen.inverter_buses}, inputs)
        prog, idx = trainer.assemble(midday_scen, grams, sens13, cfg)
        sol = conic.solve(prog, tol=1e-9)
        assert sol.optimal
        for bus in idx.buses:
            assert np.abs(sol.x[idx.a_slices[bus]]).max() <= 1e-6
        assert np.abs(sol.x[idx.d_slice]).max() <= 1e-6
        assert abs(float(prog.c @ sol.x)) <= 1e-6

    def test_dimension_guard(self, midday_scen, sens13):
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_tau", 0.01),
                                  kernel=kernels.KernelSpec("linear"))
        sub = midday_scen.subset(range(10))
        inputs = trainer._training_inputs(midday_scen, False)
        grams = kernels.GramSet.build(
            {b: cfg.kernel for b in midday_scen.inverter_buses}, inputs)
        with pytest.raises(trainer.TrainingError):
            trainer.assemble(sub, grams, sens13, cfg)


class TestTrain:
    def test_zero_grid_yields_inert_rules(self, feeder13, sens13):
        T, n = 12, feeder13.n
        prof = scenario.ProfileSet(
            timestamps=np.arange(T), p_c=np.zeros((T, n)),
            q_c=np.zeros((T, n)), p_g=np.zeros((T, n)),
            s_bar=np.full(n, 0.1))
        scen = scenario.build_scenarios(prof, range(T), sens13, f=feeder13)
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_tau", 1e-4),
                                  mu=1e-3,
                                  kernel=kernels.KernelSpec("gaussian", gamma=6.0))
        rs = trainer.train(scen, sens13, cfg)
        for bus, resp in rs.responses().items():
            assert np.abs(resp).max() <= 1e-6
        assert rs.meta["training_objective"] <= 1e-6

    def test_beats_zero_injection_policy(self, midday_scen, sens13):
        obj = trainer.Objective("delta_tau", 0.001)
        cfg = trainer.TrainConfig(objective=obj, mu=1e-3,
                                  kernel=kernels.KernelSpec("gaussian", gamma=6.0))
        rs = trainer.train(midday_scen, sens13, cfg)
        zero_cost = float(np.mean(trainer.delta_value(obj, midday_scen.y)))
        assert rs.meta["training_delta"] <= zero_cost + 1e-9

    def test_group_sparsity_grows_with_mu(self, feeder13, sens13, profiles480):
        scen = scenario.build_scenarios(profiles480, range(355, 385), sens13,
                                        f=feeder13)
        kern = kernels.KernelSpec("gaussian", gamma=8.0)
        base = trainer.TrainConfig(objective=trainer.Objective("delta_tau", 0.002),
                                   mu=1e-3, kernel=kern, drop_intercept=True)
        big = trainer.TrainConfig(objective=base.objective, mu=1e-1, kernel=kern,
                                  drop_intercept=True)
        rs_small = trainer.train(scen, sens13, base, tol=1e-8)
        rs_big = trainer.train(scen, sens13, big, tol=1e-8)
        inact_small = trainer.sparsity_report(rs_small).inactive_inverters
        inact_big = trainer.sparsity_report(rs_big).inactive_inverters
        assert len(inact_big) >= len(inact_small)

    def test_objective_consistency(self, midday_scen, sens13):
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_tau", 0.005),
                                  mu=1e-3,
                                  kernel=kernels.KernelSpec("gaussian", gamma=6.0))
        inputs = trainer._training_inputs(midday_scen, False)
        grams = kernels.GramSet.build(
            {b: cfg.kernel for b in midday_scen.inverter_buses}, inputs)
        prog, _ = trainer.assemble(midday_scen, grams, sens13, cfg)
        rs = trainer.train(midday_scen, sens13, cfg)
        solver_obj = float(prog.c @ rs.solution.x)
        assert abs(solver_obj - rs.meta["training_objective"]) <= 1e-6

    def test_feasibility_invariant_enforced(self, midday_scen, sens13):
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_tau", 0.005),
                                  mu=1e-3,
                                  kernel=kernels.KernelSpec("gaussian", gamma=6.0))
        rs = trainer.train(midday_scen, sens13, cfg)
        rs.verify()  # no exception
        rs.rules[0].a = rs.rules[0].a + 10.0
        with pytest.raises(trainer.TrainingError):
            rs.verify()

    @pytest.mark.parametrize("kind", ["delta_eps", "delta_s"])
    def test_other_objectives_train(self, midday_scen, sens13, kind):
        obj = trainer.Objective(kind, 0.002 if kind == "delta_eps" else 0.0)
        cfg = trainer.TrainConfig(objective=obj, mu=1e-3,
                                  kernel=kernels.KernelSpec("linear"))
        rs = trainer.train(midday_scen, sens13, cfg)
        zero_cost = float(np.mean(trainer.delta_value(obj, midday_scen.y)))
        assert rs.meta["training_delta"] <= zero_cost + 1e-9


class TestPropositions:
    def test_deadband_sparsity_prop1(self, midday_scen, sens13):
        tau = 0.5 * float(np.median(np.linalg.norm(midday_scen.y, axis=1)))
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_tau", tau),
                                  mu=3e-3,
                                  kernel=kernels.KernelSpec("gaussian", gamma=6.0))
        rs = trainer.train(midday_scen, sens13, cfg, tol=1e-8)
        margin = 1e-7
        q = rs.responses()
        dev = midday_scen.y.copy()
        for bus, qn in q.items():
            dev += np.outer(qn, sens13.X[:, bus - 1])
        dn = np.linalg.norm(dev, axis=1)
        checked = 0
        for s in range(midday_scen.S):
            if dn[s] > tau - margin:
                continue
            for r in rs.rules:
                if abs(q[r.bus][s]) <= r.q_bar[s] - margin:
                    checked += 1
                    assert abs(r.a[s]) <= 1e-6
        assert checked > 0

    def test_critical_scenarios_dense_prop2(self, feeder13, sens13):
        prof = scenario.synthesize_profiles(
            feeder13, scenario.GenConfig(horizon_min=480, penetration=0.25,
                                         seed=7, solar_scale=2.0))
        scen = scenario.build_scenarios(prof, range(150, 180), sens13,
                                        f=feeder13)
        eps = 0.3 * float(np.median(np.abs(scen.y).max(axis=1)))
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_eps", eps),
                                  mu=3e-3,
                                  kernel=kernels.KernelSpec("gaussian", gamma=6.0))
        rs = trainer.train(scen, sens13, cfg, tol=1e-8)
        q = rs.responses()
        dev = scen.y.copy()
        for bus, qn in q.items():
            dev += np.outer(qn, sens13.X[:, bus - 1])
        dinf = np.abs(dev).max(axis=1)
        idx, sol = rs.index, rs.solution
        checked = 0
        for s in range(scen.S):
            if dinf[s] < eps + 1e-7:
                continue
            mu_hi, mu_lo = idx.dev_duals(sol.z, s)
            for r in rs.rules:
                lam_hi, lam_lo = idx.box_duals(sol.z, r.bus)
                g = lam_hi[s] - lam_lo[s] + float(
                    (mu_hi - mu_lo) @ sens13.X[:, r.bus - 1])
                if abs(g) <= 1e-9 or np.abs(r.a).max() <= 1e-9:
                    continue  # dual-degenerate pair: logged, not failed
                checked += 1
                assert abs(r.a[s]) > 1e-9
        assert checked > 0

    def test_deviation_monotone_in_tau(self, midday_scen, sens13):
        taus = [0.002, 0.005, 0.01, 0.02, 0.04]
        devs = []
        for tau in taus:
            cfg = trainer.TrainConfig(
                objective=trainer.Objective("delta_tau", tau), mu=1e-3,
                kernel=kernels.KernelSpec("gaussian", gamma=6.0))
            rs = trainer.train(midday_scen, sens13, cfg, tol=1e-8)
            q = rs.responses()
            dev = midday_scen.y.copy()
            for bus, qn in q.items():
                qn = np.clip(qn, -midday_scen.q_bar[:, bus - 1],
                             midday_scen.q_bar[:, bus - 1])
                dev += np.outer(qn, sens13.X[:, bus - 1])
            devs.append(float(np.abs(dev).mean()))
        for lo, hi in zip(devs, devs[1:]):
            assert hi >= lo - 1e-4


class TestCrossValidate:
    def test_singleton_grid(self, feeder13, sens13, profiles480):
        scen = scenario.build_scenarios(profiles480, range(200, 215), sens13,
                                        f=feeder13)
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_tau", 0.01),
                                  mu=1e-3, kernel=kernels.KernelSpec("linear"))
        assert trainer.cross_validate(scen, sens13, [cfg]) is cfg

    def test_duplicate_entries_first_wins(self, feeder13, sens13, profiles480):
        scen = scenario.build_scenarios(profiles480, range(200, 215), sens13,
                                        f=feeder13)
        a = trainer.TrainConfig(objective=trainer.Objective("delta_tau", 0.01),
                                mu=1e-3, kernel=kernels.KernelSpec("linear"))
        b = trainer.TrainConfig(objective=trainer.Objective("delta_tau", 0.01),
                                mu=1e-3, kernel=kernels.KernelSpec("linear"))
        assert trainer.cross_validate(scen, sens13, [a, b]) is a

    def test_huge_mu_scores_worse(self, feeder13, sens13, profiles480):
        scen = scenario.build_scenarios(profiles480, range(230, 245), sens13,
                                        f=feeder13)
        obj = trainer.Objective("delta_tau", 1e-4)
        kern = kernels.KernelSpec("gaussian", gamma=6.0)
        lo = trainer.TrainConfig(objective=obj, mu=0.0, kernel=kern)
        hi = trainer.TrainConfig(objective=obj, mu=1e3, kernel=kern)
        best = trainer.cross_validate(scen, sens13, [lo, hi])
        assert best is lo

    def test_degenerate_folds_rejected(self, feeder13, sens13, profiles480):
        scen = scenario.build_scenarios(profiles480, range(200, 203), sens13,
                                        f=feeder13)
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_tau", 0.01),
                                  mu=1e-3, kernel=kernels.KernelSpec("linear"),
                                  cv_folds=5)
        with pytest.raises(ValueError):
            trainer.cross_validate(scen, sens13, [cfg])


def _fake_ruleset(a_matrix, buses=None):
    a_matrix = np.asarray(a_matrix, dtype=float)
    n_inv, S = a_matrix.shape
    buses = buses or list(range(1, n_inv + 1))
    rules = [trainer.Rule(bus=b, kernel=kernels.KernelSpec("linear"),
                          a=a_matrix[i], b=0.0,
                          Z_train=np.zeros((3, S)), q_bar=np.ones(S),
                          mean=np.zeros(3), std=np.ones(3))
             for i, b in enumerate(buses)]
    return trainer.RuleSet(rules=rules, drop_intercept=False,
                           scenario_ids=np.arange(S))


class TestSparsityReport:
    def test_all_zero(self):
        rep = trainer.sparsity_report(_fake_ruleset(np.zeros((3, 5))))
        assert rep.frac_nonzero_overall == 0.0
        assert rep.support_scenarios == set()
        assert rep.inactive_inverters == {1, 2, 3}

    def test_single_nonzero_entry(self):
        a = np.zeros((3, 5))
        a[1, 3] = 0.2
        rep = trainer.sparsity_report(_fake_ruleset(a))
        assert rep.support_scenarios == {3}
        assert rep.inactive_inverters == {1, 3}
        assert abs(rep.frac_nonzero_overall - 1 / 15) < 1e-12

    def test_communication_count(self):
        a = np.zeros((2, 6))
        a[0, :2] = 1.0
        rs = _fake_ruleset(a)
        # (2 nonzero + intercept) + (0 nonzero + intercept)
        assert trainer.communication_count(rs) == 4


class TestSerialization:
    def _train_small(self, midday_scen, sens13, drop_intercept=False):
        cfg = trainer.TrainConfig(objective=trainer.Objective("delta_tau", 0.005),
                                  mu=1e-3,
                                  kernel=kernels.KernelSpec("gaussian", gamma=6.0),
                                  drop_intercept=drop_intercept)
        return trainer.train(midday_scen, sens13, cfg)

    def test_round_trip_exact(self, midday_scen, sens13, tmp_path):
        rs = self._train_small(midday_scen, sens13)
        path = tmp_path / "rules.json"
        trainer.ruleset_to_json(rs, path)
        back = trainer.ruleset_from_json(path)
        for r0, r1 in zip(rs.rules, back.rules):
            assert r0.bus == r1.bus
            assert np.array_equal(r0.a, r1.a)
            assert r0.b == r1.b
            assert np.array_equal(r0.Z_train, r1.Z_train)
            assert np.array_equal(r0.mean, r1.mean)
            assert np.array_equal(r0.std, r1.std)

    def test_drop_intercept_blocks_have_no_b(self, midday_scen, sens13):
        rs = self._train_small(midday_scen, sens13, drop_intercept=True)
        doc = trainer.ruleset_to_json(rs)
        assert all("b" not in blk for blk in doc["inverters"])

    def test_drop_below_ships_support_only(self, midday_scen, sens13):
        rs = self._train_small(midday_scen, sens13)
        doc = trainer.ruleset_to_json(rs, drop_below=1e-6)
        dense = trainer.ruleset_to_json(rs)
        kept = sum(len(b["a"]["values"]) for b in doc["inverters"])
        total = sum(len(b["a"]["values"]) for b in dense["inverters"])
        assert kept < total
        back = trainer.ruleset_from_json(doc)
        assert all(np.abs(r.a).min() > 1e-6 for r in back.rules if len(r.a))
