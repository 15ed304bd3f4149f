"""Real-time dispatch: learned rules, per-minute optimization, Watt-VAR.

Controllers map one minute of grid conditions to reactive injections:

* eval_rules applies a trained RuleSet with the box projection of the
  runtime limits;
* opf_dispatch solves the per-minute deviation minimization exactly in
  the linearized model (controller C1; C2 is the same minimizer fed
  stale inputs);
* watt_var is the fixed local droop baseline (C3);
* two_step_train builds the decoupled competitor: per-scenario optimal
  dispatch first, per-inverter kernel regression of those setpoints
  second.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import conic
from .feeder import Sensitivities
from .kernels import KernelSpec, kernel_ridge
from .scenario import ScenarioSet, augment_input
from .trainer import (FEAS_TOL, Objective, Rule, RuleSet, delta_value,
                      rule_outputs)

TIE_BREAK = 1e-9


@dataclass
class Dispatch:
    """Reactive injections for buses 1..N with projection flags."""

    q_g: np.ndarray
    clipped: np.ndarray
    source: str

    def __post_init__(self):
        self.q_g = np.asarray(self.q_g, dtype=float)
        self.clipped = np.asarray(self.clipped, dtype=bool)


def eval_rules(rules: RuleSet, z_now: np.ndarray, q_bar_now: np.ndarray,
               source: str = "rules") -> Dispatch:
    """Apply trained rules to raw inputs at one minute.

    z_now is (N, M) raw controller inputs for every bus; each rule
    normalizes its bus's row with the stored statistics (and prepends the
    constant entry in intercept-free mode) before kernel evaluation, then
    clamps to the current limits.
    """
    z_now = np.asarray(z_now, dtype=float)
    q_bar_now = np.asarray(q_bar_now, dtype=float)
    n = len(q_bar_now)
    q = np.zeros(n)
    clipped = np.zeros(n, dtype=bool)
    z_norm = {}
    for rule in rules.rules:
        raw = z_now[rule.bus - 1]
        m_raw = len(rule.mean)
        if len(raw) != m_raw:
            raise ValueError(
                f"bus {rule.bus}: got {len(raw)} input entries, rule stores {m_raw}"
            )
        zn = (raw - rule.mean) / rule.std
        if rules.drop_intercept:
            zn = augment_input(zn)
        z_norm[rule.bus] = zn
    outs = rule_outputs(rules, z_norm)
    for bus, val in outs.items():
        raw_q = float(val[0])
        lim = q_bar_now[bus - 1]
        q[bus - 1] = min(max(raw_q, -lim), lim)
        clipped[bus - 1] = abs(raw_q) > lim
    return Dispatch(q_g=q, clipped=clipped, source=source)


def opf_dispatch(scen_point, sens: Sensitivities, objective: Objective,
                 tol: float = conic.DEFAULT_TOL, source: str = "C1") -> Dispatch:
    """Minimize the deviation cost over the box |q| <= q_bar (Eq.-level OPF).

    For the deadbanded costs, whose minimizer sets are flat, a
    1e-9 * ||q||^2 term selects the minimum-norm optimum so repeated
    solves are deterministic; the squared-deviation cost is strictly
    convex in q and needs no tie-break.  Buses with zero headroom are
    fixed at zero and excluded from the program.
    """
    y, q_bar = scen_point
    y = np.asarray(y, dtype=float)
    q_bar = np.asarray(q_bar, dtype=float)
    n = len(y)
    act = np.flatnonzero(q_bar > 0.0)
    q_full = np.zeros(n)
    clipped = np.zeros(n, dtype=bool)
    if act.size == 0 or _zero_is_optimal(y, objective):
        return Dispatch(q_g=q_full, clipped=clipped, source=source)

    X_act = sens.X[:, act]
    k = act.size
    obj = objective
    tie = obj.kind != "delta_s"
    d_len = n if obj.kind == "delta_eps" else 1
    # variables: q (k), cost slack block, optional tie-break slack
    nv = k + d_len + (1 if tie else 0)
    it = slice(k, k + d_len)
    ir = k + d_len
    c = np.zeros(nv)
    c[it] = 1.0
    if tie:
        c[ir] = TIE_BREAK

    rows = []
    bvec = []
    cones = []

    # |q| <= q_bar box
    box = np.zeros((2 * k, nv))
    box[:k, :k] = np.eye(k)
    box[k:, :k] = -np.eye(k)
    rows.append(box)
    bvec.extend(np.concatenate([q_bar[act], q_bar[act]]))
    n_nonneg = 2 * k

    if obj.kind == "delta_tau":
        tr = np.zeros((1, nv))
        tr[0, it] = -1.0
        rows.append(tr)
        bvec.append(0.0)
        n_nonneg += 1
        soc = np.zeros((1 + n, nv))
        soc[0, it] = -1.0
        soc[1:, :k] = -X_act
        rows.append(soc)
        bvec.append(obj.param)
        bvec.extend(y)
        cones.append(("soc", 1 + n))
    elif obj.kind == "delta_eps":
        dnn = np.zeros((n, nv))
        dnn[:, it] = -np.eye(n)
        rows.append(dnn)
        bvec.extend(np.zeros(n))
        up = np.zeros((n, nv))
        up[:, :k] = X_act
        up[:, it] = -np.eye(n)
        rows.append(up)
        bvec.extend(obj.param - y)
        lo = np.zeros((n, nv))
        lo[:, :k] = -X_act
        lo[:, it] = -np.eye(n)
        rows.append(lo)
        bvec.extend(obj.param + y)
        n_nonneg += 3 * n
    else:  # delta_s: rotated-cone epigraph of the squared norm
        soc = np.zeros((2 + n, nv))
        soc[0, it] = -1.0
        soc[1:-1, :k] = -2.0 * X_act
        soc[-1, it] = -1.0
        rows.append(soc)
        bvec.append(1.0)
        bvec.extend(2.0 * y)
        bvec.append(-1.0)
        cones.append(("soc", 2 + n))

    if tie:
        # minimum-norm selection: ||q||^2 <= r epigraph
        tb = np.zeros((2 + k, nv))
        tb[0, ir] = -1.0
        tb[1:-1, :k] = -2.0 * np.eye(k)
        tb[-1, ir] = -1.0
        rows.append(tb)
        bvec.append(1.0)
        bvec.extend(np.zeros(k))
        bvec.append(-1.0)
        cones.append(("soc", 2 + k))

    cones.insert(0, ("nonneg", n_nonneg))
    prog = conic.ConeProgram(c=c, A=np.vstack(rows), b=np.array(bvec), cones=cones)
    sol = conic.solve(prog, tol=tol)
    if not sol.optimal:
        raise conic.SolverFailure("per-minute dispatch solve failed", sol)
    q_act = sol.x[:k]
    clipped[act] = np.abs(q_act) > q_bar[act]
    q_full[act] = np.clip(q_act, -q_bar[act], q_bar[act])
    return Dispatch(q_g=q_full, clipped=clipped, source=source)


def _zero_is_optimal(y: np.ndarray, obj: Objective) -> bool:
    """Deviation cost is already zero at q = 0 (deadband covers y)."""
    return bool(delta_value(obj, y) == 0.0)


@dataclass(frozen=True)
class WattVarCurve:
    """Piecewise-linear headroom fraction over normalized active output.

    Full reactive headroom up to p1 * p_rated, linear taper to zero at
    p2 * p_rated; p_rated = s_bar / oversize.
    """

    p1: float = 0.5
    p2: float = 1.0
    oversize: float = 1.1

    def __post_init__(self):
        if not 0.0 <= self.p1 < self.p2:
            raise ValueError("curve needs 0 <= p1 < p2")


def watt_var(p_g: float, s_bar: float, curve: WattVarCurve = WattVarCurve()) -> float:
    """Reactive setpoint of the local droop rule at active output p_g."""
    if p_g < 0:
        raise ValueError("active generation must be nonnegative")
    if s_bar <= 0:
        return 0.0
    headroom = np.sqrt(max(s_bar**2 - p_g**2, 0.0))
    p_rated = s_bar / curve.oversize
    if p_g <= curve.p1 * p_rated:
        frac = 1.0
    elif p_g <= curve.p2 * p_rated:
        frac = (curve.p2 * p_rated - p_g) / ((curve.p2 - curve.p1) * p_rated)
    else:
        frac = 0.0
    return float(frac * headroom)


def watt_var_dispatch(p_g: np.ndarray, s_bar: np.ndarray, q_bar: np.ndarray,
                      curve: WattVarCurve = WattVarCurve(),
                      source: str = "C3") -> Dispatch:
    """Vectorized Watt-VAR over all buses, clamped to the current limits."""
    n = len(s_bar)
    q = np.zeros(n)
    clipped = np.zeros(n, dtype=bool)
    for i in range(n):
        if s_bar[i] <= 0:
            continue
        raw = watt_var(float(p_g[i]), float(s_bar[i]), curve)
        q[i] = min(max(raw, -q_bar[i]), q_bar[i])
        clipped[i] = abs(raw) > q_bar[i]
    return Dispatch(q_g=q, clipped=clipped, source=source)


def two_step_train(scen: ScenarioSet, sens: Sensitivities, cfg,
                   tol: float = conic.DEFAULT_TOL) -> RuleSet:
    """Decoupled competitor: OPF per scenario, then fit each inverter rule.

    Step one solves the per-scenario deviation minimization; step two
    runs kernel-vector regression of those optimal setpoints on the
    controller inputs with the same kernel and mu.  The fitted (pre-
    clamp) responses are checked against the scenario limits and the
    per-scenario feasibility mask is reported in meta; unlike the joint
    trainer, feasibility is not guaranteed.
    """
    buses = scen.inverter_buses
    if not buses:
        raise ValueError("scenario set has no inverter buses")
    S = scen.S
    targets = np.zeros((S, len(buses)))
    for s in range(S):
        disp = opf_dispatch((scen.y[s], scen.q_bar[s]), sens, cfg.objective,
                            tol=tol, source="R2-opf")
        targets[s] = disp.q_g[[b - 1 for b in buses]]

    rules = []
    fitted = np.zeros((S, len(buses)))
    for j, bus in enumerate(buses):
        Z = scen.inputs_for(bus)
        if cfg.drop_intercept:
            Z = np.vstack([np.ones((1, S)), Z])
        spec = cfg.kernel_for(bus)
        fit = kernel_ridge(spec, Z, targets[:, j], cfg.mu,
                           intercept=not cfg.drop_intercept, tol=tol)
        fitted[:, j] = fit.fitted
        rules.append(Rule(bus=bus, kernel=spec, a=fit.a, b=fit.b,
                          Z_train=Z.copy(), q_bar=scen.q_bar[:, bus - 1].copy(),
                          mean=scen.mean[bus - 1].copy(),
                          std=scen.std[bus - 1].copy()))

    q_bar_cols = scen.q_bar[:, [b - 1 for b in buses]]
    feas = np.all(np.abs(fitted) <= q_bar_cols + FEAS_TOL, axis=1)
    dev = scen.y.copy()
    for j, bus in enumerate(buses):
        dev += np.outer(fitted[:, j], sens.X[:, bus - 1])
    return RuleSet(
        rules=rules, drop_intercept=cfg.drop_intercept,
        scenario_ids=scen.scenario_ids.copy(),
        meta={
            "source": "two_step",
            "objective": cfg.objective.kind,
            "param": cfg.objective.param,
            "mu": cfg.mu,
            "per_scenario_feasible": [bool(v) for v in feas],
            "training_delta": float(np.mean(delta_value(cfg.objective, dev))),
        })
