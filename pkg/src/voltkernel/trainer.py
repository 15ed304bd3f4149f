"""Joint training of per-inverter reactive control rules.

The training problem couples all inverter rules through the linearized
voltage model: choose scenario coefficients a_n and intercepts b_n so
that the responses q_{n,s} = (K_n a_n + b_n 1)_s minimize an averaged
voltage-deviation cost plus a non-squared RKHS-norm penalty,

    (1/S) sum_s Delta(q_s; y_s) + mu sum_n ||K_n^{1/2} a_n||_2,

subject to |q_{n,s}| <= q_bar_{n,s}.  Three deviation costs are
supported: a deadbanded l2-norm (delta_tau), per-bus epsilon-insensitive
deviations (delta_eps), and the squared norm (delta_s).  Each case is
assembled as one second-order cone program over all inverters.

The deadbanded cost makes scenarios with small optimal deviations drop
out of every unpenalized rule (coefficients exactly zero), which is the
sparsity the reports and the property tests track.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import conic
from .feeder import Sensitivities
from .kernels import GramSet, KernelSpec, cross_gram, gram
from .scenario import ScenarioSet, augment_input

FEAS_TOL = 1e-6
ZERO_TOL = 1e-6

OBJECTIVE_KINDS = ("delta_tau", "delta_eps", "delta_s")


class TrainingError(RuntimeError):
    """Training failed; carries solver residuals when available."""

    def __init__(self, message, solution: conic.ConeSolution | None = None):
        if solution is not None:
            message = (f"{message} (status={solution.status}, "
                       f"primal={solution.primal_res:.2e}, "
                       f"dual={solution.dual_res:.2e}, gap={solution.gap:.2e})")
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class Objective:
    """Voltage-deviation cost: kind plus its deadband parameter."""

    kind: str
    param: float = 0.0  # tau or eps; ignored for delta_s

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.kind in ("delta_tau", "delta_eps") and not self.param > 0:
            raise ValueError(f"{self.kind} needs a positive parameter")


def delta_value(obj: Objective, dev: np.ndarray) -> np.ndarray:
    """Per-scenario cost of deviation vectors; dev is (..., N)."""
    dev = np.asarray(dev, dtype=float)
    if obj.kind == "delta_s":
        return np.sum(dev**2, axis=-1)
    if obj.kind == "delta_eps":
        return np.sum(np.maximum(np.abs(dev) - obj.param, 0.0), axis=-1)
    return np.maximum(np.linalg.norm(dev, axis=-1) - obj.param, 0.0)


@dataclass
class TrainConfig:
    """One training run: objective, regularization, kernels, mode."""

    objective: Objective
    mu: float = 1e-4
    kernel: KernelSpec | dict[int, KernelSpec] = field(default_factory=KernelSpec)
    drop_intercept: bool = False
    cv_folds: int = 5

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")

    def kernel_for(self, bus: int) -> KernelSpec:
        if isinstance(self.kernel, dict):
            return self.kernel[bus]
        return self.kernel


@dataclass
class Rule:
    """One inverter's trained rule with everything needed to apply it."""

    bus: int
    kernel: KernelSpec
    a: np.ndarray          # S scenario coefficients
    b: float               # intercept (0.0 in drop_intercept mode)
    Z_train: np.ndarray    # stored training inputs, columns = scenarios
    q_bar: np.ndarray      # S training-window reactive limits
    mean: np.ndarray       # normalization stats for raw inputs
    std: np.ndarray


@dataclass
class RuleSet:
    rules: list[Rule]
    drop_intercept: bool
    scenario_ids: np.ndarray
    meta: dict = field(default_factory=dict)
    solution: conic.ConeSolution | None = field(default=None, repr=False)
    index: "TrainIndex | None" = field(default=None, repr=False)

    @property
    def buses(self) -> tuple[int, ...]:
        return tuple(r.bus for r in self.rules)

    @property
    def S(self) -> int:
        return len(self.scenario_ids)

    def rule_for(self, bus: int) -> Rule:
        for r in self.rules:
            if r.bus == bus:
                return r
        raise KeyError(f"no rule for bus {bus}")

    def training_grams(self) -> dict[int, np.ndarray]:
        """Jittered Grams over the stored training inputs."""
        return {r.bus: gram(r.kernel, r.Z_train) for r in self.rules}

    def responses(self) -> dict[int, np.ndarray]:
        """Training responses K_n a_n + b_n 1 (pre-clamp)."""
        grams = self.training_grams()
        return {r.bus: grams[r.bus] @ r.a + r.b for r in self.rules}

    def verify(self, feas_tol: float = FEAS_TOL) -> None:
        """Check the training-data feasibility invariant."""
        for bus, resp in self.responses().items():
            rule = self.rule_for(bus)
            if rule.Z_train.shape[1] != len(rule.a):
                raise TrainingError(f"bus {bus}: stored inputs do not match a")
            worst = float(np.max(np.abs(resp) - rule.q_bar))
            if worst > feas_tol:
                raise TrainingError(
                    f"bus {bus}: training response violates limits by {worst:.2e}"
                )


@dataclass
class SparsityReport:
    zero_tol: float
    frac_nonzero_overall: float
    frac_nonzero_per_inverter: np.ndarray
    inactive_inverters: set[int]
    support_scenarios: set[int]


@dataclass
class TrainIndex:
    """Variable/row bookkeeping of an assembled program.

    Row slices allow pulling the multipliers of the apparent-power box
    and of the per-scenario deviation constraints back out of the dual
    vector (used by the sparsity property checks only).
    """

    buses: tuple[int, ...]
    S: int
    n_buses: int
    objective: Objective
    a_slices: dict[int, slice]
    b_index: dict[int, int] | None
    d_slice: slice
    gamma_slice: slice | None
    box_rows: dict[int, tuple[slice, slice]]
    dev_rows: list
    n_vars: int
    n_rows: int

    def extract_q(self, x: np.ndarray, grams: GramSet) -> dict[int, np.ndarray]:
        """Training responses per inverter from a primal vector."""
        out = {}
        for bus in self.buses:
            a = x[self.a_slices[bus]]
            b = x[self.b_index[bus]] if self.b_index is not None else 0.0
            out[bus] = grams.K[bus] @ a + b
        return out

    def box_duals(self, z: np.ndarray, bus: int) -> tuple[np.ndarray, np.ndarray]:
        up, lo = self.box_rows[bus]
        return z[up].copy(), z[lo].copy()

    def dev_duals(self, z: np.ndarray, s: int):
        """Deviation-row multipliers for scenario s.

        delta_eps: (upper, lower) nonnegative N-vectors.
        delta_tau / delta_s: the soc-block dual (length N+1 / N+2).
        """
        block = self.dev_rows[s]
        if self.objective.kind == "delta_eps":
            up, lo = block
            return z[up].copy(), z[lo].copy()
        return z[block].copy()


def assemble(scen: ScenarioSet, grams: GramSet, sens: Sensitivities,
             cfg: TrainConfig) -> tuple[conic.ConeProgram, TrainIndex]:
    """Build the training SOCP over all inverters of the scenario set."""
    buses = tuple(b for b in scen.inverter_buses)
    if not buses:
        raise TrainingError("scenario set has no inverter buses")
    S = scen.S
    N = scen.n_buses
    obj = cfg.objective
    for bus in buses:
        if grams.K[bus].shape != (S, S):
            raise TrainingError("gram matrices do not match the scenario count")

    intercept = not cfg.drop_intercept
    use_gamma = cfg.mu > 0
    d_len = S * N if obj.kind == "delta_eps" else S

    a_slices = {}
    pos = 0
    for bus in buses:
        a_slices[bus] = slice(pos, pos + S)
        pos += S
    b_index = None
    if intercept:
        b_index = {bus: pos + i for i, bus in enumerate(buses)}
        pos += len(buses)
    d_slice = slice(pos, pos + d_len)
    pos += d_len
    gamma_slice = None
    if use_gamma:
        gamma_slice = slice(pos, pos + len(buses))
        pos += len(buses)
    n_vars = pos

    c = np.zeros(n_vars)
    c[d_slice] = 1.0 / S
    if use_gamma:
        c[gamma_slice] = cfg.mu

    # columns of X for the inverter buses
    xcol = {bus: sens.X[:, bus - 1] for bus in buses}

    n_nonneg = 2 * S * len(buses) + d_len + (2 * S * N if obj.kind == "delta_eps" else 0)
    soc_cones = []
    n_soc = 0
    if use_gamma:
        n_soc += (S + 1) * len(buses)
    if obj.kind == "delta_tau":
        n_soc += (N + 1) * S
    elif obj.kind == "delta_s":
        n_soc += (N + 2) * S
    m = n_nonneg + n_soc

    A = np.zeros((m, n_vars))
    bvec = np.zeros(m)

    row = 0
    box_rows = {}
    for bus in buses:
        K = grams.K[bus]
        up = slice(row, row + S)
        A[up, a_slices[bus]] = K
        if intercept:
            A[up, b_index[bus]] = 1.0
        bvec[up] = scen.q_bar[:, bus - 1]
        row += S
        lo = slice(row, row + S)
        A[lo, a_slices[bus]] = -K
        if intercept:
            A[lo, b_index[bus]] = -1.0
        bvec[lo] = scen.q_bar[:, bus - 1]
        row += S
        box_rows[bus] = (up, lo)

    # slack nonnegativity
    A[row:row + d_len, d_slice] = -np.eye(d_len)
    row += d_len

    dev_rows: list = [None] * S
    if obj.kind == "delta_eps":
        for s in range(S):
            up = slice(row, row + N)
            for bus in buses:
                A[up, a_slices[bus]] = np.outer(xcol[bus], grams.K[bus][s])
                if intercept:
                    A[up, b_index[bus]] = xcol[bus]
            for i in range(N):
                A[up.start + i, d_slice.start + s * N + i] = -1.0
            bvec[up] = obj.param - scen.y[s]
            row += N
            lo = slice(row, row + N)
            for bus in buses:
                A[lo, a_slices[bus]] = -np.outer(xcol[bus], grams.K[bus][s])
                if intercept:
                    A[lo, b_index[bus]] = -xcol[bus]
            for i in range(N):
                A[lo.start + i, d_slice.start + s * N + i] = -1.0
            bvec[lo] = obj.param + scen.y[s]
            row += N
            dev_rows[s] = (up, lo)

    cones = [("nonneg", n_nonneg)] if n_nonneg else []
    assert row == n_nonneg

    if use_gamma:
        for i, bus in enumerate(buses):
            A[row, gamma_slice.start + i] = -1.0
            blk = slice(row + 1, row + 1 + S)
            A[blk, a_slices[bus]] = -grams.K_sqrt[bus]
            cones.append(("soc", S + 1))
            row += S + 1

    if obj.kind == "delta_tau":
        for s in range(S):
            A[row, d_slice.start + s] = -1.0
            bvec[row] = obj.param
            blk = slice(row + 1, row + 1 + N)
            for bus in buses:
                A[blk, a_slices[bus]] = -np.outer(xcol[bus], grams.K[bus][s])
                if intercept:
                    A[blk, b_index[bus]] = -xcol[bus]
            bvec[blk] = scen.y[s]
            cones.append(("soc", N + 1))
            dev_rows[s] = slice(row, row + 1 + N)
            row += N + 1
    elif obj.kind == "delta_s":
        for s in range(S):
            A[row, d_slice.start + s] = -1.0
            bvec[row] = 1.0
            blk = slice(row + 1, row + 1 + N)
            for bus in buses:
                A[blk, a_slices[bus]] = -2.0 * np.outer(xcol[bus], grams.K[bus][s])
                if intercept:
                    A[blk, b_index[bus]] = -2.0 * xcol[bus]
            bvec[blk] = 2.0 * scen.y[s]
            A[row + 1 + N, d_slice.start + s] = -1.0
            bvec[row + 1 + N] = -1.0
            cones.append(("soc", N + 2))
            dev_rows[s] = slice(row, row + 2 + N)
            row += N + 2

    assert row == m
    prog = conic.ConeProgram(c=c, A=A, b=bvec, cones=cones)
    index = TrainIndex(buses=buses, S=S, n_buses=N, objective=obj,
                       a_slices=a_slices, b_index=b_index, d_slice=d_slice,
                       gamma_slice=gamma_slice, box_rows=box_rows,
                       dev_rows=dev_rows, n_vars=n_vars, n_rows=m)
    return prog, index


def _training_inputs(scen: ScenarioSet, drop_intercept: bool) -> dict[int, np.ndarray]:
    """Normalized (and, in selection mode, augmented) inputs per inverter."""
    out = {}
    for bus in scen.inverter_buses:
        Z = scen.inputs_for(bus)
        if drop_intercept:
            Z = np.vstack([np.ones((1, Z.shape[1])), Z])
        out[bus] = Z
    return out


def train(scen: ScenarioSet, sens: Sensitivities, cfg: TrainConfig,
          tol: float = conic.DEFAULT_TOL,
          max_iters: int = conic.DEFAULT_MAX_ITERS) -> RuleSet:
    """Assemble, solve, and extract a RuleSet; verifies its invariants."""
    inputs = _training_inputs(scen, cfg.drop_intercept)
    specs = {bus: cfg.kernel_for(bus) for bus in scen.inverter_buses}
    grams = GramSet.build(specs, inputs)
    prog, index = assemble(scen, grams, sens, cfg)
    sol = conic.solve(prog, tol=tol, max_iters=max_iters)
    if not sol.optimal:
        raise TrainingError("training solve did not reach optimality", sol)

    rules = []
    for bus in index.buses:
        a = sol.x[index.a_slices[bus]].copy()
        b = float(sol.x[index.b_index[bus]]) if index.b_index is not None else 0.0
        rules.append(Rule(bus=bus, kernel=specs[bus], a=a, b=b,
                          Z_train=inputs[bus].copy(),
                          q_bar=scen.q_bar[:, bus - 1].copy(),
                          mean=scen.mean[bus - 1].copy(),
                          std=scen.std[bus - 1].copy()))
    q = index.extract_q(sol.x, grams)
    dev = scen.y.copy()
    for bus in index.buses:
        dev += np.outer(q[bus], sens.X[:, bus - 1])
    cost = float(np.mean(delta_value(cfg.objective, dev)))
    penalty = sum(float(np.linalg.norm(grams.K_sqrt[bus] @ sol.x[index.a_slices[bus]]))
                  for bus in index.buses)
    ruleset = RuleSet(
        rules=rules, drop_intercept=cfg.drop_intercept,
        scenario_ids=scen.scenario_ids.copy(),
        meta={
            "source": "single_step",
            "objective": cfg.objective.kind,
            "param": cfg.objective.param,
            "mu": cfg.mu,
            "training_objective": cost + cfg.mu * penalty,
            "training_delta": cost,
            "solver": {"status": sol.status, "iterations": sol.iterations,
                       "primal_res": sol.primal_res, "dual_res": sol.dual_res,
                       "gap": sol.gap},
        },
        solution=sol, index=index)
    ruleset.verify()
    return ruleset


def rule_outputs(ruleset: RuleSet, z_norm: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Pre-clamp rule outputs at normalized query inputs (M' x T per bus)."""
    out = {}
    for rule in ruleset.rules:
        Zq = np.asarray(z_norm[rule.bus], dtype=float)
        if Zq.ndim == 1:
            Zq = Zq[:, None]
        if Zq.shape[0] != rule.Z_train.shape[0]:
            raise ValueError(
                f"bus {rule.bus}: input length {Zq.shape[0]} does not match "
                f"stored training inputs ({rule.Z_train.shape[0]})"
            )
        out[rule.bus] = cross_gram(rule.kernel, rule.Z_train, Zq) @ rule.a + rule.b
    return out


def scenario_cost(ruleset: RuleSet, scen: ScenarioSet, sens: Sensitivities,
                  obj: Objective, clamp: bool = True) -> float:
    """Average Delta over the given scenarios under this rule set."""
    z_norm = {}
    for rule in ruleset.rules:
        Z = scen.inputs_for(rule.bus)
        if ruleset.drop_intercept:
            Z = np.vstack([np.ones((1, Z.shape[1])), Z])
        z_norm[rule.bus] = Z
    outs = rule_outputs(ruleset, z_norm)
    dev = scen.y.copy()
    for bus, q in outs.items():
        if clamp:
            q = np.clip(q, -scen.q_bar[:, bus - 1], scen.q_bar[:, bus - 1])
        dev += np.outer(q, sens.X[:, bus - 1])
    return float(np.mean(delta_value(obj, dev)))


def cross_validate(scen: ScenarioSet, sens: Sensitivities,
                   cfg_grid: list[TrainConfig],
                   tol: float = conic.DEFAULT_TOL) -> TrainConfig:
    """Pick the grid config with the best average held-out Delta.

    Folds are assigned by scenario index modulo cv_folds; ties keep the
    earliest grid entry.  Scores use each candidate's own objective, so
    grids should vary mu or kernel parameters at fixed tau/eps.
    """
    if not cfg_grid:
        raise ValueError("cross_validate needs a nonempty grid")
    S = scen.S
    best = None
    best_score = np.inf
    for cfg in cfg_grid:
        folds = cfg.cv_folds
        if S < folds:
            raise ValueError(f"degenerate folds: S={S} < cv_folds={folds}")
        scores = []
        for k in range(folds):
            tr = [s for s in range(S) if s % folds != k]
            va = [s for s in range(S) if s % folds == k]
            rules = train(scen.subset(tr), sens, cfg, tol=tol)
            scores.append(scenario_cost(rules, scen.subset(va), sens,
                                        cfg.objective))
        score = float(np.mean(scores))
        if score < best_score:
            best = cfg
            best_score = score
    return best


def sparsity_report(ruleset: RuleSet, zero_tol: float = ZERO_TOL) -> SparsityReport:
    """Coefficient sparsity accounting across inverters and scenarios."""
    nz = np.array([np.abs(r.a) > zero_tol for r in ruleset.rules])
    frac_each = nz.mean(axis=1) if nz.size else np.zeros(0)
    overall = float(nz.mean()) if nz.size else 0.0
    inactive = {r.bus for r, f in zip(ruleset.rules, frac_each) if f == 0.0}
    support = {int(s) for s in np.flatnonzero(nz.any(axis=0))} if nz.size else set()
    return SparsityReport(zero_tol=zero_tol, frac_nonzero_overall=overall,
                          frac_nonzero_per_inverter=frac_each,
                          inactive_inverters=inactive,
                          support_scenarios=support)


def communication_count(ruleset: RuleSet, zero_tol: float = ZERO_TOL) -> int:
    """Coefficient/input pairs plus intercepts that would be downloaded."""
    total = 0
    for r in ruleset.rules:
        total += int(np.sum(np.abs(r.a) > zero_tol)) + 1
    return total


def ruleset_to_json(ruleset: RuleSet, path=None, drop_below: float = 0.0) -> dict:
    """Serialize a RuleSet; with drop_below > 0 only support entries ship."""
    inverters = []
    for r in ruleset.rules:
        keep = np.flatnonzero(np.abs(r.a) > drop_below) if drop_below > 0 \
            else np.arange(len(r.a))
        block = {
            "bus": int(r.bus),
            "kernel": r.kernel.to_dict(),
            "a": {
                "scenario_ids": [int(ruleset.scenario_ids[i]) for i in keep],
                "values": [float(r.a[i]) for i in keep],
            },
            "z_train": [[float(v) for v in r.Z_train[:, i]] for i in keep],
            "q_bar": [float(v) for v in r.q_bar[keep]],
            "norm_stats": {"mean": [float(v) for v in r.mean],
                           "std": [float(v) for v in r.std]},
        }
        if not ruleset.drop_intercept:
            block["b"] = float(r.b)
        inverters.append(block)
    doc = {
        "format": "voltkernel-ruleset-v1",
        "drop_intercept": bool(ruleset.drop_intercept),
        "scenario_ids": [int(s) for s in ruleset.scenario_ids],
        "meta": {k: v for k, v in ruleset.meta.items() if _jsonable(v)},
        "inverters": inverters,
    }
    if path is not None:
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
        return True
    except (TypeError, ValueError):
        return False


def ruleset_from_json(source) -> RuleSet:
    """Load a RuleSet written by ruleset_to_json (path, str, or dict)."""
    if isinstance(source, dict):
        doc = source
    elif isinstance(source, str) and source.lstrip().startswith("{"):
        doc = json.loads(source)
    else:
        doc = json.loads(Path(source).read_text())
    if doc.get("format") != "voltkernel-ruleset-v1":
        raise ValueError("not a voltkernel ruleset document")
    drop = bool(doc["drop_intercept"])
    rules = []
    for blk in doc["inverters"]:
        a = np.array(blk["a"]["values"], dtype=float)
        Z = np.array(blk["z_train"], dtype=float).T if blk["z_train"] else \
            np.zeros((len(blk["norm_stats"]["mean"]), 0))
        rules.append(Rule(
            bus=int(blk["bus"]),
            kernel=KernelSpec.from_dict(blk["kernel"]),
            a=a,
            b=float(blk.get("b", 0.0)),
            Z_train=Z,
            q_bar=np.array(blk["q_bar"], dtype=float),
            mean=np.array(blk["norm_stats"]["mean"], dtype=float),
            std=np.array(blk["norm_stats"]["std"], dtype=float)))
    return RuleSet(rules=rules, drop_intercept=drop,
                   scenario_ids=np.array(doc["scenario_ids"], dtype=int),
                   meta=dict(doc.get("meta", {})))
