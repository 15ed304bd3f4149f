"""Rolling-horizon experiment engine.

Each control period: build scenarios from the trailing training window,
train the learned controllers on them, then apply every controller
minute by minute over the next period.  Dispatch decisions use the
linearized model; the voltages that enter the report always come from
the exact AC sweep.  Training deadbands and regularization stay fixed
across windows within a run.

Controller ids: C1 per-minute optimum, C2 the same with a communication
lag, C3 Watt-VAR, C4/C5 linear/gaussian deadband-norm rules, C6/C7
linear/gaussian epsilon-insensitive rules, R2 the two-step competitor,
"none" the zero-injection baseline.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import control, trainer
from .conic import SolverFailure
from .feeder import FeederModel, Sensitivities, ac_power_flow, build_sensitivities
from .kernels import KernelSpec
from .scenario import InputLayout, ProfileSet, build_scenarios, grid_point
from .trainer import Objective, TrainConfig, TrainingError

TRAIN_FAILURES = (TrainingError, SolverFailure, np.linalg.LinAlgError)

LEARNED = ("C4", "C5", "C6", "C7", "R2")
ALL_CONTROLLERS = ("C1", "C2", "C3") + LEARNED + ("none",)
VOLT_BAND = 0.03


@dataclass
class SimConfig:
    train_window_min: int = 30
    apply_window_min: int = 30
    controllers: tuple[str, ...] = ("C1", "C2", "C3", "C4", "C5")
    penetration: float = 0.75          # recorded; profiles own the actual choice
    remote_lines: tuple[int, ...] = ()
    tau: float = 0.001
    eps: float = 0.001
    mu: float = 1e-3
    gaussian_gamma: float | None = None  # None: 2 x input width
    jitter: float = 1e-3
    lag_min: int = 2
    c1_objective: str = "delta_s"
    normalize: bool = True
    zero_tol: float = trainer.ZERO_TOL
    solver_tol: float = 1e-7
    cv_mu_grid: tuple[float, ...] = ()  # nonempty: re-tune mu per window
    cv_folds: int = 5

    def __post_init__(self):
        if self.apply_window_min < 1:
            raise ValueError("apply window must cover at least one minute")
        if self.train_window_min < self.cv_folds:
            raise ValueError("training window shorter than the CV fold count")
        unknown = set(self.controllers) - set(ALL_CONTROLLERS)
        if unknown:
            raise ValueError(f"unknown controller ids: {sorted(unknown)}")

    def layout(self) -> InputLayout:
        return InputLayout(local=True, remote_lines=tuple(self.remote_lines))

    def train_config(self, cid: str) -> TrainConfig:
        width = 3 + len(self.remote_lines)
        gamma = self.gaussian_gamma if self.gaussian_gamma is not None else 2.0 * width
        linear = KernelSpec("linear", jitter=self.jitter)
        gauss = KernelSpec("gaussian", gamma=gamma, jitter=self.jitter)
        tau_obj = Objective("delta_tau", self.tau)
        eps_obj = Objective("delta_eps", self.eps)
        table = {
            "C4": (linear, tau_obj),
            "C5": (gauss, tau_obj),
            "C6": (linear, eps_obj),
            "C7": (gauss, eps_obj),
            "R2": (linear, eps_obj),
        }
        kernel, obj = table[cid]
        return TrainConfig(objective=obj, mu=self.mu, kernel=kernel,
                           cv_folds=self.cv_folds)


@dataclass
class SimReport:
    """Aggregated per-controller voltage statistics and training logs."""

    controllers: dict
    windows: dict
    band: float
    config: dict
    raw: dict = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "band": self.band,
            "config": self.config,
            "controllers": self.controllers,
            "windows": self.windows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def metrics(raw: dict, band: float = VOLT_BAND, config: dict | None = None) -> SimReport:
    """Aggregate raw per-minute logs; controllers without logs are omitted.

    raw["dv"] maps controller id to a list of (minute, deviation-vector)
    pairs; raw["windows"] maps learned controller ids to per-window
    training records.
    """
    out = {}
    for cid, entries in raw.get("dv", {}).items():
        if not entries:
            continue
        dv = np.array([np.asarray(v) for _, v in entries])
        adv = np.abs(dv)
        out[cid] = {
            "minutes": len(entries),
            "avg_dv": [float(v) for v in adv.mean(axis=0)],
            "max_dv": [float(v) for v in adv.max(axis=0)],
            "avg_dv_overall": float(adv.mean()),
            "max_dv_overall": float(adv.max()),
            "avg_max_dv": float(adv.max(axis=1).mean()),
            "violations": int(np.sum(adv > band)),
        }
    windows = {cid: list(recs) for cid, recs in raw.get("windows", {}).items() if recs}
    return SimReport(controllers=out, windows=windows, band=band,
                     config=dict(config or {}), raw=raw)


def _train_window_controllers(scen, sens, cfg: SimConfig, wid: int):
    """Train every learned controller on one window; failures are logged."""
    rulesets = {}
    records = {}
    for cid in cfg.controllers:
        if cid not in LEARNED:
            continue
        tc = cfg.train_config(cid)
        if cfg.cv_mu_grid:
            grid = [replace(tc, mu=m) for m in cfg.cv_mu_grid]
            tc = trainer.cross_validate(scen, sens, grid, tol=cfg.solver_tol)
        try:
            if cid == "R2":
                rs = control.two_step_train(scen, sens, tc, tol=cfg.solver_tol)
            else:
                rs = trainer.train(scen, sens, tc, tol=cfg.solver_tol)
        except TRAIN_FAILURES as exc:
            records[cid] = {"window": wid, "failed": str(exc)}
            continue
        sp = trainer.sparsity_report(rs, cfg.zero_tol)
        outs = rs.responses()
        dev = scen.y.copy()
        for bus, q in outs.items():
            q = np.clip(q, -scen.q_bar[:, bus - 1], scen.q_bar[:, bus - 1])
            dev += np.outer(q, sens.X[:, bus - 1])
        records[cid] = {
            "window": wid,
            "objective": rs.meta.get("training_objective",
                                     rs.meta.get("training_delta")),
            "train_delta": rs.meta.get("training_delta"),
            "train_avg_dv": float(np.abs(dev).mean()),
            "frac_nonzero": sp.frac_nonzero_overall,
            "comm_count": trainer.communication_count(rs, cfg.zero_tol),
        }
        rulesets[cid] = rs
    return rulesets, records


def run_rolling(f: FeederModel, profiles: ProfileSet, cfg: SimConfig) -> SimReport:
    """Simulate the training/apply cycle over the whole profile horizon."""
    T = profiles.horizon
    if T < cfg.train_window_min + cfg.apply_window_min:
        raise ValueError("horizon shorter than one training plus apply window")
    sens = build_sensitivities(f)
    layout = cfg.layout()
    c1_obj = Objective(cfg.c1_objective,
                       cfg.tau if cfg.c1_objective == "delta_tau"
                       else cfg.eps if cfg.c1_objective == "delta_eps" else 0.0)

    dv_logs = {cid: [] for cid in cfg.controllers}
    delta_logs = {cid: [] for cid in cfg.controllers}
    win_logs = {cid: [] for cid in cfg.controllers if cid in LEARNED}
    q_logs = {cid: [] for cid in cfg.controllers}
    opf_cache: dict[int, control.Dispatch] = {}

    for wid, tb in enumerate(range(cfg.train_window_min, T, cfg.apply_window_min)):
        rulesets = {}
        if any(cid in LEARNED for cid in cfg.controllers):
            scen = build_scenarios(profiles, range(tb - cfg.train_window_min, tb),
                                   sens, layout=layout, normalize=cfg.normalize, f=f)
            rulesets, records = _train_window_controllers(scen, sens, cfg, wid)
            for cid, rec in records.items():
                win_logs[cid].append(rec)

        for t in range(tb, min(tb + cfg.apply_window_min, T)):
            gp = grid_point(profiles, t, sens, layout=layout, f=f)
            for cid in cfg.controllers:
                disp = _dispatch(cid, gp, profiles, sens, layout, cfg, c1_obj,
                                 rulesets, f, opf_cache)
                if disp is None:
                    continue
                vp = ac_power_flow(f, gp.p_net, disp.q_g - gp.q_c)
                dv = vp.v - f.v0
                dv_logs[cid].append((t, dv))
                delta_logs[cid].append(
                    (t, float(trainer.delta_value(c1_obj,
                                                  sens.X @ disp.q_g + gp.y))))
                q_logs[cid].append((t, disp.q_g.copy(),
                                    disp.clipped.copy()))

    raw = {"dv": dv_logs, "windows": win_logs, "delta_ldf": delta_logs,
           "dispatch": q_logs}
    return metrics(raw, band=VOLT_BAND, config=_config_dict(cfg))


def _minute_opf(t, profiles, sens, layout, cfg: SimConfig, c1_obj, f, cache):
    """Per-minute optimal dispatch, shared between C1 and C2's stale reads."""
    if t not in cache:
        gp = grid_point(profiles, t, sens, layout=layout, f=f)
        cache[t] = control.opf_dispatch((gp.y, gp.q_bar), sens, c1_obj,
                                        tol=cfg.solver_tol, source="C1")
    return cache[t]


def _dispatch(cid, gp, profiles, sens, layout, cfg: SimConfig, c1_obj,
              rulesets, f, opf_cache):
    if cid == "none":
        return control.Dispatch(q_g=np.zeros(len(gp.y)),
                                clipped=np.zeros(len(gp.y), dtype=bool),
                                source="none")
    if cid == "C1":
        return _minute_opf(gp.t, profiles, sens, layout, cfg, c1_obj, f,
                           opf_cache)
    if cid == "C2":
        t_old = max(gp.t - cfg.lag_min, 0)
        stale = _minute_opf(t_old, profiles, sens, layout, cfg, c1_obj, f,
                            opf_cache)
        q = np.clip(stale.q_g, -gp.q_bar, gp.q_bar)
        return control.Dispatch(q_g=q, clipped=np.abs(stale.q_g) > gp.q_bar,
                                source="C2")
    if cid == "C3":
        return control.watt_var_dispatch(gp.p_g, profiles.s_bar, gp.q_bar)
    rs = rulesets.get(cid)
    if rs is None:
        return None  # window training failed; this controller sits out
    return control.eval_rules(rs, gp.z_raw, gp.q_bar, source=cid)


def _config_dict(cfg: SimConfig) -> dict:
    d = {}
    for k, v in vars(cfg).items():
        d[k] = list(v) if isinstance(v, tuple) else v
    return d


def sweep_tradeoff(f: FeederModel, profiles: ProfileSet, cfg: SimConfig,
                   grid, controller: str = "C4") -> list[dict]:
    """One rolling run per deadband value; rows trace the trade-off curve.

    The deviation column train_avg_dv is the average absolute linearized
    deviation of the trained rules on their own training scenarios;
    ac_avg_dv is the AC-evaluated average over the applied minutes.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    if controller not in LEARNED:
        raise ValueError("sweep controller must be a learned scheme")
    eps_like = controller in ("C6", "C7", "R2")
    rows = []
    for val in grid:
        run_cfg = replace(cfg,
                          controllers=(controller,),
                          eps=val if eps_like else cfg.eps,
                          tau=cfg.tau if eps_like else val)
        report = run_rolling(f, profiles, run_cfg)
        recs = [r for r in report.windows.get(controller, [])
                if "frac_nonzero" in r]
        stats = report.controllers.get(controller, {})
        rows.append({
            "value": float(val),
            "train_avg_dv": float(np.mean([r["train_avg_dv"] for r in recs]))
            if recs else float("nan"),
            "ac_avg_dv": stats.get("avg_dv_overall", float("nan")),
            "frac_nonzero": float(np.mean([r["frac_nonzero"] for r in recs]))
            if recs else float("nan"),
        })
    return rows


def report_to_files(report: SimReport, outdir) -> list[Path]:
    """Write report.json plus the two flat CSV views; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    jpath = outdir / "report.json"
    jpath.write_text(report.to_json())
    paths.append(jpath)

    dv_path = outdir / "voltage_summary.csv"
    with open(dv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "bus", "avg_dv", "max_dv"])
        for cid in sorted(report.controllers):
            stats = report.controllers[cid]
            for i, (a, mx) in enumerate(zip(stats["avg_dv"], stats["max_dv"])):
                w.writerow([cid, i + 1, repr(float(a)), repr(float(mx))])
    paths.append(dv_path)

    win_path = outdir / "training_windows.csv"
    with open(win_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "window", "objective", "frac_nonzero",
                    "comm_count"])
        for cid in sorted(report.windows):
            for rec in report.windows[cid]:
                w.writerow([cid, rec.get("window"), repr(rec.get("objective", "")),
                            repr(rec.get("frac_nonzero", "")),
                            rec.get("comm_count", "")])
    paths.append(win_path)
    return paths
