"""Command-line entry point: voltkernel generate|train|simulate.

One structured YAML/JSON config file drives everything; the only flags
are --config, --out, --force, and --seed-override.  Outputs are never
overwritten without --force.  Failures print a machine-readable JSON
object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import control, sim, trainer
from .feeder import FeederModel, build_sensitivities, load_feeder
from .kernels import KernelSpec
from .scenario import (GenConfig, InputLayout, ProfileSet, build_scenarios,
                       profiles_from_csv, profiles_to_csv, synthesize_profiles)
from .trainer import Objective, TrainConfig

ENV_OUT = "VOLTKERNEL_OUT"


class CliError(Exception):
    """User-facing configuration or I/O problem."""


def _load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text())
    if not isinstance(doc, dict):
        raise CliError("config must be a mapping")
    return doc


def _out_dir(doc: dict, args) -> Path:
    out = args.out or os.environ.get(ENV_OUT) or doc.get("output_dir")
    if not out:
        raise CliError("no output directory (config output_dir, --out, or "
                       f"{ENV_OUT})")
    return Path(out)


def _fresh_path(outdir: Path, name: str, force: bool) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / name
    if path.exists() and not force:
        raise CliError(f"{path} exists; pass --force to overwrite")
    return path


def _feeder_from(doc: dict) -> FeederModel:
    if "feeder" not in doc:
        raise CliError("config needs a feeder path")
    spec = doc["feeder"]
    if isinstance(spec, dict):
        return load_feeder(spec["lines"], spec.get("buses"))
    return load_feeder(spec)


def _gen_config(doc: dict, seed_override=None) -> GenConfig:
    blk = doc.get("generator")
    if blk is None:
        raise CliError("config needs a generator block")
    seed = seed_override if seed_override is not None else \
        blk.get("seed", doc.get("seed", 0))
    return GenConfig(
        horizon_min=int(blk.get("horizon_min", 480)),
        penetration=float(blk.get("penetration", 0.75)),
        peak_scale=float(blk.get("peak_scale", 1.5)),
        pf_range=tuple(blk.get("pf_range", (0.9, 0.95))),
        oversize=float(blk.get("oversize", 1.1)),
        noise=float(blk.get("noise", 0.10)),
        solar_scale=float(blk.get("solar_scale", 1.0)),
        start_min=int(blk.get("start_min", 480)),
        seed=int(seed))


def _profiles_from(doc: dict, f: FeederModel, seed_override=None) -> ProfileSet:
    has_path = "profiles" in doc
    has_gen = "generator" in doc
    if has_path == has_gen:
        raise CliError("config needs exactly one of profiles / generator")
    if has_path:
        path = Path(doc["profiles"])
        if not path.exists():
            raise CliError(f"profiles file not found: {path}")
        oversize = float(doc.get("oversize", 1.1))
        return profiles_from_csv(path, oversize=oversize)
    return synthesize_profiles(f, _gen_config(doc, seed_override))


def _kernel_from(blk: dict) -> KernelSpec:
    kind = blk.get("kernel", "linear")
    width = 3 + len(blk.get("remote_lines", ()))
    gamma = blk.get("gamma")
    if gamma is None:
        gamma = 2.0 * width if kind == "gaussian" else 1.0
    return KernelSpec(kind=kind, gamma=float(gamma),
                      beta=int(blk.get("beta", 2)),
                      jitter=float(blk.get("jitter", 1e-3)))


def _objective_from(blk: dict) -> Objective:
    kind = blk.get("objective", "delta_tau")
    if kind == "delta_tau":
        return Objective(kind, float(blk.get("tau", 0.001)))
    if kind == "delta_eps":
        return Objective(kind, float(blk.get("eps", 0.001)))
    return Objective("delta_s")


def cmd_generate(doc: dict, args) -> int:
    f = _feeder_from(doc)
    cfg = _gen_config(doc, args.seed_override)
    profiles = synthesize_profiles(f, cfg)
    outdir = _out_dir(doc, args)
    path = _fresh_path(outdir, "profiles.csv", args.force)
    profiles_to_csv(profiles, path)
    print(f"wrote {path}: T={profiles.horizon} N={profiles.n_buses} "
          f"penetration={cfg.penetration} "
          f"solar_buses={[int(b) for b in profiles.solar_buses]}")
    return 0


def cmd_train(doc: dict, args) -> int:
    f = _feeder_from(doc)
    profiles = _profiles_from(doc, f, args.seed_override)
    sens = build_sensitivities(f)
    blk = doc.get("train", {})
    layout = InputLayout(local=True,
                         remote_lines=tuple(blk.get("remote_lines", ())))
    start = int(blk.get("window_start", 0))
    window_len = int(blk.get("window_min", 30))
    if start + window_len > profiles.horizon:
        raise CliError("training window exceeds the profile horizon")
    scen = build_scenarios(profiles, range(start, start + window_len), sens,
                           layout=layout,
                           normalize=bool(blk.get("normalize", True)), f=f)
    cfg = TrainConfig(objective=_objective_from(blk),
                      mu=float(blk["mu"]) if "mu" in blk else 0.0,
                      kernel=_kernel_from(blk),
                      drop_intercept=bool(blk.get("drop_intercept", False)),
                      cv_folds=int(blk.get("cv_folds", 5)))
    tol = float(blk.get("solver_tol", 1e-7))
    if "mu" not in blk:
        grid = [replace(cfg, mu=m)
                for m in blk.get("mu_grid", (1e-4, 1e-3, 1e-2))]
        cfg = trainer.cross_validate(scen, sens, grid, tol=tol)
        print(f"cross-validated mu = {cfg.mu}")
    ruleset = trainer.train(scen, sens, cfg, tol=tol)
    outdir = _out_dir(doc, args)
    path = _fresh_path(outdir, "ruleset.json", args.force)
    trainer.ruleset_to_json(ruleset, path)
    report = trainer.sparsity_report(ruleset)
    solver = ruleset.meta["solver"]
    print(f"wrote {path}: objective={ruleset.meta['training_objective']:.6g} "
          f"frac_nonzero={report.frac_nonzero_overall:.3f} "
          f"residuals=({solver['primal_res']:.1e},{solver['dual_res']:.1e},"
          f"{solver['gap']:.1e})")
    return 0


def cmd_simulate(doc: dict, args) -> int:
    f = _feeder_from(doc)
    profiles = _profiles_from(doc, f, args.seed_override)
    blk = doc.get("sim", {})
    cfg = sim.SimConfig(
        train_window_min=int(blk.get("train_window_min", 30)),
        apply_window_min=int(blk.get("apply_window_min", 30)),
        controllers=tuple(blk.get("controllers", ("C1", "C2", "C3", "C4", "C5"))),
        penetration=float(doc.get("generator", {}).get("penetration", 0.75)),
        remote_lines=tuple(blk.get("remote_lines", ())),
        tau=float(blk.get("tau", 0.001)),
        eps=float(blk.get("eps", 0.001)),
        mu=float(blk.get("mu", 1e-3)),
        gaussian_gamma=blk.get("gamma"),
        jitter=float(blk.get("jitter", 1e-3)),
        lag_min=int(blk.get("lag_min", 2)),
        c1_objective=blk.get("c1_objective", "delta_s"),
        normalize=bool(blk.get("normalize", True)),
        solver_tol=float(blk.get("solver_tol", 1e-7)),
        cv_mu_grid=tuple(blk.get("cv_mu_grid", ())),
    )
    outdir = _out_dir(doc, args)
    paths = [_fresh_path(outdir, n, args.force)
             for n in ("report.json", "voltage_summary.csv",
                       "training_windows.csv")]
    report = sim.run_rolling(f, profiles, cfg)
    sim.report_to_files(report, outdir)
    sweep_blk = blk.get("sweep")
    if sweep_blk:
        spath = _fresh_path(outdir, "tradeoff.csv", args.force)
        rows = sim.sweep_tradeoff(f, profiles, cfg,
                                  grid=[float(v) for v in sweep_blk["values"]],
                                  controller=sweep_blk.get("controller", "C4"))
        with open(spath, "w") as fh:
            fh.write("value,train_avg_dv,ac_avg_dv,frac_nonzero\n")
            for r in rows:
                fh.write(f"{r['value']!r},{r['train_avg_dv']!r},"
                         f"{r['ac_avg_dv']!r},{r['frac_nonzero']!r}\n")
        paths.append(spath)
    for p in paths:
        print(f"wrote {p}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="voltkernel",
        description="Kernel-based reactive power control rules: data "
                    "generation, training, and rolling simulation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("generate", cmd_generate), ("train", cmd_train),
                     ("simulate", cmd_simulate)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default=None)
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--seed-override", type=int, default=None)
        sp.set_defaults(func=fn)
    args = parser.parse_args(argv)
    try:
        doc = _load_config(args.config)
        return args.func(doc, args)
    except (CliError, trainer.TrainingError, ValueError, OSError) as exc:
        json.dump({"error": type(exc).__name__, "detail": str(exc)},
                  sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
