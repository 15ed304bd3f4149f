"""Kernel-based reactive power control rules for smart inverters.

Design multi-task kernel rules over load/solar scenarios by solving one
second-order cone program, dispatch them in real time with a box
projection, and evaluate everything against exact AC power flow on a
radial feeder.
"""

from .conic import ConeProgram, ConeSolution, SolverFailure, project_soc, residuals, solve
from .control import Dispatch, WattVarCurve, eval_rules, opf_dispatch, two_step_train, watt_var
from .feeder import (FeederModel, Sensitivities, VoltageProfile, ac_power_flow,
                     build_sensitivities, bundled_feeder_path, load_feeder)
from .kernels import GramSet, KernelSpec, gram, gram_sqrt, kernel_eval, kernel_ridge
from .scenario import (GenConfig, InputLayout, ProfileSet, ScenarioSet, augment_input,
                       build_scenarios, grid_point, synthesize_profiles)
from .sim import SimConfig, SimReport, metrics, run_rolling, sweep_tradeoff
from .trainer import (Objective, Rule, RuleSet, SparsityReport, TrainConfig,
                      TrainingError, assemble, cross_validate, delta_value,
                      ruleset_from_json, ruleset_to_json, sparsity_report, train)

__version__ = "0.1.0"
