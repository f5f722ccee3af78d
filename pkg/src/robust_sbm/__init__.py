"""Robust two-stage slack-based DEA with ellipsoidal, polyhedral and budget uncertainty."""

from .conic_ir import ConicProgram, ProgramBuilder, SolverParams, SolveOutcome, Status, dual_values, solve, validate
from .panel import DmuPanel, Imputer, Schema, impute_missing, load_panel, load_panel_file, preprocess, range_directional_transform
from .robust import (BudgetSpec, DeviationLayers, EllipsoidalSpec, ExplicitTable, PercentOfNominal, PolyhedralSet,
                     PolyhedralSpec, build_robust_stage1_budget, build_robust_stage1_ellipsoidal,
                     build_robust_stage1_polyhedral, build_robust_stage2_budget, build_robust_stage2_ellipsoidal,
                     build_robust_stage2_polyhedral, make_layers)
from .runner import EfficiencyReport, RunConfig, emit_report, friedman_test, load_config, run_batch
from .sbm import (Form, StageSolution, UndesirableTerm, build_blackbox_sbm, build_stage1, build_stage2,
                  build_undesirable_sbm, extract_solution, overall_efficiency)

__version__ = "0.1.0"
