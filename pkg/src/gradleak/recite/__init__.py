"""End-to-end attack: noise injection, prefix composition, PII inference, metrics, sweeps."""

from gradleak.recite.attack import (AttackConfig, AttackTrace, ClientUpdate, ReconstructionReport,
                                    finetune_capture, run_attack)
from gradleak.recite.compose import ExternalComposer, TemplateComposer, compose_prefix
from gradleak.recite.defense import apply_dp_noise
from gradleak.recite.experiment import (Lab, LabConfig, ResultsTable, SweepGrid, ablation_spec,
                                        run_cell, run_experiment)
from gradleak.recite.infer import build_query, infer_pii
from gradleak.recite.metrics import Metrics, compute_metrics

__all__ = [
    "AttackConfig", "AttackTrace", "ClientUpdate", "ReconstructionReport", "finetune_capture",
    "run_attack", "ExternalComposer", "TemplateComposer", "compose_prefix", "apply_dp_noise",
    "Lab", "LabConfig", "ResultsTable", "SweepGrid", "ablation_spec", "run_cell",
    "run_experiment", "build_query", "infer_pii", "Metrics", "compute_metrics",
]
