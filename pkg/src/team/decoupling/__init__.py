"""Turning a pretrained dense CNN into shared layers plus per-class critical paths."""
from team.decoupling.accounting import param_accounting
from team.decoupling.arch import ArchSpec, DenseModel, split_for
from team.decoupling.decouple import (
    DecoupleConfig,
    PathAssignment,
    build_path_assignment,
    decouple,
    score_all_layers,
    score_filter_importance,
)
from team.decoupling.model import (
    CriticalPath,
    GlobalModel,
    SpecializedModel,
    TaskMode,
    extract_specialized,
    forward_specialized,
    path_specs,
)

__all__ = [
    "ArchSpec", "CriticalPath", "DecoupleConfig", "DenseModel", "GlobalModel",
    "PathAssignment", "SpecializedModel", "TaskMode", "build_path_assignment",
    "decouple", "extract_specialized", "forward_specialized", "param_accounting",
    "path_specs", "score_all_layers", "score_filter_importance", "split_for",
]
