"""Synthetic benchmark, training loop, evaluation and ablation grids."""
from .ablation import AblationTable, CellResult, Variant, builtin_grid, flow_comparison, run_ablation
from .data import (
    DatasetSpec,
    FewShotSet,
    LabeledImages,
    Task,
    generate_dataset,
    render,
    sample_few_shot,
    split_base_novel,
)
from .training import (
    Hyperparams,
    PretrainConfig,
    RunReport,
    effective_boundary,
    evaluate,
    evaluate_task,
    harmonic_mean,
    predictions,
    pretrain_backbone,
    pretraining_corpus,
    run_variant,
    train,
)

__all__ = [
    "AblationTable", "CellResult", "DatasetSpec", "FewShotSet", "Hyperparams", "LabeledImages",
    "PretrainConfig", "RunReport", "Task", "Variant", "builtin_grid", "effective_boundary", "evaluate",
    "evaluate_task", "flow_comparison", "generate_dataset", "harmonic_mean", "predictions",
    "pretrain_backbone", "pretraining_corpus", "render", "run_ablation", "run_variant",
    "sample_few_shot", "split_base_novel", "train",
]
