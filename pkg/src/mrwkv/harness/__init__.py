"""Experiment orchestration: synthetic corpora, significance testing,
objective evaluation runs, and the HTTP service."""

from .corpus import (
    STYLE_CHROMATIC,
    STYLE_PENTATONIC,
    MarkovChain,
    StyleSpec,
    generate_style_score,
    markov_examples,
    style_corpus,
)
from .experiments import (
    EVAL_TASKS,
    EvalTask,
    ExperimentConfig,
    HarnessError,
    ablation_grid,
    choose_eval_region,
    evaluate_pairs,
    replay_original_fill,
    run_objective_eval,
    run_sampling_ablation,
    run_style_split_experiment,
)
from .service import CHECKPOINT_DIR_ENV, ModelBundle, create_app
from .stats import (
    HolmResult,
    WilcoxonResult,
    holm_bonferroni,
    signed_rank_critical_value,
    wilcoxon_signed_rank,
)

__all__ = [
    "CHECKPOINT_DIR_ENV",
    "EVAL_TASKS",
    "STYLE_CHROMATIC",
    "STYLE_PENTATONIC",
    "EvalTask",
    "ExperimentConfig",
    "HarnessError",
    "HolmResult",
    "MarkovChain",
    "ModelBundle",
    "StyleSpec",
    "WilcoxonResult",
    "ablation_grid",
    "choose_eval_region",
    "evaluate_pairs",
    "create_app",
    "generate_style_score",
    "holm_bonferroni",
    "markov_examples",
    "replay_original_fill",
    "run_objective_eval",
    "run_sampling_ablation",
    "run_style_split_experiment",
    "signed_rank_critical_value",
    "style_corpus",
    "wilcoxon_signed_rank",
]
