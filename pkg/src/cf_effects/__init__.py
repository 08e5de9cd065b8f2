"""Counterfactual-effect toolkit for debiasing multi-branch ensembles.

The package decomposes an ensemble classifier's fused score into causal
effects of the question-only path and uses the total indirect effect for
prediction, so a memorized answer prior can be subtracted while the rest of
the signal survives.  A deterministic synthetic changing-priors task plays
the role of the benchmark.
"""

from .data import Sample, SyntheticTaskSpec, default_task_spec, generate
from .effects import (
    CfMode,
    CounterfactualConfig,
    EffectDecomposition,
    Fusion,
    GraphMode,
    InferenceMode,
    decompose,
    fuse,
    inference_score,
    rubi_improved_tie,
    star_value,
)
from .evaluate import EvalReport, assumption_ablation, evaluate, sweep_c
from .model import EnsembleModel, ModelConfig, load_model, save_model
from .train import TrainConfig, fit

__all__ = [
    "Sample",
    "SyntheticTaskSpec",
    "default_task_spec",
    "generate",
    "CfMode",
    "CounterfactualConfig",
    "EffectDecomposition",
    "Fusion",
    "GraphMode",
    "InferenceMode",
    "decompose",
    "fuse",
    "inference_score",
    "rubi_improved_tie",
    "star_value",
    "EvalReport",
    "assumption_ablation",
    "evaluate",
    "sweep_c",
    "EnsembleModel",
    "ModelConfig",
    "load_model",
    "save_model",
    "TrainConfig",
    "fit",
]

__version__ = "0.1.0"
