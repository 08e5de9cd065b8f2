"""Metrics, inference-mode comparison, assumption ablation, and the c sweep.

Every report here is a pure function of (model, split, requested modes):
evaluation iterates samples in order, aggregates deterministically, and
emits CSV rows plus a JSON-able summary.  Ranking agreement between score
vectors uses Kendall's tau-b, which operationalizes the "proportional to" /
"dominated by" ordering claims.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .data import (
    Sample,
    SyntheticTaskSpec,
    empirical_answer_prior,
    generate,
    split_to_arrays,
)
from .effects import CfMode, CounterfactualConfig, InferenceMode, decompose, fuse
from .model import EnsembleModel, ModelConfig
from .train import TrainConfig, fit

__all__ = [
    "EvalReport",
    "evaluate",
    "kendall_tau_b",
    "sweep_c",
    "SweepPoint",
    "assumption_ablation",
    "distribution_report",
    "write_eval_csv",
    "write_distribution_csv",
    "write_sweep_csv",
]

DEFAULT_MODES = (
    InferenceMode.POSTERIOR,
    InferenceMode.TE,
    InferenceMode.TIE,
    InferenceMode.NIE,
    InferenceMode.BRANCH_K,
)


@dataclass
class EvalReport:
    """Accuracies and predicted-answer histograms for one split."""

    num_samples: int
    num_qtypes: int
    num_answers: int
    overall: dict[str, float] = field(default_factory=dict)
    per_qtype: dict[str, np.ndarray] = field(default_factory=dict)
    predicted_hist: dict[str, np.ndarray] = field(default_factory=dict)
    truth_hist: np.ndarray | None = None

    def summary(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "overall": self.overall,
            "per_qtype": {m: acc.tolist() for m, acc in self.per_qtype.items()},
        }


def evaluate(
    model: EnsembleModel,
    split: list[Sample],
    modes: tuple[InferenceMode, ...] = DEFAULT_MODES,
) -> EvalReport:
    """Exact-match accuracy per inference mode with per-qtype breakdown."""
    if not split:
        raise ValueError("cannot evaluate an empty split")
    v, q, qtypes, answers = split_to_arrays(split)
    T, A = model.config.num_qtypes, model.config.num_answers
    report = EvalReport(num_samples=len(split), num_qtypes=T, num_answers=A)
    truth = np.zeros((T, A))
    np.add.at(truth, (qtypes, answers), 1.0)
    report.truth_hist = truth
    for mode in modes:
        scores = model.scores(v, q, mode)
        preds = scores.argmax(axis=1)
        correct = preds == answers
        report.overall[mode.value] = float(correct.mean())
        per_q = np.zeros(T)
        hist = np.zeros((T, A))
        np.add.at(hist, (qtypes, preds), 1.0)
        for t in range(T):
            sel = qtypes == t
            per_q[t] = float(correct[sel].mean()) if sel.any() else 0.0
        report.per_qtype[mode.value] = per_q
        report.predicted_hist[mode.value] = hist
    return report


def kendall_tau_b(x: np.ndarray, y: np.ndarray) -> float:
    """Kendall's tau-b; identical inputs score 1 even when constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("tau inputs must share a shape")
    if np.array_equal(x, y):
        return 1.0
    tau = stats.kendalltau(x, y).statistic
    return 0.0 if np.isnan(tau) else float(tau)


@dataclass
class SweepPoint:
    """Evaluation of TIE inference at one forced counterfactual constant."""

    c: float
    tie_accuracy: float
    tau_tie_vs_fused: float
    tau_tie_vs_nde: float


def sweep_c(
    model: EnsembleModel, split: list[Sample], c_values: list[float]
) -> list[SweepPoint]:
    """TIE behavior across forced uniform constants.

    For each ``c``: TIE accuracy on the split, plus mean per-sample
    Kendall-tau between the TIE ranking and the factual fused / NDE
    rankings.  The model's learned value is restored afterwards.
    """
    v, q, _, answers = split_to_arrays(split)
    outputs, _ = model.forward(v, q)
    fused = fuse(model.config.strategy, model.config.mode,
                 outputs.z_q, outputs.z_v, outputs.z_k, g=outputs.g)
    points = []
    for c in c_values:
        cfg = CounterfactualConfig.uniform(float(c))
        d = decompose(model.config.strategy, model.config.mode,
                      outputs.z_q, outputs.z_v, outputs.z_k, cfg, g=outputs.g)
        acc = float((d.tie.argmax(axis=1) == answers).mean())
        tau_fused = float(np.mean(
            [kendall_tau_b(d.tie[i], fused[i]) for i in range(len(split))]
        ))
        tau_nde = float(np.mean(
            [kendall_tau_b(d.tie[i], d.nde[i]) for i in range(len(split))]
        ))
        points.append(SweepPoint(float(c), acc, tau_fused, tau_nde))
    return points


def assumption_ablation(
    task: SyntheticTaskSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    cf_modes: tuple[CfMode, ...] = (CfMode.UNIFORM, CfMode.PRIOR, CfMode.RANDOM),
    splits: dict[str, list[Sample]] | None = None,
) -> dict[str, dict]:
    """Train one model per counterfactual assumption; evaluate TIE on OOD test.

    Seeds, architecture and optimization are identical across assumptions;
    only the counterfactual parameterization differs.
    """
    if splits is None:
        splits = generate(task)
    prior = empirical_answer_prior(splits["train"], task.num_answers)
    out: dict[str, dict] = {}
    for cf_mode in cf_modes:
        config = replace(model_config, cf_mode=cf_mode)
        model = EnsembleModel(config, train_prior=prior)
        frozen_before = model.cf.values.copy()
        fit(model, splits["train"], splits["val"], train_config)
        report = evaluate(model, splits["test"], modes=(InferenceMode.TIE,))
        out[cf_mode.value] = {
            "tie_accuracy": report.overall[InferenceMode.TIE.value],
            "cf_values": model.cf.values.tolist(),
            "cf_unchanged": bool(np.array_equal(frozen_before, model.cf.values)),
        }
    return out


def distribution_report(
    model: EnsembleModel, split: list[Sample], mode: InferenceMode
) -> list[dict]:
    """Predicted-answer counts per qtype alongside the ground-truth counts."""
    report = evaluate(model, split, modes=(mode,))
    predicted = report.predicted_hist[mode.value]
    rows = []
    for t in range(report.num_qtypes):
        for a in range(report.num_answers):
            rows.append({
                "qtype": t, "answer": a,
                "predicted": int(predicted[t, a]),
                "truth": int(report.truth_hist[t, a]),
            })
    return rows


# ----------------------------------------------------------------------
# CSV writers (delimited boundary consumed by the CLI and the figures)
# ----------------------------------------------------------------------

def write_eval_csv(report: EvalReport, path: str | Path) -> None:
    """Rows: mode, scope ('overall' or qtype index), accuracy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "scope", "accuracy"])
        for mode, acc in report.overall.items():
            writer.writerow([mode, "overall", repr(acc)])
        for mode, per_q in report.per_qtype.items():
            for t, acc in enumerate(per_q):
                writer.writerow([mode, f"qtype_{t}", repr(float(acc))])


def write_distribution_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["qtype", "answer", "predicted", "truth"])
        writer.writeheader()
        writer.writerows(rows)


def write_sweep_csv(points: list[SweepPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["c", "tie_accuracy", "tau_tie_vs_fused", "tau_tie_vs_nde"])
        for p in points:
            writer.writerow([
                repr(p.c), repr(p.tie_accuracy),
                repr(p.tau_tie_vs_fused), repr(p.tau_tie_vs_nde),
            ])
