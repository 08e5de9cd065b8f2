"""Ensemble optimization: branch classification losses plus the sharpness loss.

Two loss surfaces with disjoint gradient routes:

- The classification loss sums softmax cross-entropies over the fused
  factual score and each supervised branch score (the vision-only term is
  skipped in SIMPLIFIED mode).  Its gradients reach every branch parameter
  and the Learned-Mixin g head, but never the counterfactual values: those
  appear in no factual score.

- The sharpness loss matches the counterfactual score's distribution to the
  (detached) factual one: mean over the batch of
  ``(1/|A|) * sum_a -p(a | factual) * log p(a | counterfactual)``.
  Its gradient reaches only the counterfactual values; PRIOR values stay
  frozen.  Because the factual side is detached, this scaled cross-entropy
  has the same gradient in the counterfactual values as the corresponding
  KL divergence.

Both updates run every batch through separate Adam states.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Sample, split_to_arrays
from .effects import (
    CfMode,
    Fusion,
    GraphMode,
    InferenceMode,
    fuse,
    fuse_input_grads,
    star_value,
)
from .model import EnsembleModel
from .nn import AdamState, adam_step, softmax, softmax_cross_entropy

__all__ = [
    "TrainConfig",
    "LossReport",
    "FitResult",
    "classification_loss",
    "kl_loss",
    "fit",
    "write_training_log",
    "TRAINING_LOG_COLUMNS",
]

TRAINING_LOG_COLUMNS = (
    "epoch", "l_vqa", "l_qa", "l_va", "l_kl", "val_acc_posterior", "val_acc_tie",
)


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale optimization defaults; all overridable."""

    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 2
    detach_mask_gradient: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "lr": self.lr, "seed": self.seed,
            "detach_mask_gradient": self.detach_mask_gradient,
        }


@dataclass
class LossReport:
    """Loss terms for one batch or one epoch; total is their exact sum."""

    l_vqa: float
    l_qa: float
    l_va: float
    l_kl: float

    @property
    def total(self) -> float:
        return self.l_vqa + self.l_qa + self.l_va + self.l_kl


@dataclass
class FitResult:
    epoch_reports: list[LossReport] = field(default_factory=list)
    val_acc_posterior: list[float] = field(default_factory=list)
    val_acc_tie: list[float] = field(default_factory=list)


def classification_loss(
    model: EnsembleModel,
    v: np.ndarray,
    q: np.ndarray,
    answers: np.ndarray,
    detach_mask_gradient: bool = False,
) -> tuple[LossReport, None]:
    """Branch classification losses; gradients accumulate into the store.

    Call ``model.store.zero_grads()`` first when a fresh gradient is wanted.
    Returns a report with ``l_kl = 0``; the counterfactual values receive no
    gradient here.
    """
    if len(answers) == 0:
        raise ValueError("classification_loss needs a non-empty batch")
    outputs, cache = model.forward(v, q, with_cache=True)
    strategy, mode = model.config.strategy, model.config.mode

    fused = fuse(strategy, mode, outputs.z_q, outputs.z_v, outputs.z_k, g=outputs.g)
    l_vqa, d_fused = softmax_cross_entropy(fused, answers)
    d_q, d_v, d_k, d_gw = fuse_input_grads(
        strategy, mode, outputs.z_q, outputs.z_v, outputs.z_k, g=outputs.g,
        detach_q_mask=detach_mask_gradient,
    )
    d_zq = d_fused * d_q
    d_zk = d_fused * d_k
    d_g = (d_fused * d_gw).sum(axis=1) if d_gw is not None else None

    l_qa, d_zq_direct = softmax_cross_entropy(outputs.z_q, answers)
    d_zq = d_zq + d_zq_direct

    l_va = 0.0
    d_zv = None
    if mode is GraphMode.FULL:
        l_va, d_zv_direct = softmax_cross_entropy(outputs.z_v, answers)
        d_zv = d_fused * d_v + d_zv_direct

    model.backward(cache, d_zq, d_zv, d_zk, d_g)
    return LossReport(l_vqa=l_vqa, l_qa=l_qa, l_va=l_va, l_kl=0.0), None


def kl_loss(
    model: EnsembleModel, v: np.ndarray, q: np.ndarray
) -> tuple[float, np.ndarray]:
    """Sharpness-matching loss and its gradient w.r.t. the counterfactual values.

    The factual distribution is treated as a constant; no branch parameter
    receives any gradient.  The returned gradient matches the stored value
    shape: one entry for UNIFORM, one per answer otherwise (zeros for the
    frozen PRIOR mode).
    """
    if v.shape[0] == 0:
        raise ValueError("kl_loss needs a non-empty batch")
    outputs, _ = model.forward(v, q)
    strategy, mode = model.config.strategy, model.config.mode
    num_answers = model.config.num_answers
    batch = v.shape[0]

    p_fact = softmax(fuse(strategy, mode, outputs.z_q, outputs.z_v, outputs.z_k,
                          g=outputs.g))
    s = np.broadcast_to(star_value(model.cf, num_answers), outputs.z_q.shape)
    v_star = s if mode is GraphMode.FULL else None
    u = fuse(strategy, mode, outputs.z_q, v_star, s, g=outputs.g)
    shifted = u - u.max(axis=1, keepdims=True)
    log_p_cf = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-(p_fact * log_p_cf).sum(axis=1).mean() / num_answers)

    if not model.cf.trainable:
        return loss, np.zeros_like(model.cf.values)

    # dL/du = (softmax(u) - p_fact) / (|A| * batch), then through the starred
    # slots of the fusion (v and k in FULL mode, k alone in SIMPLIFIED).
    d_u = (softmax(u) - p_fact) / (num_answers * batch)
    _, dv, dk, _ = fuse_input_grads(strategy, mode, outputs.z_q, v_star, s,
                                    g=outputs.g)
    d_star = d_u * dk if dv is None else d_u * (dv + dk)
    if model.cf.mode is CfMode.UNIFORM:
        return loss, np.array([d_star.sum()])
    return loss, d_star.sum(axis=0)


def fit(
    model: EnsembleModel,
    train_split: list[Sample],
    val_split: list[Sample],
    config: TrainConfig,
) -> FitResult:
    """Train in place; per-batch interleaved updates of branches and cf values.

    Single trainer thread over batches; shuffling is deterministic in the
    config seed.  Raises on non-finite loss, naming the offending epoch and
    batch.
    """
    v_train, q_train, _, y_train = split_to_arrays(train_split)
    v_val, q_val, _, y_val = split_to_arrays(val_split)
    rng = np.random.default_rng(config.seed)
    theta_state = AdamState.for_params(model.store.params)
    cf_params = {"c": model.cf.values}
    cf_state = AdamState.for_params(cf_params)
    result = FitResult()
    n = len(train_split)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            vb, qb, yb = v_train[idx], q_train[idx], y_train[idx]

            model.store.zero_grads()
            try:
                report, _ = classification_loss(
                    model, vb, qb, yb,
                    detach_mask_gradient=config.detach_mask_gradient,
                )
                loss_kl, c_grad = kl_loss(model, vb, qb)
            except ValueError as exc:
                raise ValueError(
                    f"training diverged at epoch {epoch}, batch {batches}: {exc}"
                ) from exc
            if not (np.isfinite(report.total) and np.isfinite(loss_kl)):
                raise ValueError(
                    f"non-finite loss at epoch {epoch}, batch {batches}"
                )
            adam_step(model.store.params, model.store.grads, theta_state, config.lr)
            if model.cf.trainable:
                adam_step(cf_params, {"c": c_grad}, cf_state, config.lr)

            sums += (report.l_vqa, report.l_qa, report.l_va, loss_kl)
            batches += 1

        means = sums / max(batches, 1)
        result.epoch_reports.append(
            LossReport(l_vqa=float(means[0]), l_qa=float(means[1]),
                       l_va=float(means[2]), l_kl=float(means[3]))
        )
        result.val_acc_posterior.append(
            _accuracy(model, v_val, q_val, y_val, InferenceMode.POSTERIOR)
        )
        result.val_acc_tie.append(
            _accuracy(model, v_val, q_val, y_val, InferenceMode.TIE)
        )
    return result


def _accuracy(
    model: EnsembleModel, v: np.ndarray, q: np.ndarray, y: np.ndarray,
    mode: InferenceMode,
) -> float:
    scores = model.scores(v, q, mode)
    return float((scores.argmax(axis=1) == y).mean())


def write_training_log(result: FitResult, path: str | Path) -> None:
    """CSV trace: one row per epoch."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAINING_LOG_COLUMNS)
        for epoch, report in enumerate(result.epoch_reports):
            writer.writerow([
                epoch, repr(report.l_vqa), repr(report.l_qa), repr(report.l_va),
                repr(report.l_kl), repr(result.val_acc_posterior[epoch]),
                repr(result.val_acc_tie[epoch]),
            ])
