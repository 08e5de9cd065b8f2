"""Fusion functions and causal-effect decompositions over branch logits.

Everything in this module is pure algebra on numpy arrays whose last axis
indexes the answer vocabulary.  A "branch" produces a logit vector; a fusion
function ``h`` combines the question-only, vision-only and joint branches
into one fused score; the effect decompositions compare fused scores between
factual inputs and counterfactual stand-ins.

Conventions:

- Arrays may carry leading batch axes; all operations broadcast over them.
- Counterfactual ("starred") inputs are resolved by the caller through
  :func:`star_value`, so the fusion functions never see a missing input.
- Log-sigmoids are computed as ``-softplus(-x)`` (overflow-safe), accurate
  for ``|x|`` up to several hundred.
- Fused HM/SUM scores are clamped from below at :data:`SCORE_FLOOR`.  The
  clamp is a finite stand-in for log-scores that diverge to ``-inf`` when a
  counterfactual constant is pushed to an extreme; it never engages for
  logits in the normal operating range (sums above -35).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "SCORE_FLOOR",
    "Fusion",
    "GraphMode",
    "CfMode",
    "InferenceMode",
    "CounterfactualConfig",
    "EffectDecomposition",
    "sigmoid",
    "log_sigmoid",
    "fuse",
    "fuse_input_grads",
    "star_value",
    "decompose",
    "rubi_improved_tie",
    "inference_score",
    "select_answer",
]

# Finite stand-in for fused log-scores that diverge to -inf under extreme
# counterfactual constants.  Must sit below every reachable factual score
# (logits in [-10, 10] give fused sums >= -30) and above the starred scores
# produced by |c| >= 30.
SCORE_FLOOR = -35.0


class Fusion(Enum):
    """Fusion strategy combining branch logits into one score."""

    HM = "HM"
    SUM = "SUM"
    RUBI = "RUBI"
    LM = "LM"


class GraphMode(Enum):
    """Causal-graph variant.  SIMPLIFIED drops the vision-only branch."""

    FULL = "FULL"
    SIMPLIFIED = "SIMPLIFIED"


class CfMode(Enum):
    """Assumption governing the counterfactual stand-in values."""

    UNIFORM = "UNIFORM"
    PRIOR = "PRIOR"
    RANDOM = "RANDOM"


class InferenceMode(Enum):
    """Score used to rank answers at prediction time."""

    POSTERIOR = "POSTERIOR"
    TE = "TE"
    TIE = "TIE"
    NIE = "NIE"
    BRANCH_K = "BRANCH_K"


@dataclass
class CounterfactualConfig:
    """Counterfactual stand-in configuration.

    ``values`` holds the learnable (or frozen) parameters: shape ``(1,)``
    for UNIFORM (one scalar broadcast to every answer and every starred
    slot), shape ``(num_answers,)`` for PRIOR and RANDOM.  PRIOR values are
    frozen log training-prior entries and must never be updated.
    """

    mode: CfMode
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("counterfactual values must be a 1-D array")
        if self.mode is CfMode.UNIFORM and self.values.shape != (1,):
            raise ValueError("UNIFORM mode stores exactly one scalar")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("counterfactual values must be finite")

    @property
    def trainable(self) -> bool:
        """PRIOR values are frozen; UNIFORM and RANDOM are learned."""
        return self.mode is not CfMode.PRIOR

    @property
    def c_scalar(self) -> float:
        if self.mode is not CfMode.UNIFORM:
            raise ValueError("c_scalar is defined for UNIFORM mode only")
        return float(self.values[0])

    @classmethod
    def uniform(cls, c: float = 0.0) -> "CounterfactualConfig":
        return cls(CfMode.UNIFORM, np.array([c], dtype=np.float64))

    @classmethod
    def from_prior(cls, prior: np.ndarray) -> "CounterfactualConfig":
        """Frozen log of a training prior over answers."""
        prior = np.asarray(prior, dtype=np.float64)
        if np.any(prior <= 0.0):
            raise ValueError("prior entries must be strictly positive")
        if abs(prior.sum() - 1.0) > 1e-9:
            raise ValueError("prior must sum to 1")
        return cls(CfMode.PRIOR, np.log(prior))

    @classmethod
    def random_init(
        cls, num_answers: int, rng: np.random.Generator, scale: float = 0.01
    ) -> "CounterfactualConfig":
        """Free per-answer vector, initialized near zero."""
        return cls(CfMode.RANDOM, scale * rng.standard_normal(num_answers))


@dataclass
class EffectDecomposition:
    """Per-answer causal effects of one sample's branch logits.

    ``te = nde + tie`` and ``te = tde + nie`` hold exactly by construction.
    """

    te: np.ndarray
    nde: np.ndarray
    tie: np.ndarray
    tde: np.ndarray
    nie: np.ndarray


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    """log(sigmoid(x)) as -softplus(-x); safe for large |x|."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _gather_slots(
    strategy: Fusion,
    mode: GraphMode,
    z_q: np.ndarray,
    z_v: np.ndarray | None,
    z_k: np.ndarray,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    if not isinstance(strategy, Fusion):
        raise ValueError(f"unknown fusion strategy: {strategy!r}")
    if not isinstance(mode, GraphMode):
        raise ValueError(f"unknown graph mode: {mode!r}")
    if strategy in (Fusion.RUBI, Fusion.LM) and mode is not GraphMode.SIMPLIFIED:
        raise ValueError(f"{strategy.value} fusion is defined only for SIMPLIFIED mode")
    z_q = _check_finite("z_q", z_q)
    z_k = _check_finite("z_k", z_k)
    if z_q.shape[-1] != z_k.shape[-1]:
        raise ValueError(
            f"answer dimension mismatch: z_q has {z_q.shape[-1]}, z_k has {z_k.shape[-1]}"
        )
    if mode is GraphMode.FULL:
        if z_v is None:
            raise ValueError("FULL mode requires z_v")
        z_v = _check_finite("z_v", z_v)
        if z_v.shape[-1] != z_q.shape[-1]:
            raise ValueError(
                f"answer dimension mismatch: z_q has {z_q.shape[-1]}, z_v has {z_v.shape[-1]}"
            )
    else:
        z_v = None
    return z_q, z_v, z_k


def _prep_g(g, like: np.ndarray) -> np.ndarray:
    if g is None:
        raise ValueError("LM fusion requires a g weight")
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("g contains non-finite entries")
    if np.any(g < 0.0):
        raise ValueError("LM g weight must be non-negative")
    if g.ndim == like.ndim - 1:
        g = g[..., None]
    return g


def fuse(
    strategy: Fusion,
    mode: GraphMode,
    z_q: np.ndarray,
    z_v: np.ndarray | None,
    z_k: np.ndarray,
    g=None,
) -> np.ndarray:
    """Fused score ``h`` over branch logits (element-wise on the last axis).

    HM:   log_sigmoid(sum of branch log-sigmoids), which equals
          ``log(Z_HM / (1 + Z_HM))`` with ``Z_HM`` the product of branch
          sigmoids.
    SUM:  log_sigmoid(sum of branch logits).
    RUBI: ``z_k * sigmoid(z_q)`` (SIMPLIFIED only).
    LM:   ``log_sigmoid(z_k) + g * log_sigmoid(z_q)`` (SIMPLIFIED only,
          g >= 0 per sample).

    In SIMPLIFIED mode the v slot is dropped.  Starred inputs must already
    be resolved to their counterfactual constants.  HM/SUM outputs are
    clamped at :data:`SCORE_FLOOR`.
    """
    z_q, z_v, z_k = _gather_slots(strategy, mode, z_q, z_v, z_k)
    if strategy is Fusion.SUM:
        total = z_q + z_k if z_v is None else z_q + z_v + z_k
        return np.maximum(log_sigmoid(total), SCORE_FLOOR)
    if strategy is Fusion.HM:
        total = log_sigmoid(z_q) + log_sigmoid(z_k)
        if z_v is not None:
            total = total + log_sigmoid(z_v)
        return np.maximum(log_sigmoid(total), SCORE_FLOOR)
    if strategy is Fusion.RUBI:
        return z_k * sigmoid(z_q)
    # LM
    g = _prep_g(g, z_k)
    return log_sigmoid(z_k) + g * log_sigmoid(z_q)


def fuse_input_grads(
    strategy: Fusion,
    mode: GraphMode,
    z_q: np.ndarray,
    z_v: np.ndarray | None,
    z_k: np.ndarray,
    g=None,
    detach_q_mask: bool = False,
):
    """Element-wise partials of :func:`fuse` w.r.t. each input slot.

    Returns ``(d_zq, d_zv, d_zk, d_g)`` with ``None`` for absent slots.
    Entries where the HM/SUM floor engaged get zero gradient.
    ``detach_q_mask`` treats RUBi's ``sigmoid(z_q)`` mask as a constant.
    """
    z_q, z_v, z_k = _gather_slots(strategy, mode, z_q, z_v, z_k)
    if strategy is Fusion.SUM:
        total = z_q + z_k if z_v is None else z_q + z_v + z_k
        live = log_sigmoid(total) > SCORE_FLOOR
        d = sigmoid(-total) * live
        return d, (d if z_v is not None else None), d, None
    if strategy is Fusion.HM:
        ls_q, ls_k = log_sigmoid(z_q), log_sigmoid(z_k)
        total = ls_q + ls_k
        if z_v is not None:
            total = total + log_sigmoid(z_v)
        live = log_sigmoid(total) > SCORE_FLOOR
        outer = sigmoid(-total) * live
        d_zq = outer * sigmoid(-z_q)
        d_zv = outer * sigmoid(-z_v) if z_v is not None else None
        return d_zq, d_zv, outer * sigmoid(-z_k), None
    if strategy is Fusion.RUBI:
        s_q = sigmoid(z_q)
        d_zq = np.zeros_like(z_q) if detach_q_mask else z_k * s_q * (1.0 - s_q)
        return d_zq, None, s_q, None
    # LM
    g = _prep_g(g, z_k)
    return g * sigmoid(-z_q), None, sigmoid(-z_k), log_sigmoid(z_q)


def star_value(cfg: CounterfactualConfig, num_answers: int | None = None) -> np.ndarray:
    """Vector substituted for a branch's logits under no-treatment.

    UNIFORM broadcasts the single scalar to ``num_answers`` entries;
    PRIOR/RANDOM return their stored per-answer vector.
    """
    if cfg.mode is CfMode.UNIFORM:
        if num_answers is None:
            raise ValueError("UNIFORM star value needs num_answers")
        return np.full(num_answers, cfg.values[0], dtype=np.float64)
    out = cfg.values
    if num_answers is not None and out.shape != (num_answers,):
        raise ValueError(
            f"counterfactual vector has length {out.shape[0]}, expected {num_answers}"
        )
    return out


def decompose(
    strategy: Fusion,
    mode: GraphMode,
    z_q: np.ndarray,
    z_v: np.ndarray | None,
    z_k: np.ndarray,
    cfg: CounterfactualConfig,
    g=None,
) -> EffectDecomposition:
    """All five causal effects of one (batch of) factual branch outputs.

    With ``s = star_value(cfg)`` and ``h = fuse(...)``::

        TE  = h(z_q, z_v, z_k) - h(s, s, s)
        NDE = h(z_q, s,   s  ) - h(s, s, s)
        TIE = h(z_q, z_v, z_k) - h(z_q, s, s)
        TDE = h(z_q, z_v, z_k) - h(s, z_v, z_k)
        NIE = h(s,   z_v, z_k) - h(s, s, s)

    The v slot is dropped throughout in SIMPLIFIED mode.
    """
    z_q = _check_finite("z_q", z_q)
    s = star_value(cfg, z_q.shape[-1])
    s = np.broadcast_to(s, z_q.shape)
    v_star = s if mode is GraphMode.FULL else None
    h_fact = fuse(strategy, mode, z_q, z_v, z_k, g)
    h_star = fuse(strategy, mode, s, v_star, s, g)
    h_q_only = fuse(strategy, mode, z_q, v_star, s, g)
    h_mediated = fuse(strategy, mode, s, z_v, z_k, g)
    return EffectDecomposition(
        te=h_fact - h_star,
        nde=h_q_only - h_star,
        tie=h_fact - h_q_only,
        tde=h_fact - h_mediated,
        nie=h_mediated - h_star,
    )


def rubi_improved_tie(z_q: np.ndarray, z_k: np.ndarray, c: float) -> np.ndarray:
    """``(z_k - c) * sigmoid(z_q)``: the RUBi debiased inference score.

    Equals ``decompose(RUBI, SIMPLIFIED, ...).tie`` with a UNIFORM constant.
    """
    z_q = _check_finite("z_q", z_q)
    z_k = _check_finite("z_k", z_k)
    if z_q.shape[-1] != z_k.shape[-1]:
        raise ValueError(
            f"answer dimension mismatch: z_q has {z_q.shape[-1]}, z_k has {z_k.shape[-1]}"
        )
    return (z_k - c) * sigmoid(z_q)


def inference_score(
    inference_mode: InferenceMode,
    strategy: Fusion,
    mode: GraphMode,
    z_q: np.ndarray,
    z_v: np.ndarray | None,
    z_k: np.ndarray,
    cfg: CounterfactualConfig | None = None,
    g=None,
) -> np.ndarray:
    """Score vector ranked at prediction time under the requested mode.

    POSTERIOR is the fused factual score; TE/TIE/NIE are decomposition
    fields (require ``cfg``); BRANCH_K passes ``z_k`` through unchanged.
    """
    if not isinstance(inference_mode, InferenceMode):
        raise ValueError(f"unknown inference mode: {inference_mode!r}")
    if inference_mode is InferenceMode.POSTERIOR:
        return fuse(strategy, mode, z_q, z_v, z_k, g)
    if inference_mode is InferenceMode.BRANCH_K:
        return _check_finite("z_k", z_k)
    if cfg is None:
        raise ValueError(f"{inference_mode.value} inference needs a counterfactual config")
    effects = decompose(strategy, mode, z_q, z_v, z_k, cfg, g)
    return getattr(effects, inference_mode.value.lower())


def select_answer(scores: np.ndarray) -> int:
    """Argmax with ties broken by lowest index."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ValueError("select_answer expects a single score vector")
    return int(np.argmax(scores))
