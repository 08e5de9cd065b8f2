"""Synthetic changing-priors classification task: generation and persistence.

Each sample pairs a noisy visual feature vector (one-hot of the true answer,
scaled by ``visual_snr``, plus unit Gaussian noise) with a noisy question
vector (one-hot of the question type plus unit Gaussian noise).  Every
question type owns a subset of the answer vocabulary (its context); train
and test splits draw labels from materially different priors over that
subset, so memorizing the train prior fails at test time.  The val split is
drawn in-domain from the train distribution.

Generation is a pure function of the task spec, including the seed: every
sample derives its own generator from ``(seed, split_index, sample_index)``,
so sharding by sample index reproduces the single-threaded output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "SyntheticTaskSpec",
    "Sample",
    "PriorShiftReport",
    "default_task_spec",
    "generate",
    "save_split",
    "load_split",
    "split_to_arrays",
    "tv_distance",
    "empirical_conditional",
    "empirical_answer_prior",
    "effective_conditional",
    "prior_ceiling",
    "prior_shift_report",
]

_SPLIT_INDEX = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Full description of one changing-priors task.

    ``context_map[t]`` lists the answers reachable from question type ``t``
    (the "good" context); ``train_prior[t]`` / ``test_prior[t]`` are
    distributions over exactly that subset (the "bad", shiftable bias).
    ``spurious_strength`` is the probability a label follows the split's
    prior rather than a uniform draw over the subset.
    """

    num_answers: int
    num_qtypes: int
    context_map: tuple[tuple[int, ...], ...]
    train_prior: tuple[tuple[float, ...], ...]
    test_prior: tuple[tuple[float, ...], ...]
    visual_snr: float
    spurious_strength: float
    train_size: int
    val_size: int
    test_size: int
    seed: int
    min_prior_shift: float = 0.3

    def __post_init__(self) -> None:
        if self.num_answers < 4:
            raise ValueError("num_answers must be at least 4")
        if self.num_qtypes < 2:
            raise ValueError("num_qtypes must be at least 2")
        if len(self.context_map) != self.num_qtypes:
            raise ValueError("context_map must list one subset per question type")
        if self.visual_snr < 0:
            raise ValueError("visual_snr must be non-negative")
        if not 0.0 <= self.spurious_strength <= 1.0:
            raise ValueError("spurious_strength must lie in [0, 1]")
        if min(self.train_size, self.val_size, self.test_size) < 0:
            raise ValueError("split sizes must be non-negative")
        for t, subset in enumerate(self.context_map):
            if not subset:
                raise ValueError(f"context subset for qtype {t} is empty")
            if any(a < 0 or a >= self.num_answers for a in subset):
                raise ValueError(f"context subset for qtype {t} is out of range")
            for name, priors in (("train", self.train_prior), ("test", self.test_prior)):
                p = priors[t]
                if len(p) != len(subset):
                    raise ValueError(
                        f"{name} prior for qtype {t} does not match its subset size"
                    )
                if any(v < 0 for v in p) or abs(sum(p) - 1.0) > 1e-9:
                    raise ValueError(f"{name} prior for qtype {t} must be a distribution")
            shift = tv_distance(np.array(self.train_prior[t]), np.array(self.test_prior[t]))
            if shift < self.min_prior_shift - 1e-12:
                raise ValueError(
                    f"prior shift for qtype {t} is {shift:.3f}, "
                    f"below the required {self.min_prior_shift}"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown task spec fields: {sorted(extra)}")
        missing = known - set(d) - {"min_prior_shift"}
        if missing:
            raise ValueError(f"missing task spec fields: {sorted(missing)}")
        d = dict(d)
        d["context_map"] = tuple(tuple(s) for s in d["context_map"])
        d["train_prior"] = tuple(tuple(p) for p in d["train_prior"])
        d["test_prior"] = tuple(tuple(p) for p in d["test_prior"])
        return cls(**d)


@dataclass
class Sample:
    """One classification instance: features, question type, answer label."""

    v: np.ndarray
    q: np.ndarray
    qtype: int
    answer: int


def default_task_spec(seed: int = 2, **overrides) -> SyntheticTaskSpec:
    """10 answers, 3 question types, per-qtype train/test prior shift of 0.6.

    Every question type answers over the same pair, so the learnable bias is
    the global answer prior while the context is the pair-narrowing itself;
    the test split flips the prior's mode.  Labels follow the split prior
    exactly (spurious_strength 1.0); the end-to-end experiments override
    that knob explicitly.
    """
    spec = SyntheticTaskSpec(
        num_answers=10,
        num_qtypes=3,
        context_map=((0, 1), (0, 1), (0, 1)),
        train_prior=((0.76, 0.24), (0.76, 0.24), (0.76, 0.24)),
        test_prior=((0.16, 0.84), (0.16, 0.84), (0.16, 0.84)),
        visual_snr=1.0,
        spurious_strength=1.0,
        train_size=20_000,
        val_size=4_000,
        test_size=4_000,
        seed=seed,
    )
    return replace(spec, **overrides) if overrides else spec


def _draw_sample(spec: SyntheticTaskSpec, split_index: int, i: int) -> Sample:
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(split_index, i))
    )
    qtype = int(rng.integers(spec.num_qtypes))
    subset = spec.context_map[qtype]
    priors = spec.test_prior if split_index == _SPLIT_INDEX["test"] else spec.train_prior
    if rng.random() < spec.spurious_strength:
        answer = int(rng.choice(subset, p=np.asarray(priors[qtype])))
    else:
        answer = int(rng.choice(subset))
    v = rng.standard_normal(spec.num_answers)
    v[answer] += spec.visual_snr
    q = rng.standard_normal(spec.num_qtypes)
    q[qtype] += 1.0
    return Sample(v=v, q=q, qtype=qtype, answer=answer)


def generate(spec: SyntheticTaskSpec) -> dict[str, list[Sample]]:
    """Deterministic train/val/test splits for a task spec.

    Question types are uniform; labels mix the split's prior with a uniform
    draw over the qtype's subset at rate ``spurious_strength``; val is drawn
    from the train distribution.
    """
    sizes = {"train": spec.train_size, "val": spec.val_size, "test": spec.test_size}
    return {
        name: [_draw_sample(spec, _SPLIT_INDEX[name], i) for i in range(sizes[name])]
        for name in ("train", "val", "test")
    }


def save_split(samples: list[Sample], path: str | Path) -> None:
    """JSON-lines, one sample per line; floats round-trip exactly."""
    with open(path, "w") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {"v": s.v.tolist(), "q": s.q.tolist(),
                     "qtype": s.qtype, "answer": s.answer}
                )
            )
            fh.write("\n")


def load_split(path: str | Path) -> list[Sample]:
    samples: list[Sample] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                samples.append(
                    Sample(
                        v=np.array(d["v"], dtype=np.float64),
                        q=np.array(d["q"], dtype=np.float64),
                        qtype=int(d["qtype"]),
                        answer=int(d["answer"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: malformed sample at line {lineno}: {exc}") from exc
    return samples


def split_to_arrays(
    samples: list[Sample],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack a split into (V, Q, qtypes, answers) arrays."""
    if not samples:
        raise ValueError("split is empty")
    v = np.stack([s.v for s in samples])
    q = np.stack([s.q for s in samples])
    qtypes = np.array([s.qtype for s in samples], dtype=np.int64)
    answers = np.array([s.answer for s in samples], dtype=np.int64)
    return v, q, qtypes, answers


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


def empirical_conditional(
    samples: list[Sample], num_answers: int, num_qtypes: int
) -> np.ndarray:
    """Row-normalized (qtype, answer) label frequencies."""
    counts = np.zeros((num_qtypes, num_answers))
    for s in samples:
        counts[s.qtype, s.answer] += 1.0
    totals = counts.sum(axis=1, keepdims=True)
    totals[totals == 0.0] = 1.0
    return counts / totals


def empirical_answer_prior(
    samples: list[Sample], num_answers: int, smoothing: float = 0.5
) -> np.ndarray:
    """Marginal answer frequencies with add-k smoothing (strictly positive)."""
    counts = np.full(num_answers, smoothing)
    for s in samples:
        counts[s.answer] += 1.0
    return counts / counts.sum()


def effective_conditional(spec: SyntheticTaskSpec, split: str) -> np.ndarray:
    """Analytic (qtype, answer) label distribution the generator samples from."""
    priors = spec.test_prior if split == "test" else spec.train_prior
    out = np.zeros((spec.num_qtypes, spec.num_answers))
    for t, subset in enumerate(spec.context_map):
        uniform = 1.0 / len(subset)
        for j, a in enumerate(subset):
            out[t, a] = (
                spec.spurious_strength * priors[t][j]
                + (1.0 - spec.spurious_strength) * uniform
            )
    return out


def prior_ceiling(spec: SyntheticTaskSpec, split: str = "test") -> float:
    """Bayes-optimal accuracy with no usable visual signal.

    With ``visual_snr == 0`` the best any classifier can do is pick each
    qtype's modal label, so accuracy equals the mean max label mass.
    """
    cond = effective_conditional(spec, split)
    return float(cond.max(axis=1).mean())


@dataclass
class PriorShiftReport:
    """Per-qtype train/test label-distribution divergence plus histograms."""

    per_qtype_tv: np.ndarray
    train_hist: np.ndarray
    test_hist: np.ndarray

    def rows(self) -> list[dict]:
        out = []
        for t in range(self.train_hist.shape[0]):
            for a in range(self.train_hist.shape[1]):
                out.append(
                    {"qtype": t, "answer": a,
                     "train_count": int(self.train_hist[t, a]),
                     "test_count": int(self.test_hist[t, a]),
                     "tv": float(self.per_qtype_tv[t])}
                )
        return out


def prior_shift_report(
    train: list[Sample], test: list[Sample], num_answers: int, num_qtypes: int
) -> PriorShiftReport:
    """Empirical per-qtype TV distance between train and test label priors."""
    if not train or not test:
        raise ValueError("prior_shift_report needs non-empty splits")
    train_counts = np.zeros((num_qtypes, num_answers))
    test_counts = np.zeros((num_qtypes, num_answers))
    for s in train:
        train_counts[s.qtype, s.answer] += 1.0
    for s in test:
        test_counts[s.qtype, s.answer] += 1.0
    p = empirical_conditional(train, num_answers, num_qtypes)
    q = empirical_conditional(test, num_answers, num_qtypes)
    tv = 0.5 * np.abs(p - q).sum(axis=1)
    return PriorShiftReport(per_qtype_tv=tv, train_hist=train_counts, test_hist=test_counts)
