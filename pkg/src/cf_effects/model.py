"""Three-branch ensemble: question-only, vision-only and joint classifiers.

The ensemble wires three small MLPs (``f_q``, ``f_v``, ``f_vq``) to the
fusion algebra in :mod:`cf_effects.effects`.  The joint branch consumes the
concatenation of visual and question features.  For Learned-Mixin fusion a
single linear head maps the joint branch's penultimate activation through a
softplus to the non-negative per-sample weight ``g``.

By default the branches own separate parameters.  With
``share_question_embedding`` enabled, one shared linear+ReLU encoder maps
the question features to an embedding consumed by both ``f_q`` and
``f_vq``; gradients from both paths accumulate into the shared weights.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .effects import (
    CfMode,
    CounterfactualConfig,
    Fusion,
    GraphMode,
    InferenceMode,
    fuse,
    inference_score,
    select_answer,
    sigmoid,
    star_value,
)
from .nn import BIAS_INIT, MlpSpec, ParamStore, init_mlp_params, mlp_backward, mlp_forward

__all__ = [
    "ModelConfig",
    "BranchOutputs",
    "EnsembleModel",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and assumption choices for one ensemble."""

    num_answers: int
    num_qtypes: int
    strategy: Fusion = Fusion.SUM
    mode: GraphMode = GraphMode.FULL
    cf_mode: CfMode = CfMode.UNIFORM
    hidden_size: int = 32
    seed: int = 2
    share_question_embedding: bool = False
    embed_size: int = 16

    def __post_init__(self) -> None:
        if self.num_answers < 2:
            raise ValueError("num_answers must be at least 2")
        if self.hidden_size < 1 or self.embed_size < 1:
            raise ValueError("layer sizes must be positive")
        if self.strategy in (Fusion.RUBI, Fusion.LM) and self.mode is not GraphMode.SIMPLIFIED:
            raise ValueError(f"{self.strategy.value} fusion requires SIMPLIFIED mode")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["mode"] = self.mode.value
        d["cf_mode"] = self.cf_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["strategy"] = Fusion(d["strategy"])
        d["mode"] = GraphMode(d["mode"])
        d["cf_mode"] = CfMode(d["cf_mode"])
        return cls(**d)


@dataclass
class BranchOutputs:
    """Factual logits per branch for a batch; ``g`` only under LM fusion."""

    z_q: np.ndarray
    z_v: np.ndarray | None
    z_k: np.ndarray
    g: np.ndarray | None = None


class EnsembleModel:
    """Ensemble of branch MLPs plus the counterfactual configuration."""

    def __init__(self, config: ModelConfig, train_prior: np.ndarray | None = None):
        self.config = config
        A, T = config.num_answers, config.num_qtypes
        h = config.hidden_size
        q_in = config.embed_size if config.share_question_embedding else T

        self.specs: dict[str, MlpSpec] = {
            "f_q": MlpSpec((q_in, h, h, A)),
            "f_vq": MlpSpec((A + q_in, h, h, A)),
        }
        if config.mode is GraphMode.FULL:
            self.specs["f_v"] = MlpSpec((A, h, h, A))

        # Fixed spawn keys per component keep branch parameters identical
        # across graph modes that share the same seed.
        ss = np.random.SeedSequence(config.seed)
        children = ss.spawn(5)
        self.store = ParamStore()
        for idx, name in enumerate(("f_q", "f_v", "f_vq")):
            if name not in self.specs:
                continue
            rng = np.random.default_rng(children[idx])
            for local, value in init_mlp_params(self.specs[name], rng).items():
                self.store.add(f"{name}/{local}", value)
        if config.strategy is Fusion.LM:
            rng = np.random.default_rng(children[3])
            bound = np.sqrt(6.0 / (h + 1))
            self.store.add("g_head/w", rng.uniform(-bound, bound, size=(h, 1)))
            self.store.add("g_head/b", np.full(1, BIAS_INIT))
        if config.share_question_embedding:
            rng = np.random.default_rng(children[4])
            bound = np.sqrt(6.0 / (T + config.embed_size))
            self.store.add("q_embed/w", rng.uniform(-bound, bound, size=(T, config.embed_size)))
            self.store.add("q_embed/b", np.full(config.embed_size, BIAS_INIT))

        self.cf = self._init_cf(train_prior)

    def _init_cf(self, train_prior: np.ndarray | None) -> CounterfactualConfig:
        mode = self.config.cf_mode
        if mode is CfMode.UNIFORM:
            return CounterfactualConfig.uniform(0.0)
        if mode is CfMode.PRIOR:
            if train_prior is None:
                raise ValueError("PRIOR counterfactual mode needs the training prior")
            return CounterfactualConfig.from_prior(train_prior)
        rng = np.random.default_rng(np.random.SeedSequence(self.config.seed).spawn(6)[5])
        return CounterfactualConfig.random_init(self.config.num_answers, rng)

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------

    def _encode_q(self, q: np.ndarray, cache: dict | None) -> np.ndarray:
        if not self.config.share_question_embedding:
            return q
        pre = q @ self.store.params["q_embed/w"] + self.store.params["q_embed/b"]
        embed = np.maximum(pre, 0.0)
        if cache is not None:
            cache["q_raw"], cache["q_embed_pre"] = q, pre
        return embed

    def forward(
        self, v: np.ndarray, q: np.ndarray, with_cache: bool = False
    ) -> tuple[BranchOutputs, dict | None]:
        """Factual branch logits for a batch of feature vectors."""
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if v.shape[1] != self.config.num_answers:
            raise ValueError(
                f"v has {v.shape[1]} features, expected {self.config.num_answers}"
            )
        if q.shape[1] != self.config.num_qtypes:
            raise ValueError(
                f"q has {q.shape[1]} features, expected {self.config.num_qtypes}"
            )
        cache: dict | None = {} if with_cache else None
        q_enc = self._encode_q(q, cache)
        z_q, cache_q = mlp_forward(self.specs["f_q"], self.store.subset("f_q"), q_enc)
        z_k, cache_k = mlp_forward(
            self.specs["f_vq"], self.store.subset("f_vq"), np.hstack([v, q_enc])
        )
        z_v = None
        if self.config.mode is GraphMode.FULL:
            z_v, cache_v = mlp_forward(self.specs["f_v"], self.store.subset("f_v"), v)
            if cache is not None:
                cache["f_v"] = cache_v
        g = None
        if self.config.strategy is Fusion.LM:
            hidden = cache_k["inputs"][-1]
            pre_g = hidden @ self.store.params["g_head/w"] + self.store.params["g_head/b"]
            g = np.logaddexp(0.0, pre_g[:, 0])
            if cache is not None:
                cache["g_pre"], cache["g_hidden"] = pre_g[:, 0], hidden
        if cache is not None:
            cache["f_q"], cache["f_vq"] = cache_q, cache_k
        return BranchOutputs(z_q=z_q, z_v=z_v, z_k=z_k, g=g), cache

    def backward(
        self,
        cache: dict,
        d_zq: np.ndarray,
        d_zv: np.ndarray | None,
        d_zk: np.ndarray,
        d_g: np.ndarray | None = None,
    ) -> None:
        """Accumulate parameter gradients from branch-logit gradients."""
        d_hidden = None
        if d_g is not None:
            d_pre = d_g * sigmoid(cache["g_pre"])
            w = self.store.params["g_head/w"]
            self.store.accumulate(
                "g_head",
                {"w": cache["g_hidden"].T @ d_pre[:, None], "b": np.array([d_pre.sum()])},
            )
            d_hidden = d_pre[:, None] @ w.T
        grads_k, d_in_k = mlp_backward(
            self.specs["f_vq"], self.store.subset("f_vq"), cache["f_vq"], d_zk,
            d_last_hidden=d_hidden,
        )
        self.store.accumulate("f_vq", grads_k)
        grads_q, d_in_q = mlp_backward(
            self.specs["f_q"], self.store.subset("f_q"), cache["f_q"], d_zq
        )
        self.store.accumulate("f_q", grads_q)
        if d_zv is not None:
            grads_v, _ = mlp_backward(
                self.specs["f_v"], self.store.subset("f_v"), cache["f_v"], d_zv
            )
            self.store.accumulate("f_v", grads_v)
        if self.config.share_question_embedding:
            d_embed = d_in_q + d_in_k[:, self.config.num_answers:]
            d_pre = d_embed * (cache["q_embed_pre"] > 0.0)
            self.store.accumulate(
                "q_embed", {"w": cache["q_raw"].T @ d_pre, "b": d_pre.sum(axis=0)}
            )

    # ------------------------------------------------------------------
    # scoring
    # ------------------------------------------------------------------

    def factual_score(self, outputs: BranchOutputs) -> np.ndarray:
        """Fused score over all factual branch logits."""
        return fuse(
            self.config.strategy, self.config.mode,
            outputs.z_q, outputs.z_v, outputs.z_k, g=outputs.g,
        )

    def counterfactual_score(self, outputs: BranchOutputs) -> np.ndarray:
        """Fused score with factual ``z_q`` and starred remaining slots."""
        s = np.broadcast_to(
            star_value(self.cf, self.config.num_answers), outputs.z_q.shape
        )
        v_star = s if self.config.mode is GraphMode.FULL else None
        return fuse(
            self.config.strategy, self.config.mode, outputs.z_q, v_star, s,
            g=outputs.g,
        )

    def scores(self, v: np.ndarray, q: np.ndarray, mode: InferenceMode) -> np.ndarray:
        """Batched inference scores under the model's strategy and cf config."""
        outputs, _ = self.forward(v, q)
        return inference_score(
            mode, self.config.strategy, self.config.mode,
            outputs.z_q, outputs.z_v, outputs.z_k, self.cf, g=outputs.g,
        )

    def predict(
        self, v: np.ndarray, q: np.ndarray, mode: InferenceMode = InferenceMode.TIE
    ) -> tuple[int, np.ndarray]:
        """Answer index (ties to lowest index) and score vector for one sample."""
        scores = self.scores(np.atleast_2d(v), np.atleast_2d(q), mode)[0]
        return select_answer(scores), scores


def save_model(model: EnsembleModel, path: str | Path) -> None:
    """JSON checkpoint: config header + cf values + parameter map."""
    payload = {
        "header": model.config.to_dict(),
        "cf": {"mode": model.cf.mode.value, "values": model.cf.values.tolist()},
        "params": {
            name: {"shape": list(p.shape), "data": p.reshape(-1).tolist()}
            for name, p in model.store.params.items()
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path) -> EnsembleModel:
    payload = json.loads(Path(path).read_text())
    config = ModelConfig.from_dict(payload["header"])
    cf = CounterfactualConfig(
        CfMode(payload["cf"]["mode"]),
        np.array(payload["cf"]["values"], dtype=np.float64),
    )
    if config.cf_mode is CfMode.PRIOR:
        model = EnsembleModel(replace(config, cf_mode=CfMode.UNIFORM))
        model.config = config
    else:
        model = EnsembleModel(config)
    model.cf = cf
    for name, entry in payload["params"].items():
        if name not in model.store.params:
            raise ValueError(f"checkpoint parameter {name!r} does not fit the config")
        model.store.params[name] = np.array(
            entry["data"], dtype=np.float64
        ).reshape(entry["shape"])
        model.store.grads[name] = np.zeros_like(model.store.params[name])
    return model
