"""scikit-learn style front end.

``ReMambaLM`` is a sequence-to-sequence estimator: ``X`` is a list of prompt
token lists and ``y`` the matching answer token lists.  ``fit`` trains the
model and scorer end to end, ``predict`` decodes greedily and ``score`` is
exact-match accuracy, so the estimator drops into ``GridSearchCV`` and
friends.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from . import ssm, training
from ._validation import check_paired, check_token_sequences, group_by_length
from .adaptation import AdaptationMode, stage2_scores
from .compression import CompressionSpec, ScorerParams, compress, compute_window

VARIANTS = {
    "mamba": {"p": 0.0, "p_range": (0.0, 0.0), "adaptation": "none", "strategy": "topk"},
    "remamba": {"adaptation": "selective_delta", "strategy": "topk"},
    "random_select": {"adaptation": "none", "strategy": "random"},
    "fix_select": {"adaptation": "none", "strategy": "fixed_interval"},
    "multiplicative_select": {"adaptation": "multiplicative", "strategy": "topk"},
}


class ReMambaLM(BaseEstimator):
    """Selective SSM language model with two-stage prompt compression.

    Parameters mirror the run-config sections: model size, compression window
    (``s``, ``p``, ``rho``, ``placement``, ``strategy``), adaptation mode and
    the training schedule.  ``p_range``/``rho_range``/``s_range`` are the
    intervals sampled per training batch; ``s``/``p``/``rho`` are used at
    prediction time.
    """

    def __init__(self, num_layers=2, hidden_size=64, intermediate_size=128, state_size=16, vocab_size=64,
                 tie_embeddings=False, s=0.0, p=0.18, rho=0.009, placement="standard", strategy="topk",
                 eps=1e-8, selection_seed=0, adaptation="selective_delta", exact_delta_scale=False,
                 learning_rate=1e-2, epochs=1, batch_size=32, lr_schedule="cosine", warmup_steps=20,
                 weight_decay=0.01, max_grad_norm=1.0, grad_scale_scores=True, p_range=(0.1, 0.3),
                 rho_range=(0.05, 0.2), s_range=(0.0, 0.0), seed=0, predict_batch_size=32):
        self.num_layers = num_layers
        self.hidden_size = hidden_size
        self.intermediate_size = intermediate_size
        self.state_size = state_size
        self.vocab_size = vocab_size
        self.tie_embeddings = tie_embeddings
        self.s = s
        self.p = p
        self.rho = rho
        self.placement = placement
        self.strategy = strategy
        self.eps = eps
        self.selection_seed = selection_seed
        self.adaptation = adaptation
        self.exact_delta_scale = exact_delta_scale
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_schedule = lr_schedule
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.grad_scale_scores = grad_scale_scores
        self.p_range = p_range
        self.rho_range = rho_range
        self.s_range = s_range
        self.seed = seed
        self.predict_batch_size = predict_batch_size

    @classmethod
    def variant(cls, name: str, **params) -> "ReMambaLM":
        """Estimator preset for one of the ablation pipelines in ``VARIANTS``."""
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        return cls(**{**VARIANTS[name], **params})

    # -- config views -------------------------------------------------------

    def model_config(self) -> ssm.ModelConfig:
        return ssm.ModelConfig(self.num_layers, self.hidden_size, self.intermediate_size, self.state_size,
                               self.vocab_size, self.tie_embeddings)

    def compression_spec(self) -> CompressionSpec:
        return CompressionSpec(self.s, self.p, self.rho, self.placement, self.eps, self.strategy,
                               self.selection_seed)

    def adaptation_mode(self) -> AdaptationMode:
        return AdaptationMode(self.adaptation, self.exact_delta_scale)

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
            lr_schedule=self.lr_schedule, warmup_steps=self.warmup_steps, weight_decay=self.weight_decay,
            max_grad_norm=self.max_grad_norm, grad_scale_scores=self.grad_scale_scores,
            p_range=tuple(self.p_range), rho_range=tuple(self.rho_range), s_range=tuple(self.s_range),
            seed=self.seed)

    # -- estimator API ------------------------------------------------------

    def init_params(self) -> "ReMambaLM":
        """Fresh random weights without training (``fit`` calls this first)."""
        self.model_ = ssm.MambaLM.init(self.model_config(), self.seed)
        self.scorer_ = ScorerParams.init(self.hidden_size, self.seed + 1)
        self.history_ = []
        return self

    def fit(self, X, y, on_step=None) -> "ReMambaLM":
        prompts = check_token_sequences(X, self.vocab_size, "X")
        targets = check_token_sequences(y, self.vocab_size, "y")
        check_paired(prompts, targets)
        config, spec, mode = self.train_config(), self.compression_spec(), self.adaptation_mode()
        self.init_params()
        self.history_ = training.train(self.model_, self.scorer_, prompts, targets, config, spec, mode, on_step)
        return self

    def generate(self, prompts: np.ndarray, max_new_tokens: int, spec: CompressionSpec | None = None
                 ) -> np.ndarray:
        """Greedy continuation of an equal-length ``[batch, L]`` prompt array."""
        check_is_fitted(self, "model_")
        spec = self.compression_spec() if spec is None else spec
        prompts = np.asarray(prompts, dtype=np.int64)
        with nx.no_tape():
            emb = self.model_.embed(prompts)
            if compute_window(prompts.shape[1], spec).empty:
                return ssm.decode(self.model_, emb, max_new_tokens)
            rng = np.random.default_rng(spec.seed)
            compressed = compress(self.model_, self.scorer_, emb, spec, rng)
            alphas, gates = stage2_scores(compressed, self.adaptation_mode())
            return ssm.decode(self.model_, compressed.embeddings, max_new_tokens, alphas, gates,
                              self.exact_delta_scale)

    def predict(self, X, max_new_tokens: int = 1) -> list[list[int]]:
        check_is_fitted(self, "model_")
        prompts = check_token_sequences(X, self.vocab_size, "X")
        out: list[list[int] | None] = [None] * len(prompts)
        bs = max(1, int(self.predict_batch_size))
        for _, idx in sorted(group_by_length(prompts).items()):
            for i in range(0, len(idx), bs):
                chunk = idx[i:i + bs]
                tokens = self.generate(np.array([prompts[j] for j in chunk]), max_new_tokens)
                for j, row in zip(chunk, tokens):
                    out[j] = [int(t) for t in row]
        return out

    def score(self, X, y) -> float:
        """Exact-match accuracy of greedy answers."""
        targets = check_token_sequences(y, self.vocab_size, "y")
        check_paired(X, targets)
        hits = 0
        by_len = group_by_length(targets)
        X = list(X)
        for t_len, idx in by_len.items():
            preds = self.predict([X[i] for i in idx], t_len)
            hits += sum(p == targets[i] for p, i in zip(preds, idx))
        return hits / len(targets)

    # -- persistence ---------------------------------------------------------

    def save(self, path, metadata: dict | None = None) -> None:
        check_is_fitted(self, "model_")
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()}
        training.save_checkpoint(self.model_, self.scorer_, path, {"estimator": params, **(metadata or {})})

    @classmethod
    def load(cls, path) -> "ReMambaLM":
        model, scorer, extra = training.load_checkpoint(path)
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in extra.get("estimator", {}).items()}
        est = cls(**params)
        est.model_, est.scorer_, est.history_ = model, scorer, []
        return est
