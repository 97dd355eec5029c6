"""Stage 1: score last-layer hidden states, keep the best K, splice them in.

A window ``[S, E]`` (1-based, inclusive) of the prompt is chosen from the
relative start ``s`` and length ``p``.  Each window position gets the cosine
similarity between ``Key(h_i)`` and ``Query(h_L)``; the K best positions keep
their order, go through ``Value`` into embedding space and replace the whole
window in the prompt.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .numerics import Tensor
from .ssm import MambaLM, forward_sequence

PLACEMENTS = ("standard", "middle", "special-append")
STRATEGIES = ("topk", "random", "fixed_interval")

# absorbs binary rounding in products such as 100 * 0.29
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class CompressionSpec:
    s: float = 0.0
    p: float = 0.18
    rho: float = 0.009
    placement: str = "standard"
    eps: float = 1e-8
    strategy: str = "topk"
    seed: int = 0

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"compression.placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"compression.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 <= self.s <= 1.0:
            raise ConfigError(f"compression.s must lie in [0, 1], got {self.s}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"compression.p must lie in [0, 1], got {self.p}")
        if self.placement != "special-append" and self.s + self.p > 1.0 + 1e-12:
            raise ConfigError(f"compression.s + compression.p must not exceed 1, got {self.s + self.p}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"compression.rho must lie in (0, 1], got {self.rho}")
        if not self.eps > 0:
            raise ConfigError(f"compression.eps must be positive, got {self.eps}")
        if self.placement == "middle" and self.s <= 0:
            raise ConfigError("compression.placement 'middle' needs s > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CompressionSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown compression keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class CompressionWindow:
    start: int  # S, 1-based
    end: int  # E, 1-based inclusive
    k: int

    @property
    def length(self) -> int:
        return max(0, self.end - self.start + 1)

    @property
    def empty(self) -> bool:
        return self.length == 0


def compute_window(L: int, spec: CompressionSpec) -> CompressionWindow:
    """``S = floor(L s) + 1``, ``E = floor(L (s + p))``, ``K = max(1, floor(L' rho))``."""
    if L < 1:
        raise ContractError(f"prompt length must be >= 1, got {L}")
    s, p = (0.0, 1.0) if spec.placement == "special-append" else (spec.s, spec.p)
    start = math.floor(L * s + _FLOOR_SLACK) + 1
    end = min(L, math.floor(L * (s + p) + _FLOOR_SLACK))
    if end < start:
        return CompressionWindow(start, start - 1, 0)
    k = max(1, math.floor((end - start + 1) * spec.rho + _FLOOR_SLACK))
    return CompressionWindow(start, end, k)


@dataclass
class ScorerParams:
    query_w: Tensor
    query_b: Tensor
    key_w: Tensor
    key_b: Tensor
    value_w: Tensor
    value_b: Tensor

    @classmethod
    def init(cls, hidden_size: int, seed: int = 0) -> "ScorerParams":
        rng = np.random.default_rng(seed)
        std = 1.0 / math.sqrt(hidden_size)

        def w():
            return Tensor(rng.normal(0.0, std, (hidden_size, hidden_size)), requires_grad=True)

        def b():
            return Tensor(np.zeros(hidden_size), requires_grad=True)

        return cls(w(), b(), w(), b(), w(), b())

    @classmethod
    def identity(cls, hidden_size: int) -> "ScorerParams":
        eye, zero = np.eye(hidden_size), np.zeros(hidden_size)
        return cls(*(Tensor(a.copy(), requires_grad=True) for a in (eye, zero, eye, zero, eye, zero)))

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "scorer.query.weight": self.query_w, "scorer.query.bias": self.query_b,
            "scorer.key.weight": self.key_w, "scorer.key.bias": self.key_b,
            "scorer.value.weight": self.value_w, "scorer.value.bias": self.value_b,
        }

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.parameters())

    def query(self, h):
        return nx.add(nx.matmul(h, self.query_w), self.query_b)

    def key(self, h):
        return nx.add(nx.matmul(h, self.key_w), self.key_b)

    def value(self, h):
        return nx.add(nx.matmul(h, self.value_w), self.value_b)


@dataclass
class CompressedPrompt:
    """Stage-2 input and the bookkeeping needed to adapt and train it.

    ``embeddings`` is ``[batch, L - L' + K, H]`` (``[batch, L + K, H]`` for
    special-append).  ``importance`` holds the raw cosine scores of the
    spliced vectors, ``[batch, K]``, which occupy positions
    ``splice_start .. splice_start + K - 1``.  ``selected`` holds the chosen
    prompt positions (0-based, increasing).
    """

    embeddings: Tensor
    importance: Tensor | None
    selected: np.ndarray
    window: CompressionWindow
    splice_start: int
    scores: Tensor | None = None
    hidden: Tensor | None = None

    @property
    def length(self) -> int:
        return self.embeddings.shape[1]

    def importance_by_position(self, row: int = 0) -> list[float | None]:
        """Per-position optional score for one batch row."""
        out: list[float | None] = [None] * self.length
        if self.importance is not None:
            for j, value in enumerate(self.importance.data[row]):
                out[self.splice_start + j] = float(value)
        return out


def score(scorer: ScorerParams, h_last, window_hiddens, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of ``Key(h_i)`` to ``Query(h_last)`` for each window row.

    ``h_last`` is ``[..., H]`` and ``window_hiddens`` ``[..., L', H]``.
    """
    q = scorer.query(h_last)
    k = scorer.key(window_hiddens)
    return nx.cosine_similarity(k, nx.reshape(q, q.shape[:-1] + (1, q.shape[-1])), eps)


def select_top_k(scores, K: int) -> np.ndarray:
    """Indices of the K largest scores, lower index first on ties, in increasing order."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= K <= scores.shape[-1]:
        raise ContractError(f"K must be in [1, {scores.shape[-1]}], got {K}")
    order = np.argsort(-scores, kind="stable")[:K]
    return np.sort(order)


def select_strategy(kind: str, scores, K: int, rng_seed=None) -> np.ndarray:
    """Window-relative indices chosen by ``kind``.

    ``rng_seed`` may be an int or a :class:`numpy.random.Generator` (used by
    the random strategy only).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[-1]
    if not 1 <= K <= n:
        raise ContractError(f"K must be in [1, {n}], got {K}")
    if kind == "topk":
        return select_top_k(scores, K)
    if kind == "random":
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        return np.sort(rng.choice(n, size=K, replace=False))
    if kind == "fixed_interval":
        step = n // K
        return np.arange(K) * step
    raise ContractError(f"unknown selection strategy {kind!r}")


def compress(model: MambaLM, scorer: ScorerParams, token_embeddings, spec: CompressionSpec,
             rng: np.random.Generator | None = None) -> CompressedPrompt:
    """Stage-1 pass plus splice.

    Accepts ``[L, H]`` or ``[batch, L, H]`` embeddings and always returns
    batched tensors.  Runs under whatever tape is active, so gradients reach
    the model and scorer through the selected hidden states and the scores.
    """
    emb = token_embeddings if isinstance(token_embeddings, Tensor) else Tensor(token_embeddings)
    if emb.ndim == 2:
        emb = nx.reshape(emb, (1,) + emb.shape)
    nb, L, _ = emb.shape
    window = compute_window(L, spec)
    if window.empty:
        return CompressedPrompt(emb, None, np.zeros((nb, 0), dtype=np.int64), window, 0)
    if rng is None:
        rng = np.random.default_rng(spec.seed)

    hidden, _ = forward_sequence(model, emb)
    h_last = nx.slice_axis(hidden, L - 1, L, axis=1)
    h_last = nx.reshape(h_last, (nb, h_last.shape[-1]))
    window_h = nx.slice_axis(hidden, window.start - 1, window.end, axis=1)
    scores = score(scorer, h_last, window_h, spec.eps)

    rel = np.stack([select_strategy(spec.strategy, scores.data[b], window.k, rng) for b in range(nb)])
    values = scorer.value(nx.gather(window_h, rel))
    cos_prime = nx.gather(scores, rel)
    selected = rel + (window.start - 1)

    if spec.placement == "special-append":
        spliced = nx.concat([emb, values], axis=1)
        start = L
    else:
        prefix = nx.slice_axis(emb, 0, window.start - 1, axis=1)
        suffix = nx.slice_axis(emb, window.end, L, axis=1)
        spliced = nx.concat([prefix, values, suffix], axis=1)
        start = window.start - 1
    return CompressedPrompt(spliced, cos_prime, selected, window, start, scores, hidden)
