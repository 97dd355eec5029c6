"""Stage 2: feed the spliced prompt back through the model.

Spliced positions carry ``alpha = relu(cos')``.  In ``selective_delta`` mode
the step size there becomes ``softplus(proj1(h) * alpha + theta)``, so a
low-scoring vector barely writes into the state and the score receives a
gradient.  ``multiplicative`` scales the layer input by ``alpha`` instead, and
``none`` ignores the scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .compression import CompressedPrompt, CompressionSpec, ScorerParams, compress
from .errors import ConfigError, ContractError
from .numerics import Tensor
from .ssm import MambaLM, PositionScores, ScanState, SsmLayerParams, compute_delta, forward_sequence, lm_logits

MODES = ("selective_delta", "multiplicative", "none")


@dataclass(frozen=True)
class AdaptationMode:
    kind: str = "selective_delta"
    exact_delta_scale: bool = False

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"adaptation must be one of {MODES}, got {self.kind!r}")


def _mode(mode) -> AdaptationMode:
    return mode if isinstance(mode, AdaptationMode) else AdaptationMode(mode)


def apply(mode, layer: SsmLayerParams, h_prev, cos_prime=None) -> tuple[Tensor, Tensor]:
    """Step size for one position and the (possibly gated) layer input.

    ``cos_prime`` is given only at spliced positions; passing it with mode
    ``none`` is a wiring error.
    """
    mode = _mode(mode)
    h = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
    if cos_prime is None:
        return compute_delta(layer, h), h
    if mode.kind == "none":
        raise ContractError("importance score supplied while adaptation is 'none'")
    alpha = nx.relu(cos_prime if isinstance(cos_prime, Tensor) else Tensor(cos_prime))
    if mode.kind == "multiplicative":
        a = nx.reshape(alpha, alpha.shape + (1,)) if alpha.ndim else alpha
        gated = nx.mul(h, a)
        return compute_delta(layer, gated), gated
    return compute_delta(layer, h, alpha, mode.exact_delta_scale), h


def position_alphas(compressed: CompressedPrompt, total_length: int) -> PositionScores | None:
    """``relu(cos')`` laid out over ``total_length`` stage-2 positions."""
    if compressed.importance is None:
        return None
    cos_prime = compressed.importance
    nb, k = cos_prime.shape
    start = compressed.splice_start
    alpha = nx.relu(cos_prime)
    parts = [Tensor(np.zeros((nb, start))), alpha, Tensor(np.zeros((nb, total_length - start - k)))]
    mask = np.zeros((nb, total_length), dtype=bool)
    mask[:, start:start + k] = True
    return PositionScores(nx.concat(parts, axis=1), mask)


@dataclass
class TwoStageOutput:
    logits: Tensor
    compressed: CompressedPrompt
    state: ScanState
    hidden: Tensor


def two_stage_forward(model: MambaLM, scorer: ScorerParams, token_embeddings, spec: CompressionSpec,
                      mode="selective_delta", rng: np.random.Generator | None = None,
                      suffix: Tensor | None = None, n_last: int = 1) -> TwoStageOutput:
    """Compress, then run the model over the spliced prompt.

    ``suffix`` (``[batch, T, H]``) is appended after the spliced prompt and is
    never compressed; training uses it for teacher-forced answer tokens.
    ``logits`` covers the last ``n_last`` stage-2 positions.
    """
    mode = _mode(mode)
    compressed = compress(model, scorer, token_embeddings, spec, rng)
    seq = compressed.embeddings
    if suffix is not None:
        seq = nx.concat([seq, suffix], axis=1)
    alphas = position_alphas(compressed, seq.shape[1])
    if alphas is None:
        hidden, state = forward_sequence(model, seq)
    elif mode.kind == "selective_delta":
        hidden, state = forward_sequence(model, seq, alphas=alphas, exact_scale=mode.exact_delta_scale)
    elif mode.kind == "multiplicative":
        hidden, state = forward_sequence(model, seq, gates=alphas)
    else:
        hidden, state = forward_sequence(model, seq)
    L2 = hidden.shape[1]
    if not 1 <= n_last <= L2:
        raise ContractError(f"n_last must be in [1, {L2}], got {n_last}")
    logits = lm_logits(model, nx.slice_axis(hidden, L2 - n_last, L2, axis=1))
    return TwoStageOutput(logits, compressed, state, hidden)


def stage2_scores(compressed: CompressedPrompt, mode) -> tuple[PositionScores | None, PositionScores | None]:
    """(alphas, gates) to pass to decoding for a compressed prompt."""
    mode = _mode(mode)
    alphas = position_alphas(compressed, compressed.length)
    if alphas is None or mode.kind == "none":
        return None, None
    if mode.kind == "multiplicative":
        return None, alphas
    return alphas, None
