"""Selective state-space language model.

One layer maps its input ``h`` (``[..., L, H]``) to ``h + out_proj(y)`` where,
per position and with ``u = rmsnorm(h)``::

    delta = softplus(u @ W1 + b1)          # [H']
    B     = u @ W2                          # [N]
    x     = u @ W3                          # [H']
    C     = u @ WC                          # [N]
    A_bar = exp(delta[:, None] * A)         # zero-order hold, [H', N]
    B_bar = delta[:, None] * B[None, :]     # Euler, [H', N]
    S     = A_bar * S + B_bar * x[:, None]
    y     = (S * C[None, :]).sum(-1) @ Wout

with ``A = -exp(a_log)`` so every ``A_bar`` entry is in (0, 1).  Positions
carrying an importance weight ``alpha`` replace the first line with
``softplus((u @ W1 + b1) * alpha + theta)``.

Two execution paths share these equations: :func:`selective_scan` runs a whole
sequence through a compiled kernel (with a hand-written backward), and
:func:`scan_step` advances one position with tensor ops for recurrent decode.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Tensor

CHECK_CONTRACTION = os.environ.get("REMAMBA_DEBUG", "") not in ("", "0")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_size: int = 64
    intermediate_size: int = 128
    state_size: int = 16
    vocab_size: int = 64
    tie_embeddings: bool = False

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "intermediate_size", "state_size", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")


@dataclass
class SsmLayerParams:
    proj1_w: Tensor
    proj1_b: Tensor
    proj2_w: Tensor
    proj3_w: Tensor
    projC_w: Tensor
    out_proj_w: Tensor
    a_log: Tensor
    theta: Tensor

    _NAMES = {
        "proj1.weight": "proj1_w", "proj1.bias": "proj1_b", "proj2.weight": "proj2_w",
        "proj3.weight": "proj3_w", "projC.weight": "projC_w", "out_proj.weight": "out_proj_w",
        "a_log": "a_log", "theta": "theta",
    }

    def named(self) -> dict[str, Tensor]:
        return {k: getattr(self, v) for k, v in self._NAMES.items()}

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log.data)


@dataclass
class ScanState:
    """Per-layer recurrent state ``S`` plus the number of positions consumed."""

    states: list[np.ndarray]
    position: int = 0

    def to_bytes(self) -> bytes:
        # fixed-width counter so the length does not depend on how far we got
        parts = [struct.pack("<qq", self.position, len(self.states))]
        for s in self.states:
            parts.append(struct.pack("<q", s.ndim))
            parts.append(struct.pack(f"<{s.ndim}q", *s.shape))
            parts.append(np.ascontiguousarray(s, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ScanState":
        position, count = struct.unpack_from("<qq", blob)
        offset = 16
        states = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<q", blob, offset)
            offset += 8
            shape = struct.unpack_from(f"<{ndim}q", blob, offset)
            offset += 8 * ndim
            size = 8 * int(np.prod(shape))
            states.append(np.frombuffer(blob, "<f8", size // 8, offset).reshape(shape).copy())
            offset += size
        return cls(states, position)

    @property
    def nbytes(self) -> int:
        return len(self.to_bytes())


@dataclass
class PositionScores:
    """Per-position importance weights; ``mask`` marks where a weight exists."""

    values: Tensor
    mask: np.ndarray

    @classmethod
    def from_optional(cls, alphas, length: int) -> "PositionScores":
        """Build from a ``[L]`` or ``[B, L]`` sequence with ``None``/NaN for absent."""
        raw = np.array([[np.nan if a is None else a for a in row] for row in _as_rows(alphas)],
                       dtype=np.float64)
        if raw.shape[-1] != length:
            raise DimensionError(f"alphas has length {raw.shape[-1]}, sequence has {length}")
        mask = ~np.isnan(raw)
        if np.any(raw[mask] < 0):
            raise ContractError("alpha values must be non-negative")
        return cls(Tensor(np.where(mask, raw, 0.0)), mask)


def _as_rows(alphas):
    alphas = list(alphas)
    if alphas and isinstance(alphas[0], (list, tuple, np.ndarray)):
        return alphas
    return [alphas]


class MambaLM:
    """Embedding, a stack of selective SSM layers, final norm and LM head."""

    def __init__(self, config: ModelConfig, embedding: Tensor, layers: list[SsmLayerParams],
                 lm_head_w: Tensor | None, lm_head_b: Tensor):
        self.config = config
        self.embedding = embedding
        self.layers = layers
        self.lm_head_w = lm_head_w
        self.lm_head_b = lm_head_b

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "MambaLM":
        rng = np.random.default_rng(seed)
        H, D, N, V = config.hidden_size, config.intermediate_size, config.state_size, config.vocab_size

        def dense(fan_in, fan_out, std=None):
            std = 1.0 / math.sqrt(fan_in) if std is None else std
            return Tensor(rng.normal(0.0, std, (fan_in, fan_out)), requires_grad=True)

        layers = []
        for _ in range(config.num_layers):
            # dt initialized log-uniform in [1e-3, 1e-1], stored through the softplus inverse
            dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), D))
            dt_bias = dt + np.log(-np.expm1(-dt))
            a_log = np.tile(np.log(np.geomspace(1.0, N, N)), (D, 1))
            layers.append(SsmLayerParams(
                proj1_w=dense(H, D, std=0.1 / math.sqrt(H)),
                proj1_b=Tensor(dt_bias, requires_grad=True),
                proj2_w=dense(H, N),
                proj3_w=dense(H, D),
                projC_w=dense(H, N),
                out_proj_w=dense(D, H, std=1.0 / math.sqrt(D * 2 * config.num_layers)),
                a_log=Tensor(a_log, requires_grad=True),
                theta=Tensor(np.zeros(D), requires_grad=True),
            ))
        embedding = Tensor(rng.normal(0.0, 1.0, (V, H)), requires_grad=True)
        head = None if config.tie_embeddings else dense(H, V, std=0.02)
        return cls(config, embedding, layers, head, Tensor(np.zeros(V), requires_grad=True))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            for name, t in layer.named().items():
                out[f"layer{i}.{name}"] = t
        if self.lm_head_w is not None:
            out["lm_head.weight"] = self.lm_head_w
        out["lm_head.bias"] = self.lm_head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def embed(self, tokens) -> Tensor:
        return nx.take_rows(self.embedding, np.asarray(tokens, dtype=np.int64))

    def state_nbytes(self, batch: int = 1) -> int:
        return self.initial_state(batch).nbytes

    def initial_state(self, batch: int | None = None) -> ScanState:
        shape = (self.config.intermediate_size, self.config.state_size)
        if batch is not None:
            shape = (batch,) + shape
        return ScanState([np.zeros(shape) for _ in self.layers], 0)


# ---------------------------------------------------------------------------
# single-position maths
# ---------------------------------------------------------------------------

def compute_delta(layer: SsmLayerParams, h_prev, alpha=None, exact_scale: bool = False) -> Tensor:
    """Step size for one or more positions.

    Without ``alpha`` this is ``softplus(proj1(h_prev))``.  With ``alpha`` the
    projection is scaled and offset by the layer's ``theta`` before the
    softplus; ``exact_scale`` instead multiplies the vanilla step by ``alpha``.
    """
    lin = nx.add(nx.matmul(h_prev, layer.proj1_w), layer.proj1_b)
    if alpha is None:
        return nx.softplus(lin)
    a = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    if np.any(a.data < 0):
        raise ContractError("alpha must be non-negative")
    if a.ndim:
        a = nx.reshape(a, a.shape + (1,))
    if exact_scale:
        return nx.mul(nx.softplus(lin), a)
    return nx.softplus(nx.add(nx.mul(lin, a), layer.theta))


def discretize(A, B, delta) -> tuple[Tensor, Tensor]:
    """Zero-order hold for ``A`` and Euler for ``B``.

    ``A`` is ``[H', N]``, ``B`` is ``[..., N]`` and ``delta`` is ``[..., H']``.
    Returns ``A_bar = exp(delta * A)`` and ``B_bar = delta B^T``, both
    ``[..., H', N]``.
    """
    A, B, delta = (t if isinstance(t, Tensor) else Tensor(t) for t in (A, B, delta))
    d = nx.reshape(delta, delta.shape + (1,))
    A_bar = nx.exp(nx.mul(d, A))
    B_bar = nx.outer(delta, B)
    if CHECK_CONTRACTION:
        assert np.all((A_bar.data > 0) & (A_bar.data <= 1)), "A_bar left (0, 1]"
    return A_bar, B_bar


def scan_step(S, layer: SsmLayerParams, u, alpha=None, exact_scale: bool = False):
    """Advance one layer's state by one position.

    ``S`` is ``[..., H', N]`` and ``u`` the normalized layer input
    ``[..., H]``.  Returns ``(S_new, y)`` with ``y = out_proj(S_new . C(u))``.
    """
    S = S if isinstance(S, Tensor) else Tensor(S)
    delta = compute_delta(layer, u, alpha, exact_scale)
    B = nx.matmul(u, layer.proj2_w)
    x = nx.matmul(u, layer.proj3_w)
    C = nx.matmul(u, layer.projC_w)
    A = nx.neg(nx.exp(layer.a_log))
    A_bar, B_bar = discretize(A, B, delta)
    S_new = nx.add(nx.mul(A_bar, S), nx.mul(B_bar, nx.reshape(x, x.shape + (1,))))
    read = nx.sum_axis(nx.mul(S_new, nx.reshape(C, C.shape[:-1] + (1, C.shape[-1]))), -1)
    return S_new, nx.matmul(read, layer.out_proj_w)


# ---------------------------------------------------------------------------
# fused sequence scan
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _scan_forward(delta, A, Bm, x, C, S0, store):
    nb, L, D = delta.shape
    N = A.shape[1]
    y = np.zeros((nb, L, D))
    S = S0.copy()
    if store:
        states = np.empty((nb, L, D, N))
    else:
        states = np.empty((0, 0, 0, 0))
    for b in range(nb):
        for t in range(L):
            for d in range(D):
                dt = delta[b, t, d]
                xd = x[b, t, d]
                acc = 0.0
                for n in range(N):
                    s = math.exp(dt * A[d, n]) * S[b, d, n] + (dt * Bm[b, t, n]) * xd
                    S[b, d, n] = s
                    acc += s * C[b, t, n]
                    if store:
                        states[b, t, d, n] = s
                y[b, t, d] = acc
    return y, S, states


@numba.njit(cache=True)
def _scan_backward(delta, A, Bm, x, C, S0, states, gy):
    nb, L, D = delta.shape
    N = A.shape[1]
    g_delta = np.zeros_like(delta)
    g_A = np.zeros_like(A)
    g_B = np.zeros_like(Bm)
    g_x = np.zeros_like(x)
    g_C = np.zeros_like(C)
    gS = np.zeros((D, N))
    for b in range(nb):
        gS[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            for d in range(D):
                dt = delta[b, t, d]
                xd = x[b, t, d]
                gyd = gy[b, t, d]
                acc_dt = 0.0
                acc_x = 0.0
                for n in range(N):
                    g_C[b, t, n] += gyd * states[b, t, d, n]
                    g = gS[d, n] + gyd * C[b, t, n]
                    s_prev = states[b, t - 1, d, n] if t > 0 else S0[b, d, n]
                    abar = math.exp(dt * A[d, n])
                    g_abar = g * s_prev
                    acc_dt += g_abar * abar * A[d, n] + g * Bm[b, t, n] * xd
                    g_A[d, n] += g_abar * abar * dt
                    g_B[b, t, n] += g * dt * xd
                    acc_x += g * dt * Bm[b, t, n]
                    gS[d, n] = g * abar
                g_delta[b, t, d] = acc_dt
                g_x[b, t, d] = acc_x
    return g_delta, g_A, g_B, g_x, g_C


def selective_scan(delta: Tensor, A: Tensor, B: Tensor, x: Tensor, C: Tensor,
                   S0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Run the recurrence over ``[batch, L, .]`` inputs.

    Returns the read-out ``y`` (``[batch, L, H']``, tracked) and the final
    state (``[batch, H', N]``, untracked).  ``S0`` defaults to zeros.
    """
    nb, L, D = delta.shape
    N = A.shape[1]
    if A.shape != (D, N) or B.shape != (nb, L, N) or x.shape != (nb, L, D) or C.shape != (nb, L, N):
        raise DimensionError(
            f"selective_scan: delta {delta.shape}, A {A.shape}, B {B.shape}, x {x.shape}, C {C.shape}")
    S0 = np.zeros((nb, D, N)) if S0 is None else np.ascontiguousarray(S0, dtype=np.float64)
    inputs = (delta, A, B, x, C)
    tracked = nx._ACTIVE.get() is not None and any(t.requires_grad for t in inputs)
    arrays = [np.ascontiguousarray(t.data) for t in inputs]
    y, S_final, states = _scan_forward(*arrays, S0, tracked)

    def vjp(gy):
        return _scan_backward(*arrays, S0, states, np.ascontiguousarray(gy))

    return nx._make(y, inputs, vjp), S_final


def layer_forward(layer: SsmLayerParams, h: Tensor, alphas: PositionScores | None = None,
                  gates: PositionScores | None = None, exact_scale: bool = False,
                  S0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """One residual layer over a ``[batch, L, H]`` sequence."""
    u = nx.rmsnorm(h)
    if gates is not None:
        g = _position_factor(gates)
        u = nx.mul(u, nx.reshape(g, g.shape + (1,)))
    lin = nx.add(nx.matmul(u, layer.proj1_w), layer.proj1_b)
    if alphas is not None:
        factor = _position_factor(alphas)
        factor = nx.reshape(factor, factor.shape + (1,))
        if exact_scale:
            delta = nx.mul(nx.softplus(lin), factor)
        else:
            offset = nx.mul(Tensor(alphas.mask[..., None].astype(np.float64)), layer.theta)
            delta = nx.softplus(nx.add(nx.mul(lin, factor), offset))
    else:
        delta = nx.softplus(lin)
    B = nx.matmul(u, layer.proj2_w)
    x = nx.matmul(u, layer.proj3_w)
    C = nx.matmul(u, layer.projC_w)
    A = nx.neg(nx.exp(layer.a_log))
    y, S = selective_scan(delta, A, B, x, C, S0)
    return nx.add(h, nx.matmul(y, layer.out_proj_w)), S


def _position_factor(scores: PositionScores) -> Tensor:
    """1 where no score is present, the score where it is."""
    m = scores.mask.astype(np.float64)
    return nx.add(Tensor(1.0 - m), nx.mul(Tensor(m), scores.values))


def forward_sequence(model: MambaLM, embeddings, alphas=None, gates=None, exact_scale: bool = False,
                     state: ScanState | None = None) -> tuple[Tensor, ScanState]:
    """Run every layer over ``embeddings`` (``[L, H]`` or ``[batch, L, H]``).

    ``alphas`` selects the importance-weighted step path at the positions
    where it holds a value; ``gates`` multiplies the layer input instead.  Both
    accept :class:`PositionScores` or a per-position sequence with ``None``
    for absent.  Returns the final-normalized last-layer hidden states (same
    rank as the input) and the state after the last position.
    """
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    squeeze = emb.ndim == 2
    if squeeze:
        emb = nx.reshape(emb, (1,) + emb.shape)
    if emb.ndim != 3 or emb.shape[-1] != model.config.hidden_size:
        raise DimensionError(f"embeddings must be [.., L, {model.config.hidden_size}], got {emb.shape}")
    nb, L, _ = emb.shape
    if L < 1:
        raise ContractError("forward_sequence needs at least one position")
    alphas = _coerce_scores(alphas, nb, L)
    gates = _coerce_scores(gates, nb, L)
    if state is None:
        state = model.initial_state(nb)
    h = emb
    finals = []
    for layer, S0 in zip(model.layers, state.states):
        h, S = layer_forward(layer, h, alphas, gates, exact_scale, S0.reshape(nb, *S0.shape[-2:]))
        finals.append(S)
    hidden = nx.rmsnorm(h)
    if squeeze:
        hidden = nx.reshape(hidden, hidden.shape[1:])
        finals = [s[0] for s in finals]
    return hidden, ScanState(finals, state.position + L)


def _coerce_scores(scores, nb: int, L: int) -> PositionScores | None:
    if scores is None or isinstance(scores, PositionScores):
        if scores is not None and scores.mask.shape[-1] != L:
            raise DimensionError(f"alphas cover {scores.mask.shape[-1]} positions, sequence has {L}")
        if scores is not None and scores.mask.ndim == 1:
            scores = PositionScores(nx.reshape(scores.values, (1, L)), scores.mask[None, :])
        if scores is not None and not scores.mask.any():
            return None
        return scores
    return _coerce_scores(PositionScores.from_optional(scores, L), nb, L)


def lm_logits(model: MambaLM, hidden) -> Tensor:
    """Affine map from hidden states to vocabulary logits."""
    W = model.lm_head_w if model.lm_head_w is not None else nx.transpose(model.embedding)
    return nx.add(nx.matmul(hidden, W), model.lm_head_b)


def step_token(model: MambaLM, state: ScanState, emb: Tensor, alpha=None, gate=None,
               exact_scale: bool = False) -> tuple[Tensor, ScanState]:
    """Consume one embedding ``[..., H]`` through every layer in recurrent mode."""
    h = emb
    new_states = []
    for layer, S in zip(model.layers, state.states):
        u = nx.rmsnorm(h)
        if gate is not None:
            u = nx.mul(u, gate)
        S_new, y = scan_step(S, layer, u, alpha, exact_scale)
        new_states.append(S_new.data)
        h = nx.add(h, y)
    return nx.rmsnorm(h), ScanState(new_states, state.position + 1)


def prefill(model: MambaLM, prompt_embeddings, alphas=None, gates=None, exact_scale: bool = False
            ) -> tuple[np.ndarray, ScanState]:
    """Encode a ``[batch, L, H]`` prompt; returns last-position logits and state."""
    with nx.no_tape():
        hidden, state = forward_sequence(model, prompt_embeddings, alphas, gates, exact_scale)
        L = hidden.shape[1]
        logits = lm_logits(model, nx.slice_axis(hidden, L - 1, L, 1))
    return logits.data[:, 0], state


def greedy_continue(model: MambaLM, state: ScanState, first_token: np.ndarray, count: int) -> np.ndarray:
    """``count`` greedy tokens starting with ``first_token`` (``[batch]``).

    Each token after the first costs one :func:`scan_step` per layer.
    """
    first_token = np.asarray(first_token, dtype=np.int64)
    tokens = np.empty((first_token.shape[0], count), dtype=np.int64)
    if count == 0:
        return tokens
    tokens[:, 0] = first_token
    with nx.no_tape():
        for i in range(1, count):
            h, state = step_token(model, state, model.embed(tokens[:, i - 1]))
            tokens[:, i] = lm_logits(model, h).data.argmax(-1)
    return tokens


def decode(model: MambaLM, prompt_embeddings, max_new_tokens: int, alphas=None, gates=None,
           exact_scale: bool = False) -> np.ndarray:
    """Greedy decoding after encoding ``prompt_embeddings``.

    Returns ``[T]`` token ids for a ``[L, H]`` prompt or ``[batch, T]`` for a
    batched one.
    """
    if max_new_tokens < 0:
        raise ContractError("max_new_tokens must be >= 0")
    emb = prompt_embeddings if isinstance(prompt_embeddings, Tensor) else Tensor(prompt_embeddings)
    squeeze = emb.ndim == 2
    if squeeze:
        emb = Tensor._wrap(emb.data[None])
    if max_new_tokens == 0:
        tokens = np.zeros((emb.shape[0], 0), dtype=np.int64)
    else:
        logits, state = prefill(model, emb, alphas, gates, exact_scale)
        tokens = greedy_continue(model, state, logits.argmax(-1), max_new_tokens)
    return tokens[0] if squeeze else tokens


def state_bytes_after(model: MambaLM, tokens: Sequence[int]) -> int:
    """Serialized recurrent state size after consuming ``tokens``."""
    with nx.no_tape():
        _, state = forward_sequence(model, model.embed(np.asarray(tokens)[None]))
    return state.nbytes
