"""Causal-LM training of the two-stage model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import numerics as nx
from .adaptation import AdaptationMode, position_alphas, two_stage_forward
from .compression import CompressionSpec, ScorerParams
from .errors import CheckpointError, ConfigError, ContractError
from .numerics import Tape, Tensor
from .ssm import MambaLM, ModelConfig, forward_sequence, lm_logits


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 1
    batch_size: int = 32
    optimizer: str = "adamw"
    lr_schedule: str = "cosine"
    warmup_steps: int = 20
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    max_grad_norm: float | None = 1.0
    grad_scale_scores: bool = True
    p_range: tuple[float, float] = (0.1, 0.3)
    rho_range: tuple[float, float] = (0.05, 0.2)
    s_range: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        for name in ("p_range", "rho_range", "s_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"training.{name} must satisfy 0 <= low <= high <= 1, got {(lo, hi)}")
        if self.rho_range[0] <= 0:
            raise ConfigError("training.rho_range must stay above 0")
        if self.optimizer != "adamw":
            raise ConfigError(f"training.optimizer must be 'adamw', got {self.optimizer!r}")
        if self.lr_schedule not in ("linear", "cosine"):
            raise ConfigError(f"training.lr_schedule must be 'linear' or 'cosine', got {self.lr_schedule!r}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ConfigError("training.learning_rate, epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("betas", "p_range", "rho_range", "s_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def learning_rate_at(step: int, total: int, config: TrainConfig) -> float:
    """Schedule value for 0-based ``step`` out of ``total``."""
    base = config.learning_rate
    if step < config.warmup_steps:
        return base * (step + 1) / config.warmup_steps
    span = max(1, total - config.warmup_steps)
    frac = min(1.0, (step - config.warmup_steps) / span)
    if config.lr_schedule == "linear":
        return base * (1.0 - frac)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


class SpecSampler:
    """Draws a compression spec per batch from the configured ranges."""

    def __init__(self, base: CompressionSpec, config: TrainConfig, rng: np.random.Generator):
        self.base = base
        self.config = config
        self.rng = rng

    def __call__(self) -> CompressionSpec:
        s = float(self.rng.uniform(*self.config.s_range))
        p = float(self.rng.uniform(*self.config.p_range))
        rho = float(self.rng.uniform(*self.config.rho_range))
        p = min(p, 1.0 - s)
        placement = self.base.placement
        if placement == "middle" and s <= 0:
            placement = "standard"
        return replace(self.base, s=s, p=p, rho=rho, placement=placement)


def scale_score_gradients(tape: Tape, importance_nodes: Iterable[Tensor], scores=None) -> None:
    """Scale the gradient arriving at each importance node by ``relu(score)``.

    Must run after the forward pass has been recorded and before
    :func:`numerics.backward`.  The scale is a constant taken from ``scores``
    (defaults to each node's own value), so it contributes no gradient itself.
    """
    targets = {id(t): t for t in importance_nodes if t is not None}
    if scores is not None:
        scores = list(scores)
    for n, (key, node_out) in enumerate(targets.items()):
        factor = np.maximum(
            np.asarray(scores[n].data if isinstance(scores[n], Tensor) else scores[n], dtype=np.float64)
            if scores is not None else node_out.data, 0.0)
        for node in tape.nodes:
            if node.out is node_out:
                node.vjp = _scaled(node.vjp, factor)
                break


def _scaled(vjp, factor):
    return lambda g: vjp(g * factor)


@dataclass
class Batch:
    prompts: np.ndarray  # [B, L] int
    targets: np.ndarray  # [B, T] int

    def __post_init__(self):
        self.prompts = np.asarray(self.prompts, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.prompts.ndim != 2 or self.targets.ndim != 2 or len(self.prompts) == 0:
            raise ContractError("a batch needs at least one (prompt, target) pair of equal lengths")
        if len(self.prompts) != len(self.targets) or self.targets.shape[1] == 0:
            raise ContractError("prompts and targets must pair up and targets must be non-empty")


def batch_loss(model: MambaLM, scorer: ScorerParams, batch: Batch, spec: CompressionSpec,
               mode: AdaptationMode, rng: np.random.Generator | None = None):
    """Cross-entropy over the target tokens; returns ``(loss, two-stage output)``."""
    T = batch.targets.shape[1]
    emb = model.embed(batch.prompts)
    suffix = model.embed(batch.targets[:, :-1]) if T > 1 else None
    out = two_stage_forward(model, scorer, emb, spec, mode, rng=rng, suffix=suffix, n_last=T)
    return nx.cross_entropy(out.logits, batch.targets), out


def _clip(params: Sequence[Tensor], max_norm: float | None) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if max_norm is not None and total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / total
    return total


def train_step(model: MambaLM, scorer: ScorerParams, batch: Batch, spec_sampler: Callable[[], CompressionSpec],
               config: TrainConfig, optimizer: AdamW, mode="selective_delta", lr: float | None = None,
               rng: np.random.Generator | None = None) -> tuple[float, CompressionSpec]:
    """One optimizer step.  Returns the batch loss and the sampled CompressionSpec."""
    if not isinstance(batch, Batch):
        batch = Batch(*batch)
    mode = mode if isinstance(mode, AdaptationMode) else AdaptationMode(mode)
    spec = spec_sampler()
    params = model.parameters() + scorer.parameters()
    optimizer.zero_grad()
    with Tape() as tape:
        loss, out = batch_loss(model, scorer, batch, spec, mode, rng)
    if config.grad_scale_scores and out.compressed.importance is not None:
        scale_score_gradients(tape, [out.compressed.importance])
    nx.backward(tape, loss, params)
    _clip(params, config.max_grad_norm)
    optimizer.step(lr)
    return loss.item(), spec


def iter_batches(prompts: Sequence[Sequence[int]], targets: Sequence[Sequence[int]], batch_size: int,
                 rng: np.random.Generator) -> Iterator[Batch]:
    """Shuffled batches of equal-length examples."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i, (p, t) in enumerate(zip(prompts, targets)):
        groups.setdefault((len(p), len(t)), []).append(i)
    chunks = []
    for key in sorted(groups):
        idx = np.array(groups[key])
        rng.shuffle(idx)
        chunks.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    for j in rng.permutation(len(chunks)):
        idx = chunks[j]
        yield Batch([prompts[i] for i in idx], [targets[i] for i in idx])


def count_batches(prompts, targets, batch_size: int) -> int:
    sizes: dict[tuple[int, int], int] = {}
    for p, t in zip(prompts, targets):
        sizes[(len(p), len(t))] = sizes.get((len(p), len(t)), 0) + 1
    return sum(math.ceil(n / batch_size) for n in sizes.values())


def train(model: MambaLM, scorer: ScorerParams, prompts, targets, config: TrainConfig,
          base_spec: CompressionSpec, mode="selective_delta",
          on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Run ``config.epochs`` epochs; returns one metrics record per step."""
    rng = np.random.default_rng(config.seed)
    sampler = SpecSampler(base_spec, config, np.random.default_rng([config.seed, 1]))
    select_rng = np.random.default_rng([config.seed, 2])
    optimizer = AdamW(model.parameters() + scorer.parameters(), config.learning_rate, config.betas,
                      weight_decay=config.weight_decay)
    total = config.epochs * count_batches(prompts, targets, config.batch_size)
    history = []
    step = 0
    for _ in range(config.epochs):
        for batch in iter_batches(prompts, targets, config.batch_size, rng):
            lr = learning_rate_at(step, total, config)
            loss, spec = train_step(model, scorer, batch, sampler, config, optimizer, mode, lr, select_rng)
            record = {"step": step, "loss": loss, "lr": lr, "p_sampled": spec.p, "rho_sampled": spec.rho,
                      "seed": config.seed}
            history.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
    return history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: MambaLM, scorer: ScorerParams | None, path, metadata: dict | None = None) -> None:
    tensors = dict(model.named_parameters())
    if scorer is not None:
        tensors.update(scorer.named_parameters())
    meta = {"model_config": asdict(model.config), "has_scorer": scorer is not None}
    if metadata:
        meta["extra"] = metadata
    nx.save_tensors(path, tensors, meta)


def load_checkpoint(path, model: MambaLM | None = None, scorer: ScorerParams | None = None
                    ) -> tuple[MambaLM, ScorerParams | None, dict]:
    """Restore parameters; builds fresh containers from the stored config when not given."""
    arrays, meta = nx.load_tensors(path)
    if not meta or "model_config" not in meta:
        raise CheckpointError(f"{path}: no model configuration in header")
    if model is None:
        model = MambaLM.init(ModelConfig(**meta["model_config"]))
    if scorer is None and meta.get("has_scorer"):
        scorer = ScorerParams.init(model.config.hidden_size)
    expected = dict(model.named_parameters())
    if scorer is not None:
        expected.update(scorer.named_parameters())
    for name, t in expected.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: tensor '{name}' missing from checkpoint")
        if arrays[name].shape != t.shape:
            raise CheckpointError(
                f"{path}: tensor '{name}' has shape {arrays[name].shape}, model expects {t.shape}")
    for name, t in expected.items():
        t.data[...] = arrays[name]
    return model, scorer, meta.get("extra") or {}


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

def _group_name(name: str) -> str:
    head, _, rest = name.partition(".")
    return rest if head.startswith("layer") and head[5:].isdigit() else name


def gradient_check(model: MambaLM, scorer: ScorerParams, batch: Batch, spec: CompressionSpec,
                   mode="selective_delta", entries_per_tensor: int = 4, step: float = 1e-6,
                   seed: int = 0) -> list[dict]:
    """Central-difference check of the tape gradients, one row per parameter group.

    Layer parameters are grouped by role across layers.  The extra group
    ``cos_prime`` differentiates the stage-2 loss w.r.t. the importance scores
    themselves.  Score-gradient scaling is left off so the tape gradient is
    the true derivative.
    """
    if not isinstance(batch, Batch):
        batch = Batch(*batch)
    mode = mode if isinstance(mode, AdaptationMode) else AdaptationMode(mode)
    pick = np.random.default_rng(seed)

    def loss_fn() -> float:
        with nx.no_tape():
            return batch_loss(model, scorer, batch, spec, mode, np.random.default_rng(seed))[0].item()

    named = {**model.named_parameters(), **scorer.named_parameters()}
    with Tape() as tape:
        loss, out = batch_loss(model, scorer, batch, spec, mode, np.random.default_rng(seed))
    nx.backward(tape, loss, list(named.values()))
    groups: dict[str, tuple[list, list]] = {}
    for name, t in named.items():
        flat = pick.choice(t.data.size, size=min(entries_per_tensor, t.data.size), replace=False)
        idx = [np.unravel_index(int(i), t.shape) for i in flat]
        numeric = nx.finite_difference_grad(loss_fn, t, step, idx)
        analytic = np.array([t.grad[i] for i in idx])
        a, n = groups.setdefault(_group_name(name), ([], []))
        a.extend(analytic)
        n.extend(numeric)
    rows = [{"group": g, "entries": len(a), "rel_err": nx.relative_error(np.array(a), np.array(n))}
            for g, (a, n) in groups.items()]
    if out.compressed.importance is not None and mode.kind != "none":
        rows.append(_cos_prime_check(model, batch, out, mode, step))
    return rows


def _cos_prime_check(model: MambaLM, batch: Batch, out, mode: AdaptationMode, step: float) -> dict:
    compressed = out.compressed
    cos = Tensor(compressed.importance.data.copy(), requires_grad=True)
    T = batch.targets.shape[1]
    suffix = model.embed(batch.targets[:, :-1]) if T > 1 else None
    seq = compressed.embeddings if suffix is None else nx.concat([compressed.embeddings, suffix], axis=1)
    seq = Tensor(seq.data.copy())

    def stage2() -> Tensor:
        alphas = position_alphas(replace(compressed, importance=cos), seq.shape[1])
        if mode.kind == "multiplicative":
            hidden, _ = forward_sequence(model, seq, gates=alphas)
        else:
            hidden, _ = forward_sequence(model, seq, alphas=alphas, exact_scale=mode.exact_delta_scale)
        L2 = hidden.shape[1]
        return nx.cross_entropy(lm_logits(model, nx.slice_axis(hidden, L2 - T, L2, axis=1)), batch.targets)

    with Tape() as tape:
        loss = stage2()
    nx.backward(tape, loss, [cos])

    def loss_fn() -> float:
        with nx.no_tape():
            return stage2().item()

    numeric = nx.finite_difference_grad(loss_fn, cos, step)
    return {"group": "cos_prime", "entries": cos.data.size, "rel_err": nx.relative_error(cos.grad, numeric)}
