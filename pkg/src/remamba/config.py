"""Run configuration: one JSON document drives every subcommand.

Sections map onto the owning modules' config types.  Unknown keys anywhere
are rejected, and ``apply_overrides`` takes flat dotted assignments such as
``compression.p=0.18`` so sweeps need no extra config files.  The top-level
``seed`` is the single source of randomness; ``REMAMBA_SEED`` overrides it.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adaptation import AdaptationMode
from .compression import CompressionSpec
from .errors import ConfigError
from .ssm import ModelConfig
from .training import TrainConfig

SEED_ENV = "REMAMBA_SEED"
TASK_KINDS = ("passkey", "assoc_recall")


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "passkey"
    train_lengths: tuple[int, ...] = (32, 64)
    eval_lengths: tuple[int, ...] = (512, 1024)
    n_train_per_length: int = 14400
    n_eval_per_length: int = 200
    key_length: int = 1
    n_pairs: int = 8
    needle_positions: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("train_lengths", "eval_lengths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
            if not getattr(self, name) or min(getattr(self, name)) < 1:
                raise ConfigError(f"tasks.{name} must be a non-empty list of positive lengths")
        if self.needle_positions is not None:
            object.__setattr__(self, "needle_positions", tuple(float(v) for v in self.needle_positions))
            if not self.needle_positions or not all(0.0 <= v <= 1.0 for v in self.needle_positions):
                raise ConfigError("tasks.needle_positions must be values in [0, 1]")
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"tasks.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        for name in ("n_train_per_length", "n_eval_per_length", "key_length", "n_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"tasks.{name} must be >= 1")

    @property
    def target_length(self) -> int:
        return self.key_length if self.kind == "passkey" else 1


@dataclass(frozen=True)
class BenchConfig:
    pipelines: tuple[str, ...] = ("mamba", "remamba")
    input_lens: tuple[int, ...] = (128, 256, 512, 1024)
    output_len: int = 64
    reps: int = 3

    def __post_init__(self):
        object.__setattr__(self, "pipelines", tuple(self.pipelines))
        object.__setattr__(self, "input_lens", tuple(int(v) for v in self.input_lens))
        bad = set(self.pipelines) - {"mamba", "remamba"}
        if bad or not self.pipelines:
            raise ConfigError(f"bench.pipelines must be drawn from ['mamba', 'remamba'], got {list(self.pipelines)}")
        if self.reps < 3:
            raise ConfigError(f"bench.reps must be >= 3, got {self.reps}")
        if self.output_len < 0 or not self.input_lens or min(self.input_lens) < 1:
            raise ConfigError("bench.output_len must be >= 0 and bench.input_lens positive")


_SECTIONS = {
    "model": ModelConfig,
    "compression": CompressionSpec,
    "adaptation": AdaptationMode,
    "training": TrainConfig,
    "tasks": TaskConfig,
    "bench": BenchConfig,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    compression: CompressionSpec = field(default_factory=CompressionSpec)
    adaptation: AdaptationMode = field(default_factory=AdaptationMode)
    training: TrainConfig = field(default_factory=TrainConfig)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.training.seed != self.seed:
            object.__setattr__(self, "training", _replace(self.training, seed=self.seed))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, kind in _SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{name} must be an object")
            if name == "training" and "seed" in section:
                raise ConfigError("training.seed is not configurable; set the top-level seed")
            kwargs[name] = _build(kind, section, name)
        if "output_dir" in data:
            kwargs["output_dir"] = str(data["output_dir"])
        if "seed" in data:
            if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
                raise ConfigError(f"seed must be an integer, got {data['seed']!r}")
            kwargs["seed"] = data["seed"]
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            d = _jsonable(asdict(getattr(self, name)))
            if name == "training":
                d.pop("seed")
            out[name] = d
        out["output_dir"] = self.output_dir
        out["seed"] = self.seed
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def estimator_params(self) -> dict:
        """Keyword arguments for :class:`estimator.ReMambaLM`."""
        c, t = self.compression, self.training
        return dict(
            **asdict(self.model), s=c.s, p=c.p, rho=c.rho, placement=c.placement, strategy=c.strategy, eps=c.eps,
            selection_seed=c.seed, adaptation=self.adaptation.kind,
            exact_delta_scale=self.adaptation.exact_delta_scale, learning_rate=t.learning_rate, epochs=t.epochs,
            batch_size=t.batch_size, lr_schedule=t.lr_schedule, warmup_steps=t.warmup_steps,
            weight_decay=t.weight_decay, max_grad_norm=t.max_grad_norm, grad_scale_scores=t.grad_scale_scores,
            p_range=t.p_range, rho_range=t.rho_range, s_range=t.s_range, seed=self.seed)


def _replace(obj, **changes):
    d = asdict(obj)
    d.update(changes)
    return type(obj)(**d)


def _build(kind, section: dict, name: str):
    unknown = set(section) - {f.name for f in fields(kind)}
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return kind(**section)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Return a copy of ``data`` with ``section.key=value`` assignments applied.

    Values are parsed as JSON when possible (``0.18``, ``true``, ``[1,2]``)
    and kept as strings otherwise.
    """
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override key {key!r} is malformed")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_run_config(path=None, overrides=(), env=None) -> RunConfig:
    """Read, override and validate a run config (defaults when ``path`` is None)."""
    env = os.environ if env is None else env
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    data = apply_overrides(data, overrides)
    if env.get(SEED_ENV):
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return RunConfig.from_dict(data)
