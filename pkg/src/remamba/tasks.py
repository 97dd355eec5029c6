"""Synthetic long-context tasks and exact-match evaluation.

Token layout shared by the generators (``V`` = vocab size)::

    0        PAD
    1        OPEN   (passkey start marker)
    2        CLOSE  (passkey end marker)
    3        QUERY
    4 ..     key symbols   (first half of the remaining ids)
    .. V-1   filler / value symbols (second half)

Key symbols never appear as filler, so a passkey cannot leak into the
haystack.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError

PAD, OPEN, CLOSE, QUERY = 0, 1, 2, 3
N_SPECIAL = 4


def key_symbols(vocab_size: int) -> range:
    n = (vocab_size - N_SPECIAL) // 2
    return range(N_SPECIAL, N_SPECIAL + n)


def filler_symbols(vocab_size: int) -> range:
    return range(key_symbols(vocab_size).stop, vocab_size)


@dataclass
class TaskInstance:
    prompt_tokens: list[int]
    target_tokens: list[int]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TaskInstance":
        d = json.loads(line)
        return cls(d["prompt_tokens"], d["target_tokens"], d.get("metadata", {}))


def gen_passkey(rng: np.random.Generator, context_length: int, key_length: int, needle_rel_pos: float,
                vocab_size: int = 64) -> TaskInstance:
    """Filler with ``OPEN key CLOSE`` at a relative position, ending in ``QUERY``.

    The block start is ``round(needle_rel_pos * free)`` where ``free`` is the
    number of filler slots.
    """
    keys, filler = key_symbols(vocab_size), filler_symbols(vocab_size)
    if key_length < 1 or len(keys) == 0 or len(filler) == 0:
        raise ContractError(f"vocab of {vocab_size} cannot host a passkey task")
    free = context_length - key_length - 3
    if free < 0:
        raise ContractError(f"key of {key_length} tokens plus 3 markers does not fit in {context_length}")
    if not 0.0 <= needle_rel_pos <= 1.0:
        raise ContractError(f"needle_rel_pos must lie in [0, 1], got {needle_rel_pos}")
    key = rng.integers(keys.start, keys.stop, key_length)
    hay = rng.integers(filler.start, filler.stop, free)
    at = int(round(needle_rel_pos * free))
    prompt = np.concatenate([hay[:at], [OPEN], key, [CLOSE], hay[at:], [QUERY]])
    return TaskInstance([int(t) for t in prompt], [int(t) for t in key],
                        {"task_kind": "passkey", "context_length": context_length,
                         "needle_position": float(needle_rel_pos)})


def gen_assoc_recall(rng: np.random.Generator, n_pairs: int, context_length: int,
                     vocab_size: int = 64) -> TaskInstance:
    """``PAD.. k1 v1 .. kn vn QUERY kq`` with target ``vq``; keys distinct."""
    keys, values = key_symbols(vocab_size), filler_symbols(vocab_size)
    if n_pairs < 1:
        raise ContractError("n_pairs must be >= 1")
    if n_pairs > len(keys) or len(values) == 0:
        raise ContractError(f"vocab of {vocab_size} has {len(keys)} key symbols, {n_pairs} distinct keys requested")
    pad = context_length - 2 * n_pairs - 2
    if pad < 0:
        raise ContractError(f"{n_pairs} pairs plus query do not fit in {context_length}")
    ks = rng.choice(np.arange(keys.start, keys.stop), size=n_pairs, replace=False)
    vs = rng.integers(values.start, values.stop, n_pairs)
    q = int(rng.integers(n_pairs))
    body = np.stack([ks, vs], axis=1).reshape(-1)
    prompt = np.concatenate([np.full(pad, PAD), body, [QUERY, ks[q]]])
    return TaskInstance([int(t) for t in prompt], [int(vs[q])],
                        {"task_kind": "assoc_recall", "context_length": context_length,
                         "needle_position": q / max(1, n_pairs - 1) if n_pairs > 1 else 0.0})


def gen_copy(rng: np.random.Generator, n_tokens: int, vocab_size: int = 64) -> TaskInstance:
    """``x1 .. xn QUERY`` with target ``x1 .. xn`` drawn from the key symbols."""
    keys = key_symbols(vocab_size)
    if n_tokens < 1 or len(keys) == 0:
        raise ContractError(f"copy task needs n_tokens >= 1 and key symbols in a vocab of {vocab_size}")
    seq = [int(t) for t in rng.integers(keys.start, keys.stop, n_tokens)]
    return TaskInstance(seq + [QUERY], list(seq),
                        {"task_kind": "copy", "context_length": n_tokens + 1, "needle_position": None})


def passkey_corpus(seed: int, n: int, lengths: Sequence[int], key_length: int, vocab_size: int,
                   needle_positions: Sequence[float] | None = None) -> list[TaskInstance]:
    """``n`` instances per length; needles cycle through ``needle_positions``
    or are drawn uniformly when it is None."""
    rng = np.random.default_rng(seed)
    out = []
    for length in lengths:
        for i in range(n):
            pos = (float(rng.uniform()) if needle_positions is None
                   else float(needle_positions[i % len(needle_positions)]))
            out.append(gen_passkey(rng, int(length), key_length, pos, vocab_size))
    return out


def write_corpus(instances: Iterable[TaskInstance], path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(inst.to_json() + "\n")


def read_corpus(path) -> list[TaskInstance]:
    with open(path) as fh:
        return [TaskInstance.from_json(line) for line in fh if line.strip()]


@dataclass
class EvalReport:
    task: str
    cells: dict[tuple[int, str], list[int]] = field(default_factory=dict)

    def add(self, length: int, needle: str, correct: bool) -> None:
        cell = self.cells.setdefault((length, needle), [0, 0])
        cell[0] += int(correct)
        cell[1] += 1

    def accuracy(self, length: int, needle: str = "all") -> float:
        hits, n = self.cells[(length, needle)]
        return hits / n

    def count(self, length: int, needle: str = "all") -> int:
        return self.cells[(length, needle)][1]

    @property
    def lengths(self) -> list[int]:
        return sorted({k[0] for k in self.cells})

    def rows(self) -> list[dict]:
        def order(key):
            length, needle = key
            return (length, needle != "all", needle)

        return [{"task": self.task, "length": length, "needle_pos": needle,
                 "exact_match": f"{hits / n:.6f}", "n": n}
                for (length, needle), (hits, n) in sorted(self.cells.items(), key=lambda kv: order(kv[0]))]

    def to_csv(self, path, header_comment: str | None = None) -> None:
        write_csv(path, ["task", "length", "needle_pos", "exact_match", "n"], self.rows(), header_comment)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict], header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment is not None:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _needle_label(inst: TaskInstance) -> str:
    pos = inst.metadata.get("needle_position")
    return "none" if pos is None else f"{float(pos):.2f}"


def evaluate(predict: Callable[[list[list[int]], int], Sequence[Sequence[int]]],
             corpus: Sequence[TaskInstance], lengths: Sequence[int] | None = None,
             task: str | None = None) -> EvalReport:
    """Greedy exact-match accuracy grouped by length and needle position.

    ``predict(prompts, max_new_tokens)`` receives prompts of one length at a
    time.  Instances whose length is not in ``lengths`` are skipped.
    """
    if not corpus:
        raise ContractError("evaluation corpus is empty")
    task = task or corpus[0].metadata.get("task_kind", "task")
    report = EvalReport(task)
    groups: dict[tuple[int, int], list[TaskInstance]] = {}
    for inst in corpus:
        if lengths is not None and len(inst.prompt_tokens) not in lengths:
            continue
        groups.setdefault((len(inst.prompt_tokens), len(inst.target_tokens)), []).append(inst)
    if lengths is not None:
        missing = set(lengths) - {k[0] for k in groups}
        if missing:
            raise ContractError(f"no evaluation instances for lengths {sorted(missing)}")
    for (length, t_len), group in sorted(groups.items()):
        preds = predict([g.prompt_tokens for g in group], t_len)
        for inst, pred in zip(group, preds):
            ok = list(map(int, pred)) == list(inst.target_tokens)
            report.add(length, "all", ok)
            report.add(length, _needle_label(inst), ok)
    return report
