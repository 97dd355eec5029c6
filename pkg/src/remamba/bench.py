"""Decode memory and throughput versus prompt length.

Memory is accounted logically: the serialized recurrent state, and the peak
of numpy allocations during one generation (via
:func:`numerics.allocation_probe`).  Timings use ``time.perf_counter``; one
warm-up repetition is discarded and the median of the rest is reported,
with the cyclic garbage collector paused during the timed repetitions.
``tokens_per_second`` is the decode rate, ``output_len`` over the time spent
producing the answer tokens after the prompt has been encoded.
"""

from __future__ import annotations

import contextlib
import gc
import logging
import statistics
import time
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import ssm
from .adaptation import stage2_scores
from .compression import compress, compute_window
from .errors import ContractError
from .estimator import ReMambaLM
from .tasks import read_csv, write_csv

log = logging.getLogger(__name__)

PIPELINES = ("mamba", "remamba")


@dataclass
class BenchRecord:
    pipeline: str
    input_len: int
    output_len: int
    tokens_per_second: float
    peak_state_bytes: int
    peak_transient_bytes: int
    wall_ms_stage1: float
    wall_ms_stage2: float

    @property
    def total_ms(self) -> float:
        return self.wall_ms_stage1 + self.wall_ms_stage2


COLUMNS = [f.name for f in fields(BenchRecord)]


@dataclass
class _Timing:
    stage1: float
    stage2_encode: float
    decode: float
    state: ssm.ScanState


def _generate_timed(est: ReMambaLM, prompt: np.ndarray, output_len: int, pipeline: str) -> _Timing:
    """One generation split into its phases (seconds).

    mamba:   stage1 = prompt encode, stage2 = decode
    remamba: stage1 = first pass + scoring + splice, stage2 = second pass + decode
    """
    model = est.model_
    with nx.no_tape():
        t0 = time.perf_counter()
        emb = model.embed(prompt)
        if pipeline == "mamba":
            logits, state = ssm.prefill(model, emb)
            t1 = t2 = time.perf_counter()
        else:
            spec = est.compression_spec()
            compressed = compress(model, est.scorer_, emb, spec, np.random.default_rng(spec.seed))
            t1 = time.perf_counter()
            alphas, gates = stage2_scores(compressed, est.adaptation_mode())
            logits, state = ssm.prefill(model, compressed.embeddings, alphas, gates, est.exact_delta_scale)
            t2 = time.perf_counter()
        tokens = ssm.greedy_continue(model, state, logits.argmax(-1), output_len)
        # the final state after feeding every generated token
        _, state = ssm.step_token(model, state, model.embed(tokens[:, -1]))
        t3 = time.perf_counter()
    return _Timing(t1 - t0, t2 - t1, t3 - t2, state)


@contextlib.contextmanager
def _gc_paused():
    """Collect once, then keep the cyclic collector out of the timed region (as timeit does)."""
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


def run_bench(est: ReMambaLM, pipeline: str, input_lens: Sequence[int], output_len: int, reps: int = 3,
              seed: int = 0) -> list[BenchRecord]:
    """Median-of-``reps`` timings per input length for one pipeline."""
    if pipeline not in PIPELINES:
        raise ContractError(f"pipeline must be one of {PIPELINES}, got {pipeline!r}")
    if reps < 3:
        raise ContractError(f"reps must be >= 3, got {reps}")
    if output_len <= 0:
        log.warning("output_len=%s leaves tokens/second undefined; no records emitted", output_len)
        return []
    if pipeline == "remamba":
        for L in input_lens:
            if compute_window(L, est.compression_spec()).empty:
                raise ContractError(f"compression window is empty at input length {L}")
    rng = np.random.default_rng(seed)
    prompts = [rng.integers(0, est.vocab_size, (1, L)) for L in input_lens]
    for prompt in prompts:
        _generate_timed(est, prompt, output_len, pipeline)  # warm-up
    # round-robin over lengths so a transient stall costs each length at most one rep
    runs: list[list[_Timing]] = [[] for _ in prompts]
    with _gc_paused():
        for _ in range(reps):
            for i, prompt in enumerate(prompts):
                runs[i].append(_generate_timed(est, prompt, output_len, pipeline))
    records = []
    for L, prompt, timings in zip(input_lens, prompts, runs):
        # the first traced pass picks up one-off interpreter allocations; keep the second
        for _ in range(2):
            with nx.allocation_probe() as probe:
                _generate_timed(est, prompt, output_len, pipeline)
        decode = statistics.median(r.decode for r in timings)
        records.append(BenchRecord(
            pipeline=pipeline, input_len=int(L), output_len=int(output_len),
            tokens_per_second=output_len / decode,
            peak_state_bytes=timings[0].state.nbytes,
            peak_transient_bytes=probe.peak_bytes,
            wall_ms_stage1=1e3 * statistics.median(r.stage1 for r in timings),
            wall_ms_stage2=1e3 * statistics.median(r.stage2_encode + r.decode for r in timings),
        ))
    return records


def logical_memory_bytes(est: ReMambaLM, pipeline: str) -> int:
    """Bytes of model-owned buffers live during decode: parameters plus state."""
    params = sum(t.nbytes for t in est.model_.parameters())
    if pipeline == "remamba":
        params += est.scorer_.nbytes
    return params + est.model_.state_nbytes(1)


def emit_report(records: Sequence[BenchRecord], path, header_comment: str | None = None) -> None:
    rows = []
    for r in records:
        row = asdict(r)
        for k in ("tokens_per_second", "wall_ms_stage1", "wall_ms_stage2"):
            row[k] = repr(float(row[k]))
        rows.append(row)
    write_csv(path, COLUMNS, rows, header_comment)


def read_report(path) -> list[BenchRecord]:
    out = []
    for row in read_csv(path):
        out.append(BenchRecord(
            pipeline=row["pipeline"], input_len=int(row["input_len"]), output_len=int(row["output_len"]),
            tokens_per_second=float(row["tokens_per_second"]), peak_state_bytes=int(row["peak_state_bytes"]),
            peak_transient_bytes=int(row["peak_transient_bytes"]), wall_ms_stage1=float(row["wall_ms_stage1"]),
            wall_ms_stage2=float(row["wall_ms_stage2"])))
    return out
