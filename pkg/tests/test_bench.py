import logging
from dataclasses import replace

import numpy as np
import pytest

from remamba import ReMambaLM, bench
from remamba.bench import BenchRecord
from remamba.errors import ContractError

LENS = (128, 256, 512, 1024)
TIMING = {"tokens_per_second": max, "wall_ms_stage1": min, "wall_ms_stage2": min}


@pytest.fixture(scope="module")
def est():
    return ReMambaLM(num_layers=2, hidden_size=64, intermediate_size=128, state_size=16).init_params()


@pytest.fixture(scope="module")
def records(est):
    """Pipelines alternate over five rounds; each timing field keeps the best round.

    Host interference only ever slows a run down, so the fastest round is the
    least contaminated estimate (the same reasoning as ``timeit``).
    """
    rounds = [{p: bench.run_bench(est, p, LENS, 64, reps=3) for p in bench.PIPELINES} for _ in range(5)]
    out = {}
    for p in bench.PIPELINES:
        out[p] = []
        for i in range(len(LENS)):
            recs = [r[p][i] for r in rounds]
            best = {k: float(pick(getattr(r, k) for r in recs)) for k, pick in TIMING.items()}
            out[p].append(replace(recs[0], **best))
    return out


def test_zero_output_len_emits_nothing(est, caplog):
    with caplog.at_level(logging.WARNING):
        assert bench.run_bench(est, "mamba", [16], 0) == []
    assert "undefined" in caplog.text


def test_contract_errors(est):
    with pytest.raises(ContractError):
        bench.run_bench(est, "mamba", [16], 4, reps=2)
    with pytest.raises(ContractError):
        bench.run_bench(est, "llama", [16], 4)
    with pytest.raises(ContractError):
        bench.run_bench(ReMambaLM(p=0.0).init_params(), "remamba", [16], 4)


def test_records_are_nonnegative(records):
    for recs in records.values():
        assert [r.input_len for r in recs] == list(LENS)
        for r in recs:
            assert min(r.tokens_per_second, r.peak_state_bytes, r.peak_transient_bytes, r.wall_ms_stage1,
                       r.wall_ms_stage2) >= 0


def test_state_bytes_strictly_constant(records, est):
    sizes = {r.peak_state_bytes for recs in records.values() for r in recs}
    assert sizes == {est.model_.state_nbytes(1)}


def test_logical_memory_gap_is_scorer_only(est):
    gap = bench.logical_memory_bytes(est, "remamba") - bench.logical_memory_bytes(est, "mamba")
    assert gap == est.scorer_.nbytes > 0


def test_decode_throughput_flat(records):
    for recs in records.values():
        tps = np.array([r.tokens_per_second for r in recs])
        assert (tps.max() - tps.min()) / tps.max() < 0.20, tps


def test_overhead_bound(records):
    for m, r in zip(records["mamba"], records["remamba"]):
        assert r.total_ms <= 2.5 * m.total_ms, (m, r)


def test_two_pass_cost_model(records):
    """Two-stage time tracks two prompt encodes plus the decode, within 25%."""
    for m, r in zip(records["mamba"], records["remamba"]):
        decode_ms = 1e3 * m.output_len / m.tokens_per_second
        model = 2 * m.wall_ms_stage1 + decode_ms
        assert abs(r.total_ms / model - 1) <= 0.25, (r.total_ms, model)


def test_empty_report_is_header_only(tmp_path):
    bench.emit_report([], tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text() == ",".join(bench.COLUMNS) + "\n"
    assert bench.read_report(tmp_path / "b.csv") == []


def test_report_round_trip_and_row_count(records, tmp_path):
    flat = records["mamba"] + records["remamba"]
    bench.emit_report(flat, tmp_path / "b.csv", header_comment="cfg")
    assert bench.read_report(tmp_path / "b.csv") == flat
    assert len(flat) == len(LENS) * len(bench.PIPELINES)


def test_report_schema():
    assert bench.COLUMNS == ["pipeline", "input_len", "output_len", "tokens_per_second", "peak_state_bytes",
                             "peak_transient_bytes", "wall_ms_stage1", "wall_ms_stage2"]
    r = BenchRecord("mamba", 1, 1, 1.0, 1, 1, 2.0, 3.0)
    assert r.total_ms == 5.0
