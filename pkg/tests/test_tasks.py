from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from remamba import ReMambaLM, tasks
from remamba.errors import ContractError
from remamba.tasks import CLOSE, OPEN, QUERY, TaskInstance


def scan_for_key(prompt):
    """Oracle: the tokens strictly between the only OPEN and the next CLOSE."""
    assert prompt.count(OPEN) == 1 and prompt.count(CLOSE) == 1
    i = prompt.index(OPEN)
    return prompt[i + 1:prompt.index(CLOSE, i)]


# -- passkey ---------------------------------------------------------------

def test_needle_at_zero_is_earliest():
    inst = tasks.gen_passkey(np.random.default_rng(0), 20, 3, 0.0)
    assert inst.prompt_tokens[0] == OPEN
    assert inst.prompt_tokens[1:4] == inst.target_tokens
    assert inst.prompt_tokens[-1] == QUERY


def test_key_filling_context_leaves_no_filler():
    inst = tasks.gen_passkey(np.random.default_rng(0), 8, 5, 0.7)
    assert inst.prompt_tokens == [OPEN, *inst.target_tokens, CLOSE, QUERY]


def test_impossible_geometry():
    with pytest.raises(ContractError):
        tasks.gen_passkey(np.random.default_rng(0), 7, 5, 0.5)
    with pytest.raises(ContractError):
        tasks.gen_passkey(np.random.default_rng(0), 20, 2, 1.5)


def test_scan_oracle_recovers_key_in_every_instance():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        L = int(rng.integers(8, 200))
        inst = tasks.gen_passkey(rng, L, int(rng.integers(1, 5)), float(rng.uniform()))
        assert scan_for_key(inst.prompt_tokens) == inst.target_tokens


@given(st.integers(0, 10_000), st.integers(6, 300), st.integers(1, 3), st.floats(0, 1))
def test_passkey_length_and_no_leakage(seed, L, k, pos):
    inst = tasks.gen_passkey(np.random.default_rng(seed), L, k, pos)
    assert len(inst.prompt_tokens) == L
    assert all(0 <= t < 64 for t in inst.prompt_tokens)
    i = inst.prompt_tokens.index(OPEN)
    filler = inst.prompt_tokens[:i] + inst.prompt_tokens[i + k + 2:-1]
    assert not set(filler) & set(inst.target_tokens)
    assert inst.metadata["context_length"] == L


def test_generator_determinism(tmp_path):
    a = tasks.passkey_corpus(5, 20, [64, 128], 2, 64)
    b = tasks.passkey_corpus(5, 20, [64, 128], 2, 64)
    tasks.write_corpus(a, tmp_path / "a.jsonl")
    tasks.write_corpus(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert tasks.read_corpus(tmp_path / "a.jsonl") == a


def test_corpus_needle_cycle():
    corpus = tasks.passkey_corpus(0, 6, [32], 1, 64, needle_positions=[0.0, 0.5, 1.0])
    assert [c.metadata["needle_position"] for c in corpus] == [0.0, 0.5, 1.0] * 2


def test_instance_json_round_trip():
    inst = TaskInstance([1, 2, 3], [4], {"task_kind": "x", "context_length": 3, "needle_position": None})
    assert TaskInstance.from_json(inst.to_json()) == inst


# -- associative recall ----------------------------------------------------

def test_assoc_single_pair():
    inst = tasks.gen_assoc_recall(np.random.default_rng(0), 1, 6)
    k, v = inst.prompt_tokens[2:4]
    assert inst.prompt_tokens[-2:] == [QUERY, k]
    assert inst.target_tokens == [v]


@given(st.integers(0, 10_000), st.integers(1, 30), st.integers(0, 40))
def test_assoc_keys_distinct_and_target_correct(seed, n, extra):
    L = 2 * n + 2 + extra
    inst = tasks.gen_assoc_recall(np.random.default_rng(seed), n, L)
    assert len(inst.prompt_tokens) == L
    body = inst.prompt_tokens[extra:-2]
    keys, vals = body[0::2], body[1::2]
    assert len(set(keys)) == n
    q = inst.prompt_tokens[-1]
    assert inst.target_tokens == [vals[keys.index(q)]]


def test_assoc_duplicate_keys_impossible():
    with pytest.raises(ContractError, match="distinct"):
        tasks.gen_assoc_recall(np.random.default_rng(0), 31, 100)
    with pytest.raises(ContractError):
        tasks.gen_assoc_recall(np.random.default_rng(0), 4, 9)


def test_assoc_target_values_uniform_within_five_percent():
    # a 4-symbol value alphabet gives 2500 expected hits per value over 10k instances
    rng = np.random.default_rng(0)
    counts = Counter(tasks.gen_assoc_recall(rng, 3, 12, vocab_size=12).target_tokens[0] for _ in range(10_000))
    assert sorted(counts) == list(tasks.filler_symbols(12))
    for c in counts.values():
        assert abs(c / 2500 - 1) <= 0.05


def test_assoc_target_values_pass_chi_square_at_vocab_64():
    rng = np.random.default_rng(1)
    counts = Counter(tasks.gen_assoc_recall(rng, 8, 32).target_tokens[0] for _ in range(10_000))
    observed = [counts.get(v, 0) for v in tasks.filler_symbols(64)]
    assert stats.chisquare(observed).pvalue > 0.01


# -- evaluate --------------------------------------------------------------

def echo_key(prompts, n):
    return [scan_for_key(p)[:n] for p in prompts]


def test_rigged_echo_model_scores_one():
    corpus = tasks.passkey_corpus(1, 10, [32, 64], 2, 64, needle_positions=[0.0, 1.0])
    report = tasks.evaluate(echo_key, corpus, [32, 64])
    assert report.lengths == [32, 64]
    assert all(report.accuracy(L) == 1.0 for L in (32, 64))


def test_random_model_is_at_chance():
    corpus = tasks.passkey_corpus(2, 50, [48], 4, 64)
    est = ReMambaLM(num_layers=1, hidden_size=16, intermediate_size=32, state_size=4, p=0.0).init_params()
    report = tasks.evaluate(est.predict, corpus, [48])
    assert report.accuracy(48) == 0.0


def test_report_totals_match_corpus_sizes():
    corpus = tasks.passkey_corpus(3, 12, [16, 24, 40], 1, 64, needle_positions=[0.0, 0.5, 1.0])
    report = tasks.evaluate(lambda ps, n: [[4]] * len(ps), corpus)
    for L in (16, 24, 40):
        assert report.count(L) == 12
        assert sum(report.count(L, f"{x:.2f}") for x in (0.0, 0.5, 1.0)) == 12
    assert all(0.0 <= float(r["exact_match"]) <= 1.0 and r["n"] > 0 for r in report.rows())


def test_evaluate_length_filter_and_missing_length():
    corpus = tasks.passkey_corpus(4, 3, [16, 24], 1, 64)
    assert tasks.evaluate(echo_key, corpus, [24]).lengths == [24]
    with pytest.raises(ContractError):
        tasks.evaluate(echo_key, corpus, [32])
    with pytest.raises(ContractError):
        tasks.evaluate(echo_key, [], [16])


def test_report_csv_round_trip(tmp_path):
    corpus = tasks.passkey_corpus(5, 4, [16], 1, 64, needle_positions=[0.0, 1.0])
    report = tasks.evaluate(echo_key, corpus)
    report.to_csv(tmp_path / "r.csv", header_comment="seed 5\nrun x")
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[:3] == ["# seed 5", "# run x", "task,length,needle_pos,exact_match,n"]
    rows = tasks.read_csv(tmp_path / "r.csv")
    assert [(r["length"], r["needle_pos"], r["n"]) for r in rows] == [("16", "all", "4"), ("16", "0.00", "2"),
                                                                        ("16", "1.00", "2")]


def test_copy_instances():
    inst = tasks.gen_copy(np.random.default_rng(0), 5, 16)
    assert inst.prompt_tokens == inst.target_tokens + [QUERY]
    assert set(inst.target_tokens) <= set(tasks.key_symbols(16))
