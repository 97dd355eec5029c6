import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from remamba import numerics as nx
from remamba import ssm
from remamba.adaptation import AdaptationMode, apply, position_alphas, stage2_scores, two_stage_forward
from remamba.compression import CompressionSpec, ScorerParams, compress
from remamba.errors import ConfigError, ContractError
from remamba.numerics import Tape, Tensor

from conftest import randomize_theta, small_model

LN2 = math.log(2.0)


def rigged_scorer(H=6):
    """Query and key both collapse to the same bias vector, so every cos' is 1."""
    sc = ScorerParams.init(H, 0)
    sc.query_w.data[...] = 0
    sc.key_w.data[...] = 0
    sc.query_b.data[...] = 1.0
    sc.key_b.data[...] = 1.0
    return sc


def test_mode_validation():
    with pytest.raises(ConfigError):
        AdaptationMode("sideways")


@pytest.mark.parametrize("cos", [-0.7, 0.0])
def test_selective_delta_nonpositive_score_forces_ln2(cos):
    layer = small_model().layers[0]
    h = Tensor(np.random.default_rng(0).standard_normal(6))
    delta, h_out = apply("selective_delta", layer, h, cos)
    np.testing.assert_allclose(delta.data, LN2, atol=1e-12)
    assert h_out is h


def test_selective_delta_score_one_is_vanilla():
    layer = small_model().layers[0]
    rng = np.random.default_rng(1)
    for _ in range(100):
        h = Tensor(rng.standard_normal(6))
        np.testing.assert_allclose(apply("selective_delta", layer, h, 1.0)[0].data, apply("none", layer, h)[0].data,
                                   rtol=0, atol=1e-12)


def test_multiplicative_zero_score_zeroes_input():
    layer = small_model().layers[0]
    h = Tensor(np.random.default_rng(2).standard_normal(6))
    _, gated = apply("multiplicative", layer, h, 0.0)
    np.testing.assert_array_equal(gated.data, 0.0)
    S0 = np.random.default_rng(3).standard_normal((8, 4))
    S1, _ = ssm.scan_step(S0, layer, gated)
    A_bar = np.exp(apply("none", layer, gated)[0].data[:, None] * layer.A)
    np.testing.assert_allclose(S1.data, A_bar * S0, rtol=1e-14)


def test_mode_none_rejects_scores():
    with pytest.raises(ContractError):
        apply("none", small_model().layers[0], np.ones(6), 0.5)


@given(st.integers(0, 500))
def test_delta_monotone_in_score_where_projection_positive(seed):
    layer = small_model().layers[0]
    h = Tensor(np.random.default_rng(seed).standard_normal(6))
    lin = (h.data @ layer.proj1_w.data) + layer.proj1_b.data
    grid = np.linspace(0, 1, 11)
    deltas = np.array([apply("selective_delta", layer, h, c)[0].data for c in grid])
    pos = lin > 0
    assert np.all(np.diff(deltas[:, pos], axis=0) >= 0)
    assert np.all(np.diff(deltas[:, ~pos], axis=0) <= 0)


def test_zero_gate_state_law():
    m = small_model(layers=1)
    layer = m.layers[0]
    u = nx.rmsnorm(Tensor(np.random.default_rng(4).standard_normal(6)))
    S0 = np.random.default_rng(5).standard_normal((8, 4))
    S1, _ = ssm.scan_step(S0, layer, u, alpha=0.0)
    B, x = u.data @ layer.proj2_w.data, u.data @ layer.proj3_w.data
    expected = np.exp(LN2 * layer.A) * S0 + LN2 * np.outer(x, B)
    np.testing.assert_allclose(S1.data, expected, rtol=1e-13, atol=1e-15)


# -- two-stage pipeline ----------------------------------------------------

@pytest.mark.parametrize("mode", ["selective_delta", "multiplicative", "none"])
def test_p_zero_is_bitwise_baseline(mode):
    m, sc = randomize_theta(small_model(seed=1)), ScorerParams.init(6, 2)
    emb = np.random.default_rng(6).standard_normal((2, 15, 6))
    out = two_stage_forward(m, sc, Tensor(emb), CompressionSpec(p=0.0), mode)
    hidden, _ = ssm.forward_sequence(m, emb)
    base = ssm.lm_logits(m, nx.slice_axis(hidden, 14, 15, axis=1))
    assert out.logits.data.tobytes() == base.data.tobytes()


def test_rigged_unit_scores_match_mode_none():
    m, sc = small_model(seed=2), rigged_scorer()
    emb = np.random.default_rng(7).standard_normal((2, 20, 6))
    spec = CompressionSpec(s=0.1, p=0.5, rho=0.3, placement="middle")
    a = two_stage_forward(m, sc, Tensor(emb), spec, "selective_delta")
    b = two_stage_forward(m, sc, Tensor(emb), spec, "none")
    np.testing.assert_allclose(a.compressed.importance.data, 1.0, atol=1e-15)
    np.testing.assert_allclose(a.logits.data, b.logits.data, rtol=0, atol=1e-10)


def test_position_alphas_exactly_at_spliced_positions():
    m, sc = small_model(), ScorerParams.init(6, 3)
    comp = compress(m, sc, np.random.default_rng(8).standard_normal((2, 20, 6)), CompressionSpec(p=0.5, rho=0.2))
    alphas = position_alphas(comp, comp.length)
    k = comp.window.k
    assert alphas.mask.sum(axis=1).tolist() == [k, k]
    assert np.all(alphas.mask[:, comp.splice_start:comp.splice_start + k])
    np.testing.assert_array_equal(alphas.values.data[alphas.mask].reshape(2, k),
                                  np.maximum(comp.importance.data, 0))


def test_stage2_scores_routing():
    m, sc = small_model(), ScorerParams.init(6, 3)
    comp = compress(m, sc, np.random.default_rng(9).standard_normal((1, 20, 6)), CompressionSpec(p=0.5, rho=0.2))
    a, g = stage2_scores(comp, "selective_delta")
    assert a is not None and g is None
    a, g = stage2_scores(comp, "multiplicative")
    assert a is None and g is not None
    assert stage2_scores(comp, "none") == (None, None)


def test_decode_continuation_matches_two_stage_logits():
    m, sc = randomize_theta(small_model(seed=3)), ScorerParams.init(6, 4)
    emb = Tensor(np.random.default_rng(10).standard_normal((1, 18, 6)))
    spec = CompressionSpec(p=0.4, rho=0.3)
    out = two_stage_forward(m, sc, emb, spec, "selective_delta")
    comp = out.compressed
    alphas, gates = stage2_scores(comp, "selective_delta")
    logits, _ = ssm.prefill(m, comp.embeddings, alphas, gates)
    np.testing.assert_allclose(logits, out.logits.data[:, -1], atol=1e-12)


def test_score_gradient_is_nonzero():
    m, sc = randomize_theta(small_model(seed=4)), ScorerParams.init(6, 5)
    emb = Tensor(np.random.default_rng(11).standard_normal((1, 16, 6)))
    comp = compress(m, sc, emb, CompressionSpec(p=0.5, rho=0.5))
    cos = Tensor(np.abs(comp.importance.data) + 0.2, requires_grad=True)
    with Tape() as tape:
        alphas = position_alphas(replace(comp, importance=cos), comp.length)
        hidden, _ = ssm.forward_sequence(m, comp.embeddings, alphas=alphas)
        loss = nx.cross_entropy(ssm.lm_logits(m, nx.slice_axis(hidden, comp.length - 1, comp.length, 1)),
                                np.array([[3]]))
    nx.backward(tape, loss, [cos])
    assert np.all(cos.grad != 0)

    def f():
        with nx.no_tape():
            alphas = position_alphas(replace(comp, importance=cos), comp.length)
            hidden, _ = ssm.forward_sequence(m, comp.embeddings, alphas=alphas)
            return nx.cross_entropy(ssm.lm_logits(m, nx.slice_axis(hidden, comp.length - 1, comp.length, 1)),
                                    np.array([[3]])).item()

    assert nx.relative_error(cos.grad, nx.finite_difference_grad(f, cos)) < 1e-4
