import io
import math
import struct
from fractions import Fraction

import numpy as np
import pytest
from pydantic import ValidationError

from components.hsae_model import (
    HsaeConfig,
    expected_shapes,
    flop_breakdown,
    flop_terms,
    forward_baseline,
    forward_expert,
    forward_hsae,
    init_model,
    read_model,
    write_model,
)
from components.linalg import MacCounter
from conftest import unit_rows
from utils.errors import (
    CheckpointVersionError,
    CorruptionError,
    InvalidArgumentError,
    ShapeMismatchError,
    ShardFormatError,
)


def test_config_defaults_follow_published_setup():
    cfg = HsaeConfig()
    assert (cfg.d, cfg.m_top, cfg.k, cfg.a, cfg.s) == (2304, 16384, 32, 16, 4)
    assert cfg.alpha == pytest.approx(1 / math.sqrt(2304))
    assert cfg.beta == cfg.lambda1 == 0.1
    assert cfg.lambda2 == 0.001
    assert cfg.k_aux == 64
    assert cfg.aux_coeff == pytest.approx(1 / 30)


def test_config_rejects_k_above_m_top():
    with pytest.raises(ValidationError):
        HsaeConfig(d=8, m_top=4, k=5)


def test_init_shapes_and_unit_decoder(small_config, small_model):
    small_model.validate()
    for name, shape in expected_shapes(small_config, False, True).items():
        assert small_model.arrays()[name].shape == shape
    norms = np.linalg.norm(small_model.top.D.astype(np.float64), axis=0)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)
    assert small_model.top.E.dtype == np.float32


def test_baseline_and_hsae_share_top_level_for_a_seed(small_config):
    hsae = init_model(small_config, np.random.default_rng(7))
    baseline = init_model(small_config, np.random.default_rng(7), with_experts=False)
    assert baseline.is_baseline
    np.testing.assert_array_equal(hsae.top.D, baseline.top.D)
    np.testing.assert_array_equal(hsae.top.E, baseline.top.E)


def test_forward_structure(small_config, small_model, rng):
    X = unit_rows(rng, 5, small_config.d)
    trace = forward_hsae(small_model, X)
    assert trace.indices.shape == (5, small_config.k)
    assert np.all(trace.selection_mask().sum(axis=1) == small_config.k)
    # exactly one sublatent per active expert
    assert trace.low_indices.shape == (5, small_config.k)
    assert np.all((trace.low_indices >= 0) & (trace.low_indices < small_config.a))
    picked = np.take_along_axis(trace.low_pre_codes, trace.low_indices[..., None], axis=2)[..., 0]
    np.testing.assert_array_equal(picked, trace.low_values)
    assert np.all(trace.low_values == trace.low_pre_codes.max(axis=2))
    np.testing.assert_allclose(trace.x_hat, trace.x_hat_high + trace.x_hat_low.sum(axis=1))


def test_forward_matches_per_expert_reference(small_config, small_model, rng):
    x = unit_rows(rng, 1, small_config.d)[0]
    trace = forward_hsae(small_model, x)
    outputs = trace.expert_outputs(0)
    assert sorted(outputs) == trace.indices[0].tolist()
    total = trace.x_hat_high[0].copy()
    for j, out in outputs.items():
        ref = forward_expert(small_model.experts[j], small_config, x)
        assert ref.low_selected[0] == out.low_selected[0]
        np.testing.assert_allclose(ref.x_hat_low, out.x_hat_low, atol=1e-12)
        total += ref.x_hat_low
    np.testing.assert_allclose(total, trace.x_hat[0], atol=1e-12)


def test_inactive_experts_are_never_read(small_config, small_model, rng):
    X = unit_rows(rng, 3, small_config.d)
    trace = forward_hsae(small_model, X)
    poisoned = small_model.copy()
    inactive = np.setdiff1d(np.arange(small_config.m_top), np.unique(trace.indices))
    for arr in (poisoned.experts.pi_down, poisoned.experts.pi_up,
                poisoned.experts.enc, poisoned.experts.dec):
        arr[inactive] = np.nan
    again = forward_hsae(poisoned, X)
    np.testing.assert_array_equal(again.x_hat, trace.x_hat)


def test_zero_experts_reproduce_baseline_exactly(small_config, rng):
    model = init_model(small_config, np.random.default_rng(3), expert_init="zero")
    X = unit_rows(rng, 4, small_config.d)
    hsae = forward_hsae(model, X)
    base = forward_baseline(model.top, small_config, X)
    np.testing.assert_array_equal(hsae.x_hat, base.x_hat)
    np.testing.assert_array_equal(hsae.indices, base.indices)


def test_forward_rejects_wrong_dimension(small_model):
    with pytest.raises(InvalidArgumentError):
        forward_hsae(small_model, np.ones(3))


def test_mac_counter_matches_analytic_breakdown():
    cfg = HsaeConfig(d=128, m_top=1024, k=8, s=4, a=16)
    model = init_model(cfg, np.random.default_rng(0))
    counter = MacCounter()
    forward_hsae(model, np.random.default_rng(1).standard_normal(cfg.d), counter)
    analytic = flop_breakdown(cfg)
    for term in ("top_encode", "down_proj", "low_encode", "low_decode", "up_proj", "top_decode"):
        assert counter.terms[term] == getattr(analytic, term)
    assert counter.total == analytic.total == 141312
    assert analytic.top_encode_fraction == Fraction(131072, 141312)


def test_flop_terms_baseline_and_flat_equivalent():
    base = flop_terms(d=128, m_top=1024, k=8, s=4, a=16, with_experts=False)
    assert base.total == 1024 * 128 + 8 * 128
    assert base.down_proj == base.up_proj == 0
    assert base.flat_equivalent == 1024 * 16 * 128 + 8 * 128


def test_flop_terms_k_zero():
    terms = flop_terms(d=4, m_top=3, k=0, s=2, a=2)
    assert terms.total == terms.top_encode == 12


@pytest.mark.parametrize("with_experts", [True, False])
def test_model_round_trip_is_bit_exact(small_config, with_experts):
    model = init_model(small_config, np.random.default_rng(5), with_experts=with_experts)
    buf = io.BytesIO()
    write_model(buf, model)
    buf.seek(0)
    loaded = read_model(buf, expected=small_config)
    assert loaded.arrays().keys() == model.arrays().keys()
    for name, arr in model.arrays().items():
        np.testing.assert_array_equal(loaded.arrays()[name], arr)
    assert loaded.config.alpha == small_config.alpha


def test_read_model_errors(small_config, small_model):
    buf = io.BytesIO()
    write_model(buf, small_model)
    raw = buf.getvalue()

    with pytest.raises(ShardFormatError):
        read_model(io.BytesIO(b"XXXX" + raw[4:]))
    bumped = raw[:4] + struct.pack("<I", 99) + raw[8:]
    with pytest.raises(CheckpointVersionError):
        read_model(io.BytesIO(bumped))
    with pytest.raises(CorruptionError):
        read_model(io.BytesIO(raw[:-3]))
    other = small_config.model_copy(update={"m_top": 7})
    with pytest.raises(ShapeMismatchError, match="m_top"):
        read_model(io.BytesIO(raw), expected=other)


def test_read_model_takes_unstored_fields_from_expected(small_config):
    cfg = small_config.model_copy(update={"ortho_form": "de", "l1_form": "literal",
                                          "aux_coeff": 0.5, "k_aux": 3})
    buf = io.BytesIO()
    write_model(buf, init_model(cfg, np.random.default_rng(0)))

    bare = read_model(io.BytesIO(buf.getvalue())).config
    assert (bare.ortho_form, bare.l1_form, bare.k_aux) == ("ed", "outside_topk", 2 * cfg.k)
    assert bare.aux_coeff == pytest.approx(1 / 30)

    kept = read_model(io.BytesIO(buf.getvalue()), expected=cfg).config
    assert (kept.ortho_form, kept.l1_form, kept.aux_coeff, kept.k_aux) == ("de", "literal", 0.5, 3)
