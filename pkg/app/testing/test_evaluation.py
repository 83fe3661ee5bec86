import numpy as np
import pytest

from components.datagen import DictionarySpec, plant_dictionary, sample_activations, sample_paired_views
from components.evaluation import (
    EVAL_REPORT_KEYS,
    EvalReport,
    EvalSpec,
    absorption_from_codes,
    absorption_score,
    evaluate,
    feature_report,
    one_minus_ev,
    one_minus_ev_from,
    paired_divergence,
    recovery_score,
)
from components.hsae_model import HsaeConfig, HsaeModel, TopLevelParams, forward_hsae, init_model
from conftest import unit_rows
from utils.errors import InvalidArgumentError, UndefinedMetricError


def _decoder_model(D):
    D = np.asarray(D, dtype=float)
    cfg = HsaeConfig(d=D.shape[0], m_top=D.shape[1], k=1, a=1, s=1)
    return HsaeModel(config=cfg, top=TopLevelParams(E=D.T.copy(), D=D))


@pytest.fixture
def dictionary():
    return plant_dictionary(DictionarySpec(d=16, n_parents=4, n_children=3, s_true=2, seed=2))


def test_one_minus_ev_examples(rng):
    X = rng.standard_normal((10, 3))
    assert one_minus_ev_from(X, X) == 0.0
    assert one_minus_ev_from(X, np.tile(X.mean(axis=0), (10, 1))) == pytest.approx(1.0)
    assert one_minus_ev_from([[1.0, 0.0], [-1.0, 0.0]], np.zeros((2, 2))) == 1.0


def test_one_minus_ev_errors():
    with pytest.raises(InvalidArgumentError):
        one_minus_ev_from([[1.0, 2.0]], [[1.0, 2.0]])
    with pytest.raises(UndefinedMetricError):
        one_minus_ev_from(np.ones((4, 2)), np.zeros((4, 2)))


def test_one_minus_ev_is_chunk_invariant(small_model, rng):
    X = unit_rows(rng, 13, small_model.config.d)
    direct = one_minus_ev_from(X, forward_hsae(small_model, X).x_hat)
    assert one_minus_ev(small_model, X, chunk_rows=4) == pytest.approx(direct, rel=1e-12)


def test_recovery_of_permuted_parents(dictionary, rng):
    extra = unit_rows(rng, 3, dictionary.d)
    D = np.hstack([dictionary.parent_vecs[[2, 0, 3, 1]].T, extra.T])
    result = recovery_score(_decoder_model(D), dictionary)
    assert result.mean_max_cosine == pytest.approx(1.0)
    assert [(p, j) for p, j, _ in result.matching] == [(0, 1), (1, 3), (2, 0), (3, 2)]


def test_recovery_is_sign_sensitive(dictionary):
    D = dictionary.parent_vecs.T.copy()
    D[:, 1] *= -1
    for matcher in ("greedy", "optimal"):
        assert recovery_score(_decoder_model(D), dictionary, matcher).mean_max_cosine < 1.0


def test_recovery_of_random_decoder_is_low(rng):
    dictionary = plant_dictionary(DictionarySpec(d=256, n_parents=16, s_true=2, seed=0))
    D = unit_rows(rng, 16, 256).T
    assert recovery_score(_decoder_model(D), dictionary).mean_max_cosine < 0.3


def test_optimal_matching_beats_greedy(rng):
    dictionary = plant_dictionary(DictionarySpec(d=32, n_parents=8, s_true=2, seed=4))
    D = unit_rows(rng, 10, 32).T
    model = _decoder_model(D)
    greedy = recovery_score(model, dictionary, "greedy")
    optimal = recovery_score(model, dictionary, "optimal")
    assert optimal.mean_max_cosine >= greedy.mean_max_cosine - 1e-12
    assert len({j for _, j, _ in optimal.matching}) == 8


def test_recovery_needs_enough_latents(dictionary):
    with pytest.raises(InvalidArgumentError):
        recovery_score(_decoder_model(dictionary.parent_vecs[:3].T), dictionary)


def test_paired_divergence_ranks_only_selected_latents():
    model = _decoder_model(np.eye(4))
    model.config = model.config.model_copy(update={"alpha": 0.0})
    near = ([0.9, 0.1, 0, 0], [0.8, 0.2, 0, 0])
    swapped = ([0.9, 0.1, 0, 0], [0.1, 0.9, 0, 0])
    # k=1, so each set is the one selected latent even though top_n is 2
    assert paired_divergence(model, [near], top_n=2) == 0.0
    assert paired_divergence(model, [swapped], top_n=2) == 2.0
    assert paired_divergence(model, [near, swapped], top_n=2) == 1.0


def test_paired_divergence(small_model, rng):
    X = unit_rows(rng, 3, small_model.config.d)
    assert paired_divergence(small_model, list(zip(X, X)), top_n=2) == 0.0
    with pytest.raises(InvalidArgumentError):
        paired_divergence(small_model, [], top_n=2)
    with pytest.raises(InvalidArgumentError):
        paired_divergence(small_model, list(zip(X, X)), top_n=7)


def _split_positives(n_pos, n_neg, m):
    """Codes where the positives are divided evenly among m latents."""
    Z = np.zeros((n_pos + n_neg, m))
    for i in range(n_pos):
        Z[i, i % m] = 1.0
    attr = np.arange(n_pos + n_neg) < n_pos
    return Z, attr


def test_absorption_single_carrier(rng):
    attr = np.arange(40) < 20
    Z = np.column_stack([attr.astype(float), rng.random(40)])
    assert absorption_from_codes(Z, attr) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("m, expected", [(2, 0.5), (4, 0.75)])
def test_absorption_even_split(m, expected):
    Z, attr = _split_positives(40, 20, m)
    assert absorption_from_codes(Z, attr) == pytest.approx(expected)


def test_absorption_undefined_for_small_classes():
    Z, attr = _split_positives(5, 30, 2)
    with pytest.raises(UndefinedMetricError):
        absorption_from_codes(Z, attr)
    with pytest.raises(UndefinedMetricError):
        absorption_from_codes(np.zeros((30, 2)), np.arange(30) < 15)


def test_feature_report_ordering_and_inactive_latents():
    D = np.eye(4)[:, :3]
    model = _decoder_model(D)
    model.config = model.config.model_copy(update={"alpha": 0.0})
    X = np.array([[0.9, 0.1, 0, 0], [0.2, 0.8, 0, 0], [0.6, 0.4, 0, 0], [0.3, 0.7, 0, 0]])
    report = feature_report(model, X, meta=["a", "b", "c", "d"], top_m=5)
    assert report.latents[2] == []
    assert [h.row for h in report.latents[0]] == [0, 2]
    assert [h.row for h in report.latents[1]] == [1, 3]
    assert [h.meta for h in report.latents[1]] == ["b", "d"]
    assert report.sublatents == {}


def test_feature_report_hierarchy(small_model, rng):
    cfg = small_model.config
    X = unit_rows(rng, 40, cfg.d)
    trace = forward_hsae(small_model, X)
    report = feature_report(small_model, X, top_m=50, chunk_rows=16)
    for j, hits in report.latents.items():
        values = [h.value for h in hits]
        assert values == sorted(values, reverse=True)
        assert all(j in trace.indices[h.row] for h in hits)
    for j, subs in report.sublatents.items():
        for i, hits in subs.items():
            for h in hits:
                slot = trace.indices[h.row].tolist().index(j)
                assert trace.low_indices[h.row, slot] == i
    serialized = report.to_dict()
    assert set(serialized) == {"latents", "sublatents"}


def test_eval_report_serialization():
    report = EvalReport(one_minus_ev=0.25, paired_divergence=3.0, dead_fraction=0.0)
    data = report.to_dict()
    assert tuple(data) == EVAL_REPORT_KEYS
    assert EvalReport.from_dict(data) == report
    assert report.summary()["1-EV"] == 0.25
    with pytest.raises(InvalidArgumentError):
        EvalReport.from_dict({**data, "extra": 1})


def test_evaluate_fills_available_metrics():
    spec = DictionarySpec(d=16, n_parents=4, n_children=3, s_true=2, parents_per_sample=1.5, seed=3)
    dictionary = plant_dictionary(spec)
    batch = sample_activations(dictionary, 200, spec)
    pairs = sample_paired_views(dictionary, 10, spec)
    model = init_model(HsaeConfig(d=16, m_top=8, k=2, a=4, s=2), np.random.default_rng(0))

    report = evaluate(model, batch.X, EvalSpec(top_n=2), dictionary=dictionary, batch=batch,
                      pairs=pairs, dead_fraction=0.5)
    assert 0 <= report.one_minus_ev
    assert len(report.recovery.matching) == 4
    assert 0 <= report.paired_divergence <= 4
    assert report.absorption is None or 0 <= report.absorption <= 1
    assert report.dead_fraction == 0.5

    bare = evaluate(model, batch.X, EvalSpec(max_rows=50))
    assert bare.recovery is None and bare.paired_divergence is None and bare.absorption is None


def test_absorption_score_runs_the_model():
    model = _decoder_model(np.eye(4)[:, :2])
    model.config = model.config.model_copy(update={"alpha": 0.0})
    attr = np.arange(40) < 20
    X = np.where(attr[:, None], [1.0, 0, 0, 0], [0, 1.0, 0, 0])
    assert absorption_score(model, X, attr, chunk_rows=7) == pytest.approx(0.0, abs=1e-9)
