import json

import numpy as np
import pytest

from components.datagen import DictionarySpec, plant_dictionary, sample_activations
from components.evaluation import one_minus_ev
from components.hsae_model import HsaeConfig, forward_hsae, init_model
from components.objective import LossBreakdown
from components.optim import OptConfig, OptState
from components.shards import BatchStream, shard_path, write_shard
from components.trainer import (
    CHECKPOINT_NAME,
    RUN_LOG_NAME,
    DeadLatentTracker,
    RunLog,
    RunRecord,
    Toggles,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    update_dead_tracker,
)
from utils.errors import (
    CorruptionError,
    InvalidArgumentError,
    NumericFailureError,
    ShapeMismatchError,
)

TINY_MODEL = HsaeConfig(d=16, m_top=32, k=2, a=4, s=2)


def tiny_config(**overrides):
    base = dict(model=TINY_MODEL, opt=OptConfig(lr_peak=5e-3, warmup_steps=5), epochs=2,
                batch_size=50, ema_window_batches=10, checkpoint_every=0, seed=4)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    spec = DictionarySpec(d=16, n_parents=8, n_children=3, s_true=2, seed=1)
    return sample_activations(plant_dictionary(spec), 1000, spec)


def test_tracker_decay_and_threshold():
    tracker = DeadLatentTracker.fresh(tiny_config(ema_window_batches=300))
    assert tracker.decay == pytest.approx(0.99667, abs=1e-5)
    assert tracker.threshold == pytest.approx(1 / (300 * 50))
    assert tracker.dead_fraction() == 0.0
    assert tracker.dead_sublatent_fraction() is None


def test_tracker_rates_converge(small_config, small_model, rng):
    X = rng.standard_normal((4, small_config.d))
    trace = forward_hsae(small_model, X)
    cfg = TrainConfig(model=small_config, batch_size=4, ema_window_batches=5)
    tracker = DeadLatentTracker.fresh(cfg)
    for _ in range(200):
        tracker = update_dead_tracker(tracker, trace)
    fired = trace.selection_mask().mean(axis=0)
    np.testing.assert_allclose(tracker.rates, fired, atol=1e-12)
    never = fired == 0
    assert np.all(tracker.dead_mask()[never])
    assert tracker.batches_seen == 200
    assert tracker.sub_rates.sum() == pytest.approx(small_config.k, rel=1e-9)


def test_tracker_decays_geometrically(small_config, small_model, rng):
    X = rng.standard_normal((2, small_config.d))
    trace = forward_hsae(small_model, X)
    cfg = TrainConfig(model=small_config, batch_size=2, ema_window_batches=4)
    tracker = DeadLatentTracker.fresh(cfg)
    tracker.rates[:] = 1.0
    updated = update_dead_tracker(tracker, trace)
    never = ~trace.selection_mask().any(axis=0)
    np.testing.assert_allclose(updated.rates[never], 0.75)
    assert tracker.batches_seen == 0


def test_run_log_requires_increasing_steps():
    def record(step):
        return RunRecord(step=step, epoch=0, lr=1e-3, losses=LossBreakdown(1.0, 0, 0, 0, 0, 1.0),
                         dead_fraction=0.0, wall_time=0.5)

    log = RunLog()
    log.append(record(3))
    with pytest.raises(InvalidArgumentError):
        log.append(record(3))
    assert json.loads(record(4).to_json())["recon"] == 1.0


def test_checkpoint_round_trip(tmp_path, small_config, rng):
    cfg = TrainConfig(model=small_config, batch_size=4)
    model = init_model(small_config, np.random.default_rng(0))
    state = OptState.fresh(model)
    state = OptState(step=17, m=state.m.map_arrays(lambda a: rng.standard_normal(a.shape)),
                     v=state.v.map_arrays(lambda a: rng.random(a.shape)))
    tracker = DeadLatentTracker.fresh(cfg)
    tracker = DeadLatentTracker(window=tracker.window, batch_size=4,
                                rates=rng.random(small_config.m_top),
                                sub_rates=rng.random((small_config.m_top, small_config.a)),
                                batches_seen=9)
    path = tmp_path / CHECKPOINT_NAME
    save_checkpoint(path, cfg, model, state, tracker)
    ckpt = load_checkpoint(path, expected=small_config)

    assert ckpt.config == cfg
    assert ckpt.opt_state.step == 17
    for name, arr in model.arrays().items():
        np.testing.assert_array_equal(ckpt.model.arrays()[name], arr)
        np.testing.assert_array_equal(ckpt.opt_state.m.arrays()[name], state.m.arrays()[name])
        np.testing.assert_array_equal(ckpt.opt_state.v.arrays()[name], state.v.arrays()[name])
    np.testing.assert_array_equal(ckpt.tracker.rates, tracker.rates)
    np.testing.assert_array_equal(ckpt.tracker.sub_rates, tracker.sub_rates)
    assert ckpt.tracker.batches_seen == 9
    assert not (tmp_path / (CHECKPOINT_NAME + ".tmp")).exists()


def test_checkpoint_errors(tmp_path, small_config):
    cfg = TrainConfig(model=small_config, batch_size=4)
    model = init_model(small_config, np.random.default_rng(0))
    path = tmp_path / CHECKPOINT_NAME
    save_checkpoint(path, cfg, model, OptState.fresh(model))

    with pytest.raises(ShapeMismatchError, match="m_top"):
        load_checkpoint(path, expected=small_config.model_copy(update={"m_top": 12}))

    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CorruptionError):
        load_checkpoint(path)


def test_training_reduces_reconstruction_error(tiny_data):
    cfg = tiny_config(epochs=3)
    initial = init_model(cfg.model, np.random.default_rng(cfg.seed))
    result = train(cfg, tiny_data)
    assert result.opt_state.step == 3 * 20
    assert len(result.log.records) == 60
    assert one_minus_ev(result.model, tiny_data.X) < one_minus_ev(initial, tiny_data.X)
    assert result.model.top.E.dtype == np.float32


def test_baseline_with_toggles_off_reports_zero_terms(tiny_data):
    cfg = tiny_config(mode="baseline", epochs=1,
                      toggles=Toggles(ortho=False, l1=False, top_recon=False))
    result = train(cfg, tiny_data)
    assert result.model.is_baseline
    for record in result.log.records:
        assert record.losses.ortho == record.losses.sparse == record.losses.top_recon == 0.0
        assert record.losses.total == record.losses.recon


def test_baseline_with_aux_trains(tiny_data):
    result = train(tiny_config(mode="baseline_with_aux", epochs=1), tiny_data)
    assert all(r.losses.aux_dead >= 0 for r in result.log.records)
    assert result.tracker.sub_rates is None


def test_resume_is_bit_identical(tiny_data, tmp_path):
    full_opt = OptConfig(lr_peak=5e-3, warmup_steps=5, total_steps=40)
    full = train(tiny_config(opt=full_opt), tiny_data)

    train(tiny_config(opt=full_opt, epochs=1), tiny_data, out_dir=tmp_path)
    resumed = train(tiny_config(opt=full_opt), tiny_data, out_dir=tmp_path,
                    resume=tmp_path / CHECKPOINT_NAME)

    assert resumed.opt_state.step == 40
    for name, arr in full.model.arrays().items():
        np.testing.assert_array_equal(resumed.model.arrays()[name], arr)
    assert resumed.log.records[0].step == 21
    assert resumed.log.records[0].losses == full.log.records[20].losses

    lines = (tmp_path / RUN_LOG_NAME).read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == list(range(1, 41))


def test_frozen_zero_experts_match_baseline(tiny_data):
    toggles = Toggles(l1=False, top_recon=False)
    hsae = train(tiny_config(epochs=1, expert_init="zero", freeze_experts=True, toggles=toggles),
                 tiny_data)
    base = train(tiny_config(epochs=1, mode="baseline", toggles=toggles), tiny_data)
    assert [r.losses.total for r in hsae.log.records] == [r.losses.total for r in base.log.records]
    np.testing.assert_array_equal(hsae.model.top.D, base.model.top.D)
    assert not np.any(hsae.model.experts.dec)


def test_train_from_shards_with_prefetch(tiny_data, tmp_path):
    paths = [shard_path(tmp_path, i) for i in range(2)]
    write_shard(paths[0], tiny_data.X[:600])
    write_shard(paths[1], tiny_data.X[600:])
    cfg = tiny_config(epochs=1)
    from_shards = train(cfg, BatchStream(paths, cfg.batch_size), threads=2)
    # float32 shards feed the same rows as the in-memory float32 matrix
    in_memory = train(cfg, tiny_data.X.astype(np.float32))
    np.testing.assert_array_equal(from_shards.model.top.E, in_memory.model.top.E)


def test_train_rejects_mismatched_data(tiny_data):
    with pytest.raises(InvalidArgumentError):
        train(tiny_config(model=HsaeConfig(d=8, m_top=32, k=2, a=4, s=2)), tiny_data)
    with pytest.raises(InvalidArgumentError):
        train(tiny_config(batch_size=5000), tiny_data)
    with pytest.raises(InvalidArgumentError):
        train(tiny_config(opt=OptConfig(warmup_steps=1000)), tiny_data)


def test_numeric_failure_keeps_log(tiny_data, tmp_path, mocker):
    mocker.patch("components.trainer.backward", side_effect=NumericFailureError("boom"))
    with pytest.raises(NumericFailureError):
        train(tiny_config(), tiny_data, out_dir=tmp_path)
    assert (tmp_path / RUN_LOG_NAME).exists()
    assert not (tmp_path / CHECKPOINT_NAME).exists()
