from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from featreplay.config import from_dict
from featreplay.continual import (
    _training_rows,
    build_replay_batch,
    critic_step,
    feature_critic_step,
    feature_pairs,
    generator_step,
    init_engine,
    lambda_schedule,
    replay_terms,
    run_stream,
    take_snapshot,
    train_task,
)
from featreplay.errors import ConfigError, ContractViolation, NumericFailure

TINY = {
    "stream": "gauss2d-3",
    "steps_per_task": 4,
    "batch_size": 16,
    "critic_steps": 1,
    "model": {
        "generator_hidden": [16],
        "critic_hidden": [16],
        "encoder_hidden": [16],
        "classifier_hidden": [16],
        "feature_dim": 4,
        "feature_critic_hidden": [8],
        "prior_fit_steps": 20,
    },
    "evaluation": {"samples_per_condition": 40, "classifier_steps": 20, "log_every": 2},
}


def tiny(**replay) -> dict:
    return {**TINY, **replay}


def _state_at(t: int, **replay):
    state = init_engine(from_dict(tiny(**replay)))
    state.t = t
    state.snapshot = take_snapshot(state)
    return state


def test_lambda_schedule_values():
    assert lambda_schedule(2, 1e-3) == 1e-3
    assert lambda_schedule(11, 1e-3) == pytest.approx(1e-4)
    assert lambda_schedule(3, 0.02) == 0.01
    values = [lambda_schedule(t, 1e-3) for t in range(2, 12)]
    assert all(a > b for a, b in zip(values, values[1:]))
    with pytest.raises(ContractViolation):
        lambda_schedule(1, 1e-3)


def test_snapshot_is_a_frozen_copy():
    state = init_engine(from_dict(tiny()))
    train_task(state, state.stream.tasks[0])
    snap = state.snapshot = take_snapshot(state)
    assert snap.task_index == 1 and snap.generator.params.frozen
    assert np.array_equal(snap.generator.params.values, state.model.generator.params.values)
    assert np.array_equal(snap.critic.params.values, state.model.critic.params.values)
    before = snap.generator.params.values.copy()
    generator_step(state, state.stream.tasks[1])
    assert np.array_equal(snap.generator.params.values, before)
    assert not np.array_equal(state.model.generator.params.values, before)


def test_snapshot_holds_only_what_the_source_needs():
    assert take_snapshot(init_engine(from_dict(tiny(mode="align_image")))).critic is None
    learned = take_snapshot(init_engine(from_dict(tiny(feature_source="learned_encoder"))))
    assert learned.encoder is not None and learned.critic is None


def test_replay_conditions_are_uniform_over_previous_tasks():
    state = init_engine(from_dict({**tiny(), "stream": "gauss2d-5"}))
    state.t = 4
    state.snapshot = take_snapshot(state)
    batch = build_replay_batch(state, 10_000, with_current=False)
    counts = np.bincount(batch.conditions, minlength=4)
    assert counts[3] == 0
    assert stats.chisquare(counts[:3]).pvalue > 0.01


def test_replay_batch_contracts():
    state = _state_at(2)
    paired = build_replay_batch(state, 8)
    assert paired.x_current.pair_key == paired.x_snapshot.pair_key
    # the snapshot equals the live generator here, so paired rows coincide
    assert np.array_equal(paired.x_current.x.data, paired.x_snapshot.x.data)
    assert build_replay_batch(state, 8, with_current=False).x_current is None
    first = init_engine(from_dict(tiny()))
    with pytest.raises(ContractViolation):
        build_replay_batch(first, 8)


def test_unpaired_replay_uses_fresh_latents():
    state = _state_at(2, feature_source="learned_encoder", pairing="unpaired")
    batch = build_replay_batch(state, 8)
    assert batch.x_current.pair_key != batch.x_snapshot.pair_key
    assert not np.array_equal(batch.x_current.x.data, batch.x_snapshot.x.data)


@pytest.mark.parametrize("source", ["distilled", "prior", "learned_encoder"])
def test_feature_pairs_coincide_when_snapshot_equals_live(source):
    state = _state_at(2, feature_source=source)
    h_cur, h_hat, h_b = feature_pairs(state, build_replay_batch(state, 8))
    assert np.array_equal(h_cur.h.data, h_hat.h.data)
    assert (h_b is not None) == (source == "learned_encoder")
    feature_term, _ = replay_terms(state)
    if source != "learned_encoder":
        assert feature_term.item() == 0.0


def test_prior_source_requires_a_fitted_encoder():
    state = _state_at(2, feature_source="prior")
    state.model.prior_encoder.fitted = False
    with pytest.raises(ConfigError):
        feature_pairs(state, build_replay_batch(state, 4))


def test_first_task_total_is_the_current_task_loss():
    state = init_engine(from_dict(tiny(ac_weight=0.0)))
    bd = generator_step(state, state.stream.tasks[0])
    assert bd.total == bd.current_task and bd.lambda_t == 0.0
    assert bd.feature_term == 0.0 and bd.image_term == 0.0


def test_second_task_uses_the_schedule():
    state = _state_at(3, mode="align_combined", alpha=0.5, lambda_base=0.2)
    bd = generator_step(state, state.stream.tasks[2])
    assert bd.lambda_t == 0.1 and bd.alpha == 0.5


@pytest.mark.parametrize("mode", ["none", "align_feature", "align_image", "replay_data"])
def test_only_current_task_data_is_drawn(mode):
    _, _, report = run_stream(from_dict(tiny(mode=mode)))
    for entry in report.tasks:
        assert set(entry["real_draws"]) == {str(entry["t"] - 1)}


def test_joint_mode_draws_every_seen_task():
    _, _, report = run_stream(from_dict(tiny(mode="joint", steps_per_task=20)))
    assert set(report.tasks[2]["real_draws"]) == {"0", "1", "2"}


def test_replay_data_mixes_one_new_row_in_t():
    state = _state_at(3, mode="replay_data")
    _, conditions = _training_rows(state, state.stream.tasks[2], 16)
    assert len(conditions) == 16
    assert np.sum(conditions == 2) == round(16 / 3)
    assert set(conditions[conditions != 2]) <= {0, 1}


def test_learned_encoder_moves_only_in_the_pair_critic_step():
    state = _state_at(2, feature_source="learned_encoder")
    enc = state.model.encoder.params.values.copy()
    critic_step(state, state.stream.tasks[1])
    generator_step(state, state.stream.tasks[1])
    assert np.array_equal(state.model.encoder.params.values, enc)
    feature_critic_step(state)
    assert not np.array_equal(state.model.encoder.params.values, enc)


def test_single_task_stream_has_no_forgetfulness():
    _, ledger, report = run_stream(from_dict({**tiny(), "stream": "gauss2d-1"}))
    assert list(ledger.distances) == [(1, 1)]
    assert report.forgetfulness is None
    assert report.accuracy["A_half_t"] == 1


def test_ledger_is_complete_and_logs_cover_every_task():
    state, ledger, report = run_stream(from_dict(tiny()))
    assert ledger.is_complete() and len(ledger.distances) == 6
    assert report.forgetfulness is not None
    assert [r["step"] for r in state.loss_log if r["task"] == 2] == [0, 2, 3]


def test_numeric_failure_reports_step():
    state = init_engine(from_dict(tiny()))
    state.model.generator.params.values[:] = np.nan
    with pytest.raises(NumericFailure) as info:
        train_task(state, state.stream.tasks[0])
    assert info.value.step == 0


def test_tasks_must_arrive_in_order():
    state = init_engine(from_dict(tiny()))
    with pytest.raises(ContractViolation):
        train_task(state, state.stream.tasks[1])


def test_runs_are_deterministic():
    cfg = from_dict(tiny(mode="align_combined", alpha=0.5))
    a, b = run_stream(cfg), run_stream(cfg)
    assert a[2].to_json(include_timings=False) == b[2].to_json(include_timings=False)
    assert np.array_equal(a[0].model.generator.params.values, b[0].model.generator.params.values)
    other = run_stream(cfg, seed=1)
    assert not np.array_equal(a[0].model.generator.params.values, other[0].model.generator.params.values)
