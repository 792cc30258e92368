import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ottakit import engine
from ottakit.engine import (
    AdaptConfig,
    AdaptState,
    PretrainedModel,
    frozen_predictions,
    initial_finetune,
    label_schedule,
    otta_step,
    run_group,
    run_subject,
    schedule_stream,
)
from ottakit.evaluation import evaluate
from ottakit.exceptions import AdaptationFailure, ConfigurationError, ContractViolation
from ottakit.signals import TARGET, synth_population, take_initial


@pytest.fixture(scope="module")
def target(small_synth):
    return synth_population(small_synth, TARGET, 3)


def test_label_schedule_examples():
    assert label_schedule(100, 10) == {9, 19, 29, 39, 49, 59, 69, 79, 89, 99}
    assert label_schedule(100, None) == set()
    assert label_schedule(95, 50) == {49}
    assert label_schedule(5, 100) == set()
    with pytest.raises(ConfigurationError):
        label_schedule(0, 10)


@given(st.integers(1, 2000), st.one_of(st.none(), st.integers(1, 300)))
def test_label_schedule_count(T, F):
    s = label_schedule(T, F)
    assert len(s) == (0 if F is None else T // F)
    assert all(0 <= i < T for i in s)


def test_adapt_config_validation():
    with pytest.raises(ConfigurationError):
        AdaptConfig(injection_frequency=1)
    with pytest.raises(ConfigurationError):
        AdaptConfig(reps_per_batch=0)
    with pytest.raises(ConfigurationError):
        AdaptConfig(lr_test=-1e-3)
    with pytest.raises(ConfigurationError):
        AdaptConfig(cap_unlabel=64, cap_label=64)


@pytest.mark.parametrize("T,F,n_eval", [(100, 10, 90), (100, None, 100), (95, 50, 94)])
def test_exclusion_accounting(small_pretrained, small_synth, T, F, n_eval):
    stream = synth_population(small_synth.replace(T=T, n_init=0), TARGET, 1)[0]
    cfg = AdaptConfig(injection_frequency=F, reps_per_batch=1)
    log = run_subject(small_pretrained, schedule_stream(stream, cfg), cfg)
    assert len(log.predictions) == n_eval == evaluate(log).n_eval
    assert log.labeled_indices == label_schedule(T, F)
    assert not {p.index for p in log.predictions} & log.labeled_indices
    assert log.T == T


def test_k_gradient_steps_per_event(small_pretrained, target, monkeypatch):
    calls = []
    real = engine.loss_and_grads

    def counting(*args, **kwargs):
        calls.append(args[1].shape)
        return real(*args, **kwargs)

    monkeypatch.setattr(engine, "loss_and_grads", counting)
    cfg = AdaptConfig(injection_frequency=10, reps_per_batch=3)
    stream = schedule_stream(target[0], cfg)
    run_subject(small_pretrained, stream, cfg)
    assert len(calls) == 3 * stream.T
    assert all(shape[1] == 32 for shape in calls)


def test_zero_lr_reproduces_frozen_model(small_pretrained, target):
    cfg = AdaptConfig(lr_test=0.0)
    for stream in target:
        adapted = run_subject(small_pretrained, stream, cfg).predictions
        frozen = frozen_predictions(small_pretrained, [stream])[0].predictions
        assert [(p.index, p.pred_sbp, p.pred_dbp) for p in adapted] == \
               [(p.index, p.pred_sbp, p.pred_dbp) for p in frozen]


def test_adaptation_changes_predictions(small_pretrained, target):
    adapted = run_subject(small_pretrained, target[0], AdaptConfig())
    frozen = frozen_predictions(small_pretrained, target[:1])[0]
    assert adapted.predictions[0].pred_sbp != frozen.predictions[0].pred_sbp


def test_pretrained_model_is_not_mutated(small_pretrained, target):
    before = {k: v.copy() for k, v in small_pretrained.params.items()}
    run_subject(small_pretrained, target[0], AdaptConfig(injection_frequency=5, init_labels=5))
    assert all(np.array_equal(before[k], small_pretrained.params[k]) for k in before)


def test_runs_are_deterministic_and_group_independent(small_pretrained, target):
    cfg = AdaptConfig(injection_frequency=10, seed=3)
    streams = [schedule_stream(s, cfg) for s in target]
    grouped = run_group(small_pretrained, streams, cfg)
    reordered = run_group(small_pretrained, streams[::-1], cfg)[::-1]
    alone = [run_subject(small_pretrained, s, cfg) for s in streams]
    for a, b, c in zip(grouped, reordered, alone):
        pa = np.array([(p.pred_sbp, p.pred_dbp) for p in a.predictions])
        np.testing.assert_array_equal(pa, np.array([(p.pred_sbp, p.pred_dbp) for p in b.predictions]))
        np.testing.assert_allclose(pa, np.array([(p.pred_sbp, p.pred_dbp) for p in c.predictions]), rtol=1e-12)
    again = run_group(small_pretrained, streams, cfg)
    assert [p.pred_sbp for p in again[0].predictions] == [p.pred_sbp for p in grouped[0].predictions]


def test_seed_changes_trajectory(small_pretrained, target):
    a = run_subject(small_pretrained, target[0], AdaptConfig(seed=0))
    b = run_subject(small_pretrained, target[0], AdaptConfig(seed=1))
    assert a.predictions[-1].pred_sbp != b.predictions[-1].pred_sbp


def test_otta_step_matches_run_subject(small_pretrained, target):
    cfg = AdaptConfig(injection_frequency=4, reps_per_batch=2)
    stream = schedule_stream(target[1], cfg)
    state = AdaptState.fresh(small_pretrained, cfg, stream.subject_id)
    preds = []
    for ev in stream.events:
        y, state = otta_step(state, ev, cfg)
        if ev.label is None:
            preds.append(y)
        else:
            assert y is None
    log = run_subject(small_pretrained, stream, cfg)
    np.testing.assert_allclose(np.array(preds), [(p.pred_sbp, p.pred_dbp) for p in log.predictions], rtol=1e-12)
    assert state.events_seen == stream.T
    assert state.buffer.sizes() == (30, 10)


def test_initial_labels_fine_tune_before_stream(small_pretrained, target):
    stream = target[0]
    cfg0 = AdaptConfig(init_labels=0, lr_test=0.0)
    cfg5 = AdaptConfig(init_labels=5, lr_test=1e-2)
    p0 = initial_finetune(small_pretrained.params, stream.init_labeled[:0], cfg0, small_pretrained.stats)
    assert all(np.array_equal(p0[k], small_pretrained.params[k]) for k in p0)
    p5 = initial_finetune(small_pretrained.params, stream.init_labeled[:5], cfg5, small_pretrained.stats, rng=0)
    assert any(not np.array_equal(p5[k], small_pretrained.params[k]) for k in p5)
    with pytest.raises(ContractViolation):
        initial_finetune(small_pretrained.params, stream.init_labeled[:3], cfg5, small_pretrained.stats)
    with pytest.raises(ConfigurationError):
        run_subject(small_pretrained, stream, AdaptConfig(init_labels=11))


def test_take_initial_feeds_ingested_streams(small_pretrained, small_synth):
    bare = synth_population(small_synth.replace(n_init=0), TARGET, 1)[0]
    s = take_initial(bare, 10)
    assert len(s.init_labeled) == 10 and s.T == bare.T - 10
    log = run_subject(small_pretrained, s, AdaptConfig(init_labels=10, reps_per_batch=1))
    assert len(log.predictions) == s.T


def test_lockstep_group_requires_matching_layout(small_pretrained, target):
    a = schedule_stream(target[0], AdaptConfig(injection_frequency=10))
    b = schedule_stream(target[1], AdaptConfig(injection_frequency=5))
    with pytest.raises(ContractViolation):
        run_group(small_pretrained, [a, b], AdaptConfig())
    assert run_group(small_pretrained, [], AdaptConfig()) == []


def test_divergence_raises_adaptation_failure(small_pretrained, target):
    with pytest.raises(AdaptationFailure) as exc:
        run_subject(small_pretrained, target[0], AdaptConfig(lr_test=1e8))
    assert exc.value.event_index is not None
    assert target[0].subject_id in exc.value.subject_id


def test_geometry_mismatch_is_rejected(small_pretrained, small_synth):
    stream = synth_population(small_synth.replace(L=32), TARGET, 1)[0]
    with pytest.raises(ConfigurationError):
        run_subject(small_pretrained, stream, AdaptConfig())


def test_prediction_log_jsonl(tmp_path, small_pretrained, target):
    cfg = AdaptConfig(reps_per_batch=1, injection_frequency=10)
    log = run_subject(small_pretrained, schedule_stream(target[0], cfg), cfg)
    path = tmp_path / "log.jsonl"
    log.write_jsonl(path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(log.predictions) == 36
    assert isinstance(PretrainedModel(small_pretrained.params, small_pretrained.stats).geometry, dict)


def test_group_with_per_run_seeds_matches_single_runs(small_pretrained, target):
    cfg = AdaptConfig(injection_frequency=10, reps_per_batch=2)
    stream = schedule_stream(target[0], cfg)
    grouped = run_group(small_pretrained, [stream, stream, stream], cfg, seeds=[5, 6, 5])
    for seed, log in zip([5, 6, 5], grouped):
        alone = run_subject(small_pretrained, stream, cfg.replace(seed=seed))
        np.testing.assert_allclose([p.pred_sbp for p in log.predictions], [p.pred_sbp for p in alone.predictions],
                                   rtol=1e-12)
    assert grouped[0].predictions[-1].pred_sbp != grouped[1].predictions[-1].pred_sbp
    with pytest.raises(ContractViolation):
        run_group(small_pretrained, [stream], cfg, seeds=[1, 2])
