"""src/classifier.py のテスト。"""

import math

import numpy as np
import pytest

from src.classifier import (
    DetectionPipeline,
    EpisodeMonitor,
    StepResult,
    StreamWorker,
    check_compatible,
    classify,
    defuzzify,
    episode_step,
    fuzzy_membership,
    run_operational,
)
from src.errors import ConfigurationError, ModeMismatchError, StreamOrderError
from src.memstore import BudgetAccountant
from src.models import DetectionEvent, DrowsinessAlert, FeatureVector
from src.strictmode import FormulaFlags, apply_mode, resolve_formulas
from src.trainer import Provenance, RunningStats, ThresholdSet, TrainedModel
from tests.conftest import make_wavelet, movement_trace, pb_like, pb_movement, up_movement

STRICT = FormulaFlags(sd_sqrt=False, gaussian_square=False, fod_abs=False)


def _unit_model(cfg) -> TrainedModel:
    """全特徴量の帯が [0, 2] (中心 1, 半幅 1) のモデル。"""
    n = 6
    return TrainedModel(
        thresholds=ThresholdSet((0.0,) * n, (2.0,) * n, (5.0,) * n, (6.0,) * n, (False,) * n),
        buffer=(make_wavelet(pb_like(30, 30)),),
        medoid_index=0,
        config=cfg,
        pb_stats=RunningStats(),
        anti_stats=RunningStats(),
        provenance=Provenance("2026-01-01T00:00:00Z", 10, 10, resolve_formulas(cfg)),
    )


def _vector(value: float) -> FeatureVector:
    return FeatureVector(value, value, value, value, value, value)


class TestFuzzyMembership:
    def test_centre_is_one(self):
        assert fuzzy_membership(10.0, 7.0, 13.0) == 1.0

    @pytest.mark.parametrize("value", [7.0, 13.0])
    def test_band_edge(self, value):
        assert fuzzy_membership(value, 7.0, 13.0) == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_merged_band_example(self):
        z = (9.0 - 10.25) / 2.75
        got = fuzzy_membership(9.0, 7.5, 13.0)
        assert got == pytest.approx(math.exp(-z * z / 2.0), abs=1e-15)
        assert got == pytest.approx(0.90185, abs=1e-5)

    def test_in_open_unit_interval(self):
        for v in np.linspace(-50.0, 50.0, 41):
            assert 0.0 < fuzzy_membership(float(v), 7.0, 13.0) <= 1.0

    def test_strict_formula(self):
        assert fuzzy_membership(13.0, 7.0, 13.0, STRICT) == pytest.approx(math.exp(-0.5))
        # z が負だと 1 を超える
        assert fuzzy_membership(7.0, 7.0, 13.0, STRICT) == pytest.approx(math.exp(0.5))

    @pytest.mark.parametrize("lt, ut", [(5.0, 5.0), (6.0, 5.0)])
    def test_invalid_band(self, lt, ut):
        with pytest.raises(ConfigurationError):
            fuzzy_membership(1.0, lt, ut)


class TestDefuzzify:
    def test_boundary_inclusive(self):
        assert defuzzify(3.6, 6, 0.6) is True

    def test_below_boundary(self):
        assert defuzzify(3.59, 6, 0.6) is False


class TestClassify:
    def test_all_centred(self, cfg):
        ev = classify(_vector(1.0), _unit_model(cfg), cfg)
        assert ev.fuzz_val == (1.0,) * 6
        assert ev.pass_sum == 6.0
        assert ev.is_pb

    def test_all_at_z_one_point_two(self, cfg):
        ev = classify(_vector(2.2), _unit_model(cfg), cfg)
        assert all(f == pytest.approx(0.48675, abs=1e-5) for f in ev.fuzz_val)
        assert ev.pass_sum / 6 == pytest.approx(0.487, abs=1e-3)
        assert not ev.is_pb

    def test_pass_sum_is_sum(self, cfg):
        fv = FeatureVector(1.0, 1.5, 0.2, 3.0, -1.0, 1.1)
        ev = classify(fv, _unit_model(cfg), cfg)
        assert ev.pass_sum == pytest.approx(sum(ev.fuzz_val), abs=1e-12)
        assert ev.is_pb == (ev.pass_sum / 6 >= cfg.pass_ratio)

    def test_one_feature_far_off_does_not_veto(self, cfg):
        fv = FeatureVector(1.0, 1.0, 1.0, 1.0, 1.0, 1000.0)
        ev = classify(fv, _unit_model(cfg), cfg)
        assert ev.pass_sum == pytest.approx(5.0)
        assert ev.is_pb

    def test_total_features_prefix(self, cfg):
        cfg = cfg.model_copy(update={"total_features": 3})
        fv = FeatureVector(1.0, 1.0, 1.0, 50.0, 50.0, 50.0)
        ev = classify(fv, _unit_model(cfg), cfg)
        assert len(ev.fuzz_val) == 3
        assert ev.is_pb


class TestEpisodeMonitor:
    def test_two_pbs_within_window(self):
        mon = EpisodeMonitor(10.0, 2)
        assert mon.step(True, 1.0) is None
        alert = mon.step(True, 8.0)
        assert isinstance(alert, DrowsinessAlert)
        assert alert.pb_times == (1.0, 8.0)
        assert alert.t_s == 8.0
        assert mon.pending == ()

    def test_pbs_too_far_apart(self):
        mon = EpisodeMonitor(10.0, 2)
        assert mon.step(True, 0.0) is None
        assert mon.step(True, 11.0) is None
        assert mon.pending == (11.0,)

    def test_window_edge_inclusive(self):
        mon = EpisodeMonitor(10.0, 2)
        mon.step(True, 0.0)
        assert mon.step(True, 10.0) is not None

    def test_non_pb_prunes_old_entries(self):
        mon = EpisodeMonitor(10.0, 2)
        mon.step(True, 0.0)
        mon.step(False, 12.0)
        assert mon.pending == ()

    def test_one_alert_per_episode(self):
        mon = EpisodeMonitor(10.0, 2)
        results = [mon.step(True, t) for t in (1.0, 2.0, 3.0)]
        assert [r is not None for r in results] == [False, True, False]

    def test_time_going_backwards(self):
        mon = EpisodeMonitor()
        mon.step(False, 5.0)
        with pytest.raises(StreamOrderError):
            mon.step(True, 4.0)

    def test_episode_step(self, cfg):
        mon = EpisodeMonitor.from_config(cfg)
        event = classify(_vector(1.0), _unit_model(cfg), cfg)
        assert episode_step(mon, event, 1.0) is None
        assert episode_step(mon, event, 2.0) is not None


class TestCheckCompatible:
    def test_same_config(self, cfg):
        check_compatible(_unit_model(cfg), cfg)

    def test_stream_settings_differ(self, cfg):
        with pytest.raises(ConfigurationError, match="window_n"):
            check_compatible(_unit_model(cfg), cfg.model_copy(update={"window_n": 20}))

    def test_mode_differs(self, cfg):
        with pytest.raises(ModeMismatchError):
            check_compatible(_unit_model(cfg), apply_mode(cfg, "strict"))

    def test_classifier_settings_may_differ(self, cfg):
        check_compatible(_unit_model(cfg), cfg.model_copy(update={"pass_ratio": 0.5}))


class TestDetectionPipeline:
    def test_prolonged_blink_detected(self, trained_model):
        trace = movement_trace([pb_movement(5)])
        events = list(run_operational(trace, trained_model))
        assert len(events) == 1
        assert isinstance(events[0], DetectionEvent)
        assert events[0].is_pb

    def test_upward_gaze_rejected(self, trained_model):
        trace = movement_trace([up_movement(5)])
        events = list(run_operational(trace, trained_model))
        assert len(events) == 1
        assert not events[0].is_pb

    def test_repeated_blinks_raise_alert(self, trained_model):
        trace = movement_trace([pb_movement(4), pb_movement(5)], gap=300)
        events = list(run_operational(trace, trained_model))
        assert [type(e) for e in events] == [DetectionEvent, DetectionEvent, DrowsinessAlert]
        assert events[2].count == 2

    def test_event_time_and_span(self, trained_model):
        cfg = trained_model.config
        pipeline = DetectionPipeline(trained_model)
        trace = movement_trace([pb_movement(5)])
        results = [pipeline.push(float(x)) for x in trace.amplitudes]
        hits = [(i, r) for i, r in enumerate(results) if r.detection is not None]
        assert len(hits) == 1
        index, result = hits[0]
        det = result.detection
        assert det.t_s == pytest.approx(index / cfg.sampling_rate_hz)
        assert det.start_index < det.end_index < index
        assert index - det.end_index == cfg.hold_samples
        assert det.decision_latency_ms >= 0.0

    def test_quiet_stream(self, trained_model):
        assert list(run_operational(np.zeros(2000), trained_model)) == []

    def test_reset(self, trained_model):
        pipeline = DetectionPipeline(trained_model)
        for x in pb_movement(5)[:150]:
            pipeline.push(float(x))
        pipeline.reset()
        assert pipeline.isolator.capture_len == 0
        assert len(pipeline.preprocessor.state.history) == 0

    def test_memory_charged(self, trained_model):
        acc = BudgetAccountant(32768)
        DetectionPipeline(trained_model, accountant=acc)
        assert set(acc.ledger()) == {"preprocess", "isolator"}

    def test_rejects_incompatible_stream(self, trained_model):
        cfg = trained_model.config.model_copy(update={"sampling_rate_hz": 500.0})
        with pytest.raises(ConfigurationError):
            DetectionPipeline(trained_model, cfg)


class TestStreamWorker:
    def test_outputs_in_order(self, trained_model):
        outputs = []
        worker = StreamWorker(DetectionPipeline(trained_model), outputs.append, maxsize=64)
        worker.start()
        try:
            trace = movement_trace([pb_movement(4), pb_movement(5)])
            worker.submit(trace.amplitudes)
            worker.drain()
        finally:
            worker.stop()
        assert worker.processed == len(trace)
        assert [type(o) for o in outputs] == [DetectionEvent, DetectionEvent, DrowsinessAlert]
        assert worker.error is None
        assert not worker.running

    def test_reset_runs_on_worker(self, trained_model, mocker):
        pipeline = DetectionPipeline(trained_model)
        spy = mocker.spy(pipeline, "reset")
        worker = StreamWorker(pipeline, lambda _: None)
        worker.start()
        try:
            worker.submit([0.0] * 10)
            worker.reset()
            worker.drain()
        finally:
            worker.stop()
        assert spy.call_count == 1

    def test_error_recorded(self, mocker):
        pipeline = mocker.Mock()
        pipeline.push.side_effect = StreamOrderError("boom")
        worker = StreamWorker(pipeline, lambda _: None)
        worker.start()
        try:
            worker.submit([0.0])
            worker.drain()
        finally:
            worker.stop()
        assert isinstance(worker.error, StreamOrderError)
        assert worker.processed == 0

    def test_stops_processing_after_failure(self, mocker, caplog):
        det = mocker.Mock(spec=DetectionEvent)
        pipeline = mocker.Mock()
        pipeline.push.side_effect = [
            StepResult(mocker.Mock(), det, None),
            RuntimeError("corrupted state"),
            StepResult(mocker.Mock(), det, None),
            StepResult(mocker.Mock(), det, None),
        ]
        outputs = []
        worker = StreamWorker(pipeline, outputs.append)
        worker.start()
        try:
            with caplog.at_level("ERROR", logger="src.classifier"):
                worker.submit([0.1, 0.2, 0.3, 0.4])
                worker.reset()
                worker.drain()
        finally:
            worker.stop()
        assert outputs == [det]
        assert pipeline.push.call_count == 2
        pipeline.reset.assert_not_called()
        assert worker.processed == 1
        assert worker.discarded == 3
        assert isinstance(worker.error, RuntimeError)
        assert any(r.exc_info and r.exc_info[0] is RuntimeError for r in caplog.records)

    def test_forwards_detection_and_alert(self, mocker):
        det = mocker.Mock(spec=DetectionEvent)
        alert = mocker.Mock(spec=DrowsinessAlert)
        pipeline = mocker.Mock()
        pipeline.push.return_value = StepResult(mocker.Mock(), det, alert)
        outputs = []
        worker = StreamWorker(pipeline, outputs.append)
        worker.start()
        try:
            worker.submit([1.0])
            worker.drain()
        finally:
            worker.stop()
        assert outputs == [det, alert]
