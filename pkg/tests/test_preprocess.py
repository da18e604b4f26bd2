"""src/preprocess.py のテスト。"""

import math

import numpy as np
import pytest

from src.config import HistorySource
from src.errors import StreamOrderError
from src.models import EogSample, EogTrace
from src.preprocess import (
    PreprocessState,
    Preprocessor,
    fod_step,
    preprocess_stream,
    preprocess_trace,
    smooth_step,
)


def _smooth_oracle(xs, window, threshold, source):
    """毎ステップ履歴の平均を計算し直す素朴な実装。"""
    history: list[float] = []
    out = []
    for x in xs:
        if not history:
            y = x
        else:
            window_vals = history[-window:]
            if min(window_vals) == max(window_vals):
                mean = window_vals[0]
            else:
                mean = math.fsum(window_vals) / len(window_vals)
            y = x if abs(x - mean) > threshold else mean
        history.append(x if source is HistorySource.RAW else y)
        out.append(y)
    return out


def _steep_movement(depth: float = 0.7) -> np.ndarray:
    """急峻な下降 → 保持 → 復帰の振れ (前後に 0 区間)。"""
    return np.concatenate([
        np.zeros(60),
        -depth * np.arange(1, 21) / 20,
        np.full(100, -depth),
        -depth * (1.0 - np.arange(1, 26) / 25),
        np.zeros(100),
    ])


class TestSmoothStep:
    def test_constant_input(self, cfg):
        state = PreprocessState.create(cfg)
        assert all(smooth_step(state, 0.7, cfg) == 0.7 for _ in range(60))

    @pytest.mark.parametrize("source", list(HistorySource))
    def test_constant_input_gives_exact_zero_without_clearance(self, cfg, source):
        cfg = cfg.model_copy(update={"fod_clearance_threshold": 0.0, "history_source": source})
        assert not np.any(preprocess_trace([0.7] * 200, cfg))

    def test_zero_threshold_passes_increasing_input(self, cfg):
        cfg = cfg.model_copy(update={"r_thresh": 0.0})
        state = PreprocessState.create(cfg)
        xs = [0.01 * i for i in range(80)]
        assert [smooth_step(state, x, cfg) for x in xs] == xs

    def test_first_sample_passes_through(self, cfg):
        state = PreprocessState.create(cfg)
        assert smooth_step(state, -3.2, cfg) == -3.2

    @pytest.mark.parametrize("source", list(HistorySource))
    def test_matches_resummation_oracle(self, cfg, source):
        cfg = cfg.model_copy(update={"history_source": source})
        rng = np.random.default_rng(7)
        xs = [float(v) * cfg.lsb for v in rng.integers(-3, 4, 100)]
        state = PreprocessState.create(cfg)
        got = [smooth_step(state, x, cfg) for x in xs]
        assert got == _smooth_oracle(xs, cfg.window_n, cfg.regularization_threshold, source)

    def test_uniform_input_matches_oracle(self, cfg):
        rng = np.random.default_rng(9)
        xs = [float(v) for v in rng.uniform(-1.0, 1.0, 100)]
        state = PreprocessState.create(cfg)
        got = [smooth_step(state, x, cfg) for x in xs]
        assert got == _smooth_oracle(xs, cfg.window_n, cfg.regularization_threshold, cfg.history_source)

    def test_default_history_holds_smoothed_values(self, cfg):
        state = PreprocessState.create(cfg)
        xs = [0.0] + [cfg.lsb] * 10
        ys = [smooth_step(state, x, cfg) for x in xs]
        assert ys == [0.0] * 11
        assert list(state.history) == ys

    def test_raw_history_holds_inputs(self, cfg):
        cfg = cfg.model_copy(update={"history_source": HistorySource.RAW})
        state = PreprocessState.create(cfg)
        xs = [0.0] + [cfg.lsb] * 10
        for x in xs:
            smooth_step(state, x, cfg)
        assert list(state.history) == xs

    def test_one_lsb_flicker_is_held(self, cfg):
        state = PreprocessState.create(cfg)
        ys = [smooth_step(state, cfg.lsb * (n % 2), cfg) for n in range(100)]
        assert ys == [0.0] * 100

    def test_buffer_length_and_running_sum(self, cfg):
        state = PreprocessState.create(cfg)
        rng = np.random.default_rng(3)
        for n, x in enumerate(rng.normal(size=200), start=1):
            smooth_step(state, float(x), cfg)
            assert len(state.history) == min(n, cfg.window_n)
            assert state.running_sum == pytest.approx(math.fsum(state.history), rel=1e-9, abs=1e-12)


class TestFodStep:
    def test_constant_is_zero(self, cfg):
        state = PreprocessState.create(cfg)
        assert all(fod_step(state, 1.5, cfg) == 0.0 for _ in range(60))

    def test_small_step_below_clearance(self, cfg):
        state = PreprocessState.create(cfg)
        out = [fod_step(state, 0.0 if i < 30 else 0.05 * cfg.lsb, cfg) for i in range(100)]
        assert out == [0.0] * 100

    def test_ramp_matches_subtraction_oracle(self, cfg):
        state = PreprocessState.create(cfg)
        xs = [0.01 * n for n in range(120)]
        got = [fod_step(state, x, cfg) for x in xs]
        for n, x in enumerate(xs):
            d = x - xs[n - min(n, 25)]
            expected = d if abs(d) > cfg.clearance else 0.0
            assert got[n] == expected
        assert all(r == pytest.approx(0.25) for r in got[25:])

    def test_negative_excursion_survives(self, cfg):
        state = PreprocessState.create(cfg)
        out = [fod_step(state, -0.02 * n, cfg) for n in range(40)]
        assert min(out) < -cfg.clearance

    def test_one_sided_guard_in_strict_mode(self, cfg):
        cfg = cfg.model_copy(update={"fod_abs": False})
        state = PreprocessState.create(cfg)
        out = [fod_step(state, -0.02 * n, cfg) for n in range(40)]
        assert out == [0.0] * 40


class TestPreprocessor:
    def test_one_output_per_sample(self, cfg):
        assert list(preprocess_stream([], cfg)) == []
        assert list(preprocess_stream([0.9], cfg)) == [0.0]

    def test_streaming_equals_batch(self, cfg):
        rng = np.random.default_rng(11)
        xs = rng.normal(scale=0.5, size=500)
        pre = Preprocessor(cfg)
        streamed = [pre.step(float(x)) for x in xs]
        assert list(preprocess_trace(EogTrace(250.0, xs), cfg)) == streamed

    @pytest.mark.parametrize("source", list(HistorySource))
    def test_baseline_ramp_rejected(self, cfg, source):
        cfg = cfg.model_copy(update={"history_source": source})
        xs = [0.001 * cfg.lsb * n for n in range(1000)]
        assert not np.any(preprocess_trace(xs, cfg))

    def test_steep_movement_passes_unchanged(self, cfg):
        xs = _steep_movement()
        got = preprocess_trace(xs, cfg)
        for n in range(len(xs)):
            d = xs[n] - xs[n - min(n, cfg.window_n)]
            assert got[n] == (d if abs(d) > cfg.clearance else 0.0)
        assert got.min() == pytest.approx(-0.7)
        assert got.max() == pytest.approx(0.7)
        assert not np.any(got[-60:])

    def test_linearity(self, cfg):
        cfg = cfg.model_copy(update={"r_thresh": 0.0, "fod_clearance_threshold": 0.0})
        rng = np.random.default_rng(5)
        xs = rng.normal(size=200)
        base = preprocess_trace(xs, cfg)
        scaled = preprocess_trace(2.5 * xs, cfg)
        assert np.allclose(scaled, 2.5 * base, rtol=1e-9, atol=1e-12)

    def test_out_of_order_index(self, cfg):
        samples = [EogSample(0, 0.0), EogSample(1, 0.1), EogSample(3, 0.2)]
        stream = preprocess_stream(samples, cfg)
        next(stream)
        next(stream)
        with pytest.raises(StreamOrderError):
            next(stream)

    def test_invert_signal(self, cfg):
        xs = _steep_movement()
        plain = preprocess_trace(xs, cfg)
        inverted = preprocess_trace(-xs, cfg.model_copy(update={"invert_signal": True}))
        assert np.array_equal(plain, inverted)

    def test_reset_restarts_stream(self, cfg):
        pre = Preprocessor(cfg)
        for n in range(30):
            pre.step(0.01 * n, n)
        pre.reset()
        assert pre.step(5.0, 0) == 0.0
        assert len(pre.state.history) == 1

    def test_state_is_bounded(self, cfg, accountant):
        pre = Preprocessor(cfg, accountant)
        for x in np.sin(np.linspace(0, 50, 5000)):
            pre.step(float(x))
        assert pre.state.history.storage_len == cfg.window_n
        assert pre.state.smoothed.storage_len == cfg.window_n
        assert accountant.ledger() == {"preprocess": 2 * cfg.window_n * cfg.sample_bytes}
