"""共通フィクスチャ。"""

import numpy as np
import pytest

from src.config import PipelineConfig
from src.memstore import BudgetAccountant
from src.models import EogTrace, Wavelet


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 全プロファイルを生成・評価する時間のかかるテスト")


@pytest.fixture(autouse=True)
def _isolate_env(monkeypatch):
    """実行環境の PBDETECT_* 環境変数がテストに混ざらないようにする。"""
    import os

    for key in list(os.environ):
        if key.startswith("PBDETECT_"):
            monkeypatch.delenv(key, raising=False)


@pytest.fixture
def cfg():
    """既定値の PipelineConfig (.env を読まない)。"""
    return PipelineConfig(_env_file=None)


@pytest.fixture
def accountant():
    """32 KiB 予算・常駐領域なしの会計係。"""
    return BudgetAccountant(32768)


def canonical_r(neg: int = 150, ihc: int = 10, pos: int = 180, tail: int = 50,
                neg_value: float = -0.5, pos_value: float = 0.4) -> list[float]:
    """PB 型の r 系列 (負 → 0 → 正 → 0)。"""
    return [neg_value] * neg + [0.0] * ihc + [pos_value] * pos + [0.0] * tail


def make_wavelet(samples, start: int = 0, fs: float = 250.0) -> Wavelet:
    arr = np.asarray(samples, dtype=np.float64)
    return Wavelet(samples=arr, start_index=start, end_index=start + len(arr) - 1, sampling_rate_hz=fs)


@pytest.fixture
def canonical_wavelet():
    """負 150 / 0 が 10 / 正 180 サンプルの wavelet (250 Hz)。"""
    return make_wavelet(canonical_r(tail=0))


def pb_like(n_neg, n_pos, depth=-0.5, height=0.4, ihc=5) -> np.ndarray:
    """半波正弦の負区間 → 0 区間 → 正区間からなる r 系列。"""
    neg = depth * np.sin(np.linspace(0, np.pi, n_neg + 2)[1:-1])
    pos = height * np.sin(np.linspace(0, np.pi, n_pos + 2)[1:-1])
    return np.concatenate([neg, np.zeros(ihc), pos])


def pb_wavelets(count: int = 10, start: int = 0) -> list[Wavelet]:
    """学習用の PB らしい wavelet (長さと振幅を少しずつ変える)。"""
    return [
        make_wavelet(pb_like(150 + 5 * k, 180 + 7 * k, -(0.5 + 0.02 * k), 0.4 + 0.015 * k, 10), start + 1000 * k)
        for k in range(count)
    ]


def up_wavelets(count: int = 10, start: int = 50_000) -> list[Wavelet]:
    """学習用の上方注視らしい wavelet (PB より短く浅い)。"""
    return [
        make_wavelet(pb_like(60 + 3 * k, 70 + 4 * k, -(0.3 + 0.01 * k), 0.25 + 0.01 * k, 3), start + 1000 * k)
        for k in range(count)
    ]


def trapezoid(depth: float, fall: int, plateau: int, rise: int) -> np.ndarray:
    """x 上の台形の下向き振れ (下降 → 保持 → 復帰)。"""
    return np.concatenate([
        -depth * (np.arange(1, fall + 1) / fall),
        np.full(plateau, -depth),
        -depth * (1.0 - np.arange(1, rise + 1) / rise),
    ])


def pb_movement(k: int = 5) -> np.ndarray:
    # 端の最後の 1 歩が window_n LSB を超える急峻さなら前処理は x(n) - x(n-25) になる
    return trapezoid(0.73 + 0.01 * k, 30 + k, 110 + 2 * k, 40 + k)


def up_movement(k: int = 5) -> np.ndarray:
    return trapezoid(0.44 + 0.007 * k, 15 + k, 30, 20 + k)


def movement_trace(movements, lead: int = 100, gap: int = 300, fs: float = 250.0) -> EogTrace:
    """振れの間を 0 で埋めたトレース。"""
    parts = [np.zeros(lead)]
    for m in movements:
        parts += [m, np.zeros(gap)]
    return EogTrace(fs, np.concatenate(parts))


def training_trace(reps: int = 10) -> EogTrace:
    """PB を reps 回 → 上方注視を reps 回 の学習用トレース。"""
    return movement_trace([pb_movement(k) for k in range(reps)] + [up_movement(k) for k in range(reps)])


@pytest.fixture(scope="session")
def trained_model():
    """training_trace から学習した既定設定のモデル。"""
    from src.trainer import train_from_trace

    return train_from_trace(training_trace(), PipelineConfig(_env_file=None))
