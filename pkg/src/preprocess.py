"""
前処理モジュール。
正則化移動平均フィルタと、クリアランス閾値付き一次差分 (FOD) をサンプル単位で計算する。
状態は固定容量のリングバッファ 2 本とスカラーだけで、ストリーム長に依存しない。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .config import HistorySource, PipelineConfig
from .errors import StreamOrderError
from .memstore import BudgetAccountant, CircularBuffer
from .models import EogSample, EogTrace
from .strictmode import resolve_formulas

logger = logging.getLogger(__name__)

ACCOUNTANT_OWNER = "preprocess"


@dataclass
class PreprocessState:
    """1 ストリーム分の前処理状態。スレッド間で共有しないこと。"""

    history: CircularBuffer[float]
    """移動平均の履歴 (直近 window_n 個)。"""

    smoothed: CircularBuffer[float]
    """FOD 用の平滑化済み値 (直近 window_n 個)。最古要素が x_avg(n - N)。"""

    samples_seen: int = 0
    last_index: int = field(default=-1)

    @classmethod
    def create(cls, cfg: PipelineConfig, accountant: BudgetAccountant | None = None) -> "PreprocessState":
        return cls(
            history=CircularBuffer(
                cfg.window_n, 0.0, accountant, ACCOUNTANT_OWNER, cfg.sample_bytes
            ),
            smoothed=CircularBuffer(
                cfg.window_n, 0.0, accountant, ACCOUNTANT_OWNER, cfg.sample_bytes
            ),
        )

    @property
    def running_sum(self) -> float:
        """履歴の総和 (fsum)。"""
        return math.fsum(self.history)

    def history_mean(self) -> float:
        """履歴の平均。すべて同じ値ならその値をそのまま返す。"""
        lo, hi = min(self.history), max(self.history)
        if lo == hi:
            return lo
        return self.running_sum / len(self.history)

    def reset(self) -> None:
        self.history.clear()
        self.smoothed.clear()
        self.samples_seen = 0
        self.last_index = -1


def smooth_step(state: PreprocessState, x_n: float, cfg: PipelineConfig) -> float:
    """正則化移動平均。

    直前 N = min(n, window_n) 個の平均 m からの偏差が r_thresh (LSB) を超えれば x(n) を、
    そうでなければ m を返す。n = 0 では x(0) を返す。
    履歴には既定で返り値 (平滑化後の値) を積む。
    """
    if len(state.history) == 0:
        y = x_n
    else:
        mean = state.history_mean()
        y = x_n if abs(x_n - mean) > cfg.regularization_threshold else mean

    state.history.push(x_n if cfg.history_source is HistorySource.RAW else y)
    state.samples_seen += 1
    return y


def fod_step(state: PreprocessState, x_avg_n: float, cfg: PipelineConfig) -> float:
    """クリアランス閾値付き一次差分 r(n)。

    d = x_avg(n) - x_avg(n - N)。|d| がクリアランス (LSB) 以下なら 0 を返す。
    n = 0 では 0 を返す。
    """
    flags = resolve_formulas(cfg)
    if len(state.smoothed) == 0:
        state.smoothed.push(x_avg_n)
        return 0.0
    d = x_avg_n - state.smoothed.oldest()
    state.smoothed.push(x_avg_n)
    clearance = cfg.clearance
    passed = abs(d) > clearance if flags.fod_abs else d > clearance
    return d if passed else 0.0


class Preprocessor:
    """x(n) を受け取り r(n) を返すストリーム変換器。"""

    def __init__(self, cfg: PipelineConfig, accountant: BudgetAccountant | None = None) -> None:
        self.cfg = cfg
        self.state = PreprocessState.create(cfg, accountant)
        self._sign = -1.0 if cfg.invert_signal else 1.0

    def step(self, x_n: float, index: int | None = None) -> float:
        """1 サンプル処理する。index を渡した場合は連番であることを検査する。

        Raises:
            StreamOrderError: index が直前のサンプル番号 + 1 でない場合。
        """
        if index is not None:
            expected = self.state.last_index + 1
            if index != expected:
                raise StreamOrderError(
                    f"サンプル番号が順序どおりではありません: expected={expected}, got={index}"
                )
        self.state.last_index += 1
        y = smooth_step(self.state, self._sign * float(x_n), self.cfg)
        return fod_step(self.state, y, self.cfg)

    def reset(self) -> None:
        self.state.reset()


def preprocess_stream(
    source: EogTrace | Iterable[EogSample] | Iterable[float],
    cfg: PipelineConfig,
    accountant: BudgetAccountant | None = None,
) -> Iterator[float]:
    """入力 1 サンプルにつき r を 1 つ出力するジェネレーター。

    EogSample を流す場合はサンプル番号の順序を検査し、乱れていれば
    StreamOrderError を送出して処理を止める。
    """
    pre = Preprocessor(cfg, accountant)
    items = source.amplitudes if isinstance(source, EogTrace) else source
    for item in items:
        if isinstance(item, EogSample):
            yield pre.step(item.amplitude, item.index)
        else:
            yield pre.step(float(item))


def preprocess_trace(trace: EogTrace | Iterable[float], cfg: PipelineConfig) -> np.ndarray:
    """トレース全体を一括処理して r の配列を返す。逐次処理と要素ごとに一致する。"""
    return np.fromiter(preprocess_stream(trace, cfg), dtype=np.float64)
