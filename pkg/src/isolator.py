"""
候補波形の切り出しを行う状態機械モジュール。
r ストリームを State 0-4 で追跡し、PB 候補の wavelet を切り出す。
候補になりえない波形はできるだけ早い段階で棄却する。

  S0 (待機) ─r<0→ S1 (NHC) ─r=0→ S2 (IHC) ─r>0→ S3 (PHC) ─r=0→ S4 (テール)
  S4 で 0 が hold_samples 続くと Candidate を出して S0 に戻る。
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

from .config import PipelineConfig
from .memstore import BudgetAccountant, HatStore
from .models import Wavelet

logger = logging.getLogger(__name__)

ACCOUNTANT_OWNER = "isolator"


class IsolatorStateName(str, Enum):
    S0 = "S0"
    S1_NHC = "S1_NHC"
    S2_IHC = "S2_IHC"
    S3_PHC = "S3_PHC"
    S4_TAIL = "S4_TAIL"


class RejectReason(str, Enum):
    POSITIVE_FIRST = "POSITIVE_FIRST"
    IHC_TIMEOUT = "IHC_TIMEOUT"
    SEQUENCE_VIOLATION = "SEQUENCE_VIOLATION"
    TAIL_DISTURBED = "TAIL_DISTURBED"
    TOO_LONG = "TOO_LONG"


class EventKind(str, Enum):
    NONE = "NONE"
    REJECTED = "REJECTED"
    CANDIDATE = "CANDIDATE"


@dataclass(frozen=True)
class IsolatorEvent:
    """isolator_step の結果。"""

    kind: EventKind
    index: int
    """イベントを発生させたサンプル番号。"""

    reason: RejectReason | None = None
    wavelet: Wavelet | None = None

    @property
    def is_candidate(self) -> bool:
        return self.kind is EventKind.CANDIDATE

    @property
    def is_rejected(self) -> bool:
        return self.kind is EventKind.REJECTED

    def to_trace_line(self) -> str:
        """--trace-events 用の ``index,event,reason`` 行。"""
        reason = self.reason.value if self.reason is not None else ""
        return f"{self.index},{self.kind.value},{reason}"


class Isolator:
    """1 ストリーム分の状態機械。単一スレッドから使うこと。

    キャプチャ領域は HAT 上に確保し、最大波形長ぶんの葉を構築時に予約する。
    """

    def __init__(self, cfg: PipelineConfig, accountant: BudgetAccountant | None = None) -> None:
        self.cfg = cfg
        self.hold_samples = cfg.hold_samples
        self.ihc_max_samples = cfg.ihc_max_samples
        self.max_wavelet_samples = cfg.max_wavelet_samples
        leaves = math.ceil(self.max_wavelet_samples / cfg.hat_leaf_len)
        self._capture_store = HatStore(cfg.hat_leaf_len, leaves, cfg.sample_bytes)
        if accountant is not None:
            accountant.track(ACCOUNTANT_OWNER, leaves * self._capture_store.leaf_bytes)

        self.state = IsolatorStateName.S0
        self.s4_dwell_samples = 0
        self.ihc_samples = 0
        self._capture: int | None = None
        self._start_index = 0
        self._end_index = 0
        self._index = 0

    # ── 参照 ──────────────────────────────────────────────────────────────────

    @property
    def capture_len(self) -> int:
        return 0 if self._capture is None else self._capture_store.length(self._capture)

    @property
    def samples_seen(self) -> int:
        return self._index

    # ── 遷移 ──────────────────────────────────────────────────────────────────

    def step(self, r_n: float) -> IsolatorEvent:
        """r(n) を 1 サンプル処理してイベントを返す。"""
        index = self._index
        self._index += 1
        s = self.state

        if s is IsolatorStateName.S0:
            if r_n < 0:
                self._open(index)
                self._push(r_n)
                self.state = IsolatorStateName.S1_NHC
            elif r_n > 0:
                return self._reject(index, RejectReason.POSITIVE_FIRST)
            return IsolatorEvent(EventKind.NONE, index)

        if s is IsolatorStateName.S1_NHC:
            if r_n == 0:
                self.state = IsolatorStateName.S2_IHC
                self.ihc_samples = 1
            elif r_n > 0:
                self.state = IsolatorStateName.S3_PHC
            return self._extend(index, r_n)

        if s is IsolatorStateName.S2_IHC:
            if r_n < 0:
                return self._reject(index, RejectReason.SEQUENCE_VIOLATION)
            if r_n == 0:
                self.ihc_samples += 1
                if self.ihc_samples > self.ihc_max_samples:
                    return self._reject(index, RejectReason.IHC_TIMEOUT)
            else:
                self.state = IsolatorStateName.S3_PHC
            return self._extend(index, r_n)

        if s is IsolatorStateName.S3_PHC:
            if r_n < 0:
                return self._reject(index, RejectReason.SEQUENCE_VIOLATION)
            if r_n > 0:
                return self._extend(index, r_n)
            self.state = IsolatorStateName.S4_TAIL
            self._end_index = index - 1
            self.s4_dwell_samples = 1
            return self._check_hold(index)

        # S4_TAIL
        if r_n != 0:
            return self._reject(index, RejectReason.TAIL_DISTURBED)
        self.s4_dwell_samples += 1
        return self._check_hold(index)

    def reset(self) -> None:
        """S0 に戻してキャプチャを破棄する。サンプル番号のカウンタは維持する。"""
        self._discard()
        self.state = IsolatorStateName.S0
        self.s4_dwell_samples = 0
        self.ihc_samples = 0

    # ── 内部 ──────────────────────────────────────────────────────────────────

    def _open(self, index: int) -> None:
        self._discard()
        self._capture = self._capture_store.open_wave()
        self._start_index = index

    def _push(self, r_n: float) -> None:
        self._capture_store.push(self._capture, r_n)

    def _extend(self, index: int, r_n: float) -> IsolatorEvent:
        if self.capture_len + 1 > self.max_wavelet_samples:
            return self._reject(index, RejectReason.TOO_LONG)
        self._push(r_n)
        return IsolatorEvent(EventKind.NONE, index)

    def _check_hold(self, index: int) -> IsolatorEvent:
        if self.s4_dwell_samples < self.hold_samples:
            return IsolatorEvent(EventKind.NONE, index)
        wavelet = Wavelet(
            samples=self._capture_store.read(self._capture),
            start_index=self._start_index,
            end_index=self._end_index,
            sampling_rate_hz=self.cfg.sampling_rate_hz,
        )
        self.reset()
        logger.debug(
            "候補波形を検出しました: start=%d, end=%d, len=%d",
            wavelet.start_index, wavelet.end_index, len(wavelet),
        )
        return IsolatorEvent(EventKind.CANDIDATE, index, wavelet=wavelet)

    def _reject(self, index: int, reason: RejectReason) -> IsolatorEvent:
        if self.state is not IsolatorStateName.S0:
            logger.debug("候補を棄却しました: index=%d, state=%s, reason=%s", index, self.state.value, reason.value)
        self.reset()
        return IsolatorEvent(EventKind.REJECTED, index, reason=reason)

    def _discard(self) -> None:
        if self._capture is not None:
            self._capture_store.release(self._capture)
            self._capture = None


def isolator_step(state: Isolator, r_n: float) -> IsolatorEvent:
    return state.step(r_n)


def isolator_reset(state: Isolator) -> None:
    state.reset()
