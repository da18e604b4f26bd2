"""
ドメインモデル定義。
前処理・状態機械・分類器・評価ハーネスの間でやり取りするデータ構造を定義する。
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

# 特徴量の並び順。CSV・モデルファイル・閾値配列はすべてこの順に従う。
FEATURE_NAMES: tuple[str, ...] = ("similarity", "max", "min", "p_durn", "n_durn", "t_durn")


class MovementKind(str, Enum):
    PROLONGED_BLINK = "PROLONGED_BLINK"
    UPWARD_GAZE = "UPWARD_GAZE"
    NORMAL_BLINK = "NORMAL_BLINK"
    SACCADE_LEFT = "SACCADE_LEFT"
    SACCADE_RIGHT = "SACCADE_RIGHT"
    NONE_IDLE = "NONE_IDLE"


# ── 信号 ──────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class EogSample:
    """1 サンプル。"""

    index: int
    """サンプル番号 n。トレース内で 0 から連番。"""

    amplitude: float
    """ADC 逆量子化後の振幅 (正規化単位)。"""


@dataclass(frozen=True)
class MovementLabel:
    """シミュレーターが付与する正解ラベル。区間は両端を含む。"""

    kind: MovementKind
    start_idx: int
    end_idx: int

    def overlap(self, start: int, end: int) -> int:
        """[start, end] との重なりサンプル数を返す。"""
        return max(0, min(self.end_idx, end) - max(self.start_idx, start) + 1)


@dataclass
class EogTrace:
    """タイムスタンプ付き EOG 信号 x と、評価用の正解ラベル。"""

    sampling_rate_hz: float
    amplitudes: np.ndarray
    """x(n)。dtype=float64。"""

    labels: list[MovementLabel] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64)
        n = len(self.amplitudes)
        ordered = sorted(self.labels, key=lambda lb: lb.start_idx)
        prev_end = -1
        for lb in ordered:
            if lb.start_idx > lb.end_idx or lb.start_idx <= prev_end or lb.end_idx >= n:
                raise ValueError(
                    f"ラベル区間が不正です (重複または範囲外): {lb.kind.value} "
                    f"[{lb.start_idx}, {lb.end_idx}], samples={n}"
                )
            prev_end = lb.end_idx
        self.labels = ordered

    def __len__(self) -> int:
        return len(self.amplitudes)

    def samples(self) -> Iterator[EogSample]:
        for i, v in enumerate(self.amplitudes):
            yield EogSample(index=i, amplitude=float(v))

    @property
    def duration_s(self) -> float:
        return len(self.amplitudes) / self.sampling_rate_hz


# ── 波形・特徴量 ──────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class Wavelet:
    """State 0 を出てから PHC の最後の非ゼロサンプルまでの r。"""

    samples: np.ndarray
    start_index: int
    end_index: int
    sampling_rate_hz: float

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Wavelet):
            return NotImplemented
        return (
            self.start_index == other.start_index
            and self.end_index == other.end_index
            and self.sampling_rate_hz == other.sampling_rate_hz
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class FeatureVector:
    """wavelet の 6 特徴量。"""

    similarity: float
    max: float
    min: float
    p_durn: float
    n_durn: float
    t_durn: float

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in FEATURE_NAMES)

    def to_csv_row(self) -> str:
        return ",".join(repr(v) for v in self.as_tuple())


# ── 検出結果 ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class DetectionEvent:
    """1 wavelet に対する PB 判定。"""

    start_index: int
    end_index: int
    t_s: float
    """判定時刻 (State 4 確定サンプルの時刻, 秒)。"""

    features: FeatureVector
    fuzz_val: tuple[float, ...]
    pass_sum: float
    is_pb: bool
    decision_latency_ms: float = 0.0

    def to_csv_row(self) -> str:
        return f"{self.t_s:.3f},{self.start_index},{self.end_index},{self.pass_sum:.6f},{str(self.is_pb).upper()}"


@dataclass(frozen=True)
class DrowsinessAlert:
    """居眠りエピソードの警報。"""

    t_s: float
    pb_times: tuple[float, ...]
    window_s: float

    @property
    def count(self) -> int:
        return len(self.pb_times)

    def to_csv_row(self) -> str:
        return f"ALERT,{self.t_s:.3f},{self.count}"


# ── 評価 ──────────────────────────────────────────────────────────────────────


@dataclass
class OutcomeTally:
    """1 セッションの採点結果。"""

    total_readings: int = 0
    correct_detections: int = 0
    wrong_detections: int = 0
    false_positives: int = 0
    true_negatives: int = 0
    """PB ラベルに対して候補は出たが PB と判定されなかった件数。"""

    unclassified: int = 0
    """PB ラベルに対して候補波形が 1 つも出なかった件数。"""

    upward_gazes: int = 0
    upward_gaze_false_positives: int = 0
    avg_detection_ms: float = 0.0

    @property
    def accuracy_pct(self) -> float:
        if self.total_readings == 0:
            return 0.0
        return 100.0 * self.correct_detections / self.total_readings

    @property
    def upward_gaze_fp_pct(self) -> float:
        if self.upward_gazes == 0:
            return 0.0
        return 100.0 * self.upward_gaze_false_positives / self.upward_gazes


@dataclass
class ProfileResult:
    """評価レポートの 1 行。"""

    profile_id: str
    tally: OutcomeTally | None
    hard: bool = False
    error: str | None = None
    """学習失敗などで評価できなかった場合の理由。"""

    @property
    def failed(self) -> bool:
        return self.tally is None


@dataclass
class EvalReport:
    """全プロファイルの評価結果。"""

    rows: list[ProfileResult]
    backend: str
    mode: str
    config_fingerprint: str

    @property
    def scored(self) -> list[ProfileResult]:
        return [r for r in self.rows if not r.failed]

    @property
    def mean_accuracy_pct(self) -> float:
        scored = self.scored
        if not scored:
            return 0.0
        return sum(r.tally.accuracy_pct for r in scored) / len(scored)

    @property
    def pooled_accuracy_pct(self) -> float:
        total = sum(r.tally.total_readings for r in self.scored)
        correct = sum(r.tally.correct_detections for r in self.scored)
        return 100.0 * correct / total if total else 0.0

    @property
    def pooled_upward_gaze_fp_pct(self) -> float:
        ups = sum(r.tally.upward_gazes for r in self.scored)
        fps = sum(r.tally.upward_gaze_false_positives for r in self.scored)
        return 100.0 * fps / ups if ups else 0.0
