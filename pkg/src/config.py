"""
パイプライン設定モジュール。
環境変数 (PBDETECT_*) / .env ファイル / key=value 設定ファイルから設定を読み込む。
"""

import math
from enum import Enum
from pathlib import Path

from dotenv import dotenv_values
from pydantic import ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigurationError
from .strictmode import FormulaMode


class SimilarityBackend(str, Enum):
    NCC_MAX = "NCC_MAX"
    DDTW_SAKOE_CHIBA = "DDTW_SAKOE_CHIBA"

    @classmethod
    def from_cli(cls, value: str) -> "SimilarityBackend":
        mapping = {"ncc": cls.NCC_MAX, "ddtw": cls.DDTW_SAKOE_CHIBA}
        try:
            return mapping[value.lower()]
        except KeyError:
            return cls(value.upper())


class HistorySource(str, Enum):
    """移動平均フィルタの履歴に積む値。"""

    RAW = "RAW"
    SMOOTHED = "SMOOTHED"


class PipelineConfig(BaseSettings):
    """検出パイプライン全体の設定。

    すべての値は環境変数 (PBDETECT_ プレフィックス) または .env ファイルで上書きできる。
    """

    # ── 信号 ──────────────────────────────────────────────────────────────────
    sampling_rate_hz: float = 250.0
    """サンプリング周波数 (Hz)。"""

    adc_bits: int = 12
    """量子化ビット数。"""

    full_scale_min: float = -1.0
    full_scale_max: float = 1.0
    """量子化のフルスケール範囲 (正規化振幅)。"""

    invert_signal: bool = False
    """電極の極性が逆の場合に True。入力を符号反転してから処理する。"""

    # ── 前処理 ────────────────────────────────────────────────────────────────
    r_thresh: float = 1.0
    """正則化閾値 (ADC の LSB 単位)。移動平均からの偏差がこれを超えたサンプルだけ素通しする。"""

    fod_clearance_threshold: float = 0.1
    """一次差分のクリアランス閾値 (LSB 単位)。これ以下の差分は 0 に丸める。"""

    window_n: int = 25
    """移動平均窓 / 差分ラグ (サンプル)。"""

    history_source: HistorySource = HistorySource.SMOOTHED
    """移動平均の履歴に積む値。既定は平滑化後の値、RAW は生サンプル。"""

    # ── 状態機械 ──────────────────────────────────────────────────────────────
    state4_hold_ms: float = 200.0
    """State 4 で確定するまでの保持時間 (ms)。"""

    ihc_max_ms: float = 500.0
    """State 2 (IHC) に留まれる最大時間 (ms)。"""

    max_wavelet_s: float = 4.0
    """候補波形の最大長 (秒)。"""

    # ── 学習・分類 ────────────────────────────────────────────────────────────
    pb_training_reps: int = 10
    up_training_reps: int = 10
    total_features: int = 6
    pass_ratio: float = 0.6
    similarity_backend: SimilarityBackend = SimilarityBackend.NCC_MAX
    sakoe_chiba_band: int = 25
    integer_ncc: bool = False
    """相互相関を整数演算 (12 ビット固定小数点) で計算する。"""

    wavelet_buffer_capacity: int = 16

    # ── 計算式モード ──────────────────────────────────────────────────────────
    formula_mode: FormulaMode = FormulaMode.CORRECTED
    sd_sqrt: bool | None = None
    gaussian_square: bool | None = None
    fod_abs: bool | None = None

    # ── 居眠り判定 ────────────────────────────────────────────────────────────
    episode_min_pbs: int = 2
    episode_window_s: float = 10.0

    # ── メモリ予算 ────────────────────────────────────────────────────────────
    memory_budget_bytes: int = 32768
    """エミュレートする SRAM 容量 (バイト)。"""

    stack_bytes: int = 3072
    """ファームウェアのスタック領域 (バイト)。他の常駐領域は設定値から算出する。"""

    hat_leaf_len: int = 100
    sample_bytes: int = 2
    """1 サンプルあたりの計上バイト数 (MCU 上の short 型)。"""

    eviction_enabled: bool = True

    # ── 実行環境 ──────────────────────────────────────────────────────────────
    seed: int | None = None
    """全シミュレーターのシードを上書きする (PBDETECT_SEED)。"""

    web_port: int = 8990
    """モニターサーバー (Flask) のポート番号。"""

    log_level: str = "INFO"
    """ログレベル。DEBUG / INFO / WARNING / ERROR のいずれか。"""

    model_config = SettingsConfigDict(
        env_prefix="PBDETECT_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # ── 検証 ──────────────────────────────────────────────────────────────────

    @field_validator(
        "sampling_rate_hz", "state4_hold_ms", "ihc_max_ms", "max_wavelet_s", "episode_window_s"
    )
    @classmethod
    def _positive_real(cls, v: float) -> float:
        if not (v > 0 and math.isfinite(v)):
            raise ValueError("正の有限値である必要があります")
        return v

    @field_validator(
        "adc_bits", "window_n", "pb_training_reps", "up_training_reps", "total_features",
        "sakoe_chiba_band", "episode_min_pbs", "memory_budget_bytes", "hat_leaf_len",
        "sample_bytes", "wavelet_buffer_capacity",
    )
    @classmethod
    def _positive_int(cls, v: int) -> int:
        if v < 1:
            raise ValueError("1 以上である必要があります")
        return v

    @field_validator("r_thresh", "fod_clearance_threshold", "stack_bytes")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("0 以上である必要があります")
        return v

    @field_validator("pass_ratio")
    @classmethod
    def _ratio(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("0 以上 1 以下である必要があります")
        return v

    @field_validator("total_features")
    @classmethod
    def _feature_count(cls, v: int) -> int:
        if v > 6:
            raise ValueError("特徴量は最大 6 個です")
        return v

    @model_validator(mode="after")
    def _full_scale(self) -> "PipelineConfig":
        if not self.full_scale_min < self.full_scale_max:
            raise ValueError("full_scale_min < full_scale_max である必要があります")
        return self

    # ── 派生値 ────────────────────────────────────────────────────────────────

    @property
    def full_scale(self) -> tuple[float, float]:
        return (self.full_scale_min, self.full_scale_max)

    @property
    def lsb(self) -> float:
        """量子化レベルの間隔 (両端を含む 2^adc_bits 段)。"""
        return (self.full_scale_max - self.full_scale_min) / ((1 << self.adc_bits) - 1)

    @property
    def regularization_threshold(self) -> float:
        """r_thresh を信号の単位に換算した値。"""
        return self.r_thresh * self.lsb

    @property
    def clearance(self) -> float:
        """fod_clearance_threshold を信号の単位に換算した値。"""
        return self.fod_clearance_threshold * self.lsb

    def ms_to_samples(self, ms: float) -> int:
        # 0.2 * 250 = 50.000000000000004 のような誤差で 1 サンプル増えないよう丸める
        return math.ceil(round(ms * self.sampling_rate_hz / 1000.0, 9))

    @property
    def hold_samples(self) -> int:
        return self.ms_to_samples(self.state4_hold_ms)

    @property
    def ihc_max_samples(self) -> int:
        return self.ms_to_samples(self.ihc_max_ms)

    @property
    def max_wavelet_samples(self) -> int:
        return self.ms_to_samples(self.max_wavelet_s * 1000.0)

    def stream_fingerprint(self) -> dict[str, object]:
        """モデルとストリームの互換性判定に使う項目。"""
        return {
            "sampling_rate_hz": self.sampling_rate_hz,
            "window_n": self.window_n,
            "adc_bits": self.adc_bits,
            "full_scale_min": self.full_scale_min,
            "full_scale_max": self.full_scale_max,
            "r_thresh": self.r_thresh,
            "fod_clearance_threshold": self.fod_clearance_threshold,
            "history_source": self.history_source.value,
            "invert_signal": self.invert_signal,
        }


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    """key=value 形式の設定ファイルを読み込んで PipelineConfig を返す。

    ファイルのキーは PipelineConfig のフィールド名と完全一致すること。
    優先順位: overrides > 設定ファイル > 環境変数 / .env > 既定値。

    Raises:
        ConfigurationError: 未知のキー、または値が不正な場合。
    """
    values: dict[str, object] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"設定ファイルが見つかりません: path={path}")
        raw = dotenv_values(path)
        unknown = sorted(set(raw) - set(PipelineConfig.model_fields))
        if unknown:
            raise ConfigurationError(f"未知の設定キーです: {', '.join(unknown)}")
        values.update({k: v for k, v in raw.items() if v not in (None, "")})
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig(**values)
    except ValidationError as exc:
        raise ConfigurationError(f"設定値が不正です: {exc}") from exc


def dump_config(cfg: PipelineConfig) -> str:
    """設定を key=value 形式のテキストにする。load_config で読み戻せる。"""
    lines = []
    for key, value in cfg.model_dump(mode="json").items():
        if value is None:
            continue
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
