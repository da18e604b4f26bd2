"""
被験者シミュレーターモジュール。
プロファイルごとのテンプレートから PB・上方注視・通常瞬目・サッカードの EOG 波形を生成し、
正解ラベル付きのセッショントレースを組み立てる。

波形は立ち下がり・保持・立ち上がりを、終端で最も速くなる四分の一余弦でつないだもの。
振幅は ADC の LSB の整数倍にそろえ、保持区間がちょうど量子化レベルに乗るようにする。
各生成波形はノイズなしテンプレートとの相関が MIN_TEMPLATE_CORRELATION 以上であることを保証する。
"""

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from .config import PipelineConfig
from .errors import ConfigurationError, GenerationError
from .features import ncc_max
from .models import EogTrace, MovementKind, MovementLabel
from .patterns import KEY_VALUE_LINE
from .signal_model import quantize, quantize_array

logger = logging.getLogger(__name__)

MIN_TEMPLATE_CORRELATION = 0.9
MAX_GENERATION_ATTEMPTS = 20

# 12 ビット・フルスケール [-1, 1] の 1 LSB
DEFAULT_LSB = 2.0 / 4095

# 評価セッションの動作内訳 (合計 300)
DEFAULT_SESSION_MIX: dict[MovementKind, int] = {
    MovementKind.PROLONGED_BLINK: 120,
    MovementKind.UPWARD_GAZE: 90,
    MovementKind.NORMAL_BLINK: 45,
    MovementKind.SACCADE_LEFT: 25,
    MovementKind.SACCADE_RIGHT: 20,
}

DEFAULT_GAP_RANGE_S = (1.2, 2.0)
TRAINING_GAP_S = 2.0
LEAD_IN_S = 1.0

# シード系列の識別子
EVAL_STREAM = 0
TRAINING_STREAM = 1


# ── プロファイル ──────────────────────────────────────────────────────────────


class TemplateParams(BaseModel):
    """1 種類の動作のテンプレート。polarity 方向に振れて保持し、基線へ戻る。"""

    amplitude: float = Field(gt=0)
    onset_s: float = Field(gt=0)
    """基線から振れ切るまでの時間。"""

    plateau_s: float = Field(gt=0)
    offset_s: float = Field(gt=0)
    """基線へ戻るまでの時間。"""

    polarity: int = -1
    """-1 は負方向 (閉瞼) に振れる。"""

    overshoot: float = Field(default=0.0, ge=0.0, le=1.0)
    """戻りで反対側へ行き過ぎる量 (振幅に対する比)。0 なら基線へ直接戻る。"""

    rebound_s: float = Field(default=0.0, ge=0.0)
    """行き過ぎた位置での保持時間。"""

    settle_s: float = Field(default=0.0, ge=0.0)
    """行き過ぎた位置から基線へ戻るまでの時間。"""

    @model_validator(mode="after")
    def _overshoot_settles(self) -> "TemplateParams":
        if self.overshoot > 0 and self.settle_s <= 0:
            raise ValueError("overshoot を指定する場合は settle_s > 0 である必要があります")
        return self

    @property
    def total_s(self) -> float:
        return self.onset_s + self.plateau_s + self.offset_s + self.rebound_s + self.settle_s

    def scaled(self, amplitude: float = 1.0, duration: float = 1.0) -> "TemplateParams":
        return self.model_copy(update={
            "amplitude": self.amplitude * amplitude,
            **{name: getattr(self, name) * duration for name in _DURATION_FIELDS},
        })


_DURATION_FIELDS = ("onset_s", "plateau_s", "offset_s", "rebound_s", "settle_s")


class SubjectProfile(BaseModel):
    """仮想被験者 1 人分のパラメーター。"""

    profile_id: str
    seed: int
    hard: bool = False
    """PB と上方注視のテンプレートが近く、判別が難しいプロファイル。"""

    prolonged_blink: TemplateParams
    upward_gaze: TemplateParams
    normal_blink: TemplateParams
    saccade_left: TemplateParams
    saccade_right: TemplateParams

    amplitude_jitter: float = Field(default=0.05, ge=0.0, le=0.5)
    duration_jitter: float = Field(default=0.05, ge=0.0, le=0.5)
    noise_rms: float = Field(default=0.04 * DEFAULT_LSB, ge=0.0)
    wander_amplitude: float = Field(default=0.15 * DEFAULT_LSB, ge=0.0)
    """基線変動の振幅。ノイズと合わせて 1/2 LSB 未満なら無動作区間は 1 つの量子化レベルに留まる。"""

    wander_hz: float = Field(default=0.15, ge=0.0)

    @model_validator(mode="after")
    def _pb_longer_than_blink(self) -> "SubjectProfile":
        if not self.prolonged_blink.total_s > self.normal_blink.total_s:
            raise ValueError("PB テンプレートは通常瞬目より長い必要があります")
        return self

    def template(self, kind: MovementKind) -> TemplateParams:
        if kind is MovementKind.NONE_IDLE:
            raise ValueError("NONE_IDLE にテンプレートはありません")
        return getattr(self, kind.value.lower())


_TEMPLATE_FIELDS = tuple(k.value.lower() for k in MovementKind if k is not MovementKind.NONE_IDLE)


def dump_profile(profile: SubjectProfile) -> str:
    """プロファイルを key=value 形式 (テンプレートは ``upward_gaze.amplitude`` のように平坦化) で書き出す。"""
    lines = []
    for key, value in profile.model_dump(mode="json").items():
        if isinstance(value, dict):
            lines.extend(f"{key}.{sub}={subval}" for sub, subval in value.items())
        else:
            lines.append(f"{key}={str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


def load_profile(text: str) -> SubjectProfile:
    """dump_profile の出力を読み込む。

    Raises:
        ConfigurationError: 書式エラー、未知のキー、値が不正な場合。
    """
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        m = KEY_VALUE_LINE.match(line)
        if not m:
            raise ConfigurationError(f"プロファイルの行を解釈できません: line={lineno}")
        key, value = m.group("key"), m.group("value").strip()
        head, _, sub = key.partition(".")
        if sub:
            if head not in _TEMPLATE_FIELDS:
                raise ConfigurationError(f"未知のプロファイルキーです: {key}")
            values.setdefault(head, {})[sub] = value  # type: ignore[index]
        elif head in SubjectProfile.model_fields:
            values[head] = value
        else:
            raise ConfigurationError(f"未知のプロファイルキーです: {key}")
    try:
        return SubjectProfile.model_validate(values)
    except ValidationError as exc:
        raise ConfigurationError(f"プロファイルの値が不正です: {exc}") from exc


def _lsb(count: int) -> float:
    return count * DEFAULT_LSB


# 基準テンプレート (振幅は正規化単位、時間は秒)
_BASE_TEMPLATES: dict[MovementKind, TemplateParams] = {
    MovementKind.PROLONGED_BLINK: TemplateParams(amplitude=_lsb(1500), onset_s=0.16, plateau_s=0.44, offset_s=0.20),
    MovementKind.UPWARD_GAZE: TemplateParams(amplitude=_lsb(1100), onset_s=0.10, plateau_s=0.16, offset_s=0.12),
    # PB と同じ形を時間方向に縮めたもの。候補にはなり、長さの特徴量で棄却される
    MovementKind.NORMAL_BLINK: TemplateParams(amplitude=_lsb(1400), onset_s=0.04, plateau_s=0.04, offset_s=0.06),
    MovementKind.SACCADE_LEFT: TemplateParams(
        amplitude=_lsb(700), onset_s=0.04, plateau_s=0.40, offset_s=0.05, polarity=1,
    ),
    # 負方向に振れたあと反対側へ行き過ぎてから戻る。正区間のあとに負の差分が現れる
    MovementKind.SACCADE_RIGHT: TemplateParams(
        amplitude=_lsb(800), onset_s=0.04, plateau_s=0.30, offset_s=0.05,
        overshoot=0.4, rebound_s=0.06, settle_s=0.04,
    ),
}

# 判別が難しいプロファイルの上方注視 (PB を浅く短くした形)
_HARD_UPWARD_GAZE = _BASE_TEMPLATES[MovementKind.PROLONGED_BLINK].scaled(amplitude=0.9, duration=0.85)

# (振幅倍率, 速度倍率, ジッター, 難プロファイル)
_PROFILE_TABLE: tuple[tuple[float, float, float, bool], ...] = (
    (0.90, 1.00, 0.10, True),
    (1.00, 0.90, 0.04, False),
    (1.15, 1.10, 0.06, False),
    (0.90, 1.05, 0.08, False),
    (1.05, 0.95, 0.05, False),
    (0.95, 1.00, 0.07, False),
    (1.10, 0.92, 0.09, False),
    (1.00, 1.08, 0.04, False),
    (0.88, 1.00, 0.06, False),
    (1.12, 0.90, 0.10, True),
    (0.92, 1.10, 0.05, False),
    (1.08, 0.98, 0.08, False),
    (0.97, 1.02, 0.07, False),
    (1.03, 0.94, 0.06, False),
    (1.00, 1.06, 0.05, False),
)


def default_profiles() -> list[SubjectProfile]:
    """決定的な 15 プロファイル S01..S15。S01 と S10 は判別の難しいプロファイル。"""
    profiles = []
    for i, (amp, speed, jitter, hard) in enumerate(_PROFILE_TABLE, start=1):
        profile_id = f"S{i:02d}"
        templates = {
            kind.value.lower(): base.scaled(amplitude=amp, duration=1.0 / speed)
            for kind, base in _BASE_TEMPLATES.items()
        }
        if hard:
            templates["upward_gaze"] = _HARD_UPWARD_GAZE.scaled(amplitude=amp, duration=1.0 / speed)
        profiles.append(SubjectProfile(
            profile_id=profile_id,
            seed=zlib.crc32(profile_id.encode("ascii")),
            hard=hard,
            amplitude_jitter=jitter,
            duration_jitter=jitter,
            **templates,
        ))
    return profiles


# ── 波形生成 ──────────────────────────────────────────────────────────────────


def _ease_in(n: int) -> np.ndarray:
    """0 から 1 まで、終端で最も速く動く四分の一余弦 (n 点、最後は厳密に 1)。"""
    ramp = 1.0 - np.cos(0.5 * np.pi * np.arange(1, n + 1) / n)
    ramp[-1] = 1.0
    return ramp


def _sample_count(seconds: float, fs: float) -> int:
    return max(1, round(seconds * fs))


def template_signal(params: TemplateParams, fs: float) -> np.ndarray:
    """テンプレートの波形 (ノイズなし)。最後のサンプルは基線 0。

    振れも戻りも終端で最も速くなるので、保持区間と基線には大きな 1 歩で入る。
    """
    a = params.polarity * params.amplitude
    parts = [a * _ease_in(_sample_count(params.onset_s, fs)), np.full(_sample_count(params.plateau_s, fs), a)]
    if params.overshoot > 0:
        b = -params.overshoot * a
        parts.append(a + (b - a) * _ease_in(_sample_count(params.offset_s, fs)))
        parts.append(np.full(round(params.rebound_s * fs), b))
        parts.append(b * (1.0 - _ease_in(_sample_count(params.settle_s, fs))))
    else:
        parts.append(a * (1.0 - _ease_in(_sample_count(params.offset_s, fs))))
    return np.concatenate(parts)


def template_correlation(realization: np.ndarray, template: np.ndarray) -> float:
    """長さを揃えたうえでのピアソン相関。"""
    if realization.size != template.size:
        grid = np.linspace(0.0, 1.0, template.size)
        realization = np.interp(grid, np.linspace(0.0, 1.0, realization.size), realization)
    return float(np.corrcoef(realization, template)[0, 1])


def _jitter(rng: np.random.Generator, fraction: float) -> float:
    return 1.0 + fraction * rng.uniform(-1.0, 1.0) if fraction > 0 else 1.0


def generate_movement(
    profile: SubjectProfile,
    kind: MovementKind,
    rng: np.random.Generator,
    fs: float = 250.0,
    resolution: float | None = None,
) -> EogTrace:
    """1 動作分の生信号 (FOD 前) を生成する。

    振幅と各区間の長さにプロファイルのジッターを掛け、ノイズを加える。
    resolution を渡すと振幅 (と行き過ぎ量) をその整数倍に丸める。
    テンプレートとの相関が下限を下回った場合は引き直す。

    Raises:
        GenerationError: MAX_GENERATION_ATTEMPTS 回引き直しても下限を満たさない場合。
    """
    if kind is MovementKind.NONE_IDLE:
        raise ValueError("NONE_IDLE は動作として生成できません")
    base = profile.template(kind)
    template = template_signal(base, fs)

    for attempt in range(1, MAX_GENERATION_ATTEMPTS + 1):
        amplitude = base.amplitude * _jitter(rng, profile.amplitude_jitter)
        update: dict[str, float] = {
            name: getattr(base, name) * _jitter(rng, profile.duration_jitter) for name in _DURATION_FIELDS
        }
        if resolution is not None:
            steps = max(1, round(amplitude / resolution))
            amplitude = steps * resolution
            update["overshoot"] = round(base.overshoot * steps) / steps
        update["amplitude"] = amplitude
        params = base.model_copy(update=update)
        signal = template_signal(params, fs)
        if profile.noise_rms > 0:
            signal = signal + rng.normal(0.0, profile.noise_rms, signal.size)
        corr = template_correlation(signal, template)
        if corr >= MIN_TEMPLATE_CORRELATION:
            return EogTrace(fs, signal, [MovementLabel(kind, 0, signal.size - 1)])
        logger.debug("相関が下限未満のため再生成します: kind=%s, attempt=%d, corr=%.4f", kind.value, attempt, corr)

    raise GenerationError(
        f"テンプレートとの相関が下限を満たしません: profile={profile.profile_id}, kind={kind.value}"
    )


def template_similarity(profile: SubjectProfile, fs: float = 250.0) -> float:
    """PB と上方注視のテンプレート間の NCC 最大値。難プロファイルほど大きい。"""
    return ncc_max(
        template_signal(profile.prolonged_blink, fs),
        template_signal(profile.upward_gaze, fs),
    )


# ── セッション ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class SessionSchedule:
    """動作と、その後に続く無動作時間 (秒) の並び。"""

    items: tuple[tuple[MovementKind, float], ...]
    lead_in_s: float = field(default=LEAD_IN_S)

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError("スケジュールが空です")
        if self.lead_in_s < 0 or any(gap < 0 for _, gap in self.items):
            raise ValueError("無動作時間は 0 以上である必要があります")

    def __len__(self) -> int:
        return len(self.items)

    def count(self, kind: MovementKind) -> int:
        return sum(1 for k, _ in self.items if k is kind)

    @classmethod
    def fixed(cls, kinds: Sequence[MovementKind], gap_s: float) -> "SessionSchedule":
        return cls(tuple((k, gap_s) for k in kinds))

    @classmethod
    def from_counts(
        cls,
        counts: dict[MovementKind, int],
        rng: np.random.Generator,
        gap_range_s: tuple[float, float] = DEFAULT_GAP_RANGE_S,
    ) -> "SessionSchedule":
        """種類ごとの回数から、順序をランダムに並べ替えたスケジュールを作る。"""
        kinds = [k for k, n in counts.items() for _ in range(n)]
        order = rng.permutation(len(kinds))
        gaps = rng.uniform(gap_range_s[0], gap_range_s[1], len(kinds))
        return cls(tuple((kinds[i], float(g)) for i, g in zip(order, gaps)))

    @classmethod
    def training(cls, cfg: PipelineConfig, gap_s: float = TRAINING_GAP_S) -> "SessionSchedule":
        """学習期間用: PB を pb_training_reps 回、続いて上方注視を up_training_reps 回。"""
        kinds = [MovementKind.PROLONGED_BLINK] * cfg.pb_training_reps
        kinds += [MovementKind.UPWARD_GAZE] * cfg.up_training_reps
        return cls.fixed(kinds, gap_s)


def session_rng(profile: SubjectProfile, cfg: PipelineConfig, stream: int = EVAL_STREAM) -> np.random.Generator:
    """プロファイルのシード (PBDETECT_SEED があればそれと組み合わせる) から乱数生成器を作る。"""
    entropy = [profile.seed, stream] if cfg.seed is None else [cfg.seed, profile.seed, stream]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def generate_session(
    profile: SubjectProfile,
    schedule: SessionSchedule,
    cfg: PipelineConfig,
    rng: np.random.Generator | None = None,
) -> EogTrace:
    """無動作区間と動作区間をつないだ正解ラベル付きトレースを生成する。

    無動作区間はノイズのみ。基線は 0 を量子化したレベルに置き、全体に基線変動を重ねて
    cfg.adc_bits で量子化する。動作の振幅は cfg.lsb の整数倍にそろえる。
    """
    rng = rng if rng is not None else session_rng(profile, cfg)
    fs = cfg.sampling_rate_hz
    parts: list[np.ndarray] = []
    labels: list[MovementLabel] = []
    cursor = 0

    def _idle(seconds: float) -> None:
        nonlocal cursor
        n = round(seconds * fs)
        if n <= 0:
            return
        idle = rng.normal(0.0, profile.noise_rms, n) if profile.noise_rms > 0 else np.zeros(n)
        parts.append(idle)
        cursor += n

    _idle(schedule.lead_in_s)
    for kind, gap_s in schedule.items:
        if kind is not MovementKind.NONE_IDLE:
            seg = generate_movement(profile, kind, rng, fs, cfg.lsb).amplitudes
            parts.append(seg)
            labels.append(MovementLabel(kind, cursor, cursor + seg.size - 1))
            cursor += seg.size
        _idle(gap_s)

    signal = np.concatenate(parts) if parts else np.zeros(0)
    signal = signal + quantize(0.0, cfg.adc_bits, cfg.full_scale)
    if profile.wander_amplitude > 0 and profile.wander_hz > 0:
        phase = rng.uniform(0.0, 2.0 * math.pi)
        t = np.arange(signal.size) / fs
        signal = signal + profile.wander_amplitude * np.sin(2.0 * math.pi * profile.wander_hz * t + phase)

    signal = quantize_array(signal, cfg.adc_bits, cfg.full_scale)
    logger.debug(
        "セッションを生成しました: profile=%s, movements=%d, samples=%d",
        profile.profile_id, len(labels), signal.size,
    )
    return EogTrace(fs, signal, labels)


def generate_training_session(profile: SubjectProfile, cfg: PipelineConfig) -> EogTrace:
    return generate_session(
        profile, SessionSchedule.training(cfg), cfg, session_rng(profile, cfg, TRAINING_STREAM)
    )


def generate_eval_session(
    profile: SubjectProfile,
    cfg: PipelineConfig,
    mix: dict[MovementKind, int] | None = None,
) -> EogTrace:
    rng = session_rng(profile, cfg, EVAL_STREAM)
    schedule = SessionSchedule.from_counts(mix or DEFAULT_SESSION_MIX, rng)
    return generate_session(profile, schedule, cfg, rng)
