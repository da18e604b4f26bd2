"""
学習期間モジュール。
PB 統計 (第 1 期) と上方注視の反統計 (第 2 期) を逐次集計し、特徴量ごとの閾値帯を決める。
学習済みモデルは版付きテキスト形式で保存・読み込みできる。
"""

import base64
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .config import PipelineConfig
from .errors import (
    DegenerateTrainingError,
    IncompleteTrainingError,
    InvalidFeatureError,
    ModeMismatchError,
    ModelFormatError,
)
from .features import WaveletBuffer, extract_features, medoid
from .isolator import Isolator, IsolatorEvent
from .memstore import BudgetAccountant
from .models import FEATURE_NAMES, EogTrace, FeatureVector, Wavelet
from .patterns import KEY_VALUE_LINE, MODEL_CHECKSUM, MODEL_HEADER, MODEL_MAGIC, MODEL_SECTION, MODEL_VERSION
from .preprocess import Preprocessor
from .strictmode import FormulaFlags, resolve_formulas

logger = logging.getLogger(__name__)

# 閾値帯の半幅 (標準偏差の倍数)
BAND_SD_MULTIPLIER = 1.5

# 閾値計算に必要な最小観測数
MIN_READINGS = 2


class LearningPhase(int, Enum):
    PB = 1
    """第 1 期: すべての候補を PB とみなす。"""

    UPWARD_GAZE = 2
    """第 2 期: すべての候補を上方注視とみなす。"""


# ── 逐次統計 ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class RunningStats:
    """特徴量ごとの逐次平均と分散アキュムレータ。"""

    count: int = 0
    mean: tuple[float, ...] = (0.0,) * len(FEATURE_NAMES)
    acc: tuple[float, ...] = (0.0,) * len(FEATURE_NAMES)

    def sd(self, flags: FormulaFlags | None = None) -> tuple[float, ...]:
        """SD(N)。既定は sqrt(acc / N)、sd_sqrt=False のときは acc / N。"""
        if self.count == 0:
            return (0.0,) * len(self.acc)
        sd_sqrt = True if flags is None else flags.sd_sqrt
        return tuple(math.sqrt(a / self.count) if sd_sqrt else a / self.count for a in self.acc)


def stats_update(s: RunningStats, v: FeatureVector | Iterable[float]) -> RunningStats:
    """1 観測分を加えた新しい RunningStats を返す。

    mean(N) = (mean(N-1)·(N-1) + value(N)) / N
    acc(N)  = acc(N-1) + (value(N) - mean(N))²   (更新後の平均を使う)

    Raises:
        InvalidFeatureError: 非有限値を含む場合 (s は変更されない)。
    """
    values = v.as_tuple() if isinstance(v, FeatureVector) else tuple(float(x) for x in v)
    if len(values) != len(s.mean):
        raise InvalidFeatureError(f"特徴量の数が一致しません: expected={len(s.mean)}, got={len(values)}")
    bad = [FEATURE_NAMES[i] if i < len(FEATURE_NAMES) else str(i) for i, x in enumerate(values) if not math.isfinite(x)]
    if bad:
        raise InvalidFeatureError(f"非有限の特徴量です: {', '.join(bad)}")

    n = s.count + 1
    means = tuple((m * (n - 1) + x) / n for m, x in zip(s.mean, values))
    accs = tuple(a + (x - m) ** 2 for a, x, m in zip(s.acc, values, means))
    return RunningStats(count=n, mean=means, acc=accs)


# ── 閾値 ──────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ThresholdSet:
    """特徴量ごとの PB 帯 [lt, ut] と反帯 [lat, uat]。"""

    lt: tuple[float, ...]
    ut: tuple[float, ...]
    lat: tuple[float, ...]
    uat: tuple[float, ...]
    merged: tuple[bool, ...]
    """中点補正 (下側 / 上側) が適用された特徴量。"""

    def band(self, feature: str) -> tuple[float, float]:
        i = FEATURE_NAMES.index(feature)
        return self.lt[i], self.ut[i]


def merge_bands(ts: ThresholdSet) -> ThresholdSet:
    """PB 帯と反帯が片側で重なっている特徴量について、重なりの中点で PB 帯を詰める。

    - ut > uat > lt > lat なら lt ← (lt + uat) / 2
    - uat > ut > lat > lt なら ut ← (ut + lat) / 2
    それ以外の重なり方 (包含・一致) は変更しない。補正済みの特徴量には再適用しない。
    """
    lt, ut, merged = list(ts.lt), list(ts.ut), list(ts.merged)
    for i in range(len(lt)):
        if merged[i]:
            continue
        lat, uat = ts.lat[i], ts.uat[i]
        if ut[i] > uat > lt[i] > lat:
            lt[i] = (lt[i] + uat) / 2.0
            merged[i] = True
        elif uat > ut[i] > lat > lt[i]:
            ut[i] = (ut[i] + lat) / 2.0
            merged[i] = True
    return ThresholdSet(tuple(lt), tuple(ut), ts.lat, ts.uat, tuple(merged))


def compute_thresholds(pb: RunningStats, anti: RunningStats, flags: FormulaFlags | None = None) -> ThresholdSet:
    """mean ± 1.5·SD で PB 帯と反帯を求め、中点補正をかける。

    Raises:
        IncompleteTrainingError: どちらかの観測数が 2 未満。
        DegenerateTrainingError: 補正後に lt >= ut となる特徴量がある場合。
    """
    if pb.count < MIN_READINGS or anti.count < MIN_READINGS:
        raise IncompleteTrainingError("閾値計算には各期 2 回以上の観測が必要です", pb.count, anti.count)

    pb_sd, anti_sd = pb.sd(flags), anti.sd(flags)
    raw = ThresholdSet(
        lt=tuple(m - BAND_SD_MULTIPLIER * s for m, s in zip(pb.mean, pb_sd)),
        ut=tuple(m + BAND_SD_MULTIPLIER * s for m, s in zip(pb.mean, pb_sd)),
        lat=tuple(m - BAND_SD_MULTIPLIER * s for m, s in zip(anti.mean, anti_sd)),
        uat=tuple(m + BAND_SD_MULTIPLIER * s for m, s in zip(anti.mean, anti_sd)),
        merged=(False,) * len(pb.mean),
    )
    ts = merge_bands(raw)
    for name, lt, ut in zip(FEATURE_NAMES, ts.lt, ts.ut):
        if not lt < ut:
            raise DegenerateTrainingError(name, lt, ut)
    return ts


# ── 学習済みモデル ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Provenance:
    created_at: str
    pb_reps: int
    up_reps: int
    flags: FormulaFlags


@dataclass(frozen=True, eq=False)
class TrainedModel:
    """学習期間の成果物。"""

    thresholds: ThresholdSet
    buffer: tuple[Wavelet, ...]
    """凍結した第 1 期の wavelet バッファ (格納順)。"""

    medoid_index: int
    config: PipelineConfig
    pb_stats: RunningStats
    anti_stats: RunningStats
    provenance: Provenance
    total_readings: int = 0

    @property
    def reference(self) -> Wavelet:
        """類似度の基準となるメドイド波形。"""
        return self.buffer[self.medoid_index]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrainedModel):
            return NotImplemented
        return (
            self.thresholds == other.thresholds
            and self.buffer == other.buffer
            and self.medoid_index == other.medoid_index
            and self.config.model_dump() == other.config.model_dump()
            and self.pb_stats == other.pb_stats
            and self.anti_stats == other.anti_stats
            and self.provenance == other.provenance
            and self.total_readings == other.total_readings
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass
class _LearningState:
    pb_stats: RunningStats = field(default_factory=RunningStats)
    anti_stats: RunningStats = field(default_factory=RunningStats)
    reference: Wavelet | None = None
    total_readings: int = 0


def run_learning(
    session: Iterable[tuple[LearningPhase, IsolatorEvent]],
    cfg: PipelineConfig,
    accountant: BudgetAccountant | None = None,
) -> TrainedModel:
    """学習期間を実行して TrainedModel を返す。

    第 1 期の候補は現在のバッファに対して特徴量を計算し、PB 統計に加えてバッファへ追加する。
    第 2 期の候補は凍結したバッファのメドイドに対して特徴量を計算し、反統計に加える。
    規定回数を超えた候補は無視する。

    Raises:
        IncompleteTrainingError: 候補が規定回数に満たない場合。
        DegenerateTrainingError: 閾値帯が潰れた場合。
    """
    flags = resolve_formulas(cfg)
    buf = WaveletBuffer(cfg, accountant)
    st = _LearningState()
    try:
        for phase, event in session:
            if not event.is_candidate:
                continue
            w = event.wavelet
            if phase is LearningPhase.PB:
                if st.pb_stats.count >= cfg.pb_training_reps or buf.frozen:
                    continue
                fv = extract_features(w, buf, cfg)
                st.pb_stats = stats_update(st.pb_stats, fv)
                buf.add(w)
                st.total_readings += 1
                logger.info("学習 (PB): reading=%d, similarity=%.4f", st.pb_stats.count, fv.similarity)
            else:
                if st.anti_stats.count >= cfg.up_training_reps:
                    continue
                if st.reference is None:
                    if len(buf) == 0:
                        raise IncompleteTrainingError("第 1 期の候補がありません", 0, 0)
                    buf.freeze()
                    _, st.reference = medoid(buf, cfg.similarity_backend, cfg)
                fv = extract_features(w, None, cfg, reference=st.reference)
                st.anti_stats = stats_update(st.anti_stats, fv)
                st.total_readings += 1
                logger.info("学習 (上方注視): reading=%d, similarity=%.4f", st.anti_stats.count, fv.similarity)

        if st.pb_stats.count < cfg.pb_training_reps or st.anti_stats.count < cfg.up_training_reps:
            raise IncompleteTrainingError(
                "学習期間の候補が規定回数に達しませんでした", st.pb_stats.count, st.anti_stats.count
            )

        thresholds = compute_thresholds(st.pb_stats, st.anti_stats, flags)
        medoid_index, _ = medoid(buf, cfg.similarity_backend, cfg)
        waves = tuple(buf.waves())
    finally:
        buf.close()

    merged = [n for n, m in zip(FEATURE_NAMES, thresholds.merged) if m]
    logger.info(
        "学習が完了しました: pb=%d, up=%d, buffer=%d, medoid=%d, merged=%s",
        st.pb_stats.count, st.anti_stats.count, len(waves), medoid_index, ",".join(merged) or "-",
    )
    return TrainedModel(
        thresholds=thresholds,
        buffer=waves,
        medoid_index=medoid_index,
        config=cfg,
        pb_stats=st.pb_stats,
        anti_stats=st.anti_stats,
        provenance=Provenance(
            created_at=datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
            pb_reps=st.pb_stats.count,
            up_reps=st.anti_stats.count,
            flags=flags,
        ),
        total_readings=st.total_readings,
    )


def phase_by_count(events: Iterable[IsolatorEvent], cfg: PipelineConfig) -> Iterator[tuple[LearningPhase, IsolatorEvent]]:
    """候補の出現順で学習期を割り当てる。最初の pb_training_reps 個が第 1 期、残りが第 2 期。"""
    seen = 0
    for event in events:
        phase = LearningPhase.PB if seen < cfg.pb_training_reps else LearningPhase.UPWARD_GAZE
        if event.is_candidate:
            seen += 1
        yield phase, event


def isolate_events(trace: EogTrace, cfg: PipelineConfig) -> Iterator[IsolatorEvent]:
    """トレースを前処理と状態機械に通してイベント列を返す。"""
    pre = Preprocessor(cfg)
    iso = Isolator(cfg)
    for x in trace.amplitudes:
        yield iso.step(pre.step(float(x)))


def train_from_trace(
    trace: EogTrace,
    cfg: PipelineConfig,
    accountant: BudgetAccountant | None = None,
) -> TrainedModel:
    """学習用トレース (PB を規定回数 → 上方注視を規定回数) からモデルを作る。"""
    return run_learning(phase_by_count(isolate_events(trace, cfg), cfg), cfg, accountant)


# ── モデルファイル ────────────────────────────────────────────────────────────


def _hex_list(values: Iterable[float]) -> str:
    return ",".join(float(v).hex() for v in values)


def _parse_hex_list(text: str) -> tuple[float, ...]:
    return tuple(float.fromhex(t) for t in text.split(",")) if text else ()


def _encode_wave(w: Wavelet) -> str:
    payload = base64.b64encode(np.asarray(w.samples, dtype="<f8").tobytes()).decode("ascii")
    return f"{w.start_index},{w.end_index},{float(w.sampling_rate_hz).hex()},{payload}"


def _decode_wave(text: str) -> Wavelet:
    start, end, fs, payload = text.split(",", 3)
    samples = np.frombuffer(base64.b64decode(payload, validate=True), dtype="<f8").astype(np.float64)
    return Wavelet(samples, int(start), int(end), float.fromhex(fs))


def save_model(m: TrainedModel, sink: BinaryIO) -> None:
    """モデルを版付きテキスト形式で書き出す。数値はすべてビット単位で復元できる。"""
    out = io.StringIO()
    out.write(f"{MODEL_MAGIC} v{MODEL_VERSION}\n")

    out.write("[config]\n")
    for key, value in m.config.model_dump(mode="json").items():
        out.write(f"{key}={json.dumps(value)}\n")

    out.write("[thresholds]\n")
    ts = m.thresholds
    for i, name in enumerate(FEATURE_NAMES):
        bands = _hex_list((ts.lt[i], ts.ut[i], ts.lat[i], ts.uat[i]))
        out.write(f"{name}={bands},{int(ts.merged[i])}\n")

    out.write("[stats]\n")
    for prefix, s in (("pb", m.pb_stats), ("anti", m.anti_stats)):
        out.write(f"{prefix}.count={s.count}\n")
        out.write(f"{prefix}.mean={_hex_list(s.mean)}\n")
        out.write(f"{prefix}.acc={_hex_list(s.acc)}\n")
    out.write(f"total_readings={m.total_readings}\n")
    out.write(f"medoid_index={m.medoid_index}\n")

    out.write("[provenance]\n")
    p = m.provenance
    out.write(f"created_at={p.created_at}\n")
    out.write(f"pb_reps={p.pb_reps}\n")
    out.write(f"up_reps={p.up_reps}\n")
    for key, value in p.flags.as_dict().items():
        out.write(f"flags.{key}={json.dumps(value)}\n")

    out.write("[buffer]\n")
    for w in m.buffer:
        out.write(f"wave={_encode_wave(w)}\n")

    body = out.getvalue().encode("utf-8")
    sink.write(body)
    sink.write(f"checksum={hashlib.sha256(body).hexdigest()}\n".encode("ascii"))


def _split_sections(body: str) -> dict[str, list[tuple[str, str]]]:
    lines = body.split("\n")
    header = MODEL_HEADER.match(lines[0])
    if not header:
        raise ModelFormatError(f"モデルファイルのヘッダーが不正です: {lines[0][:40]!r}")
    version = int(header.group("version"))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"モデルファイルの版が一致しません: expected={MODEL_VERSION}, got={version}")

    sections: dict[str, list[tuple[str, str]]] = {}
    current: list[tuple[str, str]] | None = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        sec = MODEL_SECTION.match(line)
        if sec:
            current = sections.setdefault(sec.group("name"), [])
            continue
        kv = KEY_VALUE_LINE.match(line)
        if current is None or not kv:
            raise ModelFormatError(f"モデルファイルの行を解釈できません: line={lineno}")
        current.append((kv.group("key"), kv.group("value")))
    return sections


def load_model(source: BinaryIO | bytes, expected: PipelineConfig | None = None) -> TrainedModel:
    """save_model で書いたモデルを読み込む。

    expected を渡した場合、計算式フラグが一致しなければ ModeMismatchError を送出する。

    Raises:
        ModelFormatError: 版不一致・途中切れ・チェックサム不一致・書式エラー。
        ModeMismatchError: 計算式フラグが expected と一致しない場合。
    """
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    data = bytes(data)
    if not data.endswith(b"\n"):
        raise ModelFormatError("モデルファイルが途中で切れています")
    cut = data.rfind(b"\n", 0, len(data) - 1) + 1
    body, trailer = data[:cut], data[cut:].decode("ascii", errors="replace").strip()
    m = MODEL_CHECKSUM.match(trailer)
    if not m:
        raise ModelFormatError("チェックサム行がありません (ファイルが途中で切れています)")
    if hashlib.sha256(body).hexdigest() != m.group("digest"):
        raise ModelFormatError("チェックサムが一致しません")

    try:
        sections = _split_sections(body.decode("utf-8"))
        return _build_model(sections, expected)
    except (KeyError, ValueError, IndexError) as exc:
        if isinstance(exc, (ModelFormatError, ModeMismatchError)):
            raise
        raise ModelFormatError(f"モデルファイルの内容が不正です: {exc}") from exc


def _build_model(sections: dict[str, list[tuple[str, str]]], expected: PipelineConfig | None) -> TrainedModel:
    for name in ("config", "thresholds", "stats", "provenance", "buffer"):
        if name not in sections:
            raise ModelFormatError(f"セクションがありません: [{name}]")

    cfg = PipelineConfig(**{k: json.loads(v) for k, v in sections["config"]})

    bands = dict(sections["thresholds"])
    lt, ut, lat, uat, merged = [], [], [], [], []
    for name in FEATURE_NAMES:
        *values, flag = bands[name].split(",")
        a, b, c, d = (float.fromhex(v) for v in values)
        lt.append(a)
        ut.append(b)
        lat.append(c)
        uat.append(d)
        merged.append(flag == "1")
    thresholds = ThresholdSet(tuple(lt), tuple(ut), tuple(lat), tuple(uat), tuple(merged))

    stats = dict(sections["stats"])

    def _stats(prefix: str) -> RunningStats:
        return RunningStats(
            count=int(stats[f"{prefix}.count"]),
            mean=_parse_hex_list(stats[f"{prefix}.mean"]),
            acc=_parse_hex_list(stats[f"{prefix}.acc"]),
        )

    prov = dict(sections["provenance"])
    flags = FormulaFlags(
        sd_sqrt=json.loads(prov["flags.sd_sqrt"]),
        gaussian_square=json.loads(prov["flags.gaussian_square"]),
        fod_abs=json.loads(prov["flags.fod_abs"]),
    )
    if expected is not None and resolve_formulas(expected) != flags:
        raise ModeMismatchError(
            f"モデルの計算式モードが実行時設定と一致しません: model={flags.as_dict()}, "
            f"runtime={resolve_formulas(expected).as_dict()}"
        )

    waves = tuple(_decode_wave(v) for k, v in sections["buffer"] if k == "wave")
    medoid_index = int(stats["medoid_index"])
    if not waves or not 0 <= medoid_index < len(waves):
        raise ModelFormatError(f"wavelet バッファが不正です: waves={len(waves)}, medoid={medoid_index}")

    return TrainedModel(
        thresholds=thresholds,
        buffer=waves,
        medoid_index=medoid_index,
        config=cfg,
        pb_stats=_stats("pb"),
        anti_stats=_stats("anti"),
        provenance=Provenance(
            created_at=prov["created_at"],
            pb_reps=int(prov["pb_reps"]),
            up_reps=int(prov["up_reps"]),
            flags=flags,
        ),
        total_readings=int(stats["total_readings"]),
    )
