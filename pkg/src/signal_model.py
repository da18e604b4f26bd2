"""
信号表現モジュール。
ADC 量子化と、トレース (CSV / RAW_F32) およびラベル CSV の読み書きを行う。
"""

import io
import logging
from enum import Enum
from typing import BinaryIO, Iterable

import numpy as np

from .errors import ConfigurationError, EmptyTraceError, TraceFormatError
from .models import EogTrace, MovementKind, MovementLabel
from .patterns import LABELS_CSV_HEADER, LABELS_CSV_ROW, TRACE_CSV_HEADER, TRACE_CSV_ROW

logger = logging.getLogger(__name__)


class TraceFormat(str, Enum):
    CSV = "CSV"
    RAW_F32 = "RAW_F32"


# ── 量子化 ────────────────────────────────────────────────────────────────────


def _levels(adc_bits: int, full_scale: tuple[float, float]) -> tuple[float, float, int]:
    lo, hi = full_scale
    if adc_bits < 1:
        raise ConfigurationError(f"adc_bits は 1 以上である必要があります: adc_bits={adc_bits}")
    if not lo < hi:
        raise ConfigurationError(f"フルスケール範囲が不正です: full_scale=[{lo}, {hi}]")
    top = (1 << adc_bits) - 1
    return lo, (hi - lo) / top, top


def _level_index(clipped, lo: float, hi: float, top: int):
    # 中間点は上側のレベルに丸める (round half up)。(x - lo)·top / (hi - lo) の形なら中間点はちょうど k + 0.5 になる
    return np.clip(np.floor((clipped - lo) * top / (hi - lo) + 0.5), 0, top)


def quantize(amplitude: float, adc_bits: int, full_scale: tuple[float, float] = (-1.0, 1.0)) -> float:
    """振幅を 2^adc_bits 段の一様な量子化レベルのうち最も近いものに丸める。

    レベルはフルスケールの両端を含む。範囲外の値は端にクランプする。
    2 つのレベルのちょうど中間は上側のレベルに丸める。

    Raises:
        ConfigurationError: adc_bits が 0 以下、または範囲が逆転している場合。
    """
    lo, step, top = _levels(adc_bits, full_scale)
    hi = full_scale[1]
    k = int(_level_index(min(max(float(amplitude), lo), hi), lo, hi, top))
    return lo + k * step


def quantize_array(values: np.ndarray, adc_bits: int, full_scale: tuple[float, float]) -> np.ndarray:
    """quantize の配列版。要素ごとの結果は quantize と一致する。"""
    lo, step, top = _levels(adc_bits, full_scale)
    hi = full_scale[1]
    clipped = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    return lo + _level_index(clipped, lo, hi, top) * step


# ── トレース入出力 ────────────────────────────────────────────────────────────


def load_trace(
    source: BinaryIO | bytes,
    fmt: TraceFormat | str = TraceFormat.CSV,
    sampling_rate_hz: float = 250.0,
) -> EogTrace:
    """トレースを読み込む。

    CSV は 1 行目がヘッダー ``index,amplitude``、以降 1 行 1 サンプル。
    index は 0 からの連番でなければならない。不正な行はスキップせずエラーにする。

    Raises:
        TraceFormatError: 書式エラー (行番号 / バイトオフセット付き)。
        EmptyTraceError: サンプルが 1 件もない場合。
    """
    fmt = TraceFormat(fmt)
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    if not data:
        raise EmptyTraceError("トレースが空です")

    if fmt is TraceFormat.RAW_F32:
        if len(data) % 4:
            raise TraceFormatError(
                "RAW_F32 のバイト数が 4 の倍数ではありません", offset=len(data) - len(data) % 4
            )
        amplitudes = np.frombuffer(bytes(data), dtype="<f4").astype(np.float64)
        return EogTrace(sampling_rate_hz=sampling_rate_hz, amplitudes=amplitudes)

    try:
        text = bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TraceFormatError("UTF-8 として解釈できません", offset=exc.start) from exc

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != TRACE_CSV_HEADER:
        raise TraceFormatError(f"ヘッダーが {TRACE_CSV_HEADER!r} ではありません", line=1)

    amplitudes: list[float] = []
    for lineno, line in enumerate(lines[1:], start=2):
        m = TRACE_CSV_ROW.match(line.strip())
        if not m:
            raise TraceFormatError(f"行を解釈できません: {line!r}", line=lineno)
        index = int(m.group("index"))
        if index != len(amplitudes):
            raise TraceFormatError(
                f"サンプル番号が連番ではありません: expected={len(amplitudes)}, got={index}",
                line=lineno,
            )
        amplitudes.append(float(m.group("amplitude")))

    if not amplitudes:
        raise EmptyTraceError("トレースにサンプルがありません")
    return EogTrace(sampling_rate_hz=sampling_rate_hz, amplitudes=np.array(amplitudes))


def save_trace(trace: EogTrace | Iterable[float], sink: BinaryIO, fmt: TraceFormat | str = TraceFormat.CSV) -> None:
    """トレースを書き出す。CSV は repr 表記なので float64 のまま読み戻せる。"""
    fmt = TraceFormat(fmt)
    values = trace.amplitudes if isinstance(trace, EogTrace) else np.asarray(list(trace), dtype=np.float64)
    if fmt is TraceFormat.RAW_F32:
        sink.write(np.asarray(values, dtype="<f4").tobytes())
        return
    buf = io.StringIO()
    buf.write(TRACE_CSV_HEADER + "\n")
    for i, v in enumerate(values):
        buf.write(f"{i},{float(v)!r}\n")
    sink.write(buf.getvalue().encode("utf-8"))


# ── ラベル入出力 ──────────────────────────────────────────────────────────────


def save_labels(labels: Iterable[MovementLabel], sink: BinaryIO) -> None:
    lines = [LABELS_CSV_HEADER] + [f"{lb.kind.value},{lb.start_idx},{lb.end_idx}" for lb in labels]
    sink.write(("\n".join(lines) + "\n").encode("utf-8"))


def load_labels(source: BinaryIO | bytes) -> list[MovementLabel]:
    """ラベル CSV ``kind,start_idx,end_idx`` を読み込む。"""
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    lines = bytes(data).decode("utf-8").splitlines()
    if not lines or lines[0].strip() != LABELS_CSV_HEADER:
        raise TraceFormatError(f"ヘッダーが {LABELS_CSV_HEADER!r} ではありません", line=1)
    labels = []
    for lineno, line in enumerate(lines[1:], start=2):
        m = LABELS_CSV_ROW.match(line.strip())
        if not m:
            raise TraceFormatError(f"行を解釈できません: {line!r}", line=lineno)
        try:
            kind = MovementKind(m.group("kind"))
        except ValueError as exc:
            raise TraceFormatError(f"未知の動作種別です: {m.group('kind')}", line=lineno) from exc
        labels.append(MovementLabel(kind, int(m.group("start")), int(m.group("end"))))
    return labels
