"""
評価ハーネスモジュール。
プロファイルごとに学習 → 運用セッション → 採点を行い、被験者別の精度表とベンチマークを出力する。
"""

import csv
import hashlib
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .classifier import DetectionPipeline, run_operational
from .config import PipelineConfig, SimilarityBackend, dump_config
from .errors import (
    CapacityError,
    DegenerateTrainingError,
    GenerationError,
    IncompleteTrainingError,
    ScoringError,
)
from .features import WaveletBuffer
from .isolator import Isolator
from .memstore import EvictionPolicy, make_accountant
from .models import (
    DetectionEvent,
    EogTrace,
    EvalReport,
    MovementKind,
    MovementLabel,
    OutcomeTally,
    ProfileResult,
    Wavelet,
)
from .preprocess import Preprocessor
from .simulator import SubjectProfile, generate_eval_session, generate_training_session
from .trainer import isolate_events, train_from_trace

logger = logging.getLogger(__name__)

EVAL_CSV_HEADER = (
    "Subject Profile",
    "Total Readings",
    "Correct Detections",
    "Wrong Detections",
    "False Positives",
    "True Negatives",
    "Avg. Time per Detection (ms)",
    "% Accuracy",
    "Unclassified",
    "Upward Gaze FP %",
    "Pooled % Accuracy",
    "Status",
    "mode",
    "backend",
)

SNAPSHOT_CSV_HEADER = ("t_s", "live_bytes", "high_water_bytes", "waves_stored")

# 合格基準
MIN_MEAN_ACCURACY_PCT = 80.0
MIN_PROFILE_ACCURACY_PCT = 65.0
MAX_UPWARD_GAZE_FP_PCT = 15.0

# 学習に失敗したプロファイルとして扱う例外
_TRAINING_FAILURES = (IncompleteTrainingError, DegenerateTrainingError, CapacityError, GenerationError)


# ── 採点 ──────────────────────────────────────────────────────────────────────


def _assign(event: DetectionEvent, labels: Sequence[MovementLabel]) -> int:
    best, best_overlap = -1, 0
    for i, lb in enumerate(labels):
        ov = lb.overlap(event.start_index, event.end_index)
        if ov > best_overlap:
            best, best_overlap = i, ov
    if best < 0:
        raise ScoringError(
            f"検出イベントがどのラベル区間とも重なりません: start={event.start_index}, end={event.end_index}"
        )
    return best


def score_session(events: Iterable[DetectionEvent], labels: Sequence[MovementLabel]) -> OutcomeTally:
    """ラベル付き動作ごとに 1 つの区分へ採点する。

    - PB ラベル: PB 判定があれば正解。候補はあったが PB でなければ true negative、
      候補がなければ unclassified (いずれも誤り)
    - PB 以外のラベル: PB 判定があれば false positive (誤り)、なければ正解

    Raises:
        ScoringError: どのラベルとも重ならないイベントがある場合。
    """
    labels = list(labels)
    seen = [False] * len(labels)
    flagged = [False] * len(labels)
    latencies: list[float] = []
    for ev in events:
        i = _assign(ev, labels)
        seen[i] = True
        flagged[i] = flagged[i] or ev.is_pb
        latencies.append(ev.decision_latency_ms)

    tally = OutcomeTally(total_readings=len(labels))
    for lb, has_event, is_pb in zip(labels, seen, flagged):
        if lb.kind is MovementKind.UPWARD_GAZE:
            tally.upward_gazes += 1
        if lb.kind is MovementKind.PROLONGED_BLINK:
            if is_pb:
                tally.correct_detections += 1
            elif has_event:
                tally.true_negatives += 1
            else:
                tally.unclassified += 1
        elif is_pb:
            tally.false_positives += 1
            if lb.kind is MovementKind.UPWARD_GAZE:
                tally.upward_gaze_false_positives += 1
        else:
            tally.correct_detections += 1
    tally.wrong_detections = tally.false_positives + tally.true_negatives + tally.unclassified
    tally.avg_detection_ms = float(np.mean(latencies)) if latencies else 0.0
    return tally


# ── 評価 ──────────────────────────────────────────────────────────────────────


def config_fingerprint(cfg: PipelineConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:12]


def evaluate_profile(profile: SubjectProfile, cfg: PipelineConfig) -> ProfileResult:
    """1 プロファイル分の学習・運用・採点。学習失敗は例外にせず結果に記録する。"""
    try:
        model = train_from_trace(generate_training_session(profile, cfg), cfg)
    except _TRAINING_FAILURES as exc:
        logger.error("学習に失敗しました: profile=%s, error=%s", profile.profile_id, exc)
        return ProfileResult(profile.profile_id, None, profile.hard, str(exc))

    session = generate_eval_session(profile, cfg)
    events = [e for e in run_operational(session, model, cfg) if isinstance(e, DetectionEvent)]
    tally = score_session(events, session.labels)
    logger.info(
        "評価が完了しました: profile=%s, readings=%d, correct=%d, fp=%d, accuracy=%.2f",
        profile.profile_id, tally.total_readings, tally.correct_detections,
        tally.false_positives, tally.accuracy_pct,
    )
    return ProfileResult(profile.profile_id, tally, profile.hard)


def run_eval(
    profiles: Sequence[SubjectProfile],
    cfg: PipelineConfig,
    backend: SimilarityBackend | None = None,
    workers: int | None = None,
) -> EvalReport:
    """全プロファイルを評価する。workers が 1 以外ならプロセスプールで並列実行する。

    結果は並列度に関係なくプロファイル ID 順に並ぶ。
    """
    if not profiles:
        raise ValueError("プロファイルが 1 つもありません")
    if backend is not None:
        cfg = cfg.model_copy(update={"similarity_backend": backend})

    if workers == 1:
        rows = [evaluate_profile(p, cfg) for p in profiles]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(evaluate_profile, profiles, [cfg] * len(profiles)))

    rows.sort(key=lambda r: r.profile_id)
    return EvalReport(
        rows=rows,
        backend=cfg.similarity_backend.value,
        mode=cfg.formula_mode.value,
        config_fingerprint=config_fingerprint(cfg),
    )


def check_acceptance(report: EvalReport) -> list[str]:
    """合格基準を満たさない項目のメッセージを返す。空なら合格。"""
    problems = []
    if report.mean_accuracy_pct < MIN_MEAN_ACCURACY_PCT:
        problems.append(f"平均精度が基準未満です: {report.mean_accuracy_pct:.2f} < {MIN_MEAN_ACCURACY_PCT}")
    for row in report.scored:
        if row.tally.accuracy_pct < MIN_PROFILE_ACCURACY_PCT:
            problems.append(f"精度が基準未満です: profile={row.profile_id}, accuracy={row.tally.accuracy_pct:.2f}")
        if not row.hard and row.tally.upward_gaze_fp_pct > MAX_UPWARD_GAZE_FP_PCT:
            problems.append(
                f"上方注視の誤検出率が基準を超えています: profile={row.profile_id}, "
                f"fp={row.tally.upward_gaze_fp_pct:.2f}%"
            )
    return problems


def _fmt_pct(value: float) -> str:
    return f"{value:.2f}"


def write_eval_csv(reports: Sequence[EvalReport], sink: BinaryIO, timing: bool = False) -> None:
    """被験者別の精度表を書き出す。各レポートの末尾に AGGREGATE 行を付ける。

    timing=False のときは処理時間の列を "-" にする (出力を実行ごとに同一にするため)。
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVAL_CSV_HEADER)
    for report in reports:
        for row in report.rows:
            if row.failed:
                writer.writerow([row.profile_id, "", "", "", "", "", "", "", "", "", "", "failed", report.mode, report.backend])
                continue
            t = row.tally
            writer.writerow([
                row.profile_id,
                t.total_readings,
                t.correct_detections,
                t.wrong_detections,
                t.false_positives,
                t.true_negatives,
                f"{t.avg_detection_ms:.3f}" if timing else "-",
                _fmt_pct(t.accuracy_pct),
                t.unclassified,
                _fmt_pct(t.upward_gaze_fp_pct),
                "",
                "hard" if row.hard else "ok",
                report.mode,
                report.backend,
            ])
        scored = report.scored
        total = lambda attr: sum(getattr(r.tally, attr) for r in scored)  # noqa: E731
        avg_ms = float(np.mean([r.tally.avg_detection_ms for r in scored])) if scored else 0.0
        writer.writerow([
            "AGGREGATE",
            total("total_readings"),
            total("correct_detections"),
            total("wrong_detections"),
            total("false_positives"),
            total("true_negatives"),
            f"{avg_ms:.3f}" if timing else "-",
            _fmt_pct(report.mean_accuracy_pct),
            total("unclassified"),
            _fmt_pct(report.pooled_upward_gaze_fp_pct),
            _fmt_pct(report.pooled_accuracy_pct),
            f"{len(scored)}/{len(report.rows)}",
            report.mode,
            report.backend,
        ])
    sink.write(buf.getvalue().encode("utf-8"))


# ── ベンチマーク ──────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class MemorySnapshot:
    t_s: float
    live_bytes: int
    high_water_bytes: int
    waves_stored: int


@dataclass
class RetentionReport:
    """wavelet を保存し続けたときのメモリ挙動。"""

    readings: int
    stored_before_failure: int | None
    """退避なしで予算を使い切るまでに保存できた波形数。失敗しなければ None。"""

    high_water_bytes: int
    budget_bytes: int
    max_slack: int
    slack_bound_ok: bool
    snapshots: list[MemorySnapshot] = field(default_factory=list)


@dataclass
class BenchReport:
    mean_detect_ms: float
    p99_detect_ms: float
    max_detect_ms: float
    high_water_bytes: int
    realtime_factor: float
    detections: int
    retention: RetentionReport | None = None

    def metrics(self) -> list[tuple[str, str]]:
        rows = [
            ("mean_detect_ms", f"{self.mean_detect_ms:.4f}"),
            ("p99_detect_ms", f"{self.p99_detect_ms:.4f}"),
            ("max_detect_ms", f"{self.max_detect_ms:.4f}"),
            ("high_water_bytes", str(self.high_water_bytes)),
            ("realtime_factor", f"{self.realtime_factor:.1f}"),
            ("detections", str(self.detections)),
        ]
        if self.retention is not None:
            r = self.retention
            rows += [
                ("retention_readings", str(r.readings)),
                ("retention_stored_before_failure", "" if r.stored_before_failure is None else str(r.stored_before_failure)),
                ("retention_high_water_bytes", str(r.high_water_bytes)),
                ("retention_max_slack", str(r.max_slack)),
            ]
        return rows


def run_retention(wavelets: Sequence[Wavelet], cfg: PipelineConfig, readings: int = 1000, capacity: int = 64) -> RetentionReport:
    """wavelet を readings 回 (足りなければ繰り返して) バッファに保存し続ける。

    cfg.eviction_enabled=False なら最初の CapacityError で止め、そこまでの保存数を記録する。
    """
    if not wavelets:
        raise ValueError("保存する wavelet がありません")
    accountant = make_accountant(cfg)
    # 運用時と同じく前処理と状態機械の領域を先に計上する
    Preprocessor(cfg, accountant)
    Isolator(cfg, accountant)

    span_s = (wavelets[-1].end_index + 1) / wavelets[-1].sampling_rate_hz
    buf = WaveletBuffer(cfg, accountant, capacity=capacity)
    snapshots: list[MemorySnapshot] = []
    stored_before_failure = None
    max_slack = 0
    slack_ok = True
    try:
        for k in range(readings):
            w = wavelets[k % len(wavelets)]
            try:
                buf.add(w)
            except CapacityError:
                if accountant.policy is EvictionPolicy.NONE:
                    stored_before_failure = len(buf)
                    logger.warning("メモリ予算を使い切りました: stored=%d", stored_before_failure)
                    break
                raise
            slack = buf.store.total_slack()
            max_slack = max(max_slack, slack)
            slack_ok = slack_ok and slack <= len(buf) * (cfg.hat_leaf_len - 1)
            snap = accountant.snapshot()
            # 繰り返し分はセッション長ずつずらした時刻にする
            t_s = (k // len(wavelets)) * span_s + w.end_index / w.sampling_rate_hz
            snapshots.append(MemorySnapshot(t_s, snap.live_bytes, snap.high_water_bytes, len(buf)))
    finally:
        buf.close()

    return RetentionReport(
        readings=readings,
        stored_before_failure=stored_before_failure,
        high_water_bytes=accountant.high_water_bytes,
        budget_bytes=accountant.budget_bytes,
        max_slack=max_slack,
        slack_bound_ok=slack_ok,
        snapshots=snapshots,
    )


def labelled_wavelets(trace: EogTrace, cfg: PipelineConfig, kind: MovementKind) -> list[Wavelet]:
    """指定種別のラベルと重なる候補波形だけを取り出す。"""
    labels = [lb for lb in trace.labels if lb.kind is kind]
    return [
        e.wavelet
        for e in isolate_events(trace, cfg)
        if e.is_candidate
        and any(lb.overlap(e.wavelet.start_index, e.wavelet.end_index) > 0 for lb in labels)
    ]


def run_bench(profile: SubjectProfile, cfg: PipelineConfig, retention_readings: int = 1000) -> BenchReport:
    """1 プロファイルで判定時間・実時間比・メモリ最大使用量を測る。"""
    model = train_from_trace(generate_training_session(profile, cfg), cfg)
    session = generate_eval_session(profile, cfg)
    accountant = make_accountant(cfg)
    pipeline = DetectionPipeline(model, cfg, accountant)

    latencies: list[float] = []
    started = time.perf_counter()
    for x in session.amplitudes:
        result = pipeline.push(float(x))
        if result.detection is not None:
            latencies.append(result.detection.decision_latency_ms)
    elapsed = time.perf_counter() - started

    wavelets = labelled_wavelets(session, cfg, MovementKind.PROLONGED_BLINK)
    retention = run_retention(wavelets, cfg, retention_readings) if wavelets else None

    lat = np.asarray(latencies) if latencies else np.zeros(1)
    report = BenchReport(
        mean_detect_ms=float(lat.mean()),
        p99_detect_ms=float(np.percentile(lat, 99)),
        max_detect_ms=float(lat.max()),
        high_water_bytes=accountant.high_water_bytes,
        realtime_factor=session.duration_s / elapsed if elapsed > 0 else float("inf"),
        detections=len(latencies),
        retention=retention,
    )
    logger.info(
        "ベンチマーク: profile=%s, mean=%.3fms, p99=%.3fms, realtime=%.1fx, high_water=%d",
        profile.profile_id, report.mean_detect_ms, report.p99_detect_ms,
        report.realtime_factor, report.high_water_bytes,
    )
    return report


def write_bench_csv(report: BenchReport, sink: BinaryIO) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("metric", "value"))
    writer.writerows(report.metrics())
    sink.write(buf.getvalue().encode("utf-8"))


def write_snapshots_csv(snapshots: Iterable[MemorySnapshot], sink: BinaryIO) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SNAPSHOT_CSV_HEADER)
    for s in snapshots:
        writer.writerow((f"{s.t_s:.3f}", s.live_bytes, s.high_water_bytes, s.waves_stored))
    sink.write(buf.getvalue().encode("utf-8"))
