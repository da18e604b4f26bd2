"""
エントリーポイント。
シミュレーション・学習・検出・評価・ベンチマーク・ライブモニターをサブコマンドで実行する。

    python -m src.main simulate --profile S02 --out trace.csv --labels labels.csv
    python -m src.main train --trace train.csv --out model.txt
    python -m src.main detect --model model.txt --trace trace.csv
    python -m src.main eval --backend both --out report.csv
    python -m src.main bench --profile S02 --out bench.csv
    python -m src.main serve --model model.txt
"""

import argparse
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import BinaryIO, Iterator

from .config import PipelineConfig, SimilarityBackend, load_config
from .errors import (
    CapacityError,
    DegenerateTrainingError,
    GenerationError,
    IncompleteTrainingError,
    PbDetectError,
)
from .classifier import DetectionPipeline
from .isolator import EventKind
from .harness import (
    check_acceptance,
    run_bench,
    run_eval,
    write_bench_csv,
    write_eval_csv,
    write_snapshots_csv,
)
from .memstore import make_accountant
from .models import EogTrace
from .signal_model import TraceFormat, load_labels, load_trace, save_labels, save_trace
from .simulator import (
    SubjectProfile,
    default_profiles,
    dump_profile,
    generate_eval_session,
    generate_training_session,
    load_profile,
)
from .strictmode import FormulaMode, apply_mode
from .trainer import load_model, save_model, train_from_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_TRAINING_FAILED = 2
EXIT_ACCEPTANCE_UNMET = 3

DETECTIONS_CSV_HEADER = "t_s,start_idx,end_idx,pass_sum,is_pb"
TRACE_EVENTS_CSV_HEADER = "index,event,reason"


def _reconfigure_stdout_encoding() -> None:
    if hasattr(sys.stdout, "reconfigure"):
        sys.stdout.reconfigure(encoding="utf-8", errors="replace")
    if hasattr(sys.stderr, "reconfigure"):
        sys.stderr.reconfigure(encoding="utf-8", errors="replace")


def _setup_logging(level: str) -> None:
    numeric_level = getattr(logging, level.upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f"無効なログレベルです: {level}")
    logging.basicConfig(
        level=numeric_level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S",
        stream=sys.stderr,
    )


@contextmanager
def _open_sink(path: str | None) -> Iterator[BinaryIO]:
    """path が None または "-" なら標準出力に書く。"""
    if path in (None, "-"):
        sys.stdout.flush()
        yield sys.stdout.buffer
        sys.stdout.buffer.flush()
        return
    with open(path, "wb") as f:
        yield f


def _read_bytes(path: str) -> bytes:
    return Path(path).read_bytes()


def _select_profile(name: str | None, profile_file: str | None) -> SubjectProfile:
    if profile_file:
        return load_profile(Path(profile_file).read_text(encoding="utf-8"))
    profiles = {p.profile_id: p for p in default_profiles()}
    name = name or "S02"
    if name not in profiles:
        raise PbDetectError(f"未知のプロファイルです: {name} (S01..S15)")
    return profiles[name]


def _load_trace_arg(args, cfg: PipelineConfig) -> EogTrace:
    trace = load_trace(_read_bytes(args.trace), TraceFormat(args.format.upper()), cfg.sampling_rate_hz)
    if getattr(args, "labels", None):
        trace = EogTrace(trace.sampling_rate_hz, trace.amplitudes, load_labels(_read_bytes(args.labels)))
    return trace


# ── サブコマンド ──────────────────────────────────────────────────────────────


def cmd_simulate(args, cfg: PipelineConfig) -> int:
    profile = _select_profile(args.profile, args.profile_file)
    if args.dump_profile:
        Path(args.dump_profile).write_text(dump_profile(profile), encoding="utf-8")
    if args.session == "training":
        trace = generate_training_session(profile, cfg)
    else:
        trace = generate_eval_session(profile, cfg)
    with _open_sink(args.out) as sink:
        save_trace(trace, sink, TraceFormat(args.format.upper()))
    if args.labels:
        with open(args.labels, "wb") as f:
            save_labels(trace.labels, f)
    logger.info(
        "トレースを生成しました: profile=%s, session=%s, samples=%d, movements=%d",
        profile.profile_id, args.session, len(trace), len(trace.labels),
    )
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    trace = _load_trace_arg(args, cfg)
    try:
        model = train_from_trace(trace, cfg)
    except (IncompleteTrainingError, DegenerateTrainingError, CapacityError) as exc:
        logger.error("学習に失敗しました: %s", exc)
        return EXIT_TRAINING_FAILED
    with _open_sink(args.out) as sink:
        save_model(model, sink)
    return EXIT_OK


def cmd_detect(args, cfg: PipelineConfig) -> int:
    model = load_model(_read_bytes(args.model), expected=cfg)
    trace = _load_trace_arg(args, cfg)
    pipeline = DetectionPipeline(model, cfg, make_accountant(cfg))

    r_values: list[float] = []
    trace_lines: list[str] = []
    with _open_sink(args.out) as sink:
        sink.write((DETECTIONS_CSV_HEADER + "\n").encode("utf-8"))
        for x in trace.amplitudes:
            result = pipeline.push(float(x))
            if args.dump_r:
                r_values.append(pipeline.last_r)
            if args.trace_events and result.isolator_event.kind is not EventKind.NONE:
                trace_lines.append(result.isolator_event.to_trace_line())
            if result.detection is not None:
                sink.write((result.detection.to_csv_row() + "\n").encode("utf-8"))
            if result.alert is not None:
                sink.write((result.alert.to_csv_row() + "\n").encode("utf-8"))

    if args.trace_events:
        Path(args.trace_events).write_text(
            "\n".join([TRACE_EVENTS_CSV_HEADER] + trace_lines) + "\n", encoding="utf-8"
        )
    if args.dump_r:
        with open(args.dump_r, "wb") as f:
            save_trace(r_values, f)
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    profiles = default_profiles()
    if args.profiles:
        wanted = set(args.profiles.split(","))
        profiles = [p for p in profiles if p.profile_id in wanted]
    if args.backend == "both":
        backends = [SimilarityBackend.NCC_MAX, SimilarityBackend.DDTW_SAKOE_CHIBA]
    else:
        backends = [SimilarityBackend.from_cli(args.backend)]

    reports = [run_eval(profiles, cfg, backend, args.workers) for backend in backends]
    with _open_sink(args.out) as sink:
        write_eval_csv(reports, sink, timing=args.timing)

    if any(r.failed for report in reports for r in report.rows):
        return EXIT_TRAINING_FAILED
    problems = [p for report in reports for p in check_acceptance(report)]
    for p in problems:
        logger.warning("合格基準: %s", p)
    return EXIT_ACCEPTANCE_UNMET if problems else EXIT_OK


def cmd_bench(args, cfg: PipelineConfig) -> int:
    profile = _select_profile(args.profile, args.profile_file)
    report = run_bench(profile, cfg, args.readings)
    with _open_sink(args.out) as sink:
        write_bench_csv(report, sink)
    if args.snapshots and report.retention is not None:
        with open(args.snapshots, "wb") as f:
            write_snapshots_csv(report.retention.snapshots, f)
    return EXIT_OK


def cmd_serve(args, cfg: PipelineConfig) -> int:
    from .monitor import LiveMonitor
    from .web import app, set_monitor

    model = load_model(_read_bytes(args.model), expected=cfg)
    monitor = LiveMonitor(model, cfg)
    monitor.start()
    set_monitor(monitor)

    port = args.port or cfg.web_port
    logger.info("モニターサーバーを起動しました (http://localhost:%d)", port)
    try:
        app.run(host=args.host, port=port, debug=False, use_reloader=False, threaded=True)
    finally:
        monitor.stop()
    return EXIT_OK


# ── 引数 ──────────────────────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbdetect", description="EOG 長時間瞬目 (PB) 検出")
    parser.add_argument("--config", help="key=value 形式の設定ファイル")
    parser.add_argument("--formula-mode", choices=["corrected", "strict"], help="計算式モード")
    parser.add_argument("--log-level", help="ログレベル (DEBUG / INFO / WARNING / ERROR)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="仮想被験者のトレースを生成する")
    p.add_argument("--profile", help="既定プロファイル ID (S01..S15)")
    p.add_argument("--profile-file", help="key=value 形式のプロファイルファイル")
    p.add_argument("--session", choices=["eval", "training"], default="eval")
    p.add_argument("--format", choices=["csv", "raw_f32"], default="csv")
    p.add_argument("--out", help="トレースの出力先 (省略時は標準出力)")
    p.add_argument("--labels", help="ラベル CSV の出力先")
    p.add_argument("--dump-profile", help="使用したプロファイルの書き出し先")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="学習用トレースからモデルを作る")
    p.add_argument("--trace", required=True)
    p.add_argument("--format", choices=["csv", "raw_f32"], default="csv")
    p.add_argument("--out", help="モデルの出力先 (省略時は標準出力)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="学習済みモデルでトレースを判定する")
    p.add_argument("--model", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--format", choices=["csv", "raw_f32"], default="csv")
    p.add_argument("--out", help="検出イベントの出力先 (省略時は標準出力)")
    p.add_argument("--trace-events", help="状態機械イベント (index,event,reason) の出力先")
    p.add_argument("--dump-r", help="前処理後の r 系列 (トレース CSV 形式) の出力先")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="既定プロファイルで学習・判定・採点する")
    p.add_argument("--profiles", help="カンマ区切りのプロファイル ID (省略時は全 15 件)")
    p.add_argument("--backend", choices=["ncc", "ddtw", "both"], default="ncc")
    p.add_argument("--workers", type=int, help="並列プロセス数 (1 で逐次実行)")
    p.add_argument("--timing", action="store_true", help="処理時間の列を出力する")
    p.add_argument("--out", help="レポートの出力先 (省略時は標準出力)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="判定時間とメモリ使用量を測る")
    p.add_argument("--profile")
    p.add_argument("--profile-file")
    p.add_argument("--readings", type=int, default=1000, help="メモリ保持試験の保存回数")
    p.add_argument("--out", help="metric,value CSV の出力先 (省略時は標準出力)")
    p.add_argument("--snapshots", help="メモリスナップショット CSV の出力先")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="ライブモニターサーバーを起動する")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    _reconfigure_stdout_encoding()
    args = build_parser().parse_args(argv)

    try:
        cfg = load_config(args.config)
    except PbDetectError as exc:
        print(f"設定エラー: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.formula_mode:
        cfg = apply_mode(cfg, FormulaMode.from_cli(args.formula_mode))
    _setup_logging(args.log_level or cfg.log_level)
    logger.debug("設定: mode=%s, backend=%s", cfg.formula_mode.value, cfg.similarity_backend.value)

    try:
        return args.func(args, cfg)
    except GenerationError as exc:
        logger.error("トレース生成に失敗しました: %s", exc)
        return EXIT_ERROR
    except (PbDetectError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
