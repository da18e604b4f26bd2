"""
運用期間の判定モジュール。
ガウス型ファジィ帰属度で各特徴量を評価し、pass_sum の比率で PB かどうかを決める。
PB が短時間に繰り返されたら居眠りエピソードとして警報を出す。
"""

import logging
import math
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

from .config import PipelineConfig
from .errors import ConfigurationError, ModeMismatchError, StreamOrderError
from .features import extract_features
from .isolator import Isolator, IsolatorEvent
from .memstore import BudgetAccountant
from .models import FEATURE_NAMES, DetectionEvent, DrowsinessAlert, EogTrace, FeatureVector
from .preprocess import Preprocessor
from .strictmode import FormulaFlags, resolve_formulas
from .trainer import TrainedModel

logger = logging.getLogger(__name__)


# ── ファジィ判定 ──────────────────────────────────────────────────────────────


def fuzzy_membership(value: float, lt: float, ut: float, flags: FormulaFlags | None = None) -> float:
    """閾値帯 [lt, ut] に対するガウス型帰属度。

    中心 c = (lt + ut) / 2、半幅 h = (ut - lt) / 2、z = (value - c) / h として exp(-z²/2)。
    gaussian_square=False のときは exp(-z/2)。

    Raises:
        ConfigurationError: lt >= ut の場合。
    """
    if not lt < ut:
        raise ConfigurationError(f"閾値帯が不正です: lt={lt!r}, ut={ut!r}")
    c = (ut + lt) / 2.0
    h = (ut - lt) / 2.0
    z = (value - c) / h
    if flags is None or flags.gaussian_square:
        return math.exp(-(z * z) / 2.0)
    return math.exp(-z / 2.0)


def defuzzify(pass_sum: float, total_features: int, pass_ratio: float) -> bool:
    """pass_sum / total_features >= pass_ratio なら PB。境界は PB 側に含める。"""
    return pass_sum / total_features >= pass_ratio


def classify(v: FeatureVector, m: TrainedModel, cfg: PipelineConfig | None = None) -> DetectionEvent:
    """特徴量ベクトルを学習済み閾値で判定する。

    帯の外にある特徴量も小さな帰属度として加算する (1 つの特徴量だけで棄却はしない)。
    span と時刻は持たないので、呼び出し側で埋めること。

    Raises:
        ConfigurationError: 特徴量数と閾値数が一致しない場合。
    """
    cfg = cfg or m.config
    flags = resolve_formulas(cfg)
    ts = m.thresholds
    values = v.as_tuple()
    if not (len(values) == len(ts.lt) == len(ts.ut) == len(FEATURE_NAMES)):
        raise ConfigurationError(
            f"特徴量数とモデルの閾値数が一致しません: features={len(values)}, thresholds={len(ts.lt)}"
        )
    n = cfg.total_features
    fuzz_val = tuple(fuzzy_membership(values[i], ts.lt[i], ts.ut[i], flags) for i in range(n))
    pass_sum = math.fsum(fuzz_val)
    return DetectionEvent(
        start_index=0,
        end_index=0,
        t_s=0.0,
        features=v,
        fuzz_val=fuzz_val,
        pass_sum=pass_sum,
        is_pb=defuzzify(pass_sum, n, cfg.pass_ratio),
    )


# ── 居眠りエピソード ──────────────────────────────────────────────────────────


class EpisodeMonitor:
    """直近 episode_window_s 秒の PB 時刻を保持し、episode_min_pbs 回以上で警報を出す。

    警報を出したらキューを空にする (1 エピソードにつき警報 1 回)。
    """

    def __init__(self, window_s: float = 10.0, min_pbs: int = 2) -> None:
        self.window_s = window_s
        self.min_pbs = min_pbs
        self._times: deque[float] = deque()
        self._last_t: float | None = None

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "EpisodeMonitor":
        return cls(cfg.episode_window_s, cfg.episode_min_pbs)

    @property
    def pending(self) -> tuple[float, ...]:
        return tuple(self._times)

    def step(self, is_pb: bool, t: float) -> DrowsinessAlert | None:
        """判定 1 件を時刻 t で取り込む。

        Raises:
            StreamOrderError: t が前回より小さい場合。
        """
        if self._last_t is not None and t < self._last_t:
            raise StreamOrderError(f"時刻が単調増加していません: last={self._last_t}, t={t}")
        self._last_t = t
        if is_pb:
            self._times.append(t)
        while self._times and t - self._times[0] > self.window_s:
            self._times.popleft()
        if len(self._times) < self.min_pbs:
            return None
        alert = DrowsinessAlert(t_s=t, pb_times=tuple(self._times), window_s=self.window_s)
        self._times.clear()
        logger.warning("居眠りの兆候を検出しました: t=%.3f, pbs=%d", t, alert.count)
        return alert

    def reset(self) -> None:
        self._times.clear()
        self._last_t = None


def episode_step(monitor: EpisodeMonitor, event: DetectionEvent, t: float) -> DrowsinessAlert | None:
    return monitor.step(event.is_pb, t)


# ── パイプライン ──────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class StepResult:
    """1 サンプル処理の結果。"""

    isolator_event: IsolatorEvent
    detection: DetectionEvent | None = None
    alert: DrowsinessAlert | None = None


def check_compatible(model: TrainedModel, cfg: PipelineConfig) -> None:
    """モデルとストリーム設定の互換性を検査する。

    Raises:
        ConfigurationError: サンプリング周波数や前処理設定が異なる場合。
        ModeMismatchError: 計算式フラグが異なる場合。
    """
    trained, runtime = model.config.stream_fingerprint(), cfg.stream_fingerprint()
    diff = sorted(k for k in trained if trained[k] != runtime.get(k))
    if diff:
        raise ConfigurationError(
            "モデルとストリームの設定が一致しません: "
            + ", ".join(f"{k}(model={trained[k]}, stream={runtime.get(k)})" for k in diff)
        )
    if resolve_formulas(cfg) != model.provenance.flags:
        raise ModeMismatchError(
            f"計算式モードが一致しません: model={model.provenance.flags.as_dict()}, "
            f"runtime={resolve_formulas(cfg).as_dict()}"
        )


class DetectionPipeline:
    """前処理 → 状態機械 → 特徴量 → 判定 → エピソード監視 を 1 サンプルずつ進める。"""

    def __init__(
        self,
        model: TrainedModel,
        cfg: PipelineConfig | None = None,
        accountant: BudgetAccountant | None = None,
    ) -> None:
        self.cfg = cfg or model.config
        check_compatible(model, self.cfg)
        self.model = model
        self.preprocessor = Preprocessor(self.cfg, accountant)
        self.isolator = Isolator(self.cfg, accountant)
        self.monitor = EpisodeMonitor.from_config(self.cfg)
        self._reference = model.reference
        self.last_r = 0.0

    def push(self, x_n: float) -> StepResult:
        r = self.preprocessor.step(x_n)
        self.last_r = r
        ev = self.isolator.step(r)
        if not ev.is_candidate:
            return StepResult(ev)

        started = time.perf_counter()
        w = ev.wavelet
        fv = extract_features(w, None, self.cfg, reference=self._reference)
        verdict = classify(fv, self.model, self.cfg)
        t_s = ev.index / self.cfg.sampling_rate_hz
        detection = DetectionEvent(
            start_index=w.start_index,
            end_index=w.end_index,
            t_s=t_s,
            features=fv,
            fuzz_val=verdict.fuzz_val,
            pass_sum=verdict.pass_sum,
            is_pb=verdict.is_pb,
            decision_latency_ms=(time.perf_counter() - started) * 1000.0,
        )
        logger.debug(
            "判定: t=%.3f, start=%d, end=%d, pass_sum=%.4f, is_pb=%s",
            t_s, w.start_index, w.end_index, verdict.pass_sum, verdict.is_pb,
        )
        alert = self.monitor.step(detection.is_pb, t_s)
        return StepResult(ev, detection, alert)

    def reset(self) -> None:
        self.preprocessor.reset()
        self.isolator.reset()
        self.monitor.reset()


def run_operational(
    source: EogTrace | Iterable[float],
    model: TrainedModel,
    cfg: PipelineConfig | None = None,
    accountant: BudgetAccountant | None = None,
) -> Iterator[DetectionEvent | DrowsinessAlert]:
    """トレースまたはサンプル列を判定し、検出イベントと警報を順に返す。"""
    pipeline = DetectionPipeline(model, cfg, accountant)
    samples = source.amplitudes if isinstance(source, EogTrace) else source
    for x in samples:
        result = pipeline.push(float(x))
        if result.detection is not None:
            yield result.detection
        if result.alert is not None:
            yield result.alert


# ── ワーカースレッド ──────────────────────────────────────────────────────────


_STOP = object()


class StreamWorker:
    """サンプル受信と判定を分離するワーカー。

    submit() でキューに積んだサンプルを 1 本のスレッドが順に処理し、
    検出イベントと警報を on_output に渡す。キューは有界で、満杯なら submit がブロックする。
    """

    def __init__(
        self,
        pipeline: DetectionPipeline,
        on_output: Callable[[DetectionEvent | DrowsinessAlert], None],
        maxsize: int = 1024,
    ) -> None:
        self._pipeline = pipeline
        self._on_output = on_output
        self._queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self.error: BaseException | None = None
        """最初に発生した例外。設定されたらそれ以降のサンプルは処理しない。"""

        self.processed = 0
        self.discarded = 0

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def start(self) -> None:
        with self._lock:
            if self.running:
                return
            self._thread = threading.Thread(target=self._run, name="pbdetect-worker", daemon=True)
            self._thread.start()

    def submit(self, samples: Iterable[float], timeout: float | None = None) -> None:
        for x in samples:
            self._queue.put(float(x), timeout=timeout)

    def reset(self) -> None:
        """キューに残ったサンプルを処理し終えてからパイプラインを初期化する。"""
        self._queue.put(self._pipeline.reset)

    def drain(self) -> None:
        """キューが空になるまで待つ。"""
        self._queue.join()

    def stop(self, timeout: float | None = 5.0) -> None:
        with self._lock:
            thread = self._thread
            self._thread = None
        if thread is None:
            return
        self._queue.put(_STOP)
        thread.join(timeout)

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            try:
                if item is _STOP:
                    return
                if self.error is not None:
                    # 異常停止後は stop まで読み捨てる
                    self.discarded += 1
                    continue
                if callable(item):
                    item()
                    continue
                result = self._pipeline.push(item)
                self.processed += 1
                if result.detection is not None:
                    self._on_output(result.detection)
                if result.alert is not None:
                    self._on_output(result.alert)
            except Exception as exc:
                self.error = exc
                logger.exception("判定ワーカーでエラーが発生したため処理を停止します: processed=%d", self.processed)
            finally:
                self._queue.task_done()
