"""ライブモニター。

学習済みモデルで判定ワーカーを動かし、結果を EventBus に流す。
Flask のルートからは web.globals 経由で参照する。
"""

import logging

from .classifier import DetectionPipeline, StreamWorker
from .config import PipelineConfig
from .event_bus import EventBus
from .memstore import make_accountant
from .trainer import TrainedModel

logger = logging.getLogger(__name__)


class LiveMonitor:
    """1 ストリーム分の判定ワーカーと配信バス。"""

    def __init__(self, model: TrainedModel, cfg: PipelineConfig | None = None, queue_size: int = 4096) -> None:
        self.cfg = cfg or model.config
        self.model = model
        self.bus = EventBus()
        self.accountant = make_accountant(self.cfg)
        self.pipeline = DetectionPipeline(model, self.cfg, self.accountant)
        self.worker = StreamWorker(self.pipeline, self.bus.publish, maxsize=queue_size)

    def start(self) -> None:
        self.worker.start()
        logger.info("ライブモニターを開始しました: fs=%.1f", self.cfg.sampling_rate_hz)

    def stop(self) -> None:
        self.worker.stop()

    def submit(self, samples: list[float]) -> int:
        self.worker.submit(samples)
        return len(samples)

    def reset(self) -> None:
        self.worker.reset()
        self.bus.clear()

    def stats(self) -> dict[str, object]:
        snap = self.accountant.snapshot()
        return {
            "processed": self.worker.processed,
            "discarded": self.worker.discarded,
            "running": self.worker.running,
            "live_bytes": snap.live_bytes,
            "high_water_bytes": snap.high_water_bytes,
            "budget_bytes": self.accountant.budget_bytes,
            "ledger": snap.ledger,
            "subscribers": self.bus.subscriber_count,
            "error": None if self.worker.error is None else str(self.worker.error),
        }
