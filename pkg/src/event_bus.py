"""検出イベントと警報の配信。

判定ワーカーが publish() し、SSE エンドポイントが接続ごとに subscribe() する。
直近の配信内容は snapshot() で取得できる。
"""

import logging
import queue
import threading
from collections import deque
from typing import Any

from .models import FEATURE_NAMES, DetectionEvent, DrowsinessAlert

logger = logging.getLogger(__name__)


def event_payload(item: DetectionEvent | DrowsinessAlert) -> dict[str, Any]:
    """JSON 化できる辞書に変換する。"""
    if isinstance(item, DrowsinessAlert):
        return {
            "type": "alert",
            "t_s": item.t_s,
            "count": item.count,
            "pb_times": list(item.pb_times),
            "window_s": item.window_s,
        }
    return {
        "type": "detection",
        "t_s": item.t_s,
        "start_idx": item.start_index,
        "end_idx": item.end_index,
        "pass_sum": item.pass_sum,
        "is_pb": item.is_pb,
        "features": dict(zip(FEATURE_NAMES, item.features.as_tuple())),
        "decision_latency_ms": item.decision_latency_ms,
    }


class EventBus:
    """有界キューによる pub/sub。"""

    _MAX_HISTORY = 200
    _QUEUE_SIZE = 200

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._subscribers: set[queue.Queue[dict[str, Any]]] = set()
        self._history: deque[dict[str, Any]] = deque(maxlen=self._MAX_HISTORY)

    def subscribe(self) -> "queue.Queue[dict[str, Any]]":
        """配信を受け取るキューを登録して返す。不要になったら必ず unsubscribe すること。"""
        q: queue.Queue[dict[str, Any]] = queue.Queue(maxsize=self._QUEUE_SIZE)
        with self._lock:
            self._subscribers.add(q)
        return q

    def unsubscribe(self, q: "queue.Queue[dict[str, Any]]") -> None:
        with self._lock:
            self._subscribers.discard(q)

    @property
    def subscriber_count(self) -> int:
        with self._lock:
            return len(self._subscribers)

    def snapshot(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._history)

    def clear(self) -> None:
        with self._lock:
            self._history.clear()

    def publish(self, item: DetectionEvent | DrowsinessAlert) -> None:
        """全購読者に非ブロッキングで配信する。

        キューが満杯の購読者 (応答が遅い接続) は切断済みとみなして削除する。
        """
        payload = event_payload(item)
        dead: set[queue.Queue[dict[str, Any]]] = set()
        with self._lock:
            self._history.append(payload)
            subscribers = set(self._subscribers)
        for q in subscribers:
            try:
                q.put_nowait(payload)
            except queue.Full:
                dead.add(q)
        if dead:
            logger.warning("応答のない購読者を削除しました: count=%d", len(dead))
            with self._lock:
                self._subscribers -= dead
