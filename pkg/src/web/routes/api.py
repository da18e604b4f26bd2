"""REST API ルート (ライブモニター)。"""

import json
import math
import queue as _queue_module

from flask import Blueprint, Response, jsonify, request, stream_with_context

from ..globals import get_monitor
from ..utils import MAX_SAMPLES_PER_REQUEST, _cors_preflight

bp_api = Blueprint("bp_api", __name__)


@bp_api.route("/api/health")
def api_health():
    """サーバー疎通確認エンドポイント。"""
    return jsonify({"status": "ok", "version": "1.0", "monitor": get_monitor() is not None})


@bp_api.route("/api/stats")
def api_stats():
    """処理済みサンプル数とメモリ使用量を返す。"""
    monitor = get_monitor()
    if not monitor:
        return jsonify({"error": "monitor not initialized"}), 503
    return jsonify(monitor.stats())


@bp_api.route("/api/samples", methods=["POST", "OPTIONS"])
def api_samples():
    """サンプルを判定キューに投入する。

    Request body (JSON):
        {"samples": [0.01, -0.02, ...]}

    Response (202):
        {"accepted": 2}
    """
    if request.method == "OPTIONS":
        return _cors_preflight()

    monitor = get_monitor()
    if not monitor:
        return jsonify({"error": "monitor not initialized"}), 503

    data = request.get_json(silent=True) or {}
    samples = data.get("samples")
    if not isinstance(samples, list) or not samples:
        return jsonify({"error": "samples is required"}), 400
    if len(samples) > MAX_SAMPLES_PER_REQUEST:
        return jsonify({"error": f"too many samples (max {MAX_SAMPLES_PER_REQUEST})"}), 413
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in samples):
        return jsonify({"error": "samples must be finite numbers"}), 400

    accepted = monitor.submit([float(v) for v in samples])
    return jsonify({"accepted": accepted}), 202


@bp_api.route("/api/reset", methods=["POST", "OPTIONS"])
def api_reset():
    """ストリーム状態を初期化する (キュー内のサンプルは処理してから)。"""
    if request.method == "OPTIONS":
        return _cors_preflight()
    monitor = get_monitor()
    if not monitor:
        return jsonify({"error": "monitor not initialized"}), 503
    monitor.reset()
    return jsonify({"reset": True})


@bp_api.route("/api/events")
def api_events():
    """SSE: 検出イベントと警報をリアルタイムでクライアントにプッシュする。"""
    monitor = get_monitor()
    if not monitor:
        return jsonify({"error": "monitor not initialized"}), 503
    bus = monitor.bus

    def event_stream():
        yield f"event: snapshot\ndata: {json.dumps(bus.snapshot())}\n\n"

        q = bus.subscribe()
        try:
            while True:
                try:
                    payload = q.get(timeout=25)
                    yield f"event: {payload['type']}\ndata: {json.dumps(payload)}\n\n"
                except _queue_module.Empty:
                    yield ": keepalive\n\n"
        finally:
            bus.unsubscribe(q)

    response = Response(
        stream_with_context(event_stream()),
        content_type="text/event-stream",
    )
    response.headers["Cache-Control"] = "no-cache"
    response.headers["X-Accel-Buffering"] = "no"
    return response
