"""テキスト形式 (CSV ヘッダー・モデルファイル) のパターンを一元管理する。

各モジュールからここを import して使うこと。
同じパターンを複数ファイルに定義しない。
"""

import re

# ── トレース CSV ──────────────────────────────────────────────────────────────

TRACE_CSV_HEADER = "index,amplitude"

# 1 行 1 サンプル: "<index>,<amplitude>"
TRACE_CSV_ROW = re.compile(
    r"^(?P<index>\d+),(?P<amplitude>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)$"
)

# ── ラベル CSV ────────────────────────────────────────────────────────────────

LABELS_CSV_HEADER = "kind,start_idx,end_idx"

LABELS_CSV_ROW = re.compile(r"^(?P<kind>[A-Z_]+),(?P<start>\d+),(?P<end>\d+)$")

# ── モデルファイル ────────────────────────────────────────────────────────────

MODEL_MAGIC = "pbdetect-model"
MODEL_VERSION = 1

# 先頭行: "pbdetect-model v1"
MODEL_HEADER = re.compile(r"^pbdetect-model v(?P<version>\d+)$")

# セクション見出し: "[thresholds]"
MODEL_SECTION = re.compile(r"^\[(?P<name>[a-z_]+)\]$")

# 末尾行: "checksum=<sha256 hex>"
MODEL_CHECKSUM = re.compile(r"^checksum=(?P<digest>[0-9a-f]{64})$")

# ── key=value 形式 (設定・プロファイル) ───────────────────────────────────────

KEY_VALUE_LINE = re.compile(r"^(?P<key>[a-z_][a-z0-9_.]*)\s*=\s*(?P<value>.*)$")
