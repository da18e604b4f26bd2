"""
特徴量抽出モジュール。
wavelet から 6 特徴量を計算する。類似度は PB バッファのメドイド波形に対して
正規化相互相関の最大値 (NCC_MAX) または Sakoe-Chiba 帯付き正規化 DDTW で求める。
"""

import logging
import math
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import PipelineConfig, SimilarityBackend
from .errors import (
    ConfigurationError,
    EmptyBufferError,
    MalformedWaveletError,
    SequenceLengthError,
    UndefinedCorrelationError,
)
from .memstore import BudgetAccountant, HatStore
from .models import FEATURE_NAMES, FeatureVector, Wavelet

logger = logging.getLogger(__name__)

ACCOUNTANT_OWNER = "wavelet_buffer"

# 固定小数点 NCC の量子化幅 (符号付き 12 ビット)
FIXED_POINT_FULL_SCALE = 2047

# メモリ退避でもこれ未満には減らさない
BUFFER_EVICTION_FLOOR = 3


# ── 相関・距離 ────────────────────────────────────────────────────────────────


def _as_array(seq) -> np.ndarray:
    if isinstance(seq, Wavelet):
        seq = seq.samples
    return np.asarray(seq, dtype=np.float64)


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.size == 0 or y.size == 0:
        raise SequenceLengthError("空の系列は相関を計算できません")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("分散 0 の系列は相関が定義されません")


def _orientations(x: np.ndarray, y: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """(テンプレート, 走査される系列) の組。短い方をテンプレートにし、同じ長さなら両方向。"""
    if x.size < y.size:
        return [(x, y)]
    if x.size > y.size:
        return [(y, x)]
    return [(x, y), (y, x)]


def _padded(seq: np.ndarray, m: int) -> np.ndarray:
    pad = np.zeros(m - 1, dtype=seq.dtype)
    return np.concatenate([pad, seq, pad])


def _window_peak(template: np.ndarray, other: np.ndarray) -> float:
    m = template.size
    windows = sliding_window_view(_padded(other, m), m)
    windows = windows[np.ptp(windows, axis=1) > 0]
    t = template - template.mean()
    w = windows - windows.mean(axis=1, keepdims=True)
    scores = (w @ t) / (np.linalg.norm(w, axis=1) * np.linalg.norm(t))
    return float(scores.max())


def ncc_max(a, b) -> float:
    """正規化相互相関の全ラグにわたる最大値。

    短い方の系列をテンプレートとし、長い方を両端 0 埋めして全ラグで窓を取る。
    窓ごとに平均を引き、窓とテンプレートのノルムの積で割る。分散 0 の窓は飛ばす。
    位相 (ラグ) は返さない。

    Raises:
        UndefinedCorrelationError: どちらかの系列の分散が 0 の場合。
        SequenceLengthError: 空の系列。
    """
    x, y = _as_array(a), _as_array(b)
    _check_pair(x, y)
    peak = max(_window_peak(t, o) for t, o in _orientations(x, y))
    return min(1.0, max(-1.0, peak))


def _to_fixed(x: np.ndarray) -> np.ndarray:
    scale = float(np.max(np.abs(x)))
    if scale == 0.0:
        return np.zeros(x.size, dtype=np.int64)
    return np.rint(x / scale * FIXED_POINT_FULL_SCALE).astype(np.int64)


def _window_peak_fixed(qt: np.ndarray, qo: np.ndarray) -> float | None:
    m = qt.size
    padded = _padded(qo, m)
    s1 = np.concatenate([[0], np.cumsum(padded)])
    s2 = np.concatenate([[0], np.cumsum(padded * padded)])
    sw = s1[m:] - s1[:-m]
    sw2 = s2[m:] - s2[:-m]
    swt = np.correlate(padded, qt, mode="valid")
    st, st2 = int(qt.sum()), int(np.dot(qt, qt))
    # m 倍した共分散と分散 (すべて整数)
    var_w = m * sw2 - sw * sw
    var_t = m * st2 - st * st
    num = m * swt - sw * st
    ok = var_w > 0
    if var_t <= 0 or not ok.any():
        return None
    scores = num[ok] / (np.sqrt(var_w[ok].astype(np.float64)) * math.sqrt(var_t))
    return float(scores.max())


def ncc_max_fixed(a, b) -> float:
    """ncc_max の整数演算版。

    入力を ±2047 の整数に量子化し、窓ごとの和・二乗和・相互相関をすべて int64 で計算する。
    浮動小数点演算は最後の平方根と除算だけ。実数版との差は 1e-3 以内。
    """
    x, y = _as_array(a), _as_array(b)
    _check_pair(x, y)
    qx, qy = _to_fixed(x), _to_fixed(y)
    peaks = [p for t, o in _orientations(qx, qy) if (p := _window_peak_fixed(t, o)) is not None]
    if not peaks:
        raise UndefinedCorrelationError("量子化後の系列の分散が 0 です")
    return min(1.0, max(-1.0, max(peaks)))


def ddtw_derivative(a) -> np.ndarray:
    """DDTW の 3 点微分推定 ((a_i - a_{i-1}) + (a_{i+1} - a_{i-1}) / 2) / 2。

    両端を除く内部点だけを返すため、長さは len(a) - 2。
    """
    x = _as_array(a)
    if x.size < 3:
        raise SequenceLengthError(f"DDTW には長さ 3 以上の系列が必要です: len={x.size}")
    return ((x[1:-1] - x[:-2]) + (x[2:] - x[:-2]) / 2.0) / 2.0


def ddtw_cost(a, b, band: int) -> tuple[float, int]:
    """Sakoe-Chiba 帯付き DDTW の最適経路コストと経路長を返す。

    帯は系列長の比で正規化する: 行 i で許される列は i·s ± band (s = 傾き)。
    帯が傾きより狭いと経路がつながらないため、実効帯幅は ceil(s) 以上にする。

    Raises:
        ConfigurationError: band < 1。
        SequenceLengthError: どちらかの系列が長さ 3 未満。
    """
    if band < 1:
        raise ConfigurationError(f"sakoe_chiba_band は 1 以上である必要があります: band={band}")
    da, db = ddtw_derivative(a), ddtw_derivative(b)
    if da.size > db.size:
        da, db = db, da
    n, m = da.size, db.size
    slope = (m - 1) / (n - 1) if n > 1 else float(m - 1)
    width = max(band, math.ceil(slope))

    inf = math.inf
    prev_cost: dict[int, float] = {}
    prev_len: dict[int, int] = {}
    for i in range(n):
        centre = i * slope
        lo = max(0, math.floor(centre - width))
        hi = min(m - 1, math.ceil(centre + width))
        if i == 0:
            lo = 0
        if i == n - 1:
            hi = m - 1
        cost: dict[int, float] = {}
        length: dict[int, int] = {}
        ai = float(da[i])
        for j in range(lo, hi + 1):
            local = (ai - float(db[j])) ** 2
            if i == 0 and j == 0:
                cost[j], length[j] = local, 1
                continue
            # 同コストなら 斜め → 上 → 左 の順に優先する
            best, best_len = inf, 0
            if i > 0 and j > 0 and prev_cost.get(j - 1, inf) < best:
                best, best_len = prev_cost[j - 1], prev_len[j - 1]
            if i > 0 and prev_cost.get(j, inf) < best:
                best, best_len = prev_cost[j], prev_len[j]
            if j > 0 and cost.get(j - 1, inf) < best:
                best, best_len = cost[j - 1], length[j - 1]
            if best == inf:
                continue
            cost[j], length[j] = best + local, best_len + 1
        prev_cost, prev_len = cost, length

    return prev_cost[m - 1], prev_len[m - 1]


def ddtw_distance(a, b, band: int) -> float:
    """正規化 DDTW 距離 (最適経路コスト / 経路長)。"""
    total, length = ddtw_cost(a, b, band)
    return total / length


def similarity_of(
    w,
    reference,
    backend: SimilarityBackend,
    cfg: PipelineConfig | None = None,
) -> float:
    """w と reference の類似度。どちらのバックエンドも「大きいほど似ている」。

    DDTW は距離を基準波形の微分の平均二乗で割り、exp(-x) で (0, 1] に写す。
    信号の単位 (フルスケール) を変えても値は変わらない。
    """
    ref = _as_array(reference)
    if ref.size == 0:
        raise SequenceLengthError("参照波形が空です")
    if backend is SimilarityBackend.DDTW_SAKOE_CHIBA:
        band = cfg.sakoe_chiba_band if cfg is not None else 25
        distance = ddtw_distance(w, ref, band)
        power = float(np.mean(ddtw_derivative(ref) ** 2))
        return math.exp(-distance / power) if power > 0 else math.exp(-distance)
    if cfg is not None and cfg.integer_ncc:
        return ncc_max_fixed(w, ref)
    return ncc_max(w, ref)


def pair_distance(a, b, backend: SimilarityBackend, cfg: PipelineConfig | None = None) -> float:
    """メドイド計算用の距離。NCC は 1 - 類似度、DDTW は距離そのもの。"""
    if backend is SimilarityBackend.DDTW_SAKOE_CHIBA:
        band = cfg.sakoe_chiba_band if cfg is not None else 25
        return ddtw_distance(a, b, band)
    return 1.0 - similarity_of(a, b, backend, cfg)


# ── wavelet バッファ ──────────────────────────────────────────────────────────


class WaveletBuffer:
    """PB らしい wavelet の記録。HAT 上に固定容量で保持する。

    容量に達したら最古の wavelet を捨てる。メモリ予算の退避要求にも応じるが、
    BUFFER_EVICTION_FLOOR 個未満には減らさない。
    """

    def __init__(
        self,
        cfg: PipelineConfig,
        accountant: BudgetAccountant | None = None,
        capacity: int | None = None,
    ) -> None:
        self.cfg = cfg
        self.capacity = capacity if capacity is not None else cfg.wavelet_buffer_capacity
        leaves_per_wave = math.ceil(cfg.max_wavelet_samples / cfg.hat_leaf_len)
        self._store = HatStore(
            cfg.hat_leaf_len,
            self.capacity * leaves_per_wave,
            cfg.sample_bytes,
            accountant,
            ACCOUNTANT_OWNER,
        )
        self._entries: list[tuple[int, int, int, float]] = []  # (handle, start, end, fs)
        self._distances: dict[tuple[int, int], float] = {}
        self._distance_key: tuple | None = None
        self.frozen = False
        self.evicted = 0
        self._accountant = accountant
        if accountant is not None:
            accountant.register_evictor(self._evict_for_budget)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.waves())

    @property
    def store(self) -> HatStore:
        return self._store

    def add(self, w: Wavelet) -> None:
        """wavelet を追加する。

        Raises:
            CapacityError: メモリ予算が足りず退避でも確保できない場合。
            RuntimeError: 凍結済みのバッファに追加しようとした場合。
        """
        if self.frozen:
            raise RuntimeError("凍結済みの wavelet バッファには追加できません")
        if len(self._entries) >= self.capacity:
            self._drop_oldest()
        handle = self._store.append_wave(w.samples)
        self._entries.append((handle, w.start_index, w.end_index, w.sampling_rate_hz))

    def waves(self) -> list[Wavelet]:
        return [self._wave(entry) for entry in self._entries]

    def freeze(self) -> None:
        self.frozen = True

    def clear(self) -> None:
        self._store.clear()
        self._entries.clear()
        self._distances.clear()

    def close(self) -> None:
        """バッファを解放し、会計係から退避コールバックを外す。"""
        self.clear()
        if self._accountant is not None:
            self._accountant.unregister_evictor(self._evict_for_budget)

    def distance(self, i: int, j: int, backend: SimilarityBackend, cfg: PipelineConfig | None = None) -> float:
        """格納位置 i, j の wavelet 間の距離。ハンドル単位でキャッシュする。"""
        key_cfg = (backend, cfg.sakoe_chiba_band if cfg else None, cfg.integer_ncc if cfg else None)
        if key_cfg != self._distance_key:
            self._distances.clear()
            self._distance_key = key_cfg
        hi, hj = self._entries[i][0], self._entries[j][0]
        key = (min(hi, hj), max(hi, hj))
        if key not in self._distances:
            self._distances[key] = pair_distance(
                self._wave(self._entries[i]), self._wave(self._entries[j]), backend, cfg
            )
        return self._distances[key]

    # ── 内部 ──────────────────────────────────────────────────────────────────

    def _wave(self, entry: tuple[int, int, int, float]) -> Wavelet:
        handle, start, end, fs = entry
        return Wavelet(self._store.read(handle), start, end, fs)

    def _drop_oldest(self) -> int:
        handle = self._entries.pop(0)[0]
        self._distances = {k: v for k, v in self._distances.items() if handle not in k}
        self.evicted += 1
        return self._store.release(handle)

    def _evict_for_budget(self, needed: int) -> int:
        freed = 0
        while freed < needed and len(self._entries) > BUFFER_EVICTION_FLOOR:
            freed += self._drop_oldest()
        return freed


def medoid(
    buf: WaveletBuffer | Sequence[Wavelet],
    backend: SimilarityBackend,
    cfg: PipelineConfig | None = None,
) -> tuple[int, Wavelet]:
    """距離の総和が最小の要素 (メドイド) とその位置を返す。同点なら挿入順の早いもの。

    Raises:
        EmptyBufferError: バッファが空の場合。
    """
    waves = buf.waves() if isinstance(buf, WaveletBuffer) else list(buf)
    k = len(waves)
    if k == 0:
        raise EmptyBufferError("wavelet バッファが空です")
    if isinstance(buf, WaveletBuffer):
        dist = lambda i, j: buf.distance(i, j, backend, cfg)  # noqa: E731
    else:
        cache: dict[tuple[int, int], float] = {}

        def dist(i: int, j: int) -> float:
            key = (min(i, j), max(i, j))
            if key not in cache:
                cache[key] = pair_distance(waves[i], waves[j], backend, cfg)
            return cache[key]

    totals = np.zeros(k)
    for i in range(k):
        for j in range(i + 1, k):
            d = dist(i, j)
            totals[i] += d
            totals[j] += d
    best = int(np.argmin(totals))  # argmin は最初の最小値の位置を返す
    return best, waves[best]


# ── 特徴量 ────────────────────────────────────────────────────────────────────


def validate_wavelet(w: Wavelet) -> tuple[int, int]:
    """wavelet の形 (負区間 → 0 区間 → 正区間) を検査し、(負のサンプル数, 正のサンプル数) を返す。

    Raises:
        MalformedWaveletError: 形が崩れている場合。
    """
    signs = np.sign(w.samples)
    if signs.size == 0:
        raise MalformedWaveletError("wavelet が空です")
    if signs[0] >= 0:
        raise MalformedWaveletError("wavelet の先頭サンプルが負ではありません")
    positive = np.flatnonzero(signs > 0)
    if positive.size == 0:
        raise MalformedWaveletError("wavelet に正のサンプルがありません")
    first_pos = int(positive[0])
    head, tail = signs[:first_pos], signs[first_pos:]
    zeros = np.flatnonzero(head == 0)
    n_neg = int(zeros[0]) if zeros.size else first_pos
    if not (np.all(head[:n_neg] < 0) and np.all(head[n_neg:] == 0) and np.all(tail > 0)):
        raise MalformedWaveletError(
            f"wavelet の符号列が 負→0→正 の順になっていません: start={w.start_index}"
        )
    return n_neg, int(tail.size)


def extract_features(
    w: Wavelet,
    buf: WaveletBuffer | Sequence[Wavelet] | None,
    cfg: PipelineConfig,
    reference: Wavelet | None = None,
) -> FeatureVector:
    """6 特徴量を計算する。

    reference を渡した場合はそれを類似度の基準にする (学習済みモデルのメドイド)。
    渡さなければ buf のメドイドを求める。buf が空なら類似度は 1.0。

    Raises:
        MalformedWaveletError: wavelet の形が不正な場合。
    """
    n_neg, n_pos = validate_wavelet(w)
    fs = w.sampling_rate_hz

    if reference is None and buf is not None and len(buf) > 0:
        _, reference = medoid(buf, cfg.similarity_backend, cfg)
    similarity = 1.0 if reference is None else similarity_of(w, reference, cfg.similarity_backend, cfg)

    return FeatureVector(
        similarity=similarity,
        max=float(np.max(w.samples)),
        min=float(np.min(w.samples)),
        p_durn=n_pos / fs,
        n_durn=n_neg / fs,
        t_durn=len(w) / fs,
    )


FEATURES_CSV_HEADER = ",".join(FEATURE_NAMES)


def write_features_csv(vectors: Iterable[FeatureVector], sink: BinaryIO) -> None:
    lines = [FEATURES_CSV_HEADER] + [v.to_csv_row() for v in vectors]
    sink.write(("\n".join(lines) + "\n").encode("utf-8"))
