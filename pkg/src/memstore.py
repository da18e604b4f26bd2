"""
メモリ制約付きデータ構造モジュール。
MCU の SRAM 上限をエミュレートするための固定長リングバッファ、固定葉長の
Hashed Array Tree (HAT) 波形ストア、バイト予算の会計係を提供する。

いずれも構築後にバッキングストレージを伸長しない。
"""

import logging
import math
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Generic, Iterator, TypeVar

import numpy as np

from .errors import CapacityError

logger = logging.getLogger(__name__)

T = TypeVar("T")

# HAT の 1 波形あたりの管理領域 (開始葉ポインタ + 長さ + 葉数) のバイト数
WAVE_EXTENT_BYTES = 12

# パイプライン外の常駐領域の計上名の接頭辞 ("firmware.stack" など)
FIRMWARE_OWNER = "firmware"

# MCU の語長 (相互相関の作業域)
WORD_BYTES = 4


class EvictionPolicy(str, Enum):
    NONE = "NONE"
    OLDEST_WAVE = "OLDEST_WAVE"


# ── 予算会計 ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class AccountantSnapshot:
    live_bytes: int
    high_water_bytes: int
    ledger: dict[str, int]


class BudgetAccountant:
    """所有者ごとの使用バイト数を記録し、予算超過を検出する。

    複数のパイプライン段から更新されうるため、更新はロックで直列化する。
    退避コールバックの中から track() が呼ばれるので RLock を使う。
    """

    def __init__(self, budget_bytes: int, policy: EvictionPolicy = EvictionPolicy.OLDEST_WAVE) -> None:
        if budget_bytes < 1:
            raise ValueError(f"budget_bytes は 1 以上である必要があります: {budget_bytes}")
        self.budget_bytes = budget_bytes
        self.policy = policy
        self._ledger: dict[str, int] = {}
        self._live = 0
        self._high_water = 0
        self._evictors: list[Callable[[int], int]] = []
        self._lock = threading.RLock()

    @property
    def live_bytes(self) -> int:
        return self._live

    @property
    def high_water_bytes(self) -> int:
        return self._high_water

    @property
    def free_bytes(self) -> int:
        return self.budget_bytes - self._live

    def ledger(self) -> dict[str, int]:
        with self._lock:
            return dict(self._ledger)

    def snapshot(self) -> AccountantSnapshot:
        with self._lock:
            return AccountantSnapshot(self._live, self._high_water, dict(self._ledger))

    def track(self, owner: str, delta: int) -> None:
        """owner の使用量を delta バイト増減する。

        Raises:
            CapacityError: 増加後に予算を超える場合 (記録は変更しない)。
            ValueError: owner の使用量が負になる場合。
        """
        with self._lock:
            current = self._ledger.get(owner, 0)
            if current + delta < 0:
                raise ValueError(f"使用量が負になります: owner={owner}, current={current}, delta={delta}")
            if delta > 0 and self._live + delta > self.budget_bytes:
                raise CapacityError(
                    f"メモリ予算を超過します: owner={owner}, live={self._live}, "
                    f"delta={delta}, budget={self.budget_bytes}"
                )
            self._ledger[owner] = current + delta
            self._live += delta
            self._high_water = max(self._high_water, self._live)

    def register_evictor(self, evictor: Callable[[int], int]) -> None:
        """退避コールバックを登録する。引数は必要バイト数、戻り値は解放したバイト数。"""
        with self._lock:
            self._evictors.append(evictor)

    def unregister_evictor(self, evictor: Callable[[int], int]) -> None:
        with self._lock:
            if evictor in self._evictors:
                self._evictors.remove(evictor)

    def evict_for(self, needed_bytes: int, policy: EvictionPolicy | None = None) -> int:
        """needed_bytes を空けるために登録済みコールバックで退避し、解放量を返す。"""
        policy = self.policy if policy is None else policy
        if policy is EvictionPolicy.NONE or needed_bytes <= 0:
            return 0
        freed = 0
        with self._lock:
            for evictor in list(self._evictors):
                if freed >= needed_bytes:
                    break
                freed += evictor(needed_bytes - freed)
        if freed:
            logger.warning("メモリ予算確保のため退避しました: needed=%d, freed=%d", needed_bytes, freed)
        return freed

    def request(self, owner: str, nbytes: int) -> None:
        """nbytes を確保する。足りなければポリシーに従って退避してから確保する。

        Raises:
            CapacityError: 退避後も確保できない場合。呼び出し側は新しい波形を破棄すること。
        """
        with self._lock:
            shortfall = self._live + nbytes - self.budget_bytes
            if shortfall > 0:
                self.evict_for(shortfall)
            self.track(owner, nbytes)


# ── リングバッファ ────────────────────────────────────────────────────────────


class CircularBuffer(Generic[T]):
    """固定容量のリングバッファ。満杯時の push は最古の要素を上書きする。"""

    def __init__(
        self,
        capacity: int,
        fill: T | None = None,
        accountant: BudgetAccountant | None = None,
        owner: str = "circular_buffer",
        element_bytes: int = 2,
    ) -> None:
        if capacity < 1:
            raise ValueError(f"capacity は 1 以上である必要があります: {capacity}")
        self._storage: list[T | None] = [fill] * capacity
        self._capacity = capacity
        self._head = 0  # 最古要素の位置
        self._count = 0
        if accountant is not None:
            accountant.track(owner, capacity * element_bytes)

    @property
    def capacity(self) -> int:
        return self._capacity

    @property
    def full(self) -> bool:
        return self._count == self._capacity

    def __len__(self) -> int:
        return self._count

    def push(self, value: T) -> T | None:
        """末尾に追加する。満杯で上書きした場合は追い出された要素を返す。"""
        if self._count < self._capacity:
            self._storage[(self._head + self._count) % self._capacity] = value
            self._count += 1
            return None
        evicted = self._storage[self._head]
        self._storage[self._head] = value
        self._head = (self._head + 1) % self._capacity
        return evicted

    def get(self, index: int) -> T:
        """最古要素から数えた index 番目の要素を返す。O(1)。"""
        if not 0 <= index < self._count:
            raise IndexError(f"範囲外のインデックスです: index={index}, count={self._count}")
        return self._storage[(self._head + index) % self._capacity]  # type: ignore[return-value]

    def oldest(self) -> T:
        return self.get(0)

    def newest(self) -> T:
        return self.get(self._count - 1)

    def clear(self) -> None:
        self._head = 0
        self._count = 0

    def __iter__(self) -> Iterator[T]:
        for i in range(self._count):
            yield self._storage[(self._head + i) % self._capacity]  # type: ignore[misc]

    @property
    def storage_len(self) -> int:
        return len(self._storage)


# ── Hashed Array Tree ─────────────────────────────────────────────────────────


@dataclass
class _Extent:
    leaves: list[int]
    length: int


class HatStore:
    """固定葉長 L の Hashed Array Tree による波形ストア。

    葉は構築時に確保したプールから払い出し、波形ごとに専用の葉を割り当てる
    (2 つの波形が 1 枚の葉を共有しない)。波形内の k 番目の要素は
    葉 k // L のスロット k % L にある。1 波形あたりの未使用スロットは L - 1 以下。
    """

    def __init__(
        self,
        leaf_len: int,
        max_leaves: int,
        element_bytes: int = 2,
        accountant: BudgetAccountant | None = None,
        owner: str = "hat",
    ) -> None:
        if leaf_len < 1 or max_leaves < 1:
            raise ValueError(f"leaf_len / max_leaves は 1 以上である必要があります: {leaf_len}, {max_leaves}")
        self.leaf_len = leaf_len
        self.max_leaves = max_leaves
        self.element_bytes = element_bytes
        self._accountant = accountant
        self._owner = owner
        self._pool = np.zeros((max_leaves, leaf_len), dtype=np.float64)
        # 番号の小さい葉から払い出す
        self._free: list[int] = list(range(max_leaves - 1, -1, -1))
        self._waves: dict[int, _Extent] = {}
        self._next_handle = 0

    # ── 参照 ──────────────────────────────────────────────────────────────────

    @property
    def leaf_bytes(self) -> int:
        return self.leaf_len * self.element_bytes

    @property
    def backing_nbytes(self) -> int:
        return self._pool.nbytes

    @property
    def free_leaves(self) -> int:
        return len(self._free)

    @property
    def leaves_in_use(self) -> int:
        return self.max_leaves - len(self._free)

    @property
    def wave_count(self) -> int:
        return len(self._waves)

    def handles(self) -> list[int]:
        """格納順の波形ハンドル一覧。"""
        return list(self._waves)

    def length(self, handle: int) -> int:
        return self._extent(handle).length

    def leaves_of(self, handle: int) -> list[int]:
        return list(self._extent(handle).leaves)

    def slack(self, handle: int) -> int:
        ext = self._extent(handle)
        return len(ext.leaves) * self.leaf_len - ext.length

    def total_slack(self) -> int:
        return sum(self.slack(h) for h in self._waves)

    def wave_bytes(self, handle: int) -> int:
        return len(self._extent(handle).leaves) * self.leaf_bytes + WAVE_EXTENT_BYTES

    def leaves_needed(self, length: int) -> int:
        return max(1, math.ceil(length / self.leaf_len))

    # ── 追加・読み出し・解放 ──────────────────────────────────────────────────

    def open_wave(self) -> int:
        """空の波形を開く。push() で 1 要素ずつ追記する。"""
        self._charge(WAVE_EXTENT_BYTES)
        handle = self._next_handle
        self._next_handle += 1
        self._waves[handle] = _Extent(leaves=[], length=0)
        return handle

    def push(self, handle: int, value: float) -> None:
        """波形の末尾に 1 要素追記する。葉が埋まっていれば新しい葉を割り当てる。"""
        ext = self._extent(handle)
        slot = ext.length % self.leaf_len
        if slot == 0 and ext.length // self.leaf_len == len(ext.leaves):
            ext.leaves.append(self._allocate_leaf())
        self._pool[ext.leaves[ext.length // self.leaf_len], slot] = value
        ext.length += 1

    def append_wave(self, samples) -> int:
        """波形を ceil(len / L) 枚の専用葉に格納してハンドルを返す。

        Raises:
            CapacityError: 予算または葉プールが足りず、退避しても確保できない場合。
        """
        data = np.asarray(samples, dtype=np.float64)
        if data.size == 0:
            raise ValueError("空の波形は格納できません")
        n_leaves = self.leaves_needed(data.size)
        nbytes = n_leaves * self.leaf_bytes + WAVE_EXTENT_BYTES
        self._charge(nbytes)
        if len(self._free) < n_leaves:
            self._refund(nbytes)
            raise CapacityError(
                f"HAT の葉が不足しています: needed={n_leaves}, free={len(self._free)}"
            )
        leaves = [self._free.pop() for _ in range(n_leaves)]
        for i, leaf in enumerate(leaves):
            chunk = data[i * self.leaf_len:(i + 1) * self.leaf_len]
            self._pool[leaf, : chunk.size] = chunk
        handle = self._next_handle
        self._next_handle += 1
        self._waves[handle] = _Extent(leaves=leaves, length=int(data.size))
        return handle

    def read(self, handle: int) -> np.ndarray:
        """格納した波形をコピーして返す。"""
        ext = self._extent(handle)
        if not ext.leaves:
            return np.empty(0, dtype=np.float64)
        flat = self._pool[ext.leaves].reshape(-1)
        return flat[: ext.length].copy()

    def release(self, handle: int) -> int:
        """波形の葉をすべてプールへ返し、解放したバイト数を返す。"""
        ext = self._waves.pop(handle, None)
        if ext is None:
            raise KeyError(f"未知の波形ハンドルです: handle={handle}")
        self._free.extend(reversed(ext.leaves))
        nbytes = len(ext.leaves) * self.leaf_bytes + WAVE_EXTENT_BYTES
        self._refund(nbytes)
        return nbytes

    def clear(self) -> None:
        for handle in list(self._waves):
            self.release(handle)

    # ── 内部 ──────────────────────────────────────────────────────────────────

    def _extent(self, handle: int) -> _Extent:
        try:
            return self._waves[handle]
        except KeyError:
            raise KeyError(f"未知の波形ハンドルです: handle={handle}") from None

    def _allocate_leaf(self) -> int:
        self._charge(self.leaf_bytes)
        if not self._free:
            self._refund(self.leaf_bytes)
            raise CapacityError(f"HAT の葉プールが枯渇しました: max_leaves={self.max_leaves}")
        return self._free.pop()

    def _charge(self, nbytes: int) -> None:
        if self._accountant is not None:
            self._accountant.request(self._owner, nbytes)

    def _refund(self, nbytes: int) -> None:
        if self._accountant is not None:
            self._accountant.track(self._owner, -nbytes)


def firmware_reserve(cfg) -> dict[str, int]:
    """パイプライン外でファームウェアが常時確保する領域 (バイト) を部品ごとに返す。

    - stack: 設定値 stack_bytes
    - adc_fifo: 1 秒分の ADC サンプル
    - medoid_reference: 類似度の基準波形 1 本 (最大長)
    - ncc_workspace: 整数相互相関の作業域。量子化した 2 系列と全ラグの積和 (いずれも 32 ビット語)
    """
    longest = cfg.max_wavelet_samples
    return {
        "stack": cfg.stack_bytes,
        "adc_fifo": math.ceil(cfg.sampling_rate_hz) * cfg.sample_bytes,
        "medoid_reference": longest * cfg.sample_bytes,
        "ncc_workspace": (2 * longest + (2 * longest - 1)) * WORD_BYTES,
    }


def make_accountant(cfg) -> BudgetAccountant:
    """設定から会計係を作り、ファームウェア常駐領域を部品ごとに先に計上する。"""
    policy = EvictionPolicy.OLDEST_WAVE if cfg.eviction_enabled else EvictionPolicy.NONE
    accountant = BudgetAccountant(cfg.memory_budget_bytes, policy)
    for part, nbytes in firmware_reserve(cfg).items():
        if nbytes:
            accountant.track(f"{FIRMWARE_OWNER}.{part}", nbytes)
    return accountant
