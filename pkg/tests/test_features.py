"""src/features.py のテスト。"""

import io
import math

import numpy as np
import pytest

from src.config import SimilarityBackend
from src.errors import (
    ConfigurationError,
    EmptyBufferError,
    MalformedWaveletError,
    SequenceLengthError,
    UndefinedCorrelationError,
)
from src.features import (
    FEATURES_CSV_HEADER,
    WaveletBuffer,
    ddtw_cost,
    ddtw_derivative,
    ddtw_distance,
    extract_features,
    medoid,
    ncc_max,
    ncc_max_fixed,
    pair_distance,
    similarity_of,
    validate_wavelet,
    write_features_csv,
)
import src.features as features_module
from src.memstore import BudgetAccountant
from tests.conftest import canonical_r, make_wavelet, pb_like

NCC = SimilarityBackend.NCC_MAX
DDTW = SimilarityBackend.DDTW_SAKOE_CHIBA


def _pearson(u, v):
    u = [x - math.fsum(u) / len(u) for x in u]
    v = [x - math.fsum(v) / len(v) for x in v]
    return math.fsum(p * q for p, q in zip(u, v)) / (
        math.sqrt(math.fsum(p * p for p in u)) * math.sqrt(math.fsum(q * q for q in v))
    )


def _ncc_oracle(a, b):
    """全ラグを 1 つずつ走査する相互相関 (窓ごとに平均除去・正規化)。"""
    a, b = [float(x) for x in a], [float(x) for x in b]
    if len(a) < len(b):
        pairs = [(a, b)]
    elif len(a) > len(b):
        pairs = [(b, a)]
    else:
        pairs = [(a, b), (b, a)]
    best = -math.inf
    for template, other in pairs:
        m = len(template)
        for lag in range(-(m - 1), len(other)):
            window = [other[i] if 0 <= i < len(other) else 0.0 for i in range(lag, lag + m)]
            if max(window) == min(window):
                continue
            best = max(best, _pearson(template, window))
    return best


def _dtw_oracle(a, b):
    """帯なしの全表 DTW (微分系列上)。"""
    da, db = ddtw_derivative(a), ddtw_derivative(b)
    n, m = len(da), len(db)
    dp = [[math.inf] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            local = (float(da[i]) - float(db[j])) ** 2
            if i == 0 and j == 0:
                dp[i][j] = local
                continue
            prev = min(
                dp[i - 1][j - 1] if i and j else math.inf,
                dp[i - 1][j] if i else math.inf,
                dp[i][j - 1] if j else math.inf,
            )
            dp[i][j] = prev + local
    return dp[n - 1][m - 1]


class TestNccMax:
    def test_matches_all_lags_oracle(self):
        assert ncc_max([1, 2, 1], [0, 1, 2, 1, 0]) == pytest.approx(1.0, abs=1e-12)
        assert ncc_max([1, 2, 1], [0, 1, 2, 1, 0]) == pytest.approx(
            _ncc_oracle([1, 2, 1], [0, 1, 2, 1, 0]), abs=1e-12
        )

    @pytest.mark.parametrize("n, m", [(40, 25), (17, 17), (8, 60)])
    def test_random_matches_oracle(self, n, m):
        rng = np.random.default_rng(n * 100 + m)
        a, b = rng.normal(size=n), rng.normal(size=m)
        assert ncc_max(a, b) == pytest.approx(_ncc_oracle(a, b), abs=1e-12)

    def test_window_normalization_ignores_offset_outside_match(self):
        template = [0.0, 1.0, 3.0, 1.0, 0.0]
        longer = [5.0] * 20 + [5.0 + v for v in template] + [-4.0] * 20
        assert ncc_max(template, longer) == pytest.approx(1.0, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=60), rng.normal(size=33)
        assert ncc_max(a, b) == pytest.approx(ncc_max(b, a), abs=1e-12)

    def test_identical_is_one(self):
        a = pb_like(40, 50)
        assert ncc_max(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_scale_invariant(self):
        a, b = pb_like(40, 50), pb_like(45, 52)
        assert ncc_max(a, 3.0 * b) == pytest.approx(ncc_max(a, b), abs=1e-12)

    def test_range(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            v = ncc_max(rng.normal(size=30), rng.normal(size=30))
            assert -1.0 <= v <= 1.0

    def test_constant_undefined(self):
        with pytest.raises(UndefinedCorrelationError):
            ncc_max([1.0, 1.0, 1.0], [0.0, 1.0, 0.0])

    def test_empty(self):
        with pytest.raises(SequenceLengthError):
            ncc_max([], [1.0, 2.0])

    def test_fixed_point_close_to_float(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            a, b = rng.normal(size=120), rng.normal(size=90)
            assert ncc_max_fixed(a, b) == pytest.approx(ncc_max(a, b), abs=1e-3)

    def test_fixed_point_on_wavelets(self):
        a, b = pb_like(150, 180), pb_like(120, 200, ihc=20)
        assert ncc_max_fixed(a, b) == pytest.approx(ncc_max(a, b), abs=1e-3)

    def test_fixed_point_constant_undefined(self):
        with pytest.raises(UndefinedCorrelationError):
            ncc_max_fixed([0.0, 0.0, 0.0], [0.0, 1.0, 0.0])


class TestDdtw:
    def test_derivative(self):
        assert list(ddtw_derivative([0.0, 1.0, 4.0, 9.0])) == [1.5, 3.5]

    def test_derivative_too_short(self):
        with pytest.raises(SequenceLengthError):
            ddtw_derivative([1.0, 2.0])

    def test_identical_distance_zero(self):
        a = pb_like(30, 40)
        assert ddtw_distance(a, a, 5) == 0.0

    def test_wide_band_equals_full_table(self):
        rng = np.random.default_rng(12)
        a, b = rng.normal(size=20), rng.normal(size=31)
        cost, _ = ddtw_cost(a, b, band=100)
        assert cost == _dtw_oracle(a, b)

    def test_symmetric(self):
        rng = np.random.default_rng(13)
        a, b = rng.normal(size=25), rng.normal(size=40)
        assert ddtw_distance(a, b, 4) == pytest.approx(ddtw_distance(b, a, 4), rel=1e-12)

    @pytest.mark.parametrize("seed, n, m", [(14, 50, 70), (15, 60, 60), (16, 90, 40), (17, 33, 120)])
    def test_narrower_band_never_cheaper(self, seed, n, m):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=n), rng.normal(size=m)
        costs = [ddtw_cost(a, b, band)[0] for band in (1, 2, 5, 10, 25, 100)]
        assert all(x >= y for x, y in zip(costs, costs[1:]))

    def test_path_length_bounds(self):
        a, b = pb_like(30, 40), pb_like(50, 60)
        _, length = ddtw_cost(a, b, 10)
        n, m = len(a) - 2, len(b) - 2
        assert max(n, m) <= length <= n + m - 1

    def test_invalid_band(self):
        with pytest.raises(ConfigurationError):
            ddtw_cost([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0)

    def test_similarity_maps_to_unit_interval(self, cfg):
        a, b = pb_like(30, 40), pb_like(45, 35)
        s = similarity_of(a, b, DDTW, cfg)
        power = float(np.mean(ddtw_derivative(b) ** 2))
        assert 0.0 < s <= 1.0
        assert s == pytest.approx(math.exp(-ddtw_distance(a, b, cfg.sakoe_chiba_band) / power))

    def test_similarity_independent_of_units(self, cfg):
        a, b = pb_like(30, 40), pb_like(45, 35)
        assert similarity_of(1000.0 * a, 1000.0 * b, DDTW, cfg) == pytest.approx(similarity_of(a, b, DDTW, cfg))

    def test_similarity_orders_by_shape(self, cfg):
        ref = pb_like(150, 180, ihc=60)
        close = pb_like(155, 175, ihc=55)
        far = pb_like(50, 60, ihc=0)
        assert similarity_of(close, ref, DDTW, cfg) > similarity_of(far, ref, DDTW, cfg)


class TestSimilarity:
    def test_integer_ncc_switch(self, cfg):
        a, b = pb_like(30, 40), pb_like(45, 35)
        fixed = similarity_of(a, b, NCC, cfg.model_copy(update={"integer_ncc": True}))
        assert fixed == ncc_max_fixed(a, b)
        assert similarity_of(a, b, NCC, cfg) == ncc_max(a, b)

    def test_empty_reference(self, cfg):
        with pytest.raises(SequenceLengthError):
            similarity_of([1.0, 2.0, 3.0], [], NCC, cfg)

    def test_pair_distance(self, cfg):
        a, b = pb_like(30, 40), pb_like(45, 35)
        assert pair_distance(a, b, NCC, cfg) == pytest.approx(1.0 - ncc_max(a, b))
        assert pair_distance(a, b, DDTW, cfg) == ddtw_distance(a, b, cfg.sakoe_chiba_band)


class TestMedoid:
    @pytest.mark.parametrize("backend", [NCC, DDTW])
    def test_matches_pairwise_oracle(self, cfg, backend):
        rng = np.random.default_rng(21)
        waves = [make_wavelet(pb_like(int(rng.integers(20, 60)), int(rng.integers(20, 60)))) for _ in range(7)]
        totals = [
            sum(pair_distance(waves[i], waves[j], backend, cfg) for j in range(len(waves)) if j != i)
            for i in range(len(waves))
        ]
        index, w = medoid(waves, backend, cfg)
        assert totals[index] == pytest.approx(min(totals), rel=1e-12)
        assert w == waves[index]

    def test_tie_picks_earliest(self, cfg):
        a = make_wavelet(pb_like(30, 30))
        index, _ = medoid([a, a, a], NCC, cfg)
        assert index == 0

    def test_single(self, cfg):
        a = make_wavelet(pb_like(30, 30))
        assert medoid([a], NCC, cfg) == (0, a)

    def test_empty(self, cfg):
        with pytest.raises(EmptyBufferError):
            medoid([], NCC, cfg)

    def test_buffer_and_sequence_agree(self, cfg):
        buf = WaveletBuffer(cfg)
        waves = [make_wavelet(pb_like(20 + 5 * k, 50 - 3 * k), start=100 * k) for k in range(6)]
        for w in waves:
            buf.add(w)
        assert medoid(buf, NCC, cfg)[0] == medoid(waves, NCC, cfg)[0]


class TestWaveletBuffer:
    def test_round_trip_through_store(self, cfg, canonical_wavelet):
        buf = WaveletBuffer(cfg)
        buf.add(canonical_wavelet)
        assert buf.waves() == [canonical_wavelet]

    def test_capacity_drops_oldest(self, cfg):
        buf = WaveletBuffer(cfg, capacity=3)
        waves = [make_wavelet(pb_like(20, 20 + k), start=k * 100) for k in range(5)]
        for w in waves:
            buf.add(w)
        assert len(buf) == 3
        assert buf.waves() == waves[2:]
        assert buf.evicted == 2

    def test_frozen(self, cfg, canonical_wavelet):
        buf = WaveletBuffer(cfg)
        buf.freeze()
        with pytest.raises(RuntimeError):
            buf.add(canonical_wavelet)

    def test_budget_eviction(self, cfg, canonical_wavelet):
        # 340 サンプルの wavelet は 4 葉 + 管理領域 = 812 バイト
        acc = BudgetAccountant(4000)
        buf = WaveletBuffer(cfg, acc)
        for _ in range(5):
            buf.add(canonical_wavelet)
        assert len(buf) == 4
        assert buf.evicted == 1
        assert acc.live_bytes == 4 * 812

    def test_eviction_floor(self, cfg):
        acc = BudgetAccountant(10000)
        buf = WaveletBuffer(cfg, acc)
        for k in range(3):
            buf.add(make_wavelet(pb_like(20, 20), start=k * 100))
        assert acc.evict_for(5000) == 0
        assert len(buf) == 3

    def test_close_releases_and_unregisters(self, cfg, canonical_wavelet):
        acc = BudgetAccountant(10000)
        buf = WaveletBuffer(cfg, acc)
        for _ in range(5):
            buf.add(canonical_wavelet)
        buf.close()
        assert acc.live_bytes == 0
        assert acc.evict_for(100) == 0

    def test_distance_cache(self, cfg, mocker):
        buf = WaveletBuffer(cfg)
        for k in range(3):
            buf.add(make_wavelet(pb_like(20 + k, 30), start=k * 100))
        spy = mocker.spy(features_module, "pair_distance")
        first = buf.distance(0, 1, NCC, cfg)
        assert buf.distance(1, 0, NCC, cfg) == first
        assert spy.call_count == 1


class TestExtractFeatures:
    def test_canonical_durations(self, cfg, canonical_wavelet):
        fv = extract_features(canonical_wavelet, None, cfg)
        assert fv.n_durn == pytest.approx(0.60)
        assert fv.p_durn == pytest.approx(0.72)
        assert fv.t_durn == pytest.approx(1.36)
        assert fv.max == 0.4
        assert fv.min == -0.5

    def test_empty_buffer_similarity_is_one(self, cfg, canonical_wavelet):
        assert extract_features(canonical_wavelet, WaveletBuffer(cfg), cfg).similarity == 1.0

    def test_self_similarity(self, cfg):
        w = make_wavelet(pb_like(40, 60))
        assert extract_features(w, [w], cfg).similarity == pytest.approx(1.0, abs=1e-12)

    def test_reference_overrides_buffer(self, cfg):
        w = make_wavelet(pb_like(40, 60))
        ref = make_wavelet(pb_like(60, 30))
        fv = extract_features(w, [w], cfg, reference=ref)
        assert fv.similarity == pytest.approx(ncc_max(w, ref))

    @pytest.mark.parametrize("samples", [
        [0.3, 0.0, 0.2],
        [-0.3, 0.0, -0.2, 0.4],
        [-0.3, -0.1, 0.0],
        [-0.3, 0.2, 0.0, 0.1],
    ])
    def test_malformed(self, cfg, samples):
        with pytest.raises(MalformedWaveletError):
            extract_features(make_wavelet(samples), None, cfg)

    def test_validate_counts(self):
        assert validate_wavelet(make_wavelet(canonical_r(tail=0))) == (150, 180)


def test_write_features_csv(cfg, canonical_wavelet):
    fv = extract_features(canonical_wavelet, None, cfg)
    buf = io.BytesIO()
    write_features_csv([fv], buf)
    lines = buf.getvalue().decode("utf-8").splitlines()
    assert lines[0] == FEATURES_CSV_HEADER == "similarity,max,min,p_durn,n_durn,t_durn"
    assert lines[1] == fv.to_csv_row()
