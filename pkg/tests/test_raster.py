import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from landgen.errors import InfeasibleWindowError
from landgen.raster import (
    DEFAULT_PALETTE,
    DEVELOPED_CLASSES,
    CategoricalRaster,
    PixelMask,
    SynthParams,
    coarsen_majority,
    extract_windows,
    mask_bottom_missing,
    mask_center_missing,
    synth_landscape,
)
from landgen.stats import adjacency


def raster(data, k=None):
    a = np.asarray(data, dtype=np.uint8)
    return CategoricalRaster(a, k or int(a.max()) + 1 if a.size else 2)


class TestPalette:
    def test_default_has_20_unique_classes(self):
        assert DEFAULT_PALETTE.num_classes == 20
        assert len(set(DEFAULT_PALETTE.labels)) == 20
        assert len(DEFAULT_PALETTE.colors) == 20

    def test_developed_classes_are_2_through_5(self):
        assert DEVELOPED_CLASSES == frozenset({2, 3, 4, 5})
        for i in DEVELOPED_CLASSES:
            assert DEFAULT_PALETTE.labels[i].startswith("dev")

    def test_water_is_class_zero(self):
        assert DEFAULT_PALETTE.labels[0] == "water"


class TestRasterInvariants:
    def test_rejects_out_of_range_class(self):
        with pytest.raises(ValueError, match="out of range"):
            CategoricalRaster(np.array([[0, 5]], dtype=np.uint8), 3)

    def test_data_is_read_only(self):
        r = raster([[0, 1], [1, 0]])
        with pytest.raises(ValueError):
            r.data[0, 0] = 1

    def test_mask_dim_check(self):
        m = PixelMask(np.ones((2, 3), dtype=bool))
        with pytest.raises(ValueError, match="does not match"):
            m.check_matches(raster([[0, 1], [1, 0]]))


class TestCoarsenMajority:
    def test_strict_majority(self):
        block = np.array([[2, 2, 2], [2, 2, 7], [7, 7, 7]], dtype=np.uint8)
        out = coarsen_majority(CategoricalRaster(block, 8), 3)
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == 2  # five 2s beat four 7s

    def test_constant_block_identity(self):
        out = coarsen_majority(CategoricalRaster(np.full((2, 2), 5, dtype=np.uint8), 6), 2)
        assert out.data[0, 0] == 5

    def test_tie_breaks_to_lowest_class(self):
        # four 1s, four 2s, one 3: tie between 1 and 2 goes to 1
        block = np.array([[1, 1, 2], [1, 1, 2], [2, 2, 3]], dtype=np.uint8)
        out = coarsen_majority(CategoricalRaster(block, 4), 3)
        assert out.data[0, 0] == 1

    def test_not_divisible_names_axis(self):
        r = raster(np.zeros((9, 8), dtype=np.uint8))
        with pytest.raises(ValueError, match="width"):
            coarsen_majority(r, 3)
        r2 = raster(np.zeros((8, 9), dtype=np.uint8))
        with pytest.raises(ValueError, match="height"):
            coarsen_majority(r2, 3)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_output_class_present_in_source_block(self, seed):
        rng = np.random.default_rng(seed)
        data = rng.integers(0, 6, size=(6, 6)).astype(np.uint8)
        out = coarsen_majority(CategoricalRaster(data, 6), 3)
        for i in range(2):
            for j in range(2):
                block = data[3 * i : 3 * i + 3, 3 * j : 3 * j + 3]
                assert out.data[i, j] in block


class TestExtractWindows:
    def test_offsets_in_bounds_and_count(self):
        r = synth_landscape(80, 80, 5, seed=0)
        manifest, windows = extract_windows(r, window=40, count=12, seed=3)
        assert len(windows) == 12
        assert len(manifest.entries) == 12
        for _, row, col in manifest.entries:
            assert 0 <= row <= 40 and 0 <= col <= 40

    def test_deterministic_given_seed(self):
        r = synth_landscape(60, 60, 5, seed=1)
        m1, w1 = extract_windows(r, window=16, count=5, seed=9)
        m2, w2 = extract_windows(r, window=16, count=5, seed=9)
        assert m1.entries == m2.entries
        assert all(a == b for a, b in zip(w1, w2))

    def test_all_water_is_infeasible(self):
        r = CategoricalRaster(np.zeros((20, 20), dtype=np.uint8), 5)  # class 0 = water
        with pytest.raises(InfeasibleWindowError):
            extract_windows(r, window=8, count=1, water_limit=0.5, seed=0,
                            max_consecutive_rejections=50)

    def test_water_rule_rejects_above_limit(self):
        # left 60% of every window at water; right margin makes some valid
        data = np.zeros((10, 30), dtype=np.uint8)
        data[:, 18:] = 1
        r = CategoricalRaster(data, 2)
        manifest, windows = extract_windows(r, window=10, count=8, water_limit=0.5, seed=2)
        for w in windows:
            assert float((w.data == 0).mean()) <= 0.5

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_never_emits_window_violating_water_rule(self, seed):
        r = synth_landscape(40, 40, 4, seed=seed % 1000, params=SynthParams(water_probability=0.8))
        manifest, windows = extract_windows(r, window=12, count=4, water_limit=0.4, seed=seed)
        for w in windows:
            assert float((w.data == manifest.water_class).mean()) <= manifest.water_fraction_limit


class TestSynthLandscape:
    def test_deterministic(self):
        a = synth_landscape(24, 24, 5, seed=77)
        b = synth_landscape(24, 24, 5, seed=77)
        assert a == b

    def test_road_probability_zero_stamps_nothing(self):
        def full_road_lines(r):
            road = 2  # default road class for K = 5
            rows = sum((r.data[i] == road).all() for i in range(r.height))
            cols = sum((r.data[:, j] == road).all() for j in range(r.width))
            return rows + cols

        with_roads = synth_landscape(32, 32, 5, seed=3, params=SynthParams(road_probability=1.0, water_probability=0.0))
        without = synth_landscape(32, 32, 5, seed=3, params=SynthParams(road_probability=0.0, water_probability=0.0))
        assert full_road_lines(with_roads) >= 1
        assert full_road_lines(without) == 0

    def test_adjacency_beats_permutation_null(self):
        wins = 0
        for seed in range(100):
            r = synth_landscape(40, 40, 5, seed=seed)
            a = adjacency(r)
            rng = np.random.default_rng(seed + 10_000)
            null = np.mean([
                adjacency(CategoricalRaster(
                    rng.permutation(r.data.ravel()).reshape(40, 40), r.palette_K))
                for _ in range(100)
            ])
            wins += a > null
        assert wins >= 95


class TestMaskFamilies:
    def test_bottom_missing(self):
        m = mask_bottom_missing(8, 8)
        assert m.observed[:4].all() and not m.observed[4:].any()

    def test_center_missing_is_quarter_area(self):
        m = mask_center_missing(16, 16)
        assert m.num_missing == 64
