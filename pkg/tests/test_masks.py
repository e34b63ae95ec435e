import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskedit.controllers import AttentionSite, CrossAttentionAggregate, SiteKind, record_cross_attention
from maskedit.errors import DegenerateMapError, MaskPolicyError
from maskedit.masks import (
    BinarizeRule,
    MaskPolicyConfig,
    Refinement,
    SpatialMask,
    TaskKind,
    area_average_resample,
    convex_hull,
    dilate,
    nearest_resample,
    refine_mask_from_attention,
    resample_mask,
    target_mask_policy,
)


def brute_force_hull_membership(bits: np.ndarray) -> np.ndarray:
    """Independent oracle: a pixel center is in the hull iff it lies on some
    segment/triangle of on-pixel centers (Caratheodory in the plane).
    Pure integer arithmetic, so boundary pixels are exact."""
    points = [tuple(p) for p in np.argwhere(bits)]
    out = np.zeros_like(bits)
    if not points:
        return out

    def on_segment(p, a, b):
        cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        if cross != 0:
            return False
        dot = (p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])
        return 0 <= dot <= (b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2

    def in_triangle(p, a, b, c):
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area2 == 0:
            return False  # degenerate; collinear cases are covered by segments
        d1 = (p[0] - b[0]) * (a[1] - b[1]) - (a[0] - b[0]) * (p[1] - b[1])
        d2 = (p[0] - c[0]) * (b[1] - c[1]) - (b[0] - c[0]) * (p[1] - c[1])
        d3 = (p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])
        has_neg = (d1 < 0) or (d2 < 0) or (d3 < 0)
        has_pos = (d1 > 0) or (d2 > 0) or (d3 > 0)
        return not (has_neg and has_pos)

    pairs = list(itertools.combinations(points, 2))
    triples = list(itertools.combinations(points, 3))
    for r in range(bits.shape[0]):
        for c in range(bits.shape[1]):
            p = (r, c)
            if p in set(points):
                out[r, c] = True
                continue
            if any(on_segment(p, a, b) for a, b in pairs):
                out[r, c] = True
                continue
            if any(in_triangle(p, a, b, c2) for a, b, c2 in triples):
                out[r, c] = True
    return out


def blob_mask(shape, seed, n_blobs=2, radius=3):
    rng = np.random.default_rng(seed)
    bits = np.zeros(shape, dtype=bool)
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    for _ in range(n_blobs):
        cy, cx = rng.integers(0, shape[0]), rng.integers(0, shape[1])
        bits |= (rr - cy) ** 2 + (cc - cx) ** 2 <= radius**2
    return SpatialMask.from_binary(bits)


class TestSpatialMask:
    def test_rejects_out_of_range(self):
        with pytest.raises(Exception):
            SpatialMask(np.full((4, 4), 1.5))

    def test_png_round_trip(self, tmp_path):
        mask = blob_mask((20, 24), seed=0)
        path = tmp_path / "m.png"
        mask.to_png(path)
        loaded = SpatialMask.from_png(path)
        assert np.array_equal(loaded.binary(), mask.binary())


class TestDilate:
    def test_radius_zero_identity(self):
        mask = blob_mask((16, 16), seed=1)
        assert dilate(mask, 0) is mask

    def test_single_pixel_becomes_disk(self):
        bits = np.zeros((9, 9), dtype=bool)
        bits[4, 4] = True
        out = dilate(SpatialMask.from_binary(bits), 2)
        rr, cc = np.mgrid[0:9, 0:9]
        expected = (rr - 4) ** 2 + (cc - 4) ** 2 <= 4
        assert np.array_equal(out.binary(), expected)

    @pytest.mark.parametrize("seed", range(4))
    def test_monotone_in_radius(self, seed):
        mask = blob_mask((24, 24), seed=seed)
        smaller = dilate(mask, 1).binary()
        larger = dilate(mask, 3).binary()
        assert (smaller <= larger).all()
        assert (mask.binary() <= smaller).all()


class TestConvexHull:
    def test_hull_contains_mask(self):
        mask = blob_mask((20, 20), seed=3)
        hull = convex_hull(mask)
        assert (mask.binary() <= hull.binary()).all()

    def test_l_shape_matches_brute_force(self):
        bits = np.zeros((12, 12), dtype=bool)
        bits[2:10, 2:4] = True
        bits[8:10, 2:10] = True
        hull = convex_hull(SpatialMask.from_binary(bits))
        assert np.array_equal(hull.binary(), brute_force_hull_membership(bits))

    @pytest.mark.parametrize("seed", range(10))
    def test_random_instances_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        bits = np.zeros((10, 10), dtype=bool)
        n = rng.integers(1, 7)
        idx = rng.choice(100, size=n, replace=False)
        bits.flat[idx] = True
        hull = convex_hull(SpatialMask.from_binary(bits))
        assert np.array_equal(hull.binary(), brute_force_hull_membership(bits))

    def test_collinear_points(self):
        bits = np.zeros((8, 8), dtype=bool)
        bits[1, 1] = bits[3, 3] = bits[5, 5] = True
        hull = convex_hull(SpatialMask.from_binary(bits))
        expected = brute_force_hull_membership(bits)
        assert np.array_equal(hull.binary(), expected)
        assert hull.binary()[2, 2] and hull.binary()[4, 4]

    def test_empty_mask(self):
        hull = convex_hull(SpatialMask.zeros((5, 5)))
        assert not hull.binary().any()


class TestResampling:
    def test_nearest_identity(self):
        arr = np.arange(16.0).reshape(4, 4)
        assert np.array_equal(nearest_resample(arr, (4, 4)), arr)

    def test_nearest_integer_upsample_is_repeat(self):
        arr = np.arange(4.0).reshape(2, 2)
        assert np.array_equal(nearest_resample(arr, (6, 6)), np.repeat(np.repeat(arr, 3, 0), 3, 1))

    def test_area_average_matches_block_mean_on_divisible_grids(self):
        rng = np.random.default_rng(4)
        arr = rng.uniform(size=(12, 8))
        out = area_average_resample(arr, (3, 4))
        expected = arr.reshape(3, 4, 4, 2).mean(axis=(1, 3))
        assert np.allclose(out, expected)

    def test_area_average_non_divisible_mass_preserving(self):
        rng = np.random.default_rng(5)
        arr = rng.uniform(size=(10, 10))
        out = area_average_resample(arr, (3, 7))
        cell_area = (10 / 3) * (10 / 7)
        assert np.isclose(out.sum() * cell_area, arr.sum())
        assert out.min() >= arr.min() - 1e-12 and out.max() <= arr.max() + 1e-12

    def test_all_ones_mask_resamples_to_all_ones(self):
        mask = SpatialMask.ones((32, 32))
        for grid in ((8, 8), (4, 4), (3, 5)):
            bits = resample_mask(mask, grid)
            assert bits.shape == (grid[0] * grid[1],)
            assert (bits == 1).all()

    def test_left_half_mask_resamples_to_left_half(self):
        values = np.zeros((16, 16))
        values[:, :8] = 1.0
        bits = resample_mask(SpatialMask(values), (4, 4)).reshape(4, 4)
        assert np.array_equal(bits, np.array([[1, 1, 0, 0]] * 4))

    @pytest.mark.parametrize("seed", range(6))
    def test_blob_round_trip_iou(self, seed):
        mask = blob_mask((64, 64), seed=seed, n_blobs=1, radius=14)
        bits = resample_mask(mask, (16, 16)).reshape(16, 16)
        back = nearest_resample(bits, (64, 64)).astype(bool)
        orig = mask.binary()
        iou = (back & orig).sum() / max((back | orig).sum(), 1)
        assert iou >= 0.8


class TestRefinement:
    def make_aggregate(self, grid_map, n_tokens=1):
        agg = CrossAttentionAggregate.empty(n_tokens, grid=grid_map.shape)
        agg.maps[0] = grid_map
        agg.sample_count = 1
        return agg

    def test_point_mass_selects_single_cell_footprint(self):
        grid_map = np.zeros((8, 8))
        grid_map[2, 5] = 1.0
        agg = self.make_aggregate(grid_map)
        cfg = MaskPolicyConfig(binarize_rule=BinarizeRule.MEAN_PLUS_STD)
        mask = refine_mask_from_attention(agg, cfg, (32, 32))
        expected = np.zeros((32, 32), dtype=bool)
        expected[8:12, 20:24] = True
        assert np.array_equal(mask.binary(), expected)

    def test_two_level_map_fixed_threshold(self):
        grid_map = np.full((8, 8), 0.1)
        grid_map[:, :4] = 0.9
        agg = self.make_aggregate(grid_map)
        cfg = MaskPolicyConfig(binarize_rule=BinarizeRule.FIXED_THRESHOLD, fixed_threshold=0.5)
        mask = refine_mask_from_attention(agg, cfg, (8, 8))
        assert np.array_equal(mask.binary(), grid_map >= 0.5)

    def test_gaussian_blob_area_matches_threshold_oracle(self):
        rr, cc = np.mgrid[0:16, 0:16]
        blob = np.exp(-(((rr - 8) ** 2 + (cc - 6) ** 2) / 18.0))
        agg = self.make_aggregate(blob)
        cfg = MaskPolicyConfig(binarize_rule=BinarizeRule.MEAN_PLUS_STD)
        mask = refine_mask_from_attention(agg, cfg, (16, 16))
        # independent recomputation of normalize + threshold
        norm = (blob - blob.min()) / (blob.max() - blob.min())
        expected = norm >= (norm.mean() + 0.5 * norm.std())
        area, expected_area = mask.binary().sum(), expected.sum()
        assert abs(area - expected_area) <= 0.1 * expected_area

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        grid_map = rng.uniform(size=(8, 8))
        cfg = MaskPolicyConfig(binarize_rule=BinarizeRule.MEAN_PLUS_STD)
        base = refine_mask_from_attention(self.make_aggregate(grid_map), cfg, (16, 16))
        scaled = refine_mask_from_attention(self.make_aggregate(grid_map * 37.5), cfg, (16, 16))
        assert np.array_equal(base.binary(), scaled.binary())

    def test_constant_map_is_degenerate(self):
        agg = self.make_aggregate(np.full((8, 8), 0.3))
        with pytest.raises(DegenerateMapError):
            refine_mask_from_attention(agg, MaskPolicyConfig(), (16, 16))

    def test_empty_aggregate_is_degenerate(self):
        agg = CrossAttentionAggregate.empty(1, grid=(8, 8))
        with pytest.raises(DegenerateMapError):
            refine_mask_from_attention(agg, MaskPolicyConfig(), (16, 16))


class TestTargetMaskPolicy:
    def setup_method(self):
        self.source = blob_mask((16, 16), seed=7, n_blobs=1, radius=3)
        self.cfg = MaskPolicyConfig()

    def test_remove_object_zeroes_mask(self):
        out = target_mask_policy(TaskKind.REMOVE_OBJECT, self.source, None, self.cfg, 0, 10)
        assert not out.binary().any()

    def test_alter_background_keeps_source(self):
        out = target_mask_policy(TaskKind.ALTER_BACKGROUND, self.source, None, self.cfg, 30, 10)
        assert np.array_equal(out.values, self.source.values)

    def test_modify_region_identity_with_zero_expand(self):
        out = target_mask_policy(TaskKind.MODIFY_REGION, self.source, None, self.cfg, 5, 10)
        assert np.array_equal(out.values, self.source.values)

    def test_modify_region_expands(self):
        cfg = MaskPolicyConfig(expand_px=2)
        out = target_mask_policy(TaskKind.MODIFY_REGION, self.source, None, cfg, 5, 10)
        assert (self.source.binary() <= out.binary()).all()
        assert out.binary().sum() > self.source.binary().sum()

    def test_replace_uses_source_before_switch_step(self):
        out = target_mask_policy(TaskKind.REPLACE_OBJECT, self.source, None, self.cfg, 9, 10)
        assert np.array_equal(out.values, self.source.values)

    def test_replace_hull_after_switch_step(self):
        bits = np.zeros((12, 12), dtype=bool)
        bits[2:10, 2:4] = True
        bits[8:10, 2:10] = True
        source = SpatialMask.from_binary(bits)
        cfg = MaskPolicyConfig(refinement=Refinement.HULL_EXTENSION, hull_dilation_px=1)
        out = target_mask_policy(TaskKind.REPLACE_OBJECT, source, None, cfg, 10, 10)
        expected = dilate(SpatialMask.from_binary(brute_force_hull_membership(bits)), 1)
        assert np.array_equal(out.binary(), expected.binary())

    def test_replace_refinement_from_attention(self):
        grid_map = np.zeros((8, 8))
        grid_map[0:2, 0:2] = 1.0
        agg = CrossAttentionAggregate.empty(1, grid=(8, 8))
        agg.maps[0] = grid_map
        agg.sample_count = 1
        cfg = MaskPolicyConfig(refinement=Refinement.FROM_CROSS_ATTENTION)
        out = target_mask_policy(TaskKind.REPLACE_OBJECT, self.source, agg, cfg, 20, 10)
        assert out.binary()[0, 0]
        assert not out.binary()[15, 15]

    def test_refinement_requires_aggregate(self):
        cfg = MaskPolicyConfig(refinement=Refinement.FROM_CROSS_ATTENTION)
        with pytest.raises(MaskPolicyError):
            target_mask_policy(TaskKind.REPLACE_OBJECT, self.source, None, cfg, 20, 10)

    def test_degenerate_aggregate_falls_back_to_hull(self):
        agg = CrossAttentionAggregate.empty(1, grid=(8, 8))  # no recordings
        cfg = MaskPolicyConfig(refinement=Refinement.FROM_CROSS_ATTENTION, hull_dilation_px=0)
        out = target_mask_policy(TaskKind.REPLACE_OBJECT, self.source, agg, cfg, 20, 10)
        assert np.array_equal(out.binary(), convex_hull(self.source).binary())

    def test_policy_is_pure(self):
        a = target_mask_policy(TaskKind.REPLACE_OBJECT, self.source, None, self.cfg, 20, 10)
        b = target_mask_policy(TaskKind.REPLACE_OBJECT, self.source, None, self.cfg, 20, 10)
        assert np.array_equal(a.values, b.values)

    def test_task_parse(self):
        assert TaskKind.parse("remove") is TaskKind.REMOVE_OBJECT
        assert TaskKind.parse("REPLACE") is TaskKind.REPLACE_OBJECT
        with pytest.raises(MaskPolicyError):
            TaskKind.parse("explode")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_hull_is_superset_property(seed):
    rng = np.random.default_rng(seed)
    bits = np.zeros((9, 9), dtype=bool)
    idx = rng.choice(81, size=rng.integers(1, 10), replace=False)
    bits.flat[idx] = True
    hull = convex_hull(SpatialMask.from_binary(bits))
    assert (bits <= hull.binary()).all()
