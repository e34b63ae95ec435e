import numpy as np
import pytest

from maskedit.attention import attention_probs, scaled_dot_attention
from maskedit.controllers import (
    AttentionSite,
    CrossAttentionAggregate,
    EditSchedule,
    SiteKind,
    compose_location,
    localized_cross_attention,
    preserve_background,
    preserve_foreground,
    record_cross_attention,
    should_use_normal_self_attention,
)
from maskedit.errors import DimensionError, EmptyMaskError

from test_attention import brute_attention


def random_site(kind=SiteKind.SELF_ATTENTION, step=10, layer=12, grid=(2, 4)):
    return AttentionSite(step_index=step, layer_index=layer, kind=kind, token_grid=grid)


def random_qkv(rng, n_q=8, n_k=8, dim=4, v_dim=4):
    return (
        rng.normal(size=(n_q, dim)),
        rng.normal(size=(n_k, dim)),
        rng.normal(size=(n_k, v_dim)),
    )


class TestPreserveBackground:
    def test_all_zero_source_mask_is_plain_attention(self):
        rng = np.random.default_rng(0)
        q, k_src, v_src = random_qkv(rng)
        out = preserve_background(q, k_src, v_src, np.zeros(8, int))
        assert np.allclose(out, scaled_dot_attention(q, k_src, v_src), atol=1e-6)

    def test_object_values_cannot_leak(self):
        rng = np.random.default_rng(1)
        q, k_src, v_src = random_qkv(rng)
        source_mask = np.array([1, 1, 0, 0, 0, 1, 0, 0])
        base = preserve_background(q, k_src, v_src, source_mask)
        v_perturbed = v_src.copy()
        v_perturbed[source_mask == 1] += rng.normal(size=(3, 4)) * 50
        again = preserve_background(q, k_src, v_perturbed, source_mask)
        assert np.allclose(base, again, atol=1e-6)

    def test_matches_masked_softmax_oracle(self):
        rng = np.random.default_rng(2)
        q, k_src, v_src = random_qkv(rng)
        source_mask = np.array([0, 1, 0, 1, 1, 0, 0, 1])
        expected = brute_attention(q, k_src, v_src, admitted=np.flatnonzero(source_mask == 0))
        assert np.allclose(preserve_background(q, k_src, v_src, source_mask), expected, atol=1e-6)

    def test_all_ones_source_mask_raises(self):
        rng = np.random.default_rng(3)
        q, k_src, v_src = random_qkv(rng)
        with pytest.raises(EmptyMaskError):
            preserve_background(q, k_src, v_src, np.ones(8, int))


class TestPreserveForeground:
    def test_gate_never_fires_without_retention(self):
        rng = np.random.default_rng(4)
        q, k, v = random_qkv(rng)
        _, k_src, v_src = random_qkv(rng)
        schedule = EditSchedule(retain_object=False)
        for step in (0, 5, 40):
            for layer in (0, 9, 15):
                out = preserve_foreground(
                    q, k, v, k_src, v_src, np.ones(8, int), random_site(step=step, layer=layer), schedule
                )
                assert np.allclose(out, scaled_dot_attention(q, k, v), atol=1e-6)

    def test_early_step_uses_plain_branch(self):
        rng = np.random.default_rng(5)
        q, k, v = random_qkv(rng)
        _, k_src, v_src = random_qkv(rng)
        schedule = EditSchedule(retain_object=True)  # thresholds 3 / 8
        out = preserve_foreground(q, k, v, k_src, v_src, np.ones(8, int), random_site(step=0, layer=12), schedule)
        assert np.allclose(out, scaled_dot_attention(q, k, v), atol=1e-6)

    def test_gated_branch_matches_masked_attention_oracle(self):
        rng = np.random.default_rng(6)
        q, k, v = random_qkv(rng)
        _, k_src, v_src = random_qkv(rng)
        target_mask = np.array([1, 0, 0, 1, 0, 1, 1, 0])
        schedule = EditSchedule(retain_object=True)
        out = preserve_foreground(q, k, v, k_src, v_src, target_mask, random_site(step=10, layer=12), schedule)
        expected = brute_attention(q, k_src, v_src, admitted=np.flatnonzero(target_mask))
        assert np.allclose(out, expected, atol=1e-6)


class TestComposeLocation:
    def test_all_zero_mask_returns_background_bitwise(self):
        rng = np.random.default_rng(7)
        fg, bg = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        out = compose_location(fg, bg, np.zeros(6, int))
        assert np.array_equal(out, bg)

    def test_all_one_mask_returns_foreground_bitwise(self):
        rng = np.random.default_rng(8)
        fg, bg = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        assert np.array_equal(compose_location(fg, bg, np.ones(6, int)), fg)

    def test_random_mask_row_selection(self):
        rng = np.random.default_rng(9)
        fg, bg = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
        mask = rng.integers(0, 2, size=10)
        out = compose_location(fg, bg, mask)
        for row in range(10):
            assert np.array_equal(out[row], fg[row] if mask[row] else bg[row])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            compose_location(np.ones((3, 2)), np.ones((4, 2)), np.ones(3, int))


class TestLocalizedCrossAttention:
    def setup_method(self):
        rng = np.random.default_rng(10)
        self.q = rng.normal(size=(8, 4))
        self.k_t = rng.normal(size=(5, 4))
        self.v_t = rng.normal(size=(5, 3))
        self.k_n = rng.normal(size=(2, 4))
        self.v_n = rng.normal(size=(2, 3))

    def test_all_ones_mask_is_plain_prompt_attention(self):
        out = localized_cross_attention(self.q, self.k_t, self.v_t, self.k_n, self.v_n, np.ones(8, int))
        assert np.allclose(out, scaled_dot_attention(self.q, self.k_t, self.v_t), atol=1e-6)

    def test_all_zeros_mask_is_plain_null_attention(self):
        out = localized_cross_attention(self.q, self.k_t, self.v_t, self.k_n, self.v_n, np.zeros(8, int))
        assert np.allclose(out, scaled_dot_attention(self.q, self.k_n, self.v_n), atol=1e-6)

    def test_mixed_mask_matches_per_partition_oracle(self):
        mask = np.array([1, 0, 1, 1, 0, 0, 1, 0])
        out = localized_cross_attention(self.q, self.k_t, self.v_t, self.k_n, self.v_n, mask)
        for row in range(8):
            if mask[row]:
                expected = brute_attention(self.q[row : row + 1], self.k_t, self.v_t)
            else:
                expected = brute_attention(self.q[row : row + 1], self.k_n, self.v_n)
            assert np.allclose(out[row], expected[0], atol=1e-6)

    def test_prompt_values_never_reach_unmasked_rows(self):
        rng = np.random.default_rng(11)
        mask = np.array([1, 1, 0, 0, 0, 0, 1, 0])
        base = localized_cross_attention(self.q, self.k_t, self.v_t, self.k_n, self.v_n, mask)
        v_t2 = self.v_t + rng.normal(size=self.v_t.shape) * 10
        out = localized_cross_attention(self.q, self.k_t, v_t2, self.k_n, self.v_n, mask)
        assert np.allclose(base[mask == 0], out[mask == 0], atol=1e-6)
        assert not np.allclose(base[mask == 1], out[mask == 1])


class TestNormalAttentionMix:
    def test_fraction_zero_and_one(self):
        site = random_site()
        assert not should_use_normal_self_attention(site, EditSchedule(normal_attention_fraction=0.0))
        assert should_use_normal_self_attention(site, EditSchedule(normal_attention_fraction=1.0))

    def test_decision_is_pure_function_of_seed_step_layer(self):
        schedule = EditSchedule(normal_attention_fraction=0.1, rng_seed=1234)
        first = [
            should_use_normal_self_attention(random_site(step=s, layer=l), schedule)
            for s in range(20)
            for l in range(8)
        ]
        second = [
            should_use_normal_self_attention(random_site(step=s, layer=l), schedule)
            for s in range(20)
            for l in range(8)
        ]
        assert first == second

    def test_rate_over_800_sites_within_two_sigma(self):
        schedule = EditSchedule(normal_attention_fraction=0.10, rng_seed=42)
        count = sum(
            should_use_normal_self_attention(random_site(step=s, layer=l), schedule)
            for s in range(50)
            for l in range(16)
        )
        assert 64 <= count <= 96

    def test_different_seeds_differ(self):
        sites = [random_site(step=s, layer=l) for s in range(50) for l in range(16)]
        a = [should_use_normal_self_attention(s, EditSchedule(normal_attention_fraction=0.1, rng_seed=0)) for s in sites]
        b = [should_use_normal_self_attention(s, EditSchedule(normal_attention_fraction=0.1, rng_seed=7)) for s in sites]
        assert a != b


class TestCrossAttentionRecording:
    def cross_site(self, grid, step=0, layer=0):
        return AttentionSite(step_index=step, layer_index=layer, kind=SiteKind.CROSS_ATTENTION, token_grid=grid)

    def test_uniform_map_gives_constant_aggregate(self):
        agg = CrossAttentionAggregate.empty(n_prompt_tokens=4, grid=(8, 8))
        probs = np.full((16, 4), 0.25)
        record_cross_attention(agg, self.cross_site((4, 4)), probs, [2])
        total = agg.maps.sum(axis=0)
        assert np.allclose(total, total.flat[0])
        assert agg.sample_count == 1

    def test_two_identical_recordings_double_the_aggregate(self):
        site = self.cross_site((4, 4))
        rng = np.random.default_rng(12)
        probs = rng.dirichlet(np.ones(5), size=16)
        one = CrossAttentionAggregate.empty(5, grid=(8, 8))
        record_cross_attention(one, site, probs, [1, 3])
        two = CrossAttentionAggregate.empty(5, grid=(8, 8))
        record_cross_attention(two, site, probs, [1, 3])
        record_cross_attention(two, site, probs, [1, 3])
        assert np.allclose(two.maps, 2 * one.maps)
        assert two.sample_count == 2

    def test_multi_grid_recordings_land_on_reference_grid(self):
        # closed form: nearest upsampling of 16x16 repeats each cell 4x4,
        # of 32x32 repeats 2x2; the aggregate is the sum of the two.
        agg = CrossAttentionAggregate.empty(2, grid=(64, 64))
        rng = np.random.default_rng(13)
        expected = np.zeros((64, 64))
        for n, rep in ((16, 4), (32, 2)):
            col = rng.uniform(0.1, 0.9, size=(n * n, 1))
            probs = np.hstack([col, 1 - col])
            record_cross_attention(agg, self.cross_site((n, n)), probs, [0])
            expected += np.repeat(np.repeat(col.reshape(n, n), rep, 0), rep, 1)
        assert np.allclose(agg.maps[0], expected)
        assert np.allclose(agg.maps[1], 0)
        assert agg.sample_count == 2

    def test_weighted_multi_grid_resampling_closed_form(self):
        agg = CrossAttentionAggregate.empty(2, grid=(8, 8))
        small = np.linspace(0, 1, 16).reshape(16, 1)
        probs_small = np.hstack([small, 1 - small])
        record_cross_attention(agg, self.cross_site((4, 4)), probs_small, [0])
        expected = np.repeat(np.repeat(small.reshape(4, 4), 2, 0), 2, 1)
        assert np.allclose(agg.maps[0], expected)
        assert np.allclose(agg.maps[1], 0)

    def test_empty_positions_is_noop_with_flag(self):
        agg = CrossAttentionAggregate.empty(3, grid=(8, 8))
        probs = np.full((16, 3), 1 / 3)
        record_cross_attention(agg, self.cross_site((4, 4)), probs, [])
        assert agg.sample_count == 0
        assert agg.skipped_empty == 1
        assert np.allclose(agg.maps, 0)

    def test_rejects_self_attention_site(self):
        agg = CrossAttentionAggregate.empty(3)
        with pytest.raises(DimensionError):
            record_cross_attention(agg, random_site(), np.full((8, 3), 1 / 3), [0])

    def test_rejects_non_stochastic_rows(self):
        agg = CrossAttentionAggregate.empty(3, grid=(8, 8))
        with pytest.raises(DimensionError):
            record_cross_attention(agg, self.cross_site((4, 4)), np.full((16, 3), 0.5), [0])


class TestCrossModuleProperties:
    def test_background_rows_ignore_current_kv_when_not_retaining(self):
        rng = np.random.default_rng(14)
        q, k, v = random_qkv(rng)
        _, k_src, v_src = random_qkv(rng)
        source_mask = np.array([1, 1, 0, 0, 0, 0, 1, 0])
        target_mask = np.array([0, 1, 1, 0, 0, 1, 0, 0])
        schedule = EditSchedule(retain_object=False)
        site = random_site(step=10, layer=12)

        def run(k_cur, v_cur):
            fg = preserve_foreground(q, k_cur, v_cur, k_src, v_src, target_mask, site, schedule)
            bg = preserve_background(q, k_src, v_src, source_mask)
            return compose_location(fg, bg, target_mask)

        base = run(k, v)
        perturbed = run(k + rng.normal(size=k.shape), v + rng.normal(size=v.shape))
        outside = target_mask == 0
        assert np.allclose(base[outside], perturbed[outside], atol=1e-6)
