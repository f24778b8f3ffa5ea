import itertools

import numpy as np
import pytest
import torch

from sparse3d.sparsity import (GroupMask, GroupNormTensor, SchemeKind, apply_mask, group_norm, mask_for_target_rate,
                               mask_from_threshold, mask_from_weights, per_location_flops, scheme_partition,
                               sparsity_stats)
from sparse3d.tensor_core import ConvSpec, WeightTensor5D, flops_count, partition


def random_weights(shape, seed=0):
    return WeightTensor5D.from_numpy(np.random.RandomState(seed).standard_normal(shape))


def line_norms(values, scheme='vanilla'):
    """Norms of a (1, len(values)) Vanilla layer with one 1x1x1 kernel per group."""
    part = partition((1, len(values), 1, 1, 1), 1, 1)
    return GroupNormTensor(torch.tensor([values], dtype=torch.float64), scheme, part)


class TestGroupNorm():

    def setup_method(self):
        data = torch.zeros(2, 2, 1, 1, 1, dtype=torch.float64)
        data[0, 0], data[0, 1] = 3., 4.
        self.weights = WeightTensor5D(data)
        self.partition = partition(self.weights.dims, 2, 2)

    def test_l2_location(self):
        norms = group_norm(self.weights, self.partition, 'kgs', 'l2')
        assert norms.values.shape == (1, 1, 1, 1, 1)
        assert norms.values.item() == 5.0

    def test_l1_location(self):
        assert group_norm(self.weights, self.partition, 'kgs', 'l1').values.item() == 7.0

    def test_mix(self):
        norms = group_norm(self.weights, self.partition, 'kgs', 'mix', alpha=0.25)
        assert norms.values.item() == pytest.approx(0.25 * 7 + 0.75 * 5)

    def test_matches_brute_force(self):
        weights = random_weights((8, 8, 3, 3, 3))
        part = partition(weights.dims, 4, 4)
        norms = group_norm(weights, part, SchemeKind.KGS, 'l2').values.numpy()
        w = weights.as_numpy()
        for p, q, d, h, x in itertools.product(range(2), range(2), range(3), range(3), range(3)):
            total = 0.0
            for m, n in itertools.product(range(4 * p, 4 * p + 4), range(4 * q, 4 * q + 4)):
                total += w[m, n, d, h, x] ** 2
            assert abs(norms[p, q, d, h, x] - np.sqrt(total)) < 1e-12

    def test_vanilla_aggregates_whole_group(self):
        weights = random_weights((4, 6, 2, 3, 3), seed=1)
        part = partition(weights.dims, 2, 3)
        norms = group_norm(weights, part, 'vanilla', 'l1').values.numpy()
        w = np.abs(weights.as_numpy())
        assert norms.shape == (2, 2)
        np.testing.assert_allclose(norms[1, 0], w[2:4, 0:3].sum(), rtol=1e-12)

    def test_ragged_groups(self):
        weights = random_weights((5, 3, 1, 1, 1), seed=2)
        part = partition(weights.dims, 4, 2)
        norms = group_norm(weights, part, 'kgs', 'l2').values.numpy()
        assert norms.shape == (2, 2, 1, 1, 1)
        np.testing.assert_allclose(norms[1, 1, 0, 0, 0], abs(weights.as_numpy()[4, 2, 0, 0, 0]), rtol=1e-12)

    def test_filter_norms(self):
        weights = random_weights((6, 4, 3, 3, 3), seed=3)
        part = scheme_partition(weights.dims, 'filter', 4, 4)
        norms = group_norm(weights, part, 'filter', 'l2').values.numpy()
        expected = np.sqrt((weights.as_numpy() ** 2).reshape(6, -1).sum(-1))
        np.testing.assert_allclose(norms, expected, rtol=1e-12)

    def test_partition_mismatch_is_rejected(self):
        with pytest.raises(ValueError):
            group_norm(random_weights((4, 4, 3, 3, 3)), partition((8, 4, 3, 3, 3), 4, 4), 'kgs')

    def test_unknown_norm_is_rejected(self):
        with pytest.raises(ValueError):
            group_norm(self.weights, self.partition, 'kgs', 'l3')


class TestApplyMask():

    def setup_method(self):
        self.weights = random_weights((8, 8, 3, 3, 3))
        self.partition = partition(self.weights.dims, 4, 4)

    @pytest.mark.parametrize('scheme', ['kgs', 'vanilla'])
    def test_all_true_is_identity(self, scheme):
        masked = apply_mask(self.weights, GroupMask.all_true(scheme, self.partition))
        assert torch.equal(masked.data, self.weights.data)

    @pytest.mark.parametrize('scheme', ['kgs', 'vanilla'])
    def test_all_false_zeroes(self, scheme):
        masked = apply_mask(self.weights, GroupMask.all_false(scheme, self.partition))
        assert not masked.data.any()

    def test_random_mask_coordinate_wise(self):
        mask = GroupMask.random('kgs', self.partition, 0.5, torch.Generator().manual_seed(0))
        masked = apply_mask(self.weights, mask).data
        w = self.weights.data
        for m, n, d, h, x in itertools.product(range(8), range(8), range(3), range(3), range(3)):
            if mask.bits[m // 4, n // 4, d, h, x]:
                assert masked[m, n, d, h, x] == w[m, n, d, h, x]
            else:
                assert masked[m, n, d, h, x] == 0

    def test_idempotent(self):
        mask = GroupMask.random('kgs', self.partition, 0.3, torch.Generator().manual_seed(1))
        once = apply_mask(self.weights, mask)
        assert torch.equal(apply_mask(once, mask).data, once.data)

    def test_vanilla_is_special_case_of_kgs(self):
        mask = GroupMask.random('vanilla', self.partition, 0.5, torch.Generator().manual_seed(2))
        kgs = mask.to_kgs()
        assert kgs.scheme == SchemeKind.KGS
        assert torch.equal(apply_mask(self.weights, mask).data, apply_mask(self.weights, kgs).data)

    def test_filter_mask(self):
        part = scheme_partition(self.weights.dims, 'filter', 4, 4)
        bits = torch.tensor([True, False] * 4)
        masked = apply_mask(self.weights, GroupMask('filter', part, bits)).data
        assert not masked[1::2].any()
        assert torch.equal(masked[::2], self.weights.data[::2])
        assert torch.equal(apply_mask(self.weights, GroupMask('filter', part, bits).to_kgs()).data, masked)

    def test_norms_vanish_exactly_at_pruned_locations(self):
        mask = GroupMask.random('kgs', self.partition, 0.5, torch.Generator().manual_seed(3))
        norms = group_norm(apply_mask(self.weights, mask), self.partition, 'kgs', 'l2').values
        assert torch.equal(norms == 0, ~mask.bits)
        assert mask_from_weights(apply_mask(self.weights, mask), 'kgs', self.partition) == mask

    def test_mismatched_mask_is_rejected(self):
        with pytest.raises(ValueError):
            apply_mask(self.weights, GroupMask.all_true('kgs', partition((4, 8, 3, 3, 3), 4, 4)))

    def test_mismatched_bits_are_rejected(self):
        with pytest.raises(ValueError):
            GroupMask('kgs', self.partition, torch.ones(2, 2, dtype=torch.bool))


class TestSparsityStats():

    def setup_method(self):
        self.weights = random_weights((8, 8, 2, 3, 3))
        self.partition = partition(self.weights.dims, 4, 4)
        self.spec = ConvSpec(padding=(1, 1, 1))
        self.input_dims = (1, 8, 4, 6, 6)

    def test_all_true(self):
        stats = sparsity_stats(GroupMask.all_true('kgs', self.partition), self.spec, self.input_dims)
        assert stats.flops_rate == 1.0
        assert stats.param_rate == 1.0

    def test_half_locations(self):
        bits = torch.ones(2, 2, 2, 3, 3, dtype=torch.bool)
        bits[:, :, 1] = False
        stats = sparsity_stats(GroupMask('kgs', self.partition, bits), self.spec, self.input_dims)
        assert stats.flops_rate == 2.0
        assert stats.param_rate == 2.0

    def test_pruned_weights_are_counted(self):
        mask = GroupMask.random('kgs', self.partition, 0.5, torch.Generator().manual_seed(0))
        from_mask = sparsity_stats(mask, self.spec, self.input_dims)
        from_weights = sparsity_stats(apply_mask(self.weights, mask), self.spec, self.input_dims)
        assert from_mask.flops_after == from_weights.flops_after
        assert from_mask.flops_rate == from_weights.flops_rate
        assert from_mask.flops_rate >= 1.0

    def test_flops_after_is_sum_of_kept_locations(self):
        mask = GroupMask.random('kgs', self.partition, 0.4, torch.Generator().manual_seed(1))
        loc_flops = per_location_flops(self.partition, 'kgs', self.spec, self.input_dims)
        stats = sparsity_stats(mask, self.spec, self.input_dims)
        assert stats.flops_after == int(loc_flops[mask.bits].sum())

    def test_model_wide(self):
        second = random_weights((4, 8, 3, 3, 3), seed=1)
        masks = [GroupMask.all_true('kgs', self.partition),
                 GroupMask.all_false('vanilla', partition(second.dims, 4, 4))]
        specs = [self.spec, ConvSpec()]
        dims = [self.input_dims, (1, 8, 4, 6, 6)]
        dense = flops_count(self.weights, self.spec, self.input_dims) + flops_count(second, ConvSpec(), dims[1])
        with pytest.warns(UserWarning):
            stats = sparsity_stats(masks, specs, dims)
        assert stats.dead_layers == [1]
        assert stats.flops_rate == float('inf')
        assert stats.flops_dense == dense

    def test_length_mismatch_is_rejected(self):
        with pytest.raises(ValueError):
            sparsity_stats([GroupMask.all_true('kgs', self.partition)], [self.spec, self.spec], [self.input_dims])


class TestPerLocationFlops():

    @pytest.mark.parametrize('scheme', ['kgs', 'vanilla', 'filter'])
    @pytest.mark.parametrize('dims', [(8, 8, 3, 3, 3), (5, 7, 3, 3, 1)])
    def test_sums_to_dense_flops(self, scheme, dims):
        weights = random_weights(dims)
        part = scheme_partition(weights.dims, scheme, 4, 4)
        spec = ConvSpec((1, 2, 1), (1, 1, 0))
        input_dims = (2, dims[1], 4, 7, 5)
        flops = per_location_flops(part, scheme, spec, input_dims)
        assert int(flops.sum()) == flops_count(weights, spec, input_dims)

    def test_channel_mismatch_is_rejected(self):
        with pytest.raises(ValueError):
            per_location_flops(partition((4, 4, 3, 3, 3), 2, 2), 'kgs', ConvSpec(), (1, 3, 4, 4, 4))


class TestMaskFromThreshold():

    def test_direct_comparison(self):
        mask = mask_from_threshold(line_norms([1., 2., 3., 4.]), 2.5)
        assert mask.bits.tolist() == [[False, False, True, True]]

    def test_zero_threshold_keeps_positive_norms(self):
        assert bool(mask_from_threshold(line_norms([0.1, 2., 3., 4.]), 0).bits.all())

    def test_threshold_above_max(self):
        with pytest.raises(ValueError, match='prunes all'):
            mask_from_threshold(line_norms([1., 2., 3., 4.]), 5.)
        assert mask_from_threshold(line_norms([1., 2., 3., 4.]), 5., allow_dead_layers=True).is_dead()

    def test_threshold_at_max(self):
        with pytest.raises(ValueError, match='prunes all'):
            mask_from_threshold(line_norms([1., 2., 3., 4.]), 4.)
        mask = mask_from_threshold(line_norms([1., 2., 3., 4.]), 4., allow_dead_layers=True)
        assert mask.bits.tolist() == [[False, False, False, False]]

    def test_negative_threshold_is_rejected(self):
        with pytest.raises(ValueError):
            mask_from_threshold(line_norms([1., 2.]), -1.)


class TestMaskForTargetRate():

    def setup_method(self):
        self.weights = [random_weights((8, 8, 3, 3, 3), seed=0), random_weights((8, 8, 3, 3, 3), seed=1)]
        self.partitions = [partition(w.dims, 4, 4) for w in self.weights]
        self.spec = ConvSpec(padding=(1, 1, 1))
        self.input_dims = (1, 8, 4, 6, 6)
        self.norms = [group_norm(w, p, 'kgs') for w, p in zip(self.weights, self.partitions)]
        self.flops = [per_location_flops(p, 'kgs', self.spec, self.input_dims) for p in self.partitions]

    def test_target_one_keeps_everything(self):
        masks = mask_for_target_rate(self.norms, self.flops, 1.0)
        assert all(bool(m.bits.all()) for m in masks)

    def test_prunes_smallest(self):
        norms = line_norms([3., 1., 4., 2.])
        mask = mask_for_target_rate(norms, torch.ones(1, 4, dtype=torch.int64), 2.0)
        assert mask.bits.tolist() == [[True, False, True, False]]

    def test_ties_by_lowest_index(self):
        norms = line_norms([1., 1., 1., 1.])
        mask = mask_for_target_rate(norms, torch.ones(1, 4, dtype=torch.int64), 2.0)
        assert mask.bits.tolist() == [[False, False, True, True]]

    def test_reaches_target_within_one_location(self):
        target = 2.6
        masks = mask_for_target_rate(self.norms, self.flops, target)
        stats = sparsity_stats(masks, [self.spec] * 2, [self.input_dims] * 2)
        assert stats.flops_rate >= target
        max_location = max(int(f.max()) for f in self.flops)
        assert stats.flops_dense / (stats.flops_after + max_location) < target

    def test_monotone_in_target(self):
        small = mask_for_target_rate(self.norms, self.flops, 2.0)
        large = mask_for_target_rate(self.norms, self.flops, 3.0)
        for s, l in zip(small, large):
            assert not bool((l.bits & ~s.bits).any())

    def test_never_kills_a_layer(self):
        # The first layer has much smaller norms and would be pruned first
        norms = [GroupNormTensor(self.norms[0].values * 1e-3, 'kgs', self.partitions[0]), self.norms[1]]
        masks = mask_for_target_rate(norms, self.flops, 3.0)
        assert not any(m.is_dead() for m in masks)
        assert masks[0].n_kept == 1

    def test_unreachable_target_is_rejected(self):
        with pytest.raises(ValueError, match='not reachable'):
            mask_for_target_rate(self.norms, self.flops, 1e6)

    def test_target_below_one_is_rejected(self):
        with pytest.raises(ValueError):
            mask_for_target_rate(self.norms, self.flops, 0.5)

    def test_shape_mismatch_is_rejected(self):
        with pytest.raises(ValueError):
            mask_for_target_rate(self.norms[0], self.flops[0][:1], 2.0)
