import numpy as np
import pytest
import torch

from sparse3d.compiler import Schedule, csr_encode, cws_encode, default_schedule, hwr_reorder
from sparse3d.sparse_exec import (ExecStats, bench, conv3d_csr, conv3d_sparse, conv3d_sparse_vanilla, count_ops,
                                  execute, run_stack)
from sparse3d.sparsity import (GroupMask, apply_mask, group_norm, mask_for_target_rate, per_location_flops,
                               scheme_partition, sparsity_stats)
from sparse3d.tensor_core import ConvSpec, FeatureMap, WeightTensor5D, conv3d_dense, conv_output_dims, partition


def random_input(dims, seed=0):
    return FeatureMap.from_numpy(np.random.RandomState(seed).standard_normal(dims).astype(np.float32))


def random_weights(shape, seed=0):
    return WeightTensor5D.from_numpy(np.random.RandomState(seed).standard_normal(shape).astype(np.float32))


def random_mask(weights, scheme='kgs', g_M=4, g_N=4, keep_prob=0.4, seed=0):
    part = scheme_partition(weights.dims, scheme, g_M, g_N)
    return GroupMask.random(scheme, part, keep_prob, torch.Generator().manual_seed(seed))


def oracle(input, weights, mask, spec):
    return conv3d_dense(input, apply_mask(weights, mask), spec).as_numpy()


class TestConv3dSparse():

    def setup_method(self):
        self.input = random_input((2, 8, 5, 7, 7))
        self.weights = random_weights((16, 8, 3, 3, 3), 1)
        self.spec = ConvSpec((1, 2, 2), (1, 1, 1), torch.linspace(-1, 1, 16))
        self.out_dims = (5, 4, 4)

    def compile(self, mask, reorder=True):
        plan = hwr_reorder(self.weights, mask)[0] if reorder else None
        return cws_encode(self.weights, mask, plan, self.spec)

    def test_all_true_equals_dense(self):
        mask = GroupMask.all_true('kgs', partition(self.weights.dims, 4, 4))
        out, _ = conv3d_sparse(self.input, self.compile(mask), self.spec, Schedule.untiled(self.out_dims))
        expected = conv3d_dense(self.input, self.weights, self.spec).as_numpy()
        np.testing.assert_allclose(out.as_numpy(), expected, rtol=1e-5, atol=1e-4)

    def test_all_false_gives_bias(self):
        mask = GroupMask.all_false('kgs', partition(self.weights.dims, 4, 4))
        out, stats = conv3d_sparse(self.input, self.compile(mask), self.spec, Schedule.untiled(self.out_dims))
        expected = np.broadcast_to(self.spec.bias.numpy()[None, :, None, None, None], out.dims)
        np.testing.assert_allclose(out.as_numpy(), expected, rtol=1e-6)
        assert stats.multiply_accumulates == 0

    @pytest.mark.parametrize('permutation', ['tile_location', 'location_tile'])
    @pytest.mark.parametrize('unroll', [1, 2, 4])
    @pytest.mark.parametrize('reorder', [False, True])
    def test_matches_masked_oracle(self, permutation, unroll, reorder):
        mask = random_mask(self.weights, keep_prob=0.3, seed=2)
        schedule = Schedule(2, 3, 2, unroll, permutation)
        out, _ = conv3d_sparse(self.input, self.compile(mask, reorder), self.spec, schedule)
        np.testing.assert_allclose(out.as_numpy(), oracle(self.input, self.weights, mask, self.spec),
                                   rtol=1e-5, atol=1e-4)

    @pytest.mark.parametrize('permutation', ['tile_location', 'location_tile'])
    def test_float64_verification_build(self, permutation):
        mask = random_mask(self.weights, keep_prob=0.5, seed=3)
        schedule = Schedule(1, 2, 4, 2, permutation)
        out, _ = conv3d_sparse(self.input, self.compile(mask), self.spec, schedule, precision='float64')
        assert out.data.dtype == torch.float64
        np.testing.assert_allclose(out.as_numpy(), oracle(self.input, self.weights, mask, self.spec),
                                   rtol=1e-12, atol=1e-12)

    def test_ragged_groups(self):
        weights = random_weights((10, 7, 3, 2, 3), 4)
        spec = ConvSpec(padding=(0, 1, 1))
        input = random_input((1, 7, 4, 5, 6), 4)
        mask = random_mask(weights, g_M=4, g_N=4, keep_prob=0.5, seed=4)
        store = cws_encode(weights, mask, hwr_reorder(weights, mask)[0], spec)
        out, stats = conv3d_sparse(input, store, spec, Schedule(1, 2, 3, 2))
        np.testing.assert_allclose(out.as_numpy(), oracle(input, weights, mask, spec), rtol=1e-5, atol=1e-4)
        assert 2 * stats.multiply_accumulates == sparsity_stats(mask, spec, input.dims).flops_after

    def test_target_rate_mask_counter(self):
        norms = group_norm(self.weights, partition(self.weights.dims, 4, 4), 'kgs')
        loc_flops = per_location_flops(norms.partition, 'kgs', self.spec, self.input.dims)
        mask = mask_for_target_rate(norms, loc_flops, 4.0)
        out, stats = conv3d_sparse(self.input, self.compile(mask), self.spec, default_schedule(mask.partition,
                                                                                               self.out_dims))
        np.testing.assert_allclose(out.as_numpy(), oracle(self.input, self.weights, mask, self.spec),
                                   rtol=1e-5, atol=1e-4)
        expected = sparsity_stats(mask, self.spec, self.input.dims)
        assert 2 * stats.multiply_accumulates == expected.flops_after
        assert stats.multiply_accumulates == mask.n_kept * 16 * 2 * int(np.prod(self.out_dims))

    def test_schedule_and_thread_invariance(self):
        mask = random_mask(self.weights, keep_prob=0.4, seed=5)
        store = self.compile(mask)
        reference, _ = conv3d_sparse(self.input, store, self.spec, Schedule.untiled(self.out_dims))
        for schedule in [default_schedule(store, self.out_dims), Schedule(5, 1, 1, 4, 'location_tile'),
                         Schedule(3, 4, 3, 1, 'tile_location', threads=2)]:
            out, _ = conv3d_sparse(self.input, store, self.spec, schedule)
            np.testing.assert_allclose(out.as_numpy(), reference.as_numpy(), rtol=1e-5, atol=1e-5)
        single, _ = conv3d_sparse(self.input, store, self.spec, Schedule(2, 2, 2, 2, threads=1))
        multi, _ = conv3d_sparse(self.input, store, self.spec, Schedule(2, 2, 2, 2, threads=2))
        np.testing.assert_array_equal(single.as_numpy(), multi.as_numpy())

    def test_counters(self):
        mask = random_mask(self.weights, keep_prob=0.4, seed=6)
        store = self.compile(mask)
        schedules = [Schedule.untiled(self.out_dims), Schedule(1, 1, 1, 1), Schedule(2, 2, 2, 4, 'location_tile')]
        stats = [conv3d_sparse(self.input, store, self.spec, s)[1] for s in schedules]
        assert len({s.multiply_accumulates for s in stats}) == 1
        assert all(s.output_elements_written == 2 * 16 * int(np.prod(self.out_dims)) for s in stats)
        assert stats[0].input_elements_read <= stats[1].input_elements_read
        assert stats[2].weight_bytes_read <= stats[1].weight_bytes_read
        assert stats[0].to_dict()['multiply_accumulates'] == count_ops(store, self.input.dims,
                                                                        schedules[0]).multiply_accumulates

    def test_fast_mode_has_no_counters(self):
        store = self.compile(random_mask(self.weights, seed=7))
        _, stats = conv3d_sparse(self.input, store, self.spec, Schedule.untiled(self.out_dims), count=False)
        assert stats.multiply_accumulates is None
        assert stats.wall_time >= 0.

    def test_illegal_schedule(self):
        store = self.compile(random_mask(self.weights, seed=8))
        with pytest.raises(ValueError):
            conv3d_sparse(self.input, store, self.spec, Schedule(6, 1, 1))
        with pytest.raises(ValueError):
            conv3d_sparse(self.input, store, self.spec, Schedule(1, 1, 1, unroll=8))

    def test_spec_mismatch(self):
        store = self.compile(random_mask(self.weights, seed=9))
        with pytest.raises(ValueError, match='ConvSpec'):
            conv3d_sparse(self.input, store, ConvSpec(padding=(1, 1, 1)), Schedule())

    def test_channel_mismatch(self):
        store = self.compile(random_mask(self.weights, seed=10))
        with pytest.raises(ValueError, match='channels'):
            conv3d_sparse(random_input((1, 4, 5, 7, 7)), store, self.spec, Schedule())

    def test_unknown_precision(self):
        store = self.compile(random_mask(self.weights, seed=11))
        with pytest.raises(ValueError):
            conv3d_sparse(self.input, store, self.spec, Schedule(), precision='float16')

    def test_wrong_scheme(self):
        store = self.compile(random_mask(self.weights, 'vanilla', seed=12))
        with pytest.raises(ValueError):
            conv3d_sparse(self.input, store, self.spec, Schedule())


def random_case(seed, k_d=None):
    """A random (shape, mask, schedule, threads) draw; `k_d` pins the kernel depth."""
    rng = np.random.RandomState(seed)
    M, N = int(rng.randint(1, 13)), int(rng.randint(1, 10))
    g_M, g_N = int(rng.randint(1, min(M, 8) + 1)), int(rng.randint(1, N + 1))
    kernel = (int(rng.choice([1, 2, 3])) if k_d is None else k_d, int(rng.randint(1, 4)), int(rng.randint(1, 4)))
    stride = tuple(int(s) for s in rng.randint(1, 3, size=3))
    padding = tuple(int(rng.randint(0, k)) for k in kernel)
    spatial = tuple(int(k + rng.randint(0, 4)) for k in kernel)
    bias = torch.from_numpy(rng.standard_normal(M)) if rng.rand() < 0.5 else None
    spec = ConvSpec(stride, padding, bias)

    weights = random_weights((M, N) + kernel, seed)
    scheme = 'vanilla' if rng.rand() < 0.25 else 'kgs'
    mask = random_mask(weights, scheme, g_M, g_N, keep_prob=rng.uniform(0, 1), seed=seed)
    input = random_input((int(rng.randint(1, 3)), N) + spatial, seed)

    out_dims = conv_output_dims(spatial, kernel, stride, padding)
    unroll = int(rng.choice([u for u in (1, 2, 4, 8) if u <= g_M]))
    tiles = [int(rng.randint(1, extent + 1)) for extent in out_dims]
    schedule = Schedule(*tiles, unroll, str(rng.choice(['tile_location', 'location_tile'])),
                        threads=int(rng.choice([1, 2])))
    plan = hwr_reorder(weights, mask)[0] if rng.rand() < 0.5 else None
    return input, weights, mask, spec, cws_encode(weights, mask, plan, spec), schedule


def check_random_cases(seeds, k_d=None):
    for seed in seeds:
        input, weights, mask, spec, store, schedule = random_case(seed, k_d)
        expected = oracle(input, weights, mask, spec)
        out, _ = execute(input, store, spec, schedule, precision='float32')
        np.testing.assert_allclose(out.as_numpy(), expected, rtol=1e-5, atol=1e-4, err_msg=f'float32 case {seed}')
        out, _ = execute(input, store, spec, schedule, precision='float64')
        np.testing.assert_allclose(out.as_numpy(), expected, rtol=1e-12, atol=1e-12, err_msg=f'float64 case {seed}')


class TestRandomizedOracle():

    def test_random_cases(self):
        check_random_cases(range(40))

    @pytest.mark.parametrize('seed', [0, 1, 2, 3])
    def test_depth_one_kernels(self, seed):
        check_random_cases(range(10 * seed, 10 * seed + 10), k_d=1)

    @pytest.mark.slow
    def test_thousand_random_cases(self):
        check_random_cases(range(40, 1040))
        check_random_cases(range(1040, 1140), k_d=1)


class TestConv3dSparseVanilla():

    def setup_method(self):
        self.input = random_input((1, 8, 4, 6, 6), 3)
        self.weights = random_weights((8, 8, 3, 3, 3), 3)
        self.spec = ConvSpec(padding=(1, 1, 1))
        self.out_dims = (4, 6, 6)

    def test_equals_kgs_expansion(self):
        mask = random_mask(self.weights, 'vanilla', g_M=4, g_N=4, keep_prob=0.6, seed=1)
        schedule = Schedule(2, 3, 3, 2)
        vanilla, _ = conv3d_sparse_vanilla(self.input, cws_encode(self.weights, mask, spec=self.spec), self.spec,
                                           schedule)
        kgs, _ = conv3d_sparse(self.input, cws_encode(self.weights, mask.to_kgs(), spec=self.spec), self.spec,
                               schedule)
        np.testing.assert_allclose(vanilla.as_numpy(), kgs.as_numpy(), rtol=1e-6, atol=1e-6)

    def test_half_groups_half_macs(self):
        part = partition(self.weights.dims, 4, 4)
        bits = torch.tensor([[True, False], [False, True]])
        store = cws_encode(self.weights, GroupMask('vanilla', part, bits), spec=self.spec)
        _, stats = conv3d_sparse_vanilla(self.input, store, self.spec, Schedule.untiled(self.out_dims))
        _, dense_macs = conv3d_dense(self.input, self.weights, self.spec, return_macs=True)
        assert 2 * stats.multiply_accumulates == dense_macs

    @pytest.mark.parametrize('permutation', ['tile_location', 'location_tile'])
    def test_matches_masked_oracle(self, permutation):
        mask = random_mask(self.weights, 'vanilla', g_M=2, g_N=4, keep_prob=0.5, seed=2)
        store = cws_encode(self.weights, mask, hwr_reorder(self.weights, mask)[0], self.spec)
        out, _ = conv3d_sparse_vanilla(self.input, store, self.spec, Schedule(4, 2, 3, 2, permutation),
                                       precision='float64')
        np.testing.assert_allclose(out.as_numpy(), oracle(self.input, self.weights, mask, self.spec),
                                   rtol=1e-12, atol=1e-12)

    def test_wrong_scheme(self):
        store = cws_encode(self.weights, random_mask(self.weights), spec=self.spec)
        with pytest.raises(ValueError):
            conv3d_sparse_vanilla(self.input, store, self.spec, Schedule())


class TestCsrBaseline():

    def test_matches_oracle(self):
        input = random_input((1, 4, 4, 5, 5), 5)
        weights = random_weights((6, 4, 3, 3, 3), 5)
        spec = ConvSpec((1, 1, 2), (1, 1, 1), torch.ones(6))
        mask = random_mask(weights, g_M=2, g_N=2, keep_prob=0.5, seed=5)
        layer = csr_encode(weights, mask, spec)
        out, stats = conv3d_csr(input, layer, spec, precision='float64')
        np.testing.assert_allclose(out.as_numpy(), oracle(input, weights, mask, spec), rtol=1e-12, atol=1e-12)
        assert stats.multiply_accumulates == layer.matrix.nnz * int(np.prod(out.dims[2:]))
        assert 2 * stats.multiply_accumulates == sparsity_stats(mask, spec, input.dims).flops_after

    def test_execute_dispatch(self):
        input = random_input((1, 4, 4, 5, 5), 6)
        weights = random_weights((4, 4, 3, 3, 3), 6)
        mask = random_mask(weights, g_M=2, g_N=2, keep_prob=0.5, seed=6)
        spec = ConvSpec(padding=(1, 1, 1))
        from_csr, _ = execute(input, csr_encode(weights, mask, spec))
        from_cws, _ = execute(input, cws_encode(weights, mask, spec=spec))
        np.testing.assert_allclose(from_csr.as_numpy(), from_cws.as_numpy(), rtol=1e-5, atol=1e-5)


class TestRunStack():

    def test_two_layers_with_relu(self):
        input = random_input((1, 3, 4, 6, 6), 7)
        first, second = random_weights((8, 3, 3, 3, 3), 7), random_weights((8, 8, 3, 3, 3), 8)
        specs = [ConvSpec(padding=(1, 1, 1)), ConvSpec((1, 2, 2), (1, 1, 1))]
        masks = [random_mask(first, g_M=4, g_N=1, keep_prob=0.6, seed=7), random_mask(second, seed=8)]
        stores = [cws_encode(w, m, hwr_reorder(w, m)[0], s) for w, m, s in zip([first, second], masks, specs)]
        out, stats = run_stack(input, stores, count=True, precision='float64')

        hidden = conv3d_dense(input, apply_mask(first, masks[0]), specs[0])
        hidden = FeatureMap(torch.relu(hidden.data))
        expected = oracle(hidden, second, masks[1], specs[1])
        np.testing.assert_allclose(out.as_numpy(), expected, rtol=1e-12, atol=1e-12)
        assert len(stats) == 2
        assert all(isinstance(s, ExecStats) and s.multiply_accumulates is not None for s in stats)

    def test_length_mismatch(self):
        weights = random_weights((4, 3, 3, 3, 3))
        store = cws_encode(weights, random_mask(weights, g_N=1))
        with pytest.raises(ValueError):
            run_stack(random_input((1, 3, 4, 4, 4)), [store], specs=[ConvSpec(), ConvSpec()])


class TestBench():

    def setup_method(self):
        self.weights = random_weights((8, 4, 3, 3, 3))
        self.store = cws_encode(self.weights, random_mask(self.weights, g_N=2, keep_prob=0.5), spec=ConvSpec())
        self.input_dims = (1, 4, 4, 5, 5)

    def test_single_repeat(self):
        result = bench(self.input_dims, self.store, repeats=1)
        assert result.repeats == 1
        assert result.mean == result.min == result.median
        assert result.warmup == 3
        assert result.to_dict()['repeats'] == 1

    def test_counters_are_deterministic(self):
        first = bench(self.input_dims, self.store, repeats=2, warmup=0)
        second = bench(self.input_dims, self.store, repeats=2, warmup=1)
        assert first.multiply_accumulates == second.multiply_accumulates > 0
        assert len(first.times) == 2

    def test_invalid_repeats(self):
        with pytest.raises(ValueError):
            bench(self.input_dims, self.store, repeats=0)

    @pytest.mark.slow
    def test_pruned_layer_is_faster(self):
        weights = random_weights((64, 64, 3, 3, 3), 1)
        spec = ConvSpec(padding=(1, 1, 1))
        norms = group_norm(weights, partition(weights.dims, 4, 4), 'kgs')
        input_dims = (1, 64, 8, 16, 16)
        mask = mask_for_target_rate(norms, per_location_flops(norms.partition, 'kgs', spec, input_dims), 4.0)
        out_dims = (8, 16, 16)
        dense = cws_encode(weights, GroupMask.all_true('kgs', norms.partition), spec=spec)
        sparse = cws_encode(weights, mask, hwr_reorder(weights, mask)[0], spec)
        dense_time = bench(input_dims, dense, spec, default_schedule(dense, out_dims), repeats=5).median
        sparse_time = bench(input_dims, sparse, spec, default_schedule(sparse, out_dims), repeats=5).median
        assert sparse_time < dense_time
