import numpy as np
import pytest
import torch

from sparse3d.compiler import Schedule, cws_encode, default_schedule, hwr_reorder
from sparse3d.sparsity import GroupMask
from sparse3d.tensor_core import ConvSpec, WeightTensor5D, partition
from sparse3d.tuner import TuneSpace, enumerate_space, load_schedules, save_schedules, tile_options, tune


def compiled_layer(seed=0):
    weights = WeightTensor5D.from_numpy(np.random.RandomState(seed).standard_normal((8, 4, 3, 3, 3)).astype(np.float32))
    mask = GroupMask.random('kgs', partition(weights.dims, 4, 2), 0.5, torch.Generator().manual_seed(seed))
    spec = ConvSpec(padding=(1, 1, 1))
    return cws_encode(weights, mask, hwr_reorder(weights, mask)[0], spec), spec


class TestTileOptions():

    @pytest.mark.parametrize('extent, expected', [(1, [1]), (4, [1, 2, 4]), (5, [1, 2, 4, 5]), (16, [1, 2, 4, 8, 16])])
    def test_values(self, extent, expected):
        assert tile_options(extent) == expected


class TestEnumerateSpace():

    def test_small_space(self):
        space = TuneSpace((4, 4, 4), 4, tile_d=(1, 2), tile_h=(4,), tile_w=(4,), unrolls=(1, 2),
                          permutations=('tile_location',))
        candidates = enumerate_space(space)
        assert len(candidates) == 4
        assert {(c.tile_d, c.unroll) for c in candidates} == {(1, 1), (1, 2), (2, 1), (2, 2)}

    def test_only_legal_candidates(self):
        space = TuneSpace((3, 5, 6), 2, tile_d=(1, 2, 4), threads=(1, 2))
        candidates = enumerate_space(space)
        assert candidates
        assert all(c.is_legal((3, 5, 6), 2) for c in candidates)
        assert all(c.unroll <= 2 and c.tile_d <= 3 for c in candidates)

    def test_budget_is_seeded(self):
        full = enumerate_space(TuneSpace((4, 8, 8), 4, budget=10_000))
        first = enumerate_space(TuneSpace((4, 8, 8), 4, budget=3, seed=0))
        second = enumerate_space(TuneSpace((4, 8, 8), 4, budget=3, seed=0))
        assert len(first) == 3
        assert first == second
        assert all(c in full for c in first)

    def test_no_legal_candidate(self):
        with pytest.raises(ValueError, match='No legal'):
            enumerate_space(TuneSpace((2, 2, 2), 1, tile_d=(4,)))

    def test_invalid_budget(self):
        with pytest.raises(ValueError):
            TuneSpace((2, 2, 2), 1, budget=0)

    def test_for_layer(self):
        store, _ = compiled_layer()
        space = TuneSpace.for_layer(store, (1, 4, 4, 6, 6), threads=(1, 2))
        assert space.output_dims == (4, 6, 6)
        assert space.g_M == 4
        assert space.tile_h == (1, 2, 4, 6)
        assert space.threads == (1, 2)


class TestTune():

    def setup_method(self):
        self.store, self.spec = compiled_layer(1)
        self.input_dims = (1, 4, 4, 6, 6)

    def test_single_candidate(self):
        space = TuneSpace((4, 6, 6), 4, tile_d=(1,), tile_h=(1,), tile_w=(1,), unrolls=(1,),
                          permutations=('tile_location',))
        best, report = tune(self.store, self.spec, self.input_dims, space, repeats=1, warmup=0, include_default=False)
        assert best == Schedule(1, 1, 1)
        assert len(report) == 1
        assert report.passed.all() and report.winner.all()
        assert report.multiply_accumulates.iloc[0] > 0

    def test_default_joins_the_candidates(self):
        space = TuneSpace((4, 6, 6), 4, tile_d=(4,), tile_h=(6,), tile_w=(6,), unrolls=(1, 4),
                          permutations=('tile_location',))
        best, report = tune(self.store, self.spec, self.input_dims, space, repeats=1, warmup=0)
        assert len(report) == 3
        assert report.is_default.sum() == 1
        assert report.winner.sum() == 1
        assert report.tie[report.winner].all()
        assert best in enumerate_space(space) + [default_schedule(self.store, (4, 6, 6))]
        assert report.multiply_accumulates.nunique() == 1

    @pytest.mark.slow
    def test_full_space(self):
        best, report = tune(self.store, self.spec, self.input_dims, TuneSpace.for_layer(self.store, self.input_dims,
                                                                                         budget=20), repeats=2)
        assert best.is_legal((4, 6, 6), 4)
        assert report.passed.all()
        assert report.loc[report.winner, 'median'].iloc[0] == report['median'].min()


class TestScheduleFiles():

    def test_save_load(self, tmp_path):
        path = str(tmp_path / 'schedules.json')
        schedules = [Schedule(1, 2, 4, 2, 'location_tile', 2), None]
        save_schedules(path, schedules, meta=dict(model='tiny'))
        assert load_schedules(path) == schedules
