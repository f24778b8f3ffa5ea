import pytest
import torch

from sparse3d.data import prep_dataset
from sparse3d.models import create_model
from sparse3d.pipeline import bench_stack, compile_for_level, compiled_accuracy, dense_masks
from sparse3d.pruning import PruneConfig, apply_masks_to_model, model_stats, select_masks
from sparse3d.train import evaluate_accuracy


def pruned_model(arch='tiny3d', target_rate=2.0, g_M=2, g_N=2, seed=0, **kwargs):
    torch.manual_seed(seed)
    model = create_model(dict(dict(arch=arch), **kwargs))
    masks = select_masks(model, PruneConfig(scheme='kgs', target_rate=target_rate, g_M=g_M, g_N=g_N))
    apply_masks_to_model(model, masks)
    return model, masks


class TestCompiledAccuracy():

    @pytest.mark.parametrize('level', ['no_opt', 'reorder', 'schedule'])
    def test_matches_torch_model(self, level):
        model, masks = pruned_model()
        _, data_eval = prep_dataset(n_samples=64, seed=0)
        layers, schedules, _ = compile_for_level(model, masks, level)
        accuracy = compiled_accuracy(layers, schedules, model, data_eval, batch_size=10)
        assert 0 <= accuracy <= 1
        # float32 accumulation order may flip a near tie
        assert abs(accuracy - evaluate_accuracy(model, data_eval)) <= 1 / len(data_eval) + 1e-12

    def test_dense_masks(self):
        torch.manual_seed(1)
        model = create_model(dict(arch='tiny3d'))
        _, data_eval = prep_dataset(n_samples=32, seed=1)
        layers, schedules, _ = compile_for_level(model, dense_masks(model, 4, 4), 'reorder')
        accuracy = compiled_accuracy(layers, schedules, model, data_eval)
        assert abs(accuracy - evaluate_accuracy(model, data_eval)) <= 1 / len(data_eval) + 1e-12


class TestCompileForLevel():

    def test_unknown_level(self):
        model, masks = pruned_model()
        with pytest.raises(ValueError, match='optimisation level'):
            compile_for_level(model, masks, 'fastest')

    def test_mac_reduction_equals_flops_rate(self):
        model, masks = pruned_model(target_rate=3.0)
        stats = model_stats(model, masks)
        input_dims = model.layer_input_dims(1)[0]

        layers, schedules, _ = compile_for_level(model, masks, 'schedule')
        sparse = bench_stack(layers, schedules, input_dims, repeats=1, warmup=0)
        dense_layers, dense_schedules, _ = compile_for_level(model, dense_masks(model, 2, 2), 'schedule')
        dense = bench_stack(dense_layers, dense_schedules, input_dims, repeats=1, warmup=0)

        assert 2 * sparse.multiply_accumulates == stats.flops_after
        assert 2 * dense.multiply_accumulates == stats.flops_dense
        assert dense.multiply_accumulates / sparse.multiply_accumulates == pytest.approx(stats.flops_rate, rel=1e-12)


@pytest.mark.slow
class TestSpeedup():

    def test_c3d_like_tuned_at_four_times(self):
        model, masks = pruned_model(arch='c3d_like', target_rate=4.0, g_M=4, g_N=4, input_dims=[3, 16, 32, 32])
        assert model.n_layers >= 4
        stats = model_stats(model, masks)
        assert stats.flops_rate >= 4.0
        input_dims = model.layer_input_dims(1)[0]

        kwargs = dict(tune_budget=24, tune_repeats=3)
        layers, schedules, _ = compile_for_level(model, masks, 'tuned', **kwargs)
        dense_layers, dense_schedules, _ = compile_for_level(model, dense_masks(model, 4, 4), 'tuned', **kwargs)
        sparse = bench_stack(layers, schedules, input_dims, repeats=10)
        dense = bench_stack(dense_layers, dense_schedules, input_dims, repeats=10)

        assert sparse.median <= 0.5 * dense.median
        assert 2 * sparse.multiply_accumulates == stats.flops_after
        assert 2 * dense.multiply_accumulates == stats.flops_dense
        assert dense.multiply_accumulates / sparse.multiply_accumulates == pytest.approx(stats.flops_rate, rel=1e-12)
