import os
from shutil import rmtree

import pytest

from sparse3d.helper.local import build_configs_and_run

config_dir = os.path.join(os.path.dirname(__file__), 'experiment_configs')


@pytest.fixture
def clean_cache():
    for path in ('cache_test', 'output_test'):
        if os.path.isdir(path):
            rmtree(path)
    yield
    for path in ('cache_test', 'output_test'):
        if os.path.isdir(path):
            rmtree(path)


def run_config_test(config_files):
    configs, run = build_configs_and_run(config_files)
    results = []
    for config in configs:
        result = run(config_updates=config)
        assert result.status == 'COMPLETED'
        results.append(result)
    return results


@pytest.mark.slow
@pytest.mark.usefixtures('clean_cache')
class TestExperiments():

    def test_train(self):
        results = run_config_test([os.path.join(config_dir, 'train', 'tiny3d.yaml')])
        assert sorted(r.config['seed'] for r in results) == [0, 1, 5]
        assert all(0. <= r.result['accuracy'] <= 1. for r in results)
        assert not any(r.result['from_cache'] for r in results)
        assert all(len(r.result['layer_flops']) == 2 for r in results)

        # The second run of the same configs only reads the storage
        cached = run_config_test([os.path.join(config_dir, 'train', 'tiny3d.yaml')])
        assert all(r.result['from_cache'] for r in cached)
        assert [r.result['accuracy'] for r in cached] == [r.result['accuracy'] for r in results]

    def test_prune(self):
        results = run_config_test([os.path.join(config_dir, 'prune', 'tiny3d.yaml')])
        cells = sorted((r.config['scheme'], r.config['algo']) for r in results)
        assert cells == [('filter', 'reg'), ('kgs', 'heuristic'), ('kgs', 'reweighted')]
        for r in results:
            assert r.result['status'] == 'ok'
            assert r.result['flops_rate'] >= 2.0
            assert r.result['speedup'] > 0
            assert r.result['mac_reduction'] >= 1.0
            assert 0 <= r.result['compiled_accuracy'] <= 1
