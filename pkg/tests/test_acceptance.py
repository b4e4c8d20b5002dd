"""
端到端验收测试（slow）

在模拟数据上检查去噪训练的收敛，以及 acceptance 配置下复原断层相对原始断层的
FSC、缺失楔形和下游检测表现。
"""
import numpy as np
import pytest

from grid_core import Rng, ScalarField
from main import main
from metrics import mse
from nn_engine import PairDataset, TrainConfig, UNetConfig, predict, train
from phantom_sim import PhantomSpec, make_phantom
from results_handler import ResultsHandler

pytestmark = pytest.mark.slow


def _phantom_slices(count, seed):
    slices = []
    spec_seed = seed
    while len(slices) < count:
        phantom = make_phantom(PhantomSpec(shape=(64, 64, 64), n_blobs=20, seed=spec_seed))
        data = phantom.density.data
        for z in range(8, 56, 2):
            slices.append(data[z])
        spec_seed += 1
    return slices[:count]


def test_noise2noise_converges_on_phantom_slices():
    noise = Rng(11).generator
    clean = _phantom_slices(220, seed=100)

    def corrupt(x):
        return ScalarField(x + noise.normal(0.0, 0.5, x.shape))

    pairs = PairDataset.from_pairs([(corrupt(c), corrupt(c)) for c in clean[:200]])
    params, history = train(pairs, UNetConfig(spatial_dims=2, depth=2, base_channels=8),
                            TrainConfig(epochs=30, batch_size=16, learning_rate=1e-3, seed=5))
    assert history.val_loss[-1] < history.initial_val_loss

    restored_error, noisy_error = [], []
    for c in clean[200:]:
        truth = ScalarField(c)
        noisy = corrupt(c)
        restored_error.append(mse(predict(noisy, params), truth))
        noisy_error.append(mse(noisy, truth))
    assert np.mean(restored_error) <= 0.5 * np.mean(noisy_error)


@pytest.fixture(scope="module")
def acceptance_runs(tmp_path_factory):
    runs = {}
    for scheme in ("t2t-df", "p2p-df"):
        out = tmp_path_factory.mktemp(scheme)
        assert main(["pipeline", "--config", "acceptance", "--scheme", scheme, "--out-dir", str(out)]) == 0
        handler = ResultsHandler(out)
        assert handler.load_data()
        runs[scheme] = handler
    return runs


def test_restored_half_maps_agree_better_in_mid_band(acceptance_runs):
    t2t = acceptance_runs["t2t-df"]
    assert t2t.get_metric("evaluate", "fsc_band_restored") >= t2t.get_metric("evaluate", "fsc_band_raw") + 0.05


def test_tomogram_restoration_fills_less_of_the_wedge(acceptance_runs):
    t2t = acceptance_runs["t2t-df"].get_metric("evaluate", "wedge_restored")
    p2p = acceptance_runs["p2p-df"].get_metric("evaluate", "wedge_restored")
    assert t2t < p2p


def test_restoration_improves_detection(acceptance_runs):
    t2t = acceptance_runs["t2t-df"]
    assert t2t.get_metric("simulate", "n_targets") >= 50
    assert t2t.get_metric("downstream", "best_f1_restored") >= t2t.get_metric("downstream", "best_f1_raw") + 0.05
