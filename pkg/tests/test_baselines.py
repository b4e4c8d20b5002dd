import itertools

import numpy as np
import pytest

from baselines import LAMBDA_FLOOR, default_lambda, diffusivity, median_filter, nad_filter, stability_bound
from errors import PreconditionError, StabilityError
from grid_core import ScalarField


def _brute_median(data, radius):
    padded = np.pad(data, radius, mode='edge')
    out = np.empty_like(data)
    for idx in itertools.product(*[range(n) for n in data.shape]):
        window = padded[tuple(slice(i, i + 2 * radius + 1) for i in idx)]
        out[idx] = np.median(window)
    return out


@pytest.mark.parametrize("shape,radius", [((9, 11), 1), ((7, 6), 2), ((5, 6, 4), 1)])
def test_median_matches_brute_force(gen, shape, radius):
    data = gen.normal(size=shape).astype(np.float32)
    result = median_filter(ScalarField(data), radius)
    np.testing.assert_array_equal(result.data, _brute_median(data, radius))


def test_median_radius_zero_is_identity(gen):
    f = ScalarField(gen.normal(size=(6, 6)))
    np.testing.assert_array_equal(median_filter(f, 0).data, f.data)
    with pytest.raises(PreconditionError):
        median_filter(f, -1)
    with pytest.raises(PreconditionError):
        median_filter(f, (1, 1, 1))


def test_median_removes_impulse():
    data = np.zeros((9, 9), dtype=np.float32)
    data[4, 4] = 100.0
    assert median_filter(ScalarField(data), 1).data.max() == 0.0


def test_diffusivity_and_bound():
    np.testing.assert_allclose(diffusivity(np.array([0.0, 1.0, 2.0]), 1.0), [1.0, 0.5, 0.2])
    assert stability_bound(2) == 0.25
    assert stability_bound(3) == pytest.approx(1.0 / 6.0)


def test_nad_conserves_mean_and_range(gen):
    for shape, dt in (((24, 20), 0.25), ((10, 12, 8), 1.0 / 6.0)):
        f = ScalarField(gen.normal(size=shape))
        out = nad_filter(f, steps=15, dt=dt, lam=0.5)
        assert out.shape == f.shape
        assert float(out.data.astype(np.float64).mean()) == pytest.approx(
            float(f.data.astype(np.float64).mean()), abs=1e-5)
        assert out.data.min() >= f.data.min() - 1e-5
        assert out.data.max() <= f.data.max() + 1e-5


def test_nad_rejects_unstable_steps(gen):
    f = ScalarField(gen.normal(size=(8, 8)))
    with pytest.raises(StabilityError):
        nad_filter(f, steps=3, dt=0.26)
    with pytest.raises(StabilityError):
        nad_filter(ScalarField(gen.normal(size=(4, 4, 4))), steps=3, dt=0.2)
    with pytest.raises(StabilityError):
        nad_filter(f, steps=3, dt=0.0)
    with pytest.raises(PreconditionError):
        nad_filter(f, steps=-1)


def test_nad_requires_positive_lambda(gen):
    f = ScalarField(gen.normal(size=(8, 8)))
    for lam in (0.0, -0.5):
        with pytest.raises(PreconditionError):
            nad_filter(f, steps=5, dt=0.2, lam=lam)
    np.testing.assert_array_equal(nad_filter(f, steps=0, dt=0.2, lam=1.0).data, f.data)


def test_nad_default_lambda_floor_on_flat_gradients():
    constant = ScalarField(np.full((8, 8), 3.0))
    assert default_lambda(constant) == 0.0
    np.testing.assert_array_equal(nad_filter(constant, steps=5, dt=0.2).data, constant.data)

    step = np.zeros((8, 8))
    step[:, 4:] = 1.0
    assert default_lambda(ScalarField(step)) == 0.0
    out = nad_filter(ScalarField(step), steps=5, dt=0.2)
    np.testing.assert_allclose(out.data, step, atol=1e-6)
    assert LAMBDA_FLOOR > 0


def test_nad_preserves_edges_better_than_linear_diffusion(gen):
    """小 λ 保留台阶边缘，λ 很大时退化为线性扩散把边缘抹平"""
    clean = np.zeros((32, 32))
    clean[:, 16:] = 2.0
    noisy = ScalarField(clean + gen.normal(0.0, 0.3, clean.shape))

    def jump(f):
        return float(np.mean(f.data[:, 16].astype(np.float64) - f.data[:, 15]))

    edge_aware = nad_filter(noisy, steps=20, dt=0.25, lam=0.3)
    linear = nad_filter(noisy, steps=20, dt=0.25, lam=1e6)
    assert jump(edge_aware) > 1.5
    assert jump(linear) < 1.0
    flat = edge_aware.data[:, 2:12].astype(np.float64)
    assert flat.std() < 0.5 * noisy.data[:, 2:12].std()
