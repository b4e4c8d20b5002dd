import numpy as np
import pytest
from scipy import ndimage

from errors import InvalidFieldError, PreconditionError, ShapeMismatchError
from grid_core import ScalarField
from metrics import correlation
from pairing import HalfSeries, split_series_frames
from phantom_sim import (AcquisitionSpec, PhantomSpec, make_phantom, project, sequential_angles,
                         simulate_acquisition)
from tomo_recon import (TiltSeries, WedgeMask, backproject, default_out_shape, ramp_filter,
                        reconstruct, reconstruct_pair)


def _series(volume: ScalarField, angles):
    return TiltSeries.from_projections(angles, [project(volume, a) for a in angles])


def _smooth_sphere(n=32, radius=8.0, sigma=1.5):
    z, y, x = np.meshgrid(*[np.arange(n) - (n - 1) / 2.0] * 3, indexing='ij')
    sphere = (np.sqrt(z ** 2 + y ** 2 + x ** 2) <= radius).astype(np.float64)
    return ScalarField(ndimage.gaussian_filter(sphere, sigma))


def test_ramp_filter_removes_constant_rows():
    filtered = ramp_filter(ScalarField(np.full((3, 16), 5.0)), window="none")
    np.testing.assert_allclose(filtered.data, 0.0, atol=1e-5)


def test_ramp_filter_scales_pure_frequency():
    n, k = 32, 4
    row = np.cos(2.0 * np.pi * k * np.arange(n) / n)
    filtered = ramp_filter(ScalarField(np.tile(row, (2, 1))), window="none", padding="none")
    np.testing.assert_allclose(filtered.data[0], row * k / n, atol=1e-6)

    hann = ramp_filter(ScalarField(np.tile(row, (2, 1))), window="hann", padding="none")
    f = k / n
    np.testing.assert_allclose(hann.data[0], row * f * 0.5 * (1.0 + np.cos(2.0 * np.pi * f)), atol=1e-6)


def test_ramp_filter_rejects_bad_arguments():
    p = ScalarField(np.zeros((4, 8)))
    with pytest.raises(PreconditionError):
        ramp_filter(p, window="cosine")
    with pytest.raises(PreconditionError):
        ramp_filter(p, padding="mirror")
    with pytest.raises(PreconditionError):
        ramp_filter(ScalarField(np.zeros((4, 1))))


def test_backprojection_is_adjoint_of_projection(gen):
    volume = ScalarField(gen.random((9, 5, 11)))
    angle = 23.0
    detector = ScalarField(gen.random((5, 11)))
    series = TiltSeries.from_projections([angle], [detector])
    smeared = backproject(series, volume.shape, filtered=False)
    lhs = float(np.sum(project(volume, angle).data.astype(np.float64) * detector.data))
    rhs = float(np.sum(volume.data.astype(np.float64) * smeared.data)) / np.pi
    assert lhs == pytest.approx(rhs, rel=1e-5)


def test_single_angle_backprojection_smears_along_beam(gen):
    detector = gen.random((6, 10))
    series = TiltSeries.from_projections([0.0], [ScalarField(detector)])
    smeared = backproject(series, (7, 6, 10), filtered=False)
    for z in range(7):
        np.testing.assert_allclose(smeared.data[z], np.pi * detector, rtol=1e-5)


def test_full_range_reconstruction_matches_sphere():
    truth = _smooth_sphere()
    series = _series(truth, sequential_angles(-88.0, 88.0, 2.0))
    volume = reconstruct(series, truth.shape, window="hann")
    assert volume.shape == truth.shape
    assert correlation(volume, truth) >= 0.95


def test_reconstruction_is_thread_independent(gen):
    truth = ScalarField(gen.random((12, 20, 12)))
    series = _series(truth, sequential_angles(-60.0, 60.0, 15.0))
    one = reconstruct(series, threads=1)
    many = reconstruct(series, threads=3)
    np.testing.assert_array_equal(one.data, many.data)
    assert one.shape == default_out_shape(series) == (12, 20, 12)


def test_backproject_checks_shapes(gen):
    series = TiltSeries.from_projections([0.0], [ScalarField(gen.random((6, 10)))])
    with pytest.raises(ShapeMismatchError):
        backproject(series, (10, 7, 10))
    with pytest.raises(PreconditionError):
        backproject(TiltSeries(()), (4, 4, 4))


def test_tilt_series_rejects_duplicate_angles_and_mixed_shapes():
    with pytest.raises(InvalidFieldError):
        TiltSeries.from_projections([0.0, 0.0], [ScalarField(np.zeros((4, 4)))] * 2)
    with pytest.raises(InvalidFieldError):
        TiltSeries.from_projections([0.0, 1.0], [ScalarField(np.zeros((4, 4))), ScalarField(np.zeros((4, 5)))])
    with pytest.raises(ShapeMismatchError):
        TiltSeries.from_projections([0.0, 1.0], [ScalarField(np.zeros((4, 4)))])


def test_wedge_mask_geometry():
    wedge = WedgeMask(60.0)
    mask = wedge.sampled((16, 4, 16))
    kz = np.fft.fftfreq(16)
    kx = np.fft.fftfreq(16)
    assert mask.shape == (16, 4, 16)
    assert mask[0, 0, 0]
    assert mask[0, 2, 3]
    # kz 轴上（kx = 0）全部缺失
    assert not mask[4, 0, 0]
    assert mask[1, 1, 4] == (abs(kz[1]) <= np.tan(np.deg2rad(60.0)) * abs(kx[4]))
    assert WedgeMask.from_angles([-50.0, 10.0, 45.0]).half_angle == 50.0
    with pytest.raises(PreconditionError):
        WedgeMask(90.0)


def test_reconstruct_pair_uses_same_geometry(gen):
    truth = ScalarField(gen.random((8, 8, 8)))
    a = _series(truth, [-30.0, 0.0, 30.0])
    b = TiltSeries.from_projections(a.angles, [ScalarField(t.projection.data * 2.0) for t in a.tilts])
    first, second = reconstruct_pair(HalfSeries(a, b, kind="df"))
    assert first.shape == second.shape == (8, 8, 8)
    np.testing.assert_allclose(second.data, 2.0 * first.data, rtol=1e-4, atol=1e-5)


def _fwhm(profile: np.ndarray) -> float:
    """峰两侧线性插值到半高处的宽度"""
    c = int(np.argmax(profile))
    half = profile[c] / 2.0
    left = c
    while profile[left - 1] >= half:
        left -= 1
    right = c
    while profile[right + 1] >= half:
        right += 1
    lo = left - (profile[left] - half) / (profile[left] - profile[left - 1])
    hi = right + (profile[right] - half) / (profile[right] - profile[right + 1])
    return hi - lo


def test_limited_angle_reconstruction_leaves_wedge_empty():
    truth = _smooth_sphere()
    volume = reconstruct(_series(truth, sequential_angles(-60.0, 60.0, 2.0)), truth.shape)
    sampled = WedgeMask(60.0).sampled(truth.shape)
    sampled[0, 0, 0] = False
    missing = ~WedgeMask(60.0).sampled(truth.shape)

    def ratio(v):
        amplitude = np.abs(np.fft.fftn(v.data.astype(np.float64)))
        return float(amplitude[missing].mean() / amplitude[sampled].mean())

    assert ratio(truth) > 0.5
    assert ratio(volume) < 0.1


def test_limited_angle_point_spread_is_elongated_along_beam():
    n = 33
    point = np.zeros((n, n, n))
    point[n // 2, n // 2, n // 2] = 1.0
    truth = ScalarField(ndimage.gaussian_filter(point, 1.0))
    volume = reconstruct(_series(truth, sequential_angles(-60.0, 60.0, 2.0)), truth.shape).data.astype(np.float64)
    c = n // 2
    assert np.unravel_index(np.argmax(volume), volume.shape) == (c, c, c)
    axial = _fwhm(volume[:, c, c])
    lateral = _fwhm(volume[c, c, :])
    assert axial > lateral


def test_noise_free_frame_halves_reconstruct_identically():
    phantom = make_phantom(PhantomSpec(shape=(24, 24, 24), n_blobs=6, seed=3))
    acq = AcquisitionSpec(angles=sequential_angles(-60.0, 60.0, 6.0), frames_per_tilt=4, noise_free=True)
    halves = split_series_frames(simulate_acquisition(phantom, acq))
    assert halves.a.angles == halves.b.angles
    first, second = reconstruct_pair(halves)

    def normalized(v):
        data = v.data.astype(np.float64)
        return (data - data.mean()) / data.std()

    assert np.max(np.abs(normalized(first) - normalized(second))) < 1e-4
