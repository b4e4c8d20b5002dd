import numpy as np
import pytest
from scipy import ndimage

from errors import InvalidFieldError, PreconditionError, ShapeMismatchError
from grid_core import ScalarField
from pairing import (HalfSeries, align_frames, estimate_shift, half_series, pair_adjacent_tilts,
                     projection_pairs, split_even_odd, split_halves, split_series_even_odd_acquisition,
                     split_series_frames, sum_aligned_frames)
from phantom_sim import MovieTilt, MovieTiltSeries
from tomo_recon import TiltSeries


def _smooth_image(gen, shape=(64, 64)):
    return ndimage.gaussian_filter(gen.normal(size=shape), 3.0, mode='wrap') * 10.0 + 5.0


def _movie_series(gen, angles=(-20.0, -10.0, 0.0, 10.0, 20.0), n_frames=4, shape=(16, 16)):
    tilts = []
    for index, angle in enumerate(angles):
        frames = tuple(ScalarField(gen.poisson(3.0, size=shape).astype(np.float64)) for _ in range(n_frames))
        tilts.append(MovieTilt(angle=angle, acquisition_index=index, frames=frames))
    return MovieTiltSeries(tuple(tilts))


def test_estimate_shift_recovers_integer_roll(gen):
    reference = gen.normal(size=(32, 40))
    moving = np.roll(reference, (3, -2), axis=(0, 1))
    np.testing.assert_allclose(estimate_shift(reference, moving), [3.0, -2.0], atol=1e-6)
    np.testing.assert_allclose(estimate_shift(reference, reference), [0.0, 0.0], atol=1e-6)


def test_align_frames_recovers_linear_drift(gen):
    image = _smooth_image(gen)
    drift = np.array([0.5, -0.25])
    frames = [ScalarField(ndimage.shift(image, k * drift, order=1, mode='nearest')) for k in range(5)]
    aligned, shifts = align_frames(frames)
    assert shifts.shape == (5, 2)
    np.testing.assert_array_equal(shifts[0], [0.0, 0.0])
    expected = np.outer(np.arange(5), drift)
    np.testing.assert_allclose(shifts, expected, atol=0.15)

    center = (slice(8, -8), slice(8, -8))
    before = np.abs(frames[4].data - frames[0].data)[center].mean()
    after = np.abs(aligned[4].data - aligned[0].data)[center].mean()
    assert after < 0.5 * before


def test_align_frames_requires_two_frames():
    with pytest.raises(PreconditionError):
        align_frames([ScalarField(np.zeros((4, 4)))])
    with pytest.raises(ShapeMismatchError):
        align_frames([ScalarField(np.zeros((4, 4))), ScalarField(np.zeros((4, 5)))])


def test_split_halves_uses_means():
    frames = [ScalarField(np.full((2, 2), float(k))) for k in range(5)]
    pair = split_halves(frames)
    np.testing.assert_allclose(pair.a.data, 0.5)
    np.testing.assert_allclose(pair.b.data, 3.0)


def test_split_even_odd_uses_sums():
    frames = [ScalarField(np.full((2, 2), float(k))) for k in range(4)]
    pair = split_even_odd(frames)
    np.testing.assert_allclose(pair.a.data, 0.0 + 2.0)
    np.testing.assert_allclose(pair.b.data, 1.0 + 3.0)


def test_pair_adjacent_tilts(gen):
    series = TiltSeries.from_projections([-4.0, 0.0, 4.0], [ScalarField(gen.random((4, 4))) for _ in range(3)])
    pairs = pair_adjacent_tilts(series)
    assert len(pairs) == 2
    assert pairs[0].angles == (-4.0, 0.0) and pairs[1].tilt_indices == (1, 2)
    swapped = pairs[0].swapped()
    assert swapped.angles == (0.0, -4.0)
    np.testing.assert_array_equal(swapped.a.data, pairs[0].b.data)
    with pytest.raises(PreconditionError):
        pair_adjacent_tilts(TiltSeries.from_projections([0.0], [ScalarField(np.zeros((4, 4)))]))


def test_even_odd_acquisition_split_is_disjoint_partition(gen):
    angles = [0.0, 3.0, -3.0, 6.0, -6.0]
    series = TiltSeries.from_projections(angles, [ScalarField(gen.random((4, 4))) for _ in angles])
    halves = split_series_even_odd_acquisition(series)
    assert halves.kind == "eoa"
    assert halves.a.angles == [-6.0, -3.0, 0.0]
    assert halves.b.angles == [3.0, 6.0]
    assert set(halves.a.angles) | set(halves.b.angles) == set(angles)


def test_half_series_kinds_are_checked(gen):
    a = TiltSeries.from_projections([0.0, 2.0], [ScalarField(gen.random((4, 4))) for _ in range(2)])
    b = TiltSeries.from_projections([2.0, 4.0], [ScalarField(gen.random((4, 4))) for _ in range(2)])
    with pytest.raises(InvalidFieldError):
        HalfSeries(a, b, kind="eoa")
    with pytest.raises(InvalidFieldError):
        HalfSeries(a, b, kind="df")
    with pytest.raises(PreconditionError):
        HalfSeries(a, a, kind="other")


def test_projection_pair_counts(gen):
    movies = _movie_series(gen)
    assert len(projection_pairs(movies, "p2p-ip")) == 5
    df_pairs = projection_pairs(movies, "p2p-df")
    assert len(df_pairs) == 5
    assert [p.angles[0] for p in df_pairs] == movies.angles
    tap = projection_pairs(movies, "p2p-tap")
    assert len(tap) == 8
    assert tap[0].angles == (-20.0, -10.0) and tap[1].angles == (-10.0, -20.0)
    with pytest.raises(PreconditionError):
        projection_pairs(movies, "t2t-df")


def test_projection_pairs_are_thread_independent(gen):
    movies = _movie_series(gen)
    one = projection_pairs(movies, "p2p-df", threads=1)
    many = projection_pairs(movies, "p2p-df", threads=3)
    for p, q in zip(one, many):
        np.testing.assert_array_equal(p.a.data, q.a.data)
        np.testing.assert_array_equal(p.b.data, q.b.data)


def test_dose_fractionated_halves_share_angles(gen):
    movies = _movie_series(gen)
    halves = half_series(movies, "t2t-df")
    assert halves.kind == "df"
    assert halves.a.angles == halves.b.angles == movies.angles


def test_frame_split_halves_add_up_to_identical_frame_sum():
    shape = (16, 16)
    image = np.add.outer(np.arange(16.0), np.arange(16.0) ** 1.5)
    tilts = tuple(MovieTilt(angle, index, tuple(ScalarField(image) for _ in range(4)))
                  for index, angle in enumerate((-5.0, 0.0, 5.0)))
    movies = MovieTiltSeries(tilts)
    halves = split_series_frames(movies)
    total = sum_aligned_frames(movies)
    for ta, tb, tt in zip(halves.a.tilts, halves.b.tilts, total.tilts):
        assert ta.projection.shape == shape
        np.testing.assert_allclose(ta.projection.data + tb.projection.data, tt.projection.data, rtol=1e-5)
        np.testing.assert_allclose(tt.projection.data, 4.0 * image, rtol=1e-5)


def test_eoa_half_series_from_movies(gen):
    movies = _movie_series(gen, angles=(0.0, 4.0, -4.0, 8.0, -8.0))
    halves = half_series(movies, "t2t-eoa")
    assert halves.kind == "eoa"
    assert halves.a.angles == [-8.0, -4.0, 0.0]
    assert halves.b.angles == [4.0, 8.0]
    with pytest.raises(PreconditionError):
        half_series(movies, "p2p-df")


def test_frame_split_requires_two_frames(gen):
    movies = _movie_series(gen, n_frames=1)
    with pytest.raises(PreconditionError):
        split_series_frames(movies)
