import numpy as np
import pytest

from core.errors import InvalidParameterError
from core.rng import Purpose, gaussian, make_stream, sample_permutation, shared_permutation, stream_key


def test_streams_are_pure_functions_of_their_coordinates():
    first = make_stream(7, Purpose.THETA, 3).random(5)
    make_stream(7, Purpose.THETA, 4).random(5)
    again = make_stream(7, Purpose.THETA, 3).random(5)
    assert np.array_equal(first, again)


def test_purpose_round_and_worker_separate_streams():
    keys = {
        stream_key(7, Purpose.THETA, 3),
        stream_key(7, Purpose.RANDK, 3),
        stream_key(7, Purpose.THETA, 4),
        stream_key(7, Purpose.THETA, 3, worker=0),
        stream_key(8, Purpose.THETA, 3),
    }
    assert len(keys) == 5


def test_shared_permutation_is_cached_and_read_only():
    perm = shared_permutation(11, Purpose.COORD_PERM, 2, 9)
    assert shared_permutation(11, Purpose.COORD_PERM, 2, 9) is perm
    assert sorted(perm.tolist()) == list(range(9))
    with pytest.raises(ValueError):
        perm[0] = 1


def test_sample_permutation_rejects_empty_length():
    with pytest.raises(InvalidParameterError):
        sample_permutation(0, make_stream(0, Purpose.SAMPLING))


def test_gaussian_moments():
    draws = gaussian(make_stream(5, Purpose.SAMPLING), 200_000)
    assert abs(draws.mean()) < 0.01
    assert abs(draws.var() - 1.0) < 0.02
