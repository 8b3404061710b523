import mpmath as mp
import numpy as np
import pytest

from degen.linalg import row_singular_values, smallest_singular_value


def _oracle_min(M):
    with mp.workdps(50):
        return float(min(mp.svd_r(mp.matrix(M.tolist()), compute_uv=False)))


@pytest.mark.parametrize("shape", [(2, 2), (2, 5), (3, 3), (3, 13)])
def test_matches_high_precision_svd(shape):
    rng = np.random.default_rng(sum(shape))
    mats = rng.normal(size=(20,) + shape)
    got = smallest_singular_value(mats)
    for M, s in zip(mats, got):
        assert s == pytest.approx(_oracle_min(M), rel=1e-12)


def test_graded_rows_keep_relative_accuracy():
    # rows with wildly different scales: the tiny singular value must stay accurate
    rng = np.random.default_rng(5)
    for scale in (1e-20, 1e-80, 1e-150):
        M = rng.normal(size=(3, 7))
        M[1] *= scale
        s = smallest_singular_value(M[None])[0]
        assert s == pytest.approx(_oracle_min(M), rel=1e-10)


def test_all_singular_values_and_nonfinite():
    M = np.array([[3.0, 0.0], [0.0, 4.0]])
    assert sorted(row_singular_values(M[None])[0]) == [3.0, 4.0]
    bad = np.array([[[np.nan, 0.0], [0.0, 1.0]]])
    assert np.isnan(smallest_singular_value(bad)[0])
    assert smallest_singular_value(np.zeros((1, 2, 3)))[0] == 0.0
