import numpy as np
import pytest


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation normalized by the largest gradient magnitude.

    The 1e-6 floor keeps genuinely-zero gradients (where both sides are
    finite-difference noise) from blowing up the ratio.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-6)
    return float(np.abs(analytic - numeric).max() / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
