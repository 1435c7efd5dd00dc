import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import norm

from locprod.errors import BandwidthError, DimensionMismatchError
from locprod.models.panel import PanelDataset
from locprod.tools.kernel import KernelSpec, adaptive_bandwidth, distance, kernel_weights


def _panel(coords, periods=1):
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    firm = np.repeat(np.array([f"f{i}" for i in range(n)], dtype=object), periods)
    period = np.tile(np.arange(1, periods + 1), n)
    rows = n * periods
    return PanelDataset.from_arrays(
        firm_id=firm, period=period, y=np.zeros(rows), k=np.zeros(rows), l=None, m=np.zeros(rows),
        coords=np.repeat(coords, periods, axis=0), v=np.zeros(rows),
    )


def test_distance():
    assert distance((0.0, 0.0), (3.0, 4.0)) == 5.0
    with pytest.raises(DimensionMismatchError):
        distance((0.0,), (1.0, 2.0))


def test_bandwidth_is_order_statistic():
    points = np.array([0.0, 1.0, 2.0, 3.0])
    assert adaptive_bandwidth(0.0, points, 2) == 1.0
    assert adaptive_bandwidth(0.0, points, 4) == 3.0
    assert adaptive_bandwidth(1.4, points, 3) == pytest.approx(1.4)


def test_bandwidth_counts_observations_not_locations():
    # two periods per firm: the 3rd nearest observation is at distance 1
    panel = _panel([[0.0], [1.0], [2.0]], periods=2)
    assert adaptive_bandwidth(0.0, panel, 2) == 1.0  # own two rows sit at zero, escalate
    assert adaptive_bandwidth(0.0, panel, 3) == 1.0
    assert adaptive_bandwidth(0.0, panel, 5) == 2.0


def test_bandwidth_outside_range():
    with pytest.raises(BandwidthError):
        adaptive_bandwidth(0.0, np.array([0.0, 1.0]), 3)
    with pytest.raises(Exception):
        KernelSpec(h=0)


def test_gaussian_weights():
    panel = _panel([[0.0, 0.0], [0.0, 1.0], [2.0, 0.0]])
    w = kernel_weights((0.0, 0.0), panel, KernelSpec(h=2))
    assert w.bandwidth == 1.0
    assert_allclose(w.weights, norm.pdf([0.0, 1.0, 2.0]))
    assert np.all(w.weights >= 0)


def test_holdout_gets_zero_weight():
    panel = _panel([[0.0], [1.0], [3.0]])
    w = kernel_weights((0.0,), panel, KernelSpec(h=1), holdout=0)
    assert w.weights[0] == 0.0
    assert w.bandwidth == 1.0


def test_single_location_gives_unit_weights():
    panel = _panel([[0.5], [0.5], [0.5]])
    w = kernel_weights((0.5,), panel, KernelSpec(h=2))
    assert w.degenerate
    assert_allclose(w.weights, 1.0)
