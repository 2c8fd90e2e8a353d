"""Balance between marker corners and keypoints in tracking and bundle adjustment."""
import pytest

from markerslam.optimization.weights import bundle_marker_weight, marker_weight


class TestMarkerWeight:
    def test_no_markers_leaves_points_alone(self):
        assert marker_weight(0, 5.0) == (0.0, 1.0)

    def test_grows_linearly_then_saturates(self):
        assert marker_weight(2, 5.0)[0] == pytest.approx(0.2)
        assert marker_weight(5, 5.0)[0] == pytest.approx(0.5)
        assert marker_weight(10, 5.0)[0] == pytest.approx(0.5)

    @pytest.mark.parametrize('count', [0, 1, 3, 7, 40])
    def test_terms_sum_to_one(self, count):
        markers, points = marker_weight(count, 5.0)
        assert markers + points == pytest.approx(1.0)
        assert 0.5 <= points <= 1.0

    def test_tau_of_one_saturates_at_first_marker(self):
        assert marker_weight(1, 1.0) == (0.5, 0.5)

    @pytest.mark.parametrize('count, tau', [(3, 0.5), (3, 0.0), (-1, 5.0)])
    def test_rejects_bad_arguments(self, count, tau):
        with pytest.raises(ValueError):
            marker_weight(count, tau)


class TestBundleMarkerWeight:
    def test_without_markers_uses_lower_bound(self):
        assert bundle_marker_weight(500, 0) == 1.0

    def test_ratio_of_point_terms_to_corner_terms(self):
        assert bundle_marker_weight(400, 10) == pytest.approx(10.0)

    def test_clamped(self):
        assert bundle_marker_weight(4, 10) == 1.0
        assert bundle_marker_weight(100_000, 1) == 100.0
        assert bundle_marker_weight(100_000, 1, upper=20.0) == 20.0
