from typing import Tuple


def marker_weight(n_f: int, tau_m: float) -> Tuple[float, float]:
    """(marker weight, point weight) for a frame that sees ``n_f`` markers."""
    if tau_m < 1:
        raise ValueError("tau_m must be at least 1")
    if n_f < 0:
        raise ValueError("Marker count cannot be negative")
    marker_term = 0.5 * min(1.0, n_f / tau_m)
    return marker_term, 1.0 - marker_term


def bundle_marker_weight(point_observations: int, marker_observations: int,
                         lower: float = 1.0, upper: float = 100.0) -> float:
    """Map-scale counterpart of the tracking balance: corner terms weighted against point terms."""
    if marker_observations == 0:
        return lower
    ratio = point_observations / (4.0 * marker_observations)
    return float(min(upper, max(lower, ratio)))
