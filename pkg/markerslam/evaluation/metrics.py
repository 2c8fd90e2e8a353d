import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from markerslam.errors import EmptyInput, EmptySubset, InputError
from markerslam.geometry import SimTransform, umeyama_alignment
from markerslam.evaluation.trajectory import TrajectoryEntry, TrajectoryRecord

logger = logging.getLogger(__name__)

TIMESTAMP_TOLERANCE: float = 1e-4


def align_sim3(traj: np.ndarray, gt: np.ndarray, with_scale: bool = True) -> SimTransform:
    """Similarity mapping estimated positions ``traj`` onto ground-truth positions ``gt``."""
    return umeyama_alignment(traj, gt, with_scale=with_scale)


def _tracked_lookup(record: TrajectoryRecord) -> Tuple[np.ndarray, List[TrajectoryEntry]]:
    tracked = record.tracked
    return np.array([entry.timestamp for entry in tracked]), tracked


def _nearest(timestamps: np.ndarray, query: float, tolerance: float) -> Optional[int]:
    if timestamps.size == 0:
        return None
    position = int(np.searchsorted(timestamps, query))
    best = None
    for index in (position - 1, position):
        if 0 <= index < timestamps.size and abs(timestamps[index] - query) <= tolerance:
            if best is None or abs(timestamps[index] - query) < abs(timestamps[best] - query):
                best = index
    return best


def common_frames(a: TrajectoryRecord, b: TrajectoryRecord, tolerance: float = TIMESTAMP_TOLERANCE) -> List[float]:
    """Timestamps of ``a`` tracked in both records."""
    b_times, _ = _tracked_lookup(b)
    return [entry.timestamp for entry in a.tracked if _nearest(b_times, entry.timestamp, tolerance) is not None]


def corresponding_positions(traj: TrajectoryRecord, gt: TrajectoryRecord, frame_subset: Sequence[float],
                            tolerance: float = TIMESTAMP_TOLERANCE) -> Tuple[np.ndarray, np.ndarray]:
    traj_times, traj_entries = _tracked_lookup(traj)
    gt_times, gt_entries = _tracked_lookup(gt)
    estimated, truth = [], []
    for timestamp in frame_subset:
        traj_index = _nearest(traj_times, timestamp, tolerance)
        gt_index = _nearest(gt_times, timestamp, tolerance)
        if traj_index is None:
            raise InputError(f"Frame at {timestamp} is not tracked in the estimated trajectory")
        if gt_index is None:
            raise InputError(f"Frame at {timestamp} has no ground truth")
        estimated.append(traj_entries[traj_index].pose.center)
        truth.append(gt_entries[gt_index].pose.center)
    return np.array(estimated).reshape(-1, 3), np.array(truth).reshape(-1, 3)


def ate(traj: TrajectoryRecord, gt: TrajectoryRecord, frame_subset: Optional[Sequence[float]] = None,
        with_scale: bool = True) -> float:
    """Translational RMSE after aligning ``traj`` onto ``gt`` over ``frame_subset`` (all common frames by default)."""
    if frame_subset is None:
        frame_subset = common_frames(traj, gt)
    if len(frame_subset) == 0:
        raise EmptySubset("No frames to evaluate")
    estimated, truth = corresponding_positions(traj, gt, frame_subset)
    transform = align_sim3(estimated, truth, with_scale=with_scale)
    residuals = transform.apply(estimated) - truth
    return float(np.sqrt(np.mean(np.sum(residuals ** 2, axis=1))))


def phi(rho: float, x: float, y: float) -> float:
    return rho * min(x, y)


def phi_hat(rho: float, x: float, y: float) -> float:
    return rho * max(x, y)


@dataclass(frozen=True)
class ScoreInput:
    e_ab: float
    e_ba: float
    t_a: int
    t_b: int
    rho: float = 0.05

    def validate(self) -> Tuple[bool, Optional[str]]:
        if self.e_ab < 0 or self.e_ba < 0:
            return False, "ATEs cannot be negative"
        if self.t_a < 0 or self.t_b < 0:
            return False, "Tracked-frame counts cannot be negative"
        if not 0.0 < self.rho <= 1.0:
            return False, f"rho must lie in (0, 1], got {self.rho}"
        return True, None

    def swapped(self) -> 'ScoreInput':
        return ScoreInput(self.e_ba, self.e_ab, self.t_b, self.t_a, self.rho)


def pairwise_score(score_input: ScoreInput) -> float:
    """1 when a wins on error and tracked frames, 0.5 when it wins one and ties the other, else 0."""
    ok, reason = score_input.validate()
    if not ok:
        raise InputError(reason)
    e_ab, e_ba = score_input.e_ab, score_input.e_ba
    t_a, t_b = score_input.t_a, score_input.t_b
    rho = score_input.rho
    error_win = (e_ba - e_ab) > rho * e_ab
    error_tie = abs(e_ba - e_ab) <= phi(rho, e_ba, e_ab)
    frames_win = (t_a - t_b) > rho * t_a
    frames_tie = abs(t_a - t_b) <= phi_hat(rho, t_a, t_b)
    if error_win and frames_win:
        return 1.0
    if error_win and frames_tie:
        return 0.5
    if error_tie and frames_win:
        return 0.5
    return 0.0


def aggregate_score(per_sequence: Sequence[Tuple[float, float]]) -> float:
    """Mean over sequences of S(a, b) - S(b, a)."""
    if len(per_sequence) == 0:
        raise EmptyInput("No sequences to aggregate")
    return float(np.mean([forward - backward for forward, backward in per_sequence]))


@dataclass(frozen=True)
class SequenceComparison:
    sequence: str
    e_ab: float
    e_ba: float
    t_a: int
    t_b: int
    common: int
    score_ab: float
    score_ba: float

    def as_row(self) -> Dict[str, object]:
        return {'sequence': self.sequence, 'e_ab': self.e_ab, 'e_ba': self.e_ba, 't_a': self.t_a,
                't_b': self.t_b, 'common': self.common, 'score_ab': self.score_ab, 'score_ba': self.score_ba}


def compare_methods(traj_a: TrajectoryRecord, traj_b: TrajectoryRecord, gt: TrajectoryRecord, rho: float = 0.05,
                    sequence: str = '', with_scale: bool = True) -> SequenceComparison:
    """Scores two runs of one sequence, each aligned on its own over the frames both tracked."""
    frames = [timestamp for timestamp in common_frames(traj_a, traj_b)
              if _nearest(_tracked_lookup(gt)[0], timestamp, TIMESTAMP_TOLERANCE) is not None]
    e_ab = ate(traj_a, gt, frames, with_scale)
    e_ba = ate(traj_b, gt, frames, with_scale)
    score_input = ScoreInput(e_ab, e_ba, traj_a.tracked_count, traj_b.tracked_count, rho)
    comparison = SequenceComparison(sequence, e_ab, e_ba, score_input.t_a, score_input.t_b, len(frames),
                                    pairwise_score(score_input), pairwise_score(score_input.swapped()))
    logger.debug("Compared %s: %s", sequence or 'sequence', comparison)
    return comparison
