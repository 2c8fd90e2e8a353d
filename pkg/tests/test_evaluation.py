"""Trajectory records, alignment, ATE and the pairwise method score."""
import itertools
import json

import numpy as np
import pytest

from markerslam.errors import (DegenerateConfiguration, EmptyInput, EmptySubset, InputError,
                               NonMonotonicTimestamps)
from markerslam.evaluation.metrics import (ScoreInput, aggregate_score, align_sim3, ate, common_frames,
                                           compare_methods, pairwise_score, phi, phi_hat)
from markerslam.evaluation.report import comparison_jsonl, comparison_text, format_table
from markerslam.evaluation.trajectory import TrajectoryEntry, TrajectoryRecord, load_tum, parse_tum_line, save_tum
from markerslam.geometry import Pose, SimTransform, rotation_exp
from markerslam.models import TrackingStatus


# ── Helpers ──────────────────────────────────────────────────────────────

def _helix(count):
    angles = 0.05 * np.arange(count)
    return np.column_stack([2.0 * np.cos(angles), 2.0 * np.sin(angles), 0.01 * np.arange(count)])


def _camera_at(center, rotvec):
    rotation = rotation_exp(rotvec)
    return Pose.from_matrix(rotation, -rotation @ center)


def _record(centers, lost=(), offset=0.0, seed=0):
    rng = np.random.default_rng(seed)
    entries = []
    for index, center in enumerate(centers):
        timestamp = index / 30.0 + offset
        if index in lost:
            entries.append(TrajectoryEntry(timestamp, None, TrackingStatus.LOST, index))
        else:
            entries.append(TrajectoryEntry(timestamp, _camera_at(center, rng.normal(0.0, 0.3, 3)),
                                           TrackingStatus.TRACKED, index))
    return TrajectoryRecord(entries)


def _transformed(record, transform):
    return TrajectoryRecord([TrajectoryEntry(entry.timestamp, transform.correct_pose(entry.pose), entry.status,
                                             entry.frame_index) for entry in record])


# ── Records and files ────────────────────────────────────────────────────

class TestTrajectoryRecord:
    def test_timestamps_must_increase(self):
        record = TrajectoryRecord([TrajectoryEntry(0.0, Pose.identity())])
        with pytest.raises(NonMonotonicTimestamps):
            record.append(TrajectoryEntry(0.0, Pose.identity()))
        with pytest.raises(NonMonotonicTimestamps):
            record.append(TrajectoryEntry(-1.0, Pose.identity()))

    def test_lost_entries_are_not_tracked(self):
        record = _record(_helix(10), lost={2, 5})
        assert len(record) == 10
        assert record.tracked_count == 8
        assert record.centers().shape == (8, 3)
        assert not record[2].tracked

    def test_tum_round_trip(self, tmp_path):
        record = _record(_helix(20), lost={3, 4})
        path = tmp_path / 'traj.txt'
        save_tum(record, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 18
        assert all(len(line.split()) == 8 for line in lines)
        loaded = load_tum(path)
        for original, copy in zip(record.tracked, loaded):
            assert copy.timestamp == pytest.approx(original.timestamp, abs=1e-9)
            assert copy.pose.is_close(original.pose, 1e-7)

    def test_tum_lines_hold_the_camera_position(self):
        pose = _camera_at(np.array([1.0, -2.0, 0.5]), [0.0, 0.0, -0.3])
        entry = parse_tum_line('1.5 1.0 -2.0 0.5 0.0 0.0 0.1494381 0.9887711')
        assert entry.timestamp == 1.5
        np.testing.assert_allclose(entry.pose.center, [1.0, -2.0, 0.5], atol=1e-9)
        assert entry.pose.is_close(pose, 1e-6)

    def test_comments_and_blank_lines_are_skipped(self, tmp_path):
        path = tmp_path / 'traj.txt'
        path.write_text('# timestamp tx ty tz qx qy qz qw\n\n0.0 0 0 0 0 0 0 1\n0.1 1 0 0 0 0 0 1\n')
        assert len(load_tum(path)) == 2

    @pytest.mark.parametrize('line', ['0.0 1 2 3 0 0 0', '0.0 1 2 3 0 0 x 1', '0.0 0 0 0 0 0 0 0',
                                      '0.0 1 2 3 0 0 nan 1', '0.0 inf 2 3 0 0 0 1'])
    def test_malformed_line(self, line):
        with pytest.raises(InputError):
            parse_tum_line(line, 7)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_tum(tmp_path / 'absent.txt')


# ── Alignment and ATE ────────────────────────────────────────────────────

class TestAlignment:
    def test_identical_positions_give_identity(self):
        positions = np.random.default_rng(0).normal(size=(20, 3))
        assert align_sim3(positions, positions).is_identity(1e-9)

    def test_recovers_known_similarity(self):
        transform = SimTransform.from_matrix(1.7, rotation_exp([0.3, -0.2, 0.5]), [1.0, 2.0, 3.0])
        positions = np.random.default_rng(1).normal(size=(20, 3))
        recovered = align_sim3(positions, transform.apply(positions))
        np.testing.assert_allclose(recovered.to_vector(), transform.to_vector(), atol=1e-9)

    def test_collinear_positions(self):
        line = np.outer(np.arange(10.0), [1.0, 2.0, 0.5])
        with pytest.raises(DegenerateConfiguration):
            align_sim3(line, line)


class TestAte:
    def test_trajectory_against_itself(self):
        record = _record(_helix(50))
        assert ate(record, record) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize('seed', range(5))
    def test_invariant_under_similarity(self, seed):
        rng = np.random.default_rng(seed)
        gt = _record(_helix(60), seed=seed)
        transform = SimTransform.from_matrix(rng.uniform(0.2, 5.0), rotation_exp(rng.normal(0.0, 1.0, 3)),
                                             rng.normal(0.0, 3.0, 3))
        assert ate(_transformed(gt, transform), gt) < 1e-9

    def test_without_scale_sees_scale_error(self):
        gt = _record(_helix(60))
        scaled = _transformed(gt, SimTransform.from_matrix(2.0, np.eye(3), np.zeros(3)))
        assert ate(scaled, gt) < 1e-9
        assert ate(scaled, gt, with_scale=False) > 0.1

    def test_matches_analytic_rmse_of_position_noise(self):
        sigma = 0.05
        centers = _helix(1000)
        noisy = centers + np.random.default_rng(3).normal(0.0, sigma, centers.shape)
        assert ate(_record(noisy), _record(centers)) == pytest.approx(sigma * np.sqrt(3.0), rel=0.1)

    def test_subset_restricts_the_frames(self):
        centers = _helix(40)
        noisy = centers.copy()
        noisy[30:] += 0.5
        traj, gt = _record(noisy), _record(centers)
        first_half = [entry.timestamp for entry in gt][:20]
        assert ate(traj, gt, first_half) < 1e-9
        assert ate(traj, gt) > 0.05

    def test_empty_subset(self):
        record = _record(_helix(10))
        with pytest.raises(EmptySubset):
            ate(record, record, [])

    def test_no_common_frames(self):
        evens = _record(_helix(10), lost=set(range(1, 10, 2)))
        odds = _record(_helix(10), lost=set(range(0, 10, 2)))
        with pytest.raises(EmptySubset):
            ate(evens, odds)

    def test_subset_frame_must_be_tracked(self):
        gt = _record(_helix(10))
        traj = _record(_helix(10), lost={4})
        with pytest.raises(InputError):
            ate(traj, gt, [gt[4].timestamp, gt[5].timestamp, gt[6].timestamp])


class TestCommonFrames:
    def test_identical_and_disjoint(self):
        record = _record(_helix(12))
        assert common_frames(record, record) == list(record.timestamps)
        evens = _record(_helix(12), lost=set(range(1, 12, 2)))
        odds = _record(_helix(12), lost=set(range(0, 12, 2)))
        assert common_frames(evens, odds) == []

    def test_staggered_losses(self):
        count = 60
        a = _record(_helix(count), lost={i for i in range(count) if i % 2})
        b = _record(_helix(count), lost={i for i in range(count) if i % 3})
        expected = [a[i].timestamp for i in range(count) if a[i].tracked and b[i].tracked]
        assert common_frames(a, b) == expected
        assert len(expected) == 10

    def test_timestamp_tolerance(self):
        a = _record(_helix(10))
        assert len(common_frames(a, _record(_helix(10), offset=5e-5))) == 10
        assert common_frames(a, _record(_helix(10), offset=2e-4)) == []


# ── Scores ───────────────────────────────────────────────────────────────

class TestPairwiseScore:
    def test_thresholds(self):
        assert phi(0.05, 0.5, 0.495) == pytest.approx(0.02475)
        assert phi_hat(0.05, 1000, 500) == pytest.approx(50.0)

    def test_insignificant_error_difference(self):
        assert pairwise_score(ScoreInput(0.5, 0.495, 100, 100, 0.05)) == 0.0
        assert pairwise_score(ScoreInput(0.495, 0.5, 100, 100, 0.05)) == 0.0

    def test_better_on_both(self):
        score_input = ScoreInput(0.1, 0.5, 1000, 500, 0.05)
        assert pairwise_score(score_input) == 1.0
        assert pairwise_score(score_input.swapped()) == 0.0

    def test_better_error_same_frames(self):
        assert pairwise_score(ScoreInput(0.1, 0.5, 1000, 990, 0.05)) == 0.5

    def test_same_error_more_frames(self):
        assert pairwise_score(ScoreInput(0.5, 0.51, 1000, 500, 0.05)) == 0.5

    @pytest.mark.parametrize('rho', [0.01, 0.05, 0.5, 1.0])
    def test_perfect_tie(self, rho):
        assert pairwise_score(ScoreInput(0.3, 0.3, 700, 700, rho)) == 0.0

    @pytest.mark.parametrize('score_input', [
        ScoreInput(-0.1, 0.5, 10, 10),
        ScoreInput(0.1, 0.5, -1, 10),
        ScoreInput(0.1, 0.5, 10, 10, 0.0),
        ScoreInput(0.1, 0.5, 10, 10, 1.5),
    ])
    def test_invalid_input(self, score_input):
        with pytest.raises(InputError):
            pairwise_score(score_input)

    def test_both_directions_never_exceed_one(self):
        errors = [0.0, 0.1, 0.104, 0.106, 0.2, 0.5, 1.0]
        counts = [0, 90, 95, 100, 106, 200]
        for e_ab, e_ba, t_a, t_b, rho in itertools.product(errors, errors, counts, counts, [0.01, 0.05, 0.2, 1.0]):
            score_input = ScoreInput(e_ab, e_ba, t_a, t_b, rho)
            total = pairwise_score(score_input) + pairwise_score(score_input.swapped())
            assert total in (0.0, 0.5, 1.0)

    @pytest.mark.parametrize('factor', [0.5, 2.0, 4.0])
    def test_scale_invariant(self, factor):
        errors = [0.0, 0.1, 0.103, 0.2, 0.7]
        counts = [0, 100, 104, 150, 400]
        for e_ab, e_ba, t_a, t_b in itertools.product(errors, errors, counts, counts):
            base = pairwise_score(ScoreInput(e_ab, e_ba, t_a, t_b))
            assert pairwise_score(ScoreInput(e_ab * factor, e_ba * factor, t_a, t_b)) == base
            assert pairwise_score(ScoreInput(e_ab, e_ba, t_a * 2, t_b * 2)) == base


class TestAggregateScore:
    def test_cases(self):
        assert aggregate_score([(1.0, 0.0)] * 4) == 1.0
        assert aggregate_score([(0.0, 0.0), (0.0, 0.0)]) == 0.0
        assert aggregate_score([(1.0, 0.0), (0.0, 1.0)]) == 0.0

    def test_antisymmetric(self):
        rng = np.random.default_rng(0)
        pairs = [tuple(rng.choice([0.0, 0.5, 1.0], size=2)) for _ in range(25)]
        assert aggregate_score(pairs) == -aggregate_score([(b, a) for a, b in pairs])

    def test_empty(self):
        with pytest.raises(EmptyInput):
            aggregate_score([])


class TestCompareMethods:
    def test_better_method_wins(self):
        centers = _helix(100)
        gt = _record(centers)
        noisy = centers + np.random.default_rng(2).normal(0.0, 0.05, centers.shape)
        worse = _record(noisy, lost=set(range(0, 100, 5)))
        comparison = compare_methods(_record(centers), worse, gt, sequence='helix')
        assert comparison.common == 80
        assert comparison.e_ab == pytest.approx(0.0, abs=1e-9)
        assert comparison.e_ba > 0.05
        assert (comparison.t_a, comparison.t_b) == (100, 80)
        assert (comparison.score_ab, comparison.score_ba) == (1.0, 0.0)

    def test_against_itself_ties(self):
        record = _record(_helix(30))
        comparison = compare_methods(record, record, record)
        assert comparison.e_ab == comparison.e_ba
        assert (comparison.score_ab, comparison.score_ba) == (0.0, 0.0)


# ── Reports ──────────────────────────────────────────────────────────────

class TestReport:
    def test_table_layout(self):
        assert format_table([{'a': 1, 'b': 0.5}], ('a', 'b')) == 'a  b       \n-  --------\n1  0.500000\n'

    def test_text_and_rows(self):
        centers = _helix(40)
        gt = _record(centers)
        worse = _record(centers + 0.1 * np.random.default_rng(0).normal(size=centers.shape), lost={1, 2, 3, 4, 5})
        comparisons = [compare_methods(gt, worse, gt, sequence='one'), compare_methods(gt, gt, gt, sequence='two')]
        text = comparison_text(comparisons, 0.05)
        assert text.splitlines()[0].split() == ['sequence', 'e_ab', 'e_ba', 't_a', 't_b', 'common', 'score_ab',
                                                'score_ba']
        assert text.rstrip().endswith('aggregate score (rho=0.05): +0.500000')
        rows = [json.loads(line) for line in comparison_jsonl(comparisons, 0.05).splitlines()]
        assert [row.get('sequence') for row in rows[:2]] == ['one', 'two']
        assert rows[0]['score_ab'] == 1.0
        assert rows[-1] == {'aggregate': 0.5, 'rho': 0.05, 'sequences': 2}
