"""Simulated worlds, the scenario presets and the sequence file format."""
import numpy as np
import pytest

from markerslam.errors import BadMagic, InvalidConfig, TruncatedStream, UnknownScenario, UnsupportedVersion
from markerslam.geometry import project_points
from markerslam.models import canonical_corners
from markerslam.simulation.scenarios import load_scenario, scenario_names
from markerslam.simulation.sequence_io import decode_sequence, encode_sequence, load_sequence, save_sequence
from markerslam.simulation.world import WorldConfig, flip_bits, generate, keypoint_levels

EXACT = WorldConfig(seed=2, frame_count=12, laps=0.1, landmark_count=600, marker_count=8, pixel_sigma=0.0,
                    bit_flip_prob=0.0, corner_sigma=0.0)


# ── Helpers ──────────────────────────────────────────────────────────────

def _pixel_residuals(sequence):
    residuals = []
    for frame, pose, ids in zip(sequence.frames, sequence.ground_truth, sequence.keypoint_landmarks):
        exact, _ = project_points(pose, sequence.landmark_positions[ids], sequence.intrinsics)
        residuals.append((frame.pixels - exact).reshape(-1))
    return np.concatenate(residuals)


@pytest.fixture(scope='module')
def exact_sequence():
    return generate(EXACT)


# ── Generation ───────────────────────────────────────────────────────────

class TestGenerate:
    def test_noise_free_keypoints_are_exact_projections(self, exact_sequence):
        assert sum(frame.keypoint_count for frame in exact_sequence.frames) > 100
        np.testing.assert_allclose(_pixel_residuals(exact_sequence), 0.0, atol=1e-9)
        for frame, ids in zip(exact_sequence.frames, exact_sequence.keypoint_landmarks):
            np.testing.assert_array_equal(frame.descriptors, exact_sequence.landmark_descriptors[ids])

    def test_noise_free_markers_are_exact_projections(self, exact_sequence):
        seen = 0
        for frame, pose in zip(exact_sequence.frames, exact_sequence.ground_truth):
            for obs in frame.marker_detections:
                marker_pose = exact_sequence.marker_poses[obs.marker_id]
                exact, _ = project_points(pose, marker_pose.apply(canonical_corners(EXACT.marker_side)),
                                          exact_sequence.intrinsics)
                np.testing.assert_allclose(obs.corners_px, exact, atol=1e-9)
                seen += 1
        assert seen > 0

    def test_levels_stay_in_pyramid(self, exact_sequence):
        levels = np.concatenate([frame.levels for frame in exact_sequence.frames])
        assert levels.min() >= 0
        assert levels.max() < EXACT.pyramid_levels

    def test_same_seed_same_bytes(self):
        config = EXACT.with_overrides({'pixel_sigma': 0.5, 'bit_flip_prob': 0.02, 'corner_sigma': 0.3})
        assert encode_sequence(generate(config)) == encode_sequence(generate(config))

    def test_other_seed_other_world(self):
        other = generate(EXACT.with_overrides({'seed': 3}))
        assert encode_sequence(other) != encode_sequence(generate(EXACT))

    def test_pixel_noise_matches_configured_sigma(self):
        config = WorldConfig(seed=4, frame_count=40, laps=0.3, landmark_count=2500, marker_count=0,
                             pixel_sigma=0.5)
        residuals = _pixel_residuals(generate(config))
        assert residuals.size >= 10_000
        assert np.sqrt(np.mean(residuals ** 2)) == pytest.approx(0.5, rel=0.05)

    def test_bit_flip_rate(self):
        config = EXACT.with_overrides({'bit_flip_prob': 0.05})
        sequence = generate(config)
        flipped, total = 0, 0
        for frame, ids in zip(sequence.frames, sequence.keypoint_landmarks):
            diff = np.unpackbits(frame.descriptors ^ sequence.landmark_descriptors[ids], axis=1)
            flipped += int(diff.sum())
            total += diff.size
        assert flipped / total == pytest.approx(0.05, rel=0.1)

    def test_full_dropout_removes_every_detection(self):
        sequence = generate(EXACT.with_overrides({'marker_dropout': 1.0, 'keypoint_dropout': 1.0}))
        assert all(frame.is_blank for frame in sequence.frames)

    @pytest.mark.parametrize('overrides', [
        {'pixel_sigma': -0.1},
        {'bit_flip_prob': 1.5},
        {'marker_dropout': -0.2},
        {'radius': 5.0},
        {'frame_count': 0},
        {'trajectory': 'spiral'},
    ])
    def test_invalid_config(self, overrides):
        with pytest.raises(InvalidConfig):
            generate(EXACT.with_overrides(overrides))

    def test_unknown_or_malformed_setting(self):
        with pytest.raises(InvalidConfig):
            EXACT.with_overrides({'gravity': 9.8})
        with pytest.raises(InvalidConfig):
            EXACT.with_overrides({'frame_count': '2.5'})


class TestObservationModel:
    def test_nearer_landmarks_sit_higher_in_the_pyramid(self):
        levels = keypoint_levels(np.array([4.0, 4.0 / 1.2, 4.0 / 1.2 ** 3, 8.0]), np.zeros(4), WorldConfig())
        np.testing.assert_array_equal(levels, [0, 1, 3, 0])

    def test_level_offset_and_clipping(self):
        levels = keypoint_levels(np.array([4.0, 0.01]), np.array([2.0, 0.0]), WorldConfig())
        np.testing.assert_array_equal(levels, [2, 7])

    def test_zero_flip_probability_copies(self):
        descriptors = np.random.default_rng(0).integers(0, 256, size=(5, 32), dtype=np.uint8)
        copied = flip_bits(np.random.default_rng(1), descriptors, 0.0)
        np.testing.assert_array_equal(copied, descriptors)
        assert copied is not descriptors


# ── Scenarios ────────────────────────────────────────────────────────────

class TestScenarios:
    def test_library(self):
        assert set(scenario_names()) >= {'loop_with_drift', 'kidnapped_camera', 'repetitive_corridor',
                                          'markerless', 'marker_only'}

    @pytest.mark.parametrize('name', ['nowhere', '', '../marker_only'])
    def test_unknown_scenario(self, name):
        with pytest.raises(UnknownScenario):
            load_scenario(name)

    def test_seed_and_overrides_apply_last(self):
        config = load_scenario('Markerless', seed=7, overrides={'frame_count': 30})
        assert config.seed == 7
        assert config.frame_count == 30
        assert config.marker_count == 0

    def test_marker_only_has_no_keypoints(self):
        sequence = generate(load_scenario('marker_only', overrides={'frame_count': 30}))
        assert sequence.landmark_positions.shape == (0, 3)
        assert all(frame.keypoint_count == 0 for frame in sequence.frames)
        assert any(frame.marker_detections for frame in sequence.frames)

    def test_corridor_segments_share_descriptors(self):
        sequence = generate(load_scenario('repetitive_corridor', overrides={'frame_count': 10}))
        config = sequence.config
        half = config.landmark_count // 2
        np.testing.assert_array_equal(sequence.landmark_descriptors[:half], sequence.landmark_descriptors[half:])
        np.testing.assert_allclose(sequence.landmark_positions[half:] - sequence.landmark_positions[:half],
                                   np.tile([config.segment_length, 0.0, 0.0], (half, 1)), atol=1e-12)
        assert sorted(sequence.marker_poses) == list(range(config.marker_count))
        xs = [pose.translation[0] for pose in sequence.marker_poses.values()]
        assert len(np.unique(np.round(xs, 6))) == config.marker_count

    def test_drift_accumulates_to_configured_offset(self):
        sequence = generate(load_scenario('loop_with_drift', overrides={'frame_count': 30, 'landmark_count': 0}))
        corrections = sequence.drift_corrections()
        assert corrections[0].is_identity(1e-12)
        np.testing.assert_allclose(corrections[-1].to_vector(), sequence.config.drift.to_vector(), atol=1e-12)
        drifted = sequence.drifted_record()
        truth = sequence.ground_truth_record()
        assert drifted[0].pose.is_close(truth[0].pose, 1e-12)
        assert np.linalg.norm(drifted[-1].pose.center - truth[-1].pose.center) > 0.2

    def test_kidnapped_camera_blanks_then_jumps(self):
        sequence = generate(load_scenario('kidnapped_camera', overrides={'frame_count': 260,
                                                                         'landmark_count': 300}))
        config = sequence.config
        blank = [frame.index for frame in sequence.frames if frame.is_blank]
        assert blank == list(range(config.kidnap_frame, config.kidnap_frame + config.kidnap_blank_frames))
        centers = [pose.center for pose in sequence.ground_truth]
        step = np.linalg.norm(centers[1] - centers[0])
        jump = np.linalg.norm(centers[config.kidnap_frame] - centers[config.kidnap_frame - 1])
        assert jump > 20 * step


# ── Sequence files ───────────────────────────────────────────────────────

class TestSequenceFiles:
    def test_round_trip(self, exact_sequence):
        payload = encode_sequence(exact_sequence)
        restored = decode_sequence(payload)
        assert restored.config == exact_sequence.config
        assert encode_sequence(restored) == payload
        assert restored.marker_sides == exact_sequence.marker_sides
        for original, copy in zip(exact_sequence.frames, restored.frames):
            np.testing.assert_array_equal(copy.pixels, original.pixels)
            np.testing.assert_array_equal(copy.levels, original.levels)
            assert [obs.marker_id for obs in copy.marker_detections] == \
                [obs.marker_id for obs in original.marker_detections]

    def test_file_round_trip(self, exact_sequence, tmp_path):
        path = tmp_path / 'room.seq'
        save_sequence(exact_sequence, path)
        assert path.read_bytes() == encode_sequence(exact_sequence)
        assert len(load_sequence(path)) == len(exact_sequence)

    def test_bad_magic(self, exact_sequence):
        with pytest.raises(BadMagic):
            decode_sequence(b'not a sequence at all')
        payload = encode_sequence(exact_sequence).replace(b'MARKERSLAM-SEQUENCE', b'SOMETHING-ELSE-HERE', 1)
        with pytest.raises(BadMagic):
            decode_sequence(payload)

    def test_unsupported_version(self, exact_sequence):
        payload = encode_sequence(exact_sequence).replace(b'MARKERSLAM-SEQUENCE 1\n', b'MARKERSLAM-SEQUENCE 9\n', 1)
        with pytest.raises(UnsupportedVersion):
            decode_sequence(payload)

    @pytest.mark.parametrize('cut', [25, 1000, -1])
    def test_truncated(self, exact_sequence, cut):
        payload = encode_sequence(exact_sequence)
        with pytest.raises(TruncatedStream):
            decode_sequence(payload[:cut])

    def test_trailing_bytes(self, exact_sequence):
        with pytest.raises(TruncatedStream):
            decode_sequence(encode_sequence(exact_sequence) + b'\x00')
