"""Command-line front end: simulate, slam, track, eval and inspect."""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from markerslam import SystemBuilder
from markerslam.errors import EmptySubset, InputError, MarkerSlamError, SolverError
from markerslam.evaluation.metrics import ate, compare_methods
from markerslam.evaluation.report import comparison_jsonl, comparison_text, format_table
from markerslam.evaluation.trajectory import load_tum, save_tum
from markerslam.fileio import write_atomic
from markerslam.mapping.serialization import load_map, save_map
from markerslam.mapping.world import WorldMap
from markerslam.simulation.scenarios import load_scenario
from markerslam.simulation.sequence_io import load_sequence, save_sequence
from markerslam.simulation.world import WorldConfig, generate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3


def _parse_assignments(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    parsed: Dict[str, str] = {}
    for pair in pairs or []:
        key, separator, value = pair.partition('=')
        if not separator or not key.strip():
            raise InputError(f"Expected key=value, got '{pair}'")
        parsed[key.strip()] = value.strip()
    return parsed


def _mode_overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides = _parse_assignments(getattr(args, 'set', None))
    if getattr(args, 'no_markers', False):
        overrides['use_markers'] = 'false'
    if getattr(args, 'no_keypoints', False):
        overrides['use_keypoints'] = 'false'
    if getattr(args, 'no_keypoint_loops', False):
        overrides['keypoint_loop_closure'] = 'false'
    if getattr(args, 'no_marker_gating', False):
        overrides['marker_gating'] = 'false'
    return overrides


def _builder(args: argparse.Namespace) -> SystemBuilder:
    builder = SystemBuilder()
    builder.configure_logging(args.log_level)
    return builder


def _require_file(path: str, what: str) -> Path:
    target = Path(path)
    if not target.is_file():
        raise InputError(f"{what} {path} does not exist")
    return target


def cmd_simulate(args: argparse.Namespace) -> int:
    _builder(args)
    overrides = _parse_assignments(args.set)
    if args.scenario:
        world_config = load_scenario(args.scenario, args.seed, overrides)
    else:
        world_config = WorldConfig().with_overrides(overrides)
        if args.seed is not None:
            world_config = world_config.with_overrides({'seed': args.seed})
    sequence = generate(world_config)
    save_sequence(sequence, args.output)
    if args.ground_truth:
        save_tum(sequence.ground_truth_record(), args.ground_truth)
    keypoints = sum(frame.keypoint_count for frame in sequence.frames)
    print(f"frames={len(sequence)} landmarks={sequence.landmark_positions.shape[0]} "
          f"markers={len(sequence.marker_poses)} keypoint_observations={keypoints}")
    return EXIT_OK


def _run_and_report(system, sequence, args: argparse.Namespace) -> None:
    try:
        trajectory = system.run(sequence.frames)
    finally:
        system.close()
    if args.trajectory:
        save_tum(trajectory, args.trajectory)
    summary = f"frames={len(trajectory)} tracked={trajectory.tracked_count}"
    if system.world is not None:
        stats = system.world.statistics()
        summary += f" keyframes={stats['keyframes']} points={stats['points']} markers={stats['valid_markers']}"
    try:
        summary += f" ate={ate(trajectory, sequence.ground_truth_record()):.6f}"
    except (EmptySubset, SolverError):
        summary += " ate=n/a"
    print(summary)


def cmd_slam(args: argparse.Namespace) -> int:
    builder = _builder(args)
    sequence = load_sequence(_require_file(args.sequence, 'Sequence'))
    system = builder.build(args.profile, args.config, _mode_overrides(args), sequence.marker_sides)
    _run_and_report(system, sequence, args)
    if args.map:
        if system.world is None:
            raise SolverError("The map was never initialized")
        save_map(system.world, args.map)
    return EXIT_OK


def cmd_track(args: argparse.Namespace) -> int:
    builder = _builder(args)
    world = load_map(_require_file(args.map, 'Map'))
    sequence = load_sequence(_require_file(args.sequence, 'Sequence'))
    overrides = _mode_overrides(args)
    overrides['concurrent'] = 'false'
    system = builder.build(args.profile, args.config, overrides, sequence.marker_sides, world=world, frozen=True)
    _run_and_report(system, sequence, args)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _builder(args)
    if not len(args.traj_a) == len(args.traj_b) == len(args.gt):
        raise InputError("--traj-a, --traj-b and --gt need the same number of files")
    comparisons = []
    for path_a, path_b, path_gt in zip(args.traj_a, args.traj_b, args.gt):
        traj_a = load_tum(path_a)
        traj_b = load_tum(path_b)
        gt = load_tum(path_gt)
        comparisons.append(compare_methods(traj_a, traj_b, gt, args.rho, Path(path_gt).stem,
                                           with_scale=not args.se3))
    report = comparison_jsonl(comparisons, args.rho) if args.format == 'jsonl' else comparison_text(comparisons,
                                                                                                   args.rho)
    if args.output:
        write_atomic(args.output, report)
    else:
        sys.stdout.write(report)
    return EXIT_OK


def _export_geometry(world: WorldMap, directory: Path) -> None:
    keyframes = [dict(id=k.id, frame=k.frame_index, x=float(k.pose.center[0]), y=float(k.pose.center[1]),
                      z=float(k.pose.center[2])) for k in world.keyframes_by_sequence()]
    points = [dict(id=p.id, x=float(p.position[0]), y=float(p.position[1]), z=float(p.position[2]),
                   observers=len(world.point_observers(p.id)))
              for p in sorted(world.points.values(), key=lambda point: point.id)]
    corners = []
    for marker in world.valid_markers():
        for corner_index, corner in enumerate(marker.world_corners()):
            corners.append(dict(id=marker.id, corner=corner_index, x=float(corner[0]), y=float(corner[1]),
                                z=float(corner[2])))
    write_atomic(directory / 'keyframes.txt', format_table(keyframes, ('id', 'frame', 'x', 'y', 'z')))
    write_atomic(directory / 'points.txt', format_table(points, ('id', 'x', 'y', 'z', 'observers')))
    write_atomic(directory / 'markers.txt', format_table(corners, ('id', 'corner', 'x', 'y', 'z')))


def cmd_inspect(args: argparse.Namespace) -> int:
    _builder(args)
    world = load_map(_require_file(args.map, 'Map'))
    for key, value in world.statistics().items():
        print(f"{key}={value}")
    if world.keyframes:
        centers = np.array([keyframe.pose.center for keyframe in world.keyframes_by_sequence()])
        print(f"trajectory_length={float(np.sum(np.linalg.norm(np.diff(centers, axis=0), axis=1))):.6f}")
    if args.export:
        _export_geometry(world, Path(args.export))
    return EXIT_OK


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='flat key = value parameter file')
    parser.add_argument('--set', action='append', metavar='KEY=VALUE', help='parameter override, repeatable')
    parser.add_argument('--profile', choices=('sequential', 'concurrent'), help='map-manager scheduling')
    parser.add_argument('--no-markers', action='store_true', help='ignore marker detections')
    parser.add_argument('--no-keypoints', action='store_true', help='ignore keypoints')
    parser.add_argument('--no-keypoint-loops', action='store_true', help='disable keypoint loop closure')
    parser.add_argument('--no-marker-gating', action='store_true', help='do not gate candidates by marker ids')
    parser.add_argument('--trajectory', help='write the estimated trajectory here')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='markerslam', description='Keypoint and marker SLAM on simulated data')
    parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR')
    commands = parser.add_subparsers(dest='command', required=True)

    simulate = commands.add_parser('simulate', help='generate an observation sequence')
    simulate.add_argument('--scenario', help='preset name')
    simulate.add_argument('--seed', type=int)
    simulate.add_argument('--set', action='append', metavar='KEY=VALUE', help='world setting, repeatable')
    simulate.add_argument('--output', required=True, help='sequence file to write')
    simulate.add_argument('--ground-truth', help='write the ground-truth trajectory here')
    simulate.set_defaults(handler=cmd_simulate)

    slam = commands.add_parser('slam', help='build a map from a sequence')
    slam.add_argument('--sequence', required=True)
    slam.add_argument('--map', help='map file to write')
    _add_pipeline_flags(slam)
    slam.set_defaults(handler=cmd_slam)

    track = commands.add_parser('track', help='track a sequence against a saved map')
    track.add_argument('--map', required=True)
    track.add_argument('--sequence', required=True)
    _add_pipeline_flags(track)
    track.set_defaults(handler=cmd_track)

    evaluate = commands.add_parser('eval', help='compare two trajectories per sequence')
    evaluate.add_argument('--traj-a', nargs='+', required=True)
    evaluate.add_argument('--traj-b', nargs='+', required=True)
    evaluate.add_argument('--gt', nargs='+', required=True)
    evaluate.add_argument('--rho', type=float, default=0.05)
    evaluate.add_argument('--se3', action='store_true', help='align without scale')
    evaluate.add_argument('--format', choices=('text', 'jsonl'), default='text')
    evaluate.add_argument('--output')
    evaluate.set_defaults(handler=cmd_eval)

    inspect = commands.add_parser('inspect', help='print map statistics')
    inspect.add_argument('--map', required=True)
    inspect.add_argument('--export', help='directory for keyframe, point and marker tables')
    inspect.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except InputError as error:
        print(f"error: {error.__class__.__name__}: {error.message}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as error:
        print(f"error: {error.__class__.__name__}: {error}", file=sys.stderr)
        return EXIT_INPUT
    except MarkerSlamError as error:
        print(f"error: {error.__class__.__name__}: {error.message}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
