from pathlib import Path
from typing import Optional
import sys

from markerslam.simulation.scenarios import load_scenario, scenario_names
from markerslam.simulation.sequence_io import save_sequence
from markerslam.simulation.world import generate
from markerslam.evaluation.trajectory import save_tum


def write_scenario_sequences(directory: str = 'scenarios', seed: Optional[int] = None) -> None:
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    for name in scenario_names():
        sequence = generate(load_scenario(name, seed))
        save_sequence(sequence, target / f'{name}.seq')
        save_tum(sequence.ground_truth_record(), target / f'{name}_gt.txt')
        print(f"✓ {name}: {len(sequence)} frames, {len(sequence.marker_poses)} markers")


if __name__ == '__main__':
    print("Writing scenario sequences...")
    write_scenario_sequences(*sys.argv[1:2])
    print("Scenario sequences written!")


create_scenarios = write_scenario_sequences
