from pathlib import Path
from typing import Any, List, Mapping, Optional

from dotenv import dotenv_values

from markerslam.errors import UnknownScenario
from markerslam.simulation.world import WorldConfig

PRESET_DIRECTORY = Path(__file__).resolve().parent / 'presets'
PRESET_SUFFIX = '.cfg'


def scenario_names() -> List[str]:
    return sorted(path.stem for path in PRESET_DIRECTORY.glob(f'*{PRESET_SUFFIX}'))


def scenario_path(name: str) -> Path:
    cleaned = name.strip().lower()
    path = PRESET_DIRECTORY / f'{cleaned}{PRESET_SUFFIX}'
    if not cleaned or not path.is_file():
        raise UnknownScenario(f"Unknown scenario '{name}', choose one of {', '.join(scenario_names())}")
    return path


def load_scenario(name: str, seed: Optional[int] = None,
                  overrides: Optional[Mapping[str, Any]] = None) -> WorldConfig:
    """Preset ``name`` on top of the default world, then ``overrides`` and ``seed``."""
    values = {key: value for key, value in dotenv_values(scenario_path(name)).items() if value is not None}
    config = WorldConfig().with_overrides(values)
    if overrides:
        config = config.with_overrides(overrides)
    if seed is not None:
        config = config.with_overrides({'seed': seed})
    return config.ensure_valid()
