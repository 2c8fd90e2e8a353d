from typing import Any, Dict, Mapping, Optional
import logging
import os
import sys

from markerslam.config import config
from markerslam.mapping.world import WorldMap
from markerslam.pipeline.state import PipelineParams, load_params_file
from markerslam.pipeline.system import SlamSystem

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


class SystemBuilder:
    def __init__(self):
        self.system_instance: Optional[SlamSystem] = None
        self.profile = 'sequential'
        self.params: Optional[PipelineParams] = None

    def resolve_profile(self, provided: Optional[str] = None) -> str:
        if provided:
            cleaned = provided.strip().lower()
            if cleaned:
                return cleaned

        profile_from_os = os.environ.get('MARKERSLAM_PROFILE', '').strip().lower()
        if profile_from_os:
            return profile_from_os

        return 'sequential'

    def apply_configuration(self, profile: str, config_file: Optional[str] = None,
                            overrides: Optional[Mapping[str, Any]] = None) -> PipelineParams:
        settings_class = config.get(profile)
        if settings_class is None:
            settings_class = config.get('default')
        params = PipelineParams.from_settings(settings_class)
        if config_file:
            params = load_params_file(config_file, params)
        if overrides:
            params = params.with_overrides(overrides)
        return params.ensure_valid()

    def configure_logging(self, level: Optional[str] = None) -> None:
        level_name = (level or config['default'].LOG_LEVEL).strip().upper()
        package_logger = logging.getLogger('markerslam')
        if not package_logger.handlers:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(logging.Formatter(LOG_FORMAT))
            package_logger.addHandler(handler)
        package_logger.setLevel(getattr(logging, level_name, logging.WARNING))

    def build(self, profile_override: Optional[str] = None, config_file: Optional[str] = None,
              overrides: Optional[Mapping[str, Any]] = None, marker_sides: Optional[Dict[int, float]] = None,
              world: Optional[WorldMap] = None, frozen: bool = False) -> SlamSystem:
        self.profile = self.resolve_profile(profile_override)
        self.params = self.apply_configuration(self.profile, config_file, overrides)

        self.system_instance = SlamSystem(self.params, marker_sides, world=world, frozen=frozen)
        return self.system_instance


def initialize_slam_system(profile: Optional[str] = None, config_file: Optional[str] = None,
                           overrides: Optional[Mapping[str, Any]] = None,
                           marker_sides: Optional[Dict[int, float]] = None, world: Optional[WorldMap] = None,
                           frozen: bool = False) -> SlamSystem:
    builder = SystemBuilder()
    return builder.build(profile, config_file, overrides, marker_sides, world, frozen)


create_system = initialize_slam_system
