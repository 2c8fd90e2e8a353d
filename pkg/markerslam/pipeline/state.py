from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, Union

from dotenv import dotenv_values

from markerslam.config import PipelineSettings, config
from markerslam.errors import InvalidConfig
from markerslam.geometry import Pose, PyramidConfig
from markerslam.models import Frame, PipelineMode

_TRUE_WORDS = ('1', 'true', 'yes', 'on')
_FALSE_WORDS = ('0', 'false', 'no', 'off')


@dataclass(frozen=True)
class PipelineParams:
    tau_d: int = 50
    tau_m: float = 5.0
    tau_b: float = 0.1
    tau_k: float = 80.0
    tau_c: float = 80.0
    ratio_test: float = 0.8
    view_angle_max_deg: float = 60.0
    search_radius_px: float = 15.0
    init_attempts: int = 10
    huber_alpha: float = 2.45
    outlier_chi2: float = 5.99
    ambiguity_ratio: float = 3.0
    min_baseline_deg: float = 2.0
    epipolar_px: float = 2.0
    loop_min_inliers: int = 30
    loop_keyframe_gap: int = 10
    min_tracking_points: int = 15
    max_iters_tracking: int = 10
    max_iters_local: int = 5
    max_iters_global: int = 50
    lm_lambda: float = 1e-4
    slot_block_capacity: int = 4096
    pyramid_eta: float = 1.2
    pyramid_levels: int = 8
    reloc_min_score: float = 0.05
    marker_side: float = 0.3
    use_markers: bool = True
    use_keypoints: bool = True
    keypoint_loop_closure: bool = True
    marker_gating: bool = True
    concurrent: bool = False

    @classmethod
    def from_settings(cls, settings: Optional[Type[PipelineSettings]] = None) -> 'PipelineParams':
        settings = settings or config['default']
        values = {}
        for item in fields(cls):
            attribute = item.name.upper()
            if hasattr(settings, attribute):
                values[item.name] = getattr(settings, attribute)
        return cls(**values)

    @property
    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(self.pyramid_eta, self.pyramid_levels)

    def with_overrides(self, overrides: Mapping[str, Any]) -> 'PipelineParams':
        known = {item.name: item.type for item in fields(self)}
        parsed: Dict[str, Any] = {}
        for key, raw in overrides.items():
            name = key.strip().lower()
            if name not in known:
                raise InvalidConfig(f"Unknown parameter '{key}'")
            parsed[name] = coerce_setting(name, raw, getattr(self, name))
        return replace(self, **parsed)

    def validate(self) -> Tuple[bool, Optional[str]]:
        if not self.use_markers and not self.use_keypoints:
            return False, "At least one of markers or keypoints must be enabled"
        for name in ('tau_d', 'tau_m', 'tau_b', 'ratio_test', 'view_angle_max_deg', 'search_radius_px',
                     'huber_alpha', 'outlier_chi2', 'ambiguity_ratio', 'min_baseline_deg', 'epipolar_px',
                     'lm_lambda', 'reloc_min_score', 'marker_side'):
            if not getattr(self, name) > 0:
                return False, f"{name} must be positive"
        for name in ('tau_k', 'tau_c'):
            if not 0.0 < getattr(self, name) <= 100.0:
                return False, f"{name} must be a percentage in (0, 100]"
        if self.tau_m < 1:
            return False, "tau_m must be at least 1"
        if self.ratio_test > 1.0:
            return False, "ratio_test must not exceed 1"
        for name in ('init_attempts', 'loop_min_inliers', 'min_tracking_points', 'max_iters_tracking',
                     'max_iters_local', 'max_iters_global', 'slot_block_capacity', 'pyramid_levels'):
            if getattr(self, name) < 1:
                return False, f"{name} must be at least 1"
        if self.loop_keyframe_gap < 0:
            return False, "loop_keyframe_gap cannot be negative"
        if not self.pyramid_eta > 1.0:
            return False, "pyramid_eta must exceed 1"
        return True, None

    def ensure_valid(self) -> 'PipelineParams':
        ok, reason = self.validate()
        if not ok:
            raise InvalidConfig(reason)
        return self


def coerce_setting(name: str, raw: Any, current: Any) -> Any:
    """Parses ``raw`` into the type of ``current``."""
    if isinstance(current, str):
        return str(raw).strip()
    if isinstance(current, bool):
        if isinstance(raw, bool):
            return raw
        word = str(raw).strip().lower()
        if word in _TRUE_WORDS:
            return True
        if word in _FALSE_WORDS:
            return False
        raise InvalidConfig(f"Parameter '{name}' expects a boolean, got '{raw}'")
    try:
        if isinstance(current, int):
            as_float = float(raw)
            if not as_float.is_integer():
                raise ValueError(raw)
            return int(as_float)
        return float(raw)
    except (TypeError, ValueError):
        raise InvalidConfig(f"Parameter '{name}' expects a number, got '{raw}'")


def load_params_file(path: Union[str, Path], base: Optional[PipelineParams] = None) -> PipelineParams:
    """Flat ``key = value`` file on top of ``base`` (environment defaults when omitted)."""
    target = Path(path)
    if not target.is_file():
        raise InvalidConfig(f"Config file {path} does not exist")
    values = {key: value for key, value in dotenv_values(target).items() if value is not None}
    return (base or PipelineParams.from_settings()).with_overrides(values)


@dataclass
class PipelineState:
    params: PipelineParams = field(default_factory=PipelineParams)
    mode: PipelineMode = PipelineMode.UNINITIALIZED
    reference_keyframe: Optional[int] = None
    last_frame: Optional[Frame] = None
    last_pose: Optional[Pose] = None
    previous_pose: Optional[Pose] = None
    last_matched_points: Dict[int, int] = field(default_factory=dict)
    init_frame: Optional[Frame] = None
    init_failures: int = 0
    frozen: bool = False

    def predicted_pose(self) -> Optional[Pose]:
        """Constant-velocity prediction from the last two poses."""
        if self.last_pose is None:
            return None
        if self.previous_pose is None:
            return self.last_pose
        velocity = self.last_pose.compose(self.previous_pose.inverse())
        return velocity.compose(self.last_pose)

    def record_pose(self, pose: Optional[Pose]) -> None:
        self.previous_pose = self.last_pose if pose is not None else None
        self.last_pose = pose

    def reset_motion(self) -> None:
        self.previous_pose = None
        self.last_pose = None
        self.last_matched_points = {}
