from typing import Dict, Type
import os
from dotenv import load_dotenv

load_dotenv()


def _env_float(name: str, default: float) -> float:
    return float(os.environ.get(name, default))


def _env_int(name: str, default: int) -> int:
    return int(os.environ.get(name, default))


def _env_bool(name: str, default: bool) -> bool:
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() in ('1', 'true', 'yes', 'on')


class PipelineSettings:
    TAU_D: int = _env_int('MARKERSLAM_TAU_D', 50)
    TAU_M: float = _env_float('MARKERSLAM_TAU_M', 5.0)
    TAU_B: float = _env_float('MARKERSLAM_TAU_B', 0.1)
    TAU_K: float = _env_float('MARKERSLAM_TAU_K', 80.0)
    TAU_C: float = _env_float('MARKERSLAM_TAU_C', 80.0)
    RATIO_TEST: float = _env_float('MARKERSLAM_RATIO_TEST', 0.8)
    VIEW_ANGLE_MAX_DEG: float = _env_float('MARKERSLAM_VIEW_ANGLE_MAX_DEG', 60.0)
    SEARCH_RADIUS_PX: float = _env_float('MARKERSLAM_SEARCH_RADIUS_PX', 15.0)
    INIT_ATTEMPTS: int = _env_int('MARKERSLAM_INIT_ATTEMPTS', 10)
    HUBER_ALPHA: float = _env_float('MARKERSLAM_HUBER_ALPHA', 2.45)
    OUTLIER_CHI2: float = _env_float('MARKERSLAM_OUTLIER_CHI2', 5.99)
    AMBIGUITY_RATIO: float = _env_float('MARKERSLAM_AMBIGUITY_RATIO', 3.0)
    MIN_BASELINE_DEG: float = _env_float('MARKERSLAM_MIN_BASELINE_DEG', 2.0)
    EPIPOLAR_PX: float = _env_float('MARKERSLAM_EPIPOLAR_PX', 2.0)
    LOOP_MIN_INLIERS: int = _env_int('MARKERSLAM_LOOP_MIN_INLIERS', 30)
    LOOP_KEYFRAME_GAP: int = _env_int('MARKERSLAM_LOOP_KEYFRAME_GAP', 10)
    MIN_TRACKING_POINTS: int = _env_int('MARKERSLAM_MIN_TRACKING_POINTS', 15)
    MAX_ITERS_TRACKING: int = _env_int('MARKERSLAM_MAX_ITERS_TRACKING', 10)
    MAX_ITERS_LOCAL: int = _env_int('MARKERSLAM_MAX_ITERS_LOCAL', 5)
    MAX_ITERS_GLOBAL: int = _env_int('MARKERSLAM_MAX_ITERS_GLOBAL', 50)
    LM_LAMBDA: float = _env_float('MARKERSLAM_LM_LAMBDA', 1e-4)
    SLOT_BLOCK_CAPACITY: int = _env_int('MARKERSLAM_SLOT_BLOCK_CAPACITY', 4096)
    PYRAMID_ETA: float = _env_float('MARKERSLAM_PYRAMID_ETA', 1.2)
    PYRAMID_LEVELS: int = _env_int('MARKERSLAM_PYRAMID_LEVELS', 8)
    RELOC_MIN_SCORE: float = _env_float('MARKERSLAM_RELOC_MIN_SCORE', 0.05)
    MARKER_SIDE: float = _env_float('MARKERSLAM_MARKER_SIDE', 0.3)
    USE_MARKERS: bool = _env_bool('MARKERSLAM_USE_MARKERS', True)
    USE_KEYPOINTS: bool = _env_bool('MARKERSLAM_USE_KEYPOINTS', True)
    KEYPOINT_LOOP_CLOSURE: bool = _env_bool('MARKERSLAM_KEYPOINT_LOOP_CLOSURE', True)
    MARKER_GATING: bool = _env_bool('MARKERSLAM_MARKER_GATING', True)
    CONCURRENT: bool = False
    LOG_LEVEL: str = os.environ.get('MARKERSLAM_LOG_LEVEL', 'WARNING')


class SequentialSettings(PipelineSettings):
    CONCURRENT: bool = False


class ConcurrentSettings(PipelineSettings):
    CONCURRENT: bool = True


def get_configuration_mapping() -> Dict[str, Type[PipelineSettings]]:
    return {
        'sequential': SequentialSettings,
        'concurrent': ConcurrentSettings,
        'default': SequentialSettings
    }


config = get_configuration_mapping()
