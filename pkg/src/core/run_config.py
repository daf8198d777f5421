import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .attribution import METHODS, MethodConfig
from .errors import ConfigError
from .meta_eval import MetaEvalConfig
from .metrics import METRICS, MetricConfig, resolve_metric
from .model_zoo import TrainConfig
from .scene_synth import SceneConfig

logger = logging.getLogger(__name__)

DEFAULT_METHODS = ("occlusion", "lime", "gradcam", "lrp", "deeplift", "random")
DEFAULT_METRICS = ("fe", "irof", "as", "lle", "tki", "rra", "sp", "co", "mprt", "rl")


@dataclass
class RunProfile:
    """Scale profile configuration"""
    name: str
    occlusion_window: Tuple[int, int]
    occlusion_stride: Tuple[int, int]
    dataset_size: int
    eval_samples: int
    meta_samples: int
    k_plans: int
    iterations: int
    description: str


PROFILES = {
    'desk': RunProfile(
        name='desk',
        occlusion_window=(25, 25),
        occlusion_stride=(5, 5),
        dataset_size=2000,
        eval_samples=256,
        meta_samples=128,
        k_plans=5,
        iterations=3,
        description='TinyCNN on 64x64 synthetic scenes, single workstation'
    ),
    'full': RunProfile(
        name='full',
        occlusion_window=(50, 50),
        occlusion_stride=(10, 10),
        dataset_size=2000,
        eval_samples=1024,
        meta_samples=512,
        k_plans=5,
        iterations=3,
        description='Full-scale sample counts and occlusion patches'
    ),
}


@dataclass
class RunConfig:
    """Effective configuration of one CLI invocation"""
    seed: int
    workers: int = 1
    profile: str = "desk"
    out: Optional[str] = None
    dataset: Optional[str] = None
    model: Optional[str] = None
    attributions: Optional[str] = None
    methods: List[str] = field(default_factory=lambda: list(DEFAULT_METHODS))
    metrics: List[str] = field(default_factory=lambda: list(DEFAULT_METRICS))
    dataset_size: int = 2000
    eval_samples: int = 256
    scene: Dict[str, Any] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    method_config: MethodConfig = field(default_factory=MethodConfig)
    metric_config: MetricConfig = field(default_factory=MetricConfig)
    meta: MetaEvalConfig = field(default_factory=MetaEvalConfig)

    @classmethod
    def from_profile(cls, name: str, seed: int) -> "RunConfig":
        if name not in PROFILES:
            raise ConfigError(f"unknown profile '{name}', expected one of {sorted(PROFILES)}")
        profile = PROFILES[name]
        return cls(
            seed=seed,
            profile=name,
            dataset_size=profile.dataset_size,
            eval_samples=profile.eval_samples,
            train=TrainConfig(seed=seed),
            method_config=MethodConfig(occlusion_window=profile.occlusion_window,
                                       occlusion_stride=profile.occlusion_stride),
            meta=MetaEvalConfig(n_samples=profile.meta_samples, k_plans=profile.k_plans,
                                iterations=profile.iterations),
        )

    def scene_config(self) -> SceneConfig:
        try:
            return SceneConfig(**{"seed": self.seed, **self.scene})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid scene configuration: {e}")

    def validate(self) -> "RunConfig":
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown method(s) {unknown}, expected ids from {sorted(METHODS)}")
        for metric_id in self.metrics:
            try:
                resolve_metric(metric_id)
            except KeyError:
                raise ConfigError(f"unknown metric '{metric_id}', expected ids from {sorted(METRICS)} "
                                  f"or irof:<baseline>:<strategy>")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.dataset_size < 1 or self.eval_samples < 1:
            raise ConfigError("dataset_size and eval_samples must be >= 1")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _coerce(current: Any, value: Any) -> Any:
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def merge_overrides(obj: Any, overrides: Dict[str, Any], path: str = "") -> Any:
    """Apply a nested dict of overrides to a dataclass, rejecting unknown keys"""
    known = {f.name for f in fields(obj)}
    changes = {}
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown configuration key '{path}{key}'")
        current = getattr(obj, key)
        if is_dataclass(current) and isinstance(value, dict):
            changes[key] = merge_overrides(current, value, f"{path}{key}.")
        elif key == "scene" and isinstance(value, dict):
            scene_fields = {f.name for f in fields(SceneConfig)}
            bad = sorted(set(value) - scene_fields)
            if bad:
                raise ConfigError(f"unknown configuration key '{path}scene.{bad[0]}'")
            changes[key] = {**current, **value}
        else:
            changes[key] = _coerce(current, value)
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration under '{path or 'root'}': {e}")


def load_config_file(path: Path) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def build_run_config(profile: str, seed: int, flags: Dict[str, Any],
                     config_path: Optional[Path] = None) -> RunConfig:
    """Profile defaults, then explicit flags, then the JSON config file"""
    config = merge_overrides(RunConfig.from_profile(profile, seed), flags)
    if config_path is not None:
        file_overrides = load_config_file(config_path)
        config = merge_overrides(config, file_overrides)
        logger.info(f"Applied {len(file_overrides)} top-level overrides from {config_path}")
    return config.validate()
