"""
项目配置文件

模块级常量给出所有默认值；运行配置（PipelineConfig）以 JSON 文件描述，
加载时逐层校验，未知键或类型错误一律拒绝。
"""
import os
import copy
import json
import hashlib
import logging
from pathlib import Path
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from errors import ConfigError

# 项目根目录
PROJECT_ROOT = Path(__file__).parent.absolute()

# 内置配置目录（--config demo / --config acceptance）
BUNDLED_CONFIG_DIR = PROJECT_ROOT / "configs"

# 输出目录结构
DEFAULT_OUT_DIR = PROJECT_ROOT / "outputs"
LOG_SUBDIR = "logs"
MODEL_SUBDIR = "models"
PLOT_SUBDIR = "plots"
RUN_LOG_NAME = "run.log"
MANIFEST_NAME = "run_manifest.json"

# 配置文件版本
SCHEMA_VERSION = 1

# 环境变量覆盖前缀
ENV_PREFIX = "CRYOCARE_"

# 倾转采集默认值（常规 cryo-ET 方案，并非论文给出的数值）
DEFAULT_TILT_MIN = -60.0
DEFAULT_TILT_MAX = 60.0
DEFAULT_TILT_STEP = 2.0

# 网络与训练默认值
DEFAULT_UNET_DEPTH = 2
DEFAULT_UNET_KERNEL = 3
DEFAULT_BASE_CHANNELS_2D = 16
DEFAULT_BASE_CHANNELS_3D = 8
DEFAULT_LEARNING_RATE = 4e-4
DEFAULT_ADAM_BETA1 = 0.9
DEFAULT_ADAM_BETA2 = 0.999
DEFAULT_ADAM_EPS = 1e-7
DEFAULT_VALIDATION_FRACTION = 0.10

# 评估默认值
DEFAULT_SHELL_WIDTH = 1.0
DEFAULT_CONNECTIVITY = 26
OTSU_BINS = 256

# 日志配置
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVEL = logging.INFO

SCHEMES = ("p2p-ip", "p2p-tap", "p2p-df", "t2t-eoa", "t2t-df")

# 默认运行配置；同时作为校验用的 schema（键集合与值类型）
DEFAULT_PIPELINE_CONFIG: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "scheme": "t2t-df",
    "seed": 42,
    "threads": 1,
    "input_movies": None,
    "out_dir": str(DEFAULT_OUT_DIR),
    "phantom": {
        "shape": [32, 32, 32],
        "n_membranes": 2,
        "n_filaments": 3,
        "n_blobs": 12,
        "blob_radius_range": [2.0, 3.0],
        "density_levels": [0.2, 1.0, 0.8, 1.2],
    },
    "acquisition": {
        "angle_min": DEFAULT_TILT_MIN,
        "angle_max": DEFAULT_TILT_MAX,
        "angle_step": DEFAULT_TILT_STEP,
        "order": "sequential",
        "frames_per_tilt": 4,
        "electrons_per_pixel_per_frame": 2.0,
        "gaussian_readout_sigma": 0.5,
        "drift_per_frame": [0.3, -0.2],
        "noise_free": False,
    },
    "unet_2d": {
        "depth": DEFAULT_UNET_DEPTH,
        "kernel": DEFAULT_UNET_KERNEL,
        "base_channels": DEFAULT_BASE_CHANNELS_2D,
    },
    "unet_3d": {
        "depth": DEFAULT_UNET_DEPTH,
        "kernel": DEFAULT_UNET_KERNEL,
        "base_channels": DEFAULT_BASE_CHANNELS_3D,
    },
    "train": {
        "epochs": 30,
        "batch_size": 16,
        "learning_rate": DEFAULT_LEARNING_RATE,
        "beta1": DEFAULT_ADAM_BETA1,
        "beta2": DEFAULT_ADAM_BETA2,
        "eps": DEFAULT_ADAM_EPS,
        "validation_fraction": DEFAULT_VALIDATION_FRACTION,
    },
    "patches": {
        "count_2d": 1000,
        "size_2d": [128, 128],
        "count_3d": 1200,
        "size_3d": [64, 64, 64],
    },
    "reconstruction": {
        "shape": None,
        "window": "hann",
        "bin_factor": 1,
        "predict_tile": None,
    },
    "metrics": {
        "shell_width": DEFAULT_SHELL_WIDTH,
    },
    "baselines": {
        "median_radius": 1,
        "nad_steps": 20,
        "nad_dt": 0.1,
        "nad_lambda": None,
    },
    "downstream": {
        "enabled": True,
        "size_thresholds": [0, 5, 10, 20, 40],
        "connectivity": DEFAULT_CONNECTIVITY,
        "train_fraction": 0.35,
        "split_axis": 2,
        "epochs": 20,
        "patch_count": 200,
        "patch_size": [16, 16, 16],
        "base_channels": DEFAULT_BASE_CHANNELS_3D,
    },
}

# 允许为 null 的键：其值可以是 None 或下列类型
_NULLABLE_TYPES = {
    "input_movies": (str,),
    "reconstruction.shape": (list,),
    "reconstruction.predict_tile": (list,),
    "baselines.nad_lambda": (int, float),
}


@dataclass
class PipelineConfig:
    """一次运行的完整配置"""
    data: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULT_PIPELINE_CONFIG))
    source: Optional[str] = None

    def section(self, name: str) -> Dict[str, Any]:
        return self.data[name]

    @property
    def scheme(self) -> str:
        return self.data["scheme"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def threads(self) -> int:
        return int(self.data["threads"])

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2, ensure_ascii=False)


def setup_logging(log_dir: Optional[Path] = None, level: int = LOG_LEVEL):
    """设置日志配置"""
    handlers = [logging.StreamHandler()]
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / RUN_LOG_NAME, encoding='utf-8'))

    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )

    return logging.getLogger(__name__)


def ensure_directories(out_dir: Path):
    """确保所有输出目录存在"""
    out_dir = Path(out_dir)
    directories = [out_dir, out_dir / LOG_SUBDIR, out_dir / MODEL_SUBDIR, out_dir / PLOT_SUBDIR]
    for directory in directories:
        directory.mkdir(parents=True, exist_ok=True)


def resolve_config_path(name_or_path: str) -> Path:
    """解析 --config 参数：内置名称或文件路径"""
    candidate = Path(name_or_path)
    if candidate.exists():
        return candidate
    bundled = BUNDLED_CONFIG_DIR / f"{name_or_path}.json"
    if bundled.exists():
        return bundled
    raise ConfigError(f"配置文件不存在: {name_or_path}")


def _check_value(path: str, value: Any, default: Any):
    """按默认值的类型校验单个配置值"""
    if value is None:
        if default is None or path in _NULLABLE_TYPES:
            return
        raise ConfigError(f"配置项 {path} 不允许为 null")

    if default is None:
        allowed = _NULLABLE_TYPES.get(path)
        if allowed is None:
            raise ConfigError(f"配置项 {path} 没有类型定义")
        if isinstance(value, bool) or not isinstance(value, allowed):
            raise ConfigError(f"配置项 {path} 类型错误: {type(value).__name__}")
        return

    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))

    if not ok:
        raise ConfigError(
            f"配置项 {path} 类型错误: 期望 {type(default).__name__}，实际 {type(value).__name__}"
        )


def _merge_checked(base: Dict[str, Any], override: Dict[str, Any], prefix: str = ""):
    """把 override 合并进 base，遇到未知键或类型错误时抛出 ConfigError"""
    if not isinstance(override, dict):
        raise ConfigError(f"配置节 {prefix or '<root>'} 必须是对象")

    for key, value in override.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in base:
            raise ConfigError(f"未知配置项: {path}")
        default = base[key]
        if isinstance(default, dict):
            _merge_checked(default, value, path)
        else:
            _check_value(path, value, DEFAULT_PIPELINE_CONFIG_FLAT.get(path, default))
            base[key] = value


def _flatten(d: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in d.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            flat.update(_flatten(value, path))
        else:
            flat[path] = value
    return flat


DEFAULT_PIPELINE_CONFIG_FLAT = _flatten(DEFAULT_PIPELINE_CONFIG)


def _validate_semantics(data: Dict[str, Any]):
    """校验跨字段约束"""
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"不支持的配置版本: {data['schema_version']} (当前 {SCHEMA_VERSION})")
    if data["scheme"] not in SCHEMES:
        raise ConfigError(f"未知配对方案: {data['scheme']}，可选: {', '.join(SCHEMES)}")
    if data["threads"] < 1:
        raise ConfigError("threads 必须 ≥ 1")
    frac = data["train"]["validation_fraction"]
    if not 0.0 < frac < 1.0:
        raise ConfigError(f"validation_fraction 必须位于 (0, 1): {frac}")
    if data["acquisition"]["order"] not in ("sequential", "dose_symmetric"):
        raise ConfigError(f"未知采集顺序: {data['acquisition']['order']}")
    if data["reconstruction"]["window"] not in ("none", "hann"):
        raise ConfigError(f"未知滤波窗: {data['reconstruction']['window']}")
    if data["downstream"]["connectivity"] not in (6, 18, 26):
        raise ConfigError(f"连通性必须为 6/18/26: {data['downstream']['connectivity']}")
    if len(data["phantom"]["shape"]) != 3:
        raise ConfigError("phantom.shape 必须是三维")


def apply_env_overrides(data: Dict[str, Any]):
    """应用 CRYOCARE_* 环境变量覆盖"""
    env_map = {
        "SEED": ("seed", int),
        "THREADS": ("threads", int),
        "SCHEME": ("scheme", str),
        "OUT_DIR": ("out_dir", str),
    }
    for suffix, (key, cast) in env_map.items():
        raw = os.getenv(ENV_PREFIX + suffix)
        if raw is None or raw == "":
            continue
        try:
            data[key] = cast(raw)
        except ValueError:
            raise ConfigError(f"环境变量 {ENV_PREFIX}{suffix} 无法解析: {raw}")


def load_pipeline_config(name_or_path: Optional[str] = None,
                         overrides: Optional[Dict[str, Any]] = None,
                         use_env: bool = True) -> PipelineConfig:
    """
    加载并校验运行配置

    优先级：默认值 < 配置文件 < 环境变量 < overrides（命令行参数）
    """
    data = copy.deepcopy(DEFAULT_PIPELINE_CONFIG)
    source = None

    if name_or_path:
        path = resolve_config_path(name_or_path)
        source = str(path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件 JSON 解析失败: {path}: {e}")
        _merge_checked(data, document)

    if use_env:
        apply_env_overrides(data)

    if overrides:
        _merge_checked(data, {k: v for k, v in overrides.items() if v is not None})

    _validate_semantics(data)
    return PipelineConfig(data=data, source=source)


def config_hash(cfg: PipelineConfig) -> str:
    """配置内容的 SHA-256（键排序后的规范 JSON）"""
    canonical = json.dumps(cfg.data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
