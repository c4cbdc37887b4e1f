"""
Configuration Settings for CondenseNetV2 SFR

Centralized configuration management: runtime settings from the environment,
logging setup, and the run-config loader used by the command-line interface.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml

from src.condensenet import NetworkConfig, available_presets, preset_config
from src.exceptions import ConfigError
from src.trainer import TrainConfig

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE_NAME = "cnv2.log"
RUN_SECTIONS = ("network", "preset", "training", "dataset")


@dataclass
class RuntimeConfig:
    """Parallelism and reproducibility settings."""
    threads: int
    seed: int
    deterministic: bool  # single-threaded data path


@dataclass
class OutputConfig:
    """Where runs write their artifacts and how loudly they log."""
    output_directory: str
    log_level: str
    log_to_file: bool


class ConfigManager:
    """Manages runtime configuration for training, compilation and analysis."""

    def __init__(self, config_file: Optional[str] = None):
        """
        Initialize configuration manager.

        Args:
            config_file: Optional run-config file attached for reporting
        """
        self.config_file = config_file
        self._load_config()

    def _load_config(self):
        """Load configuration from environment variables and defaults."""
        self.runtime = RuntimeConfig(
            threads=int(os.getenv('CNV2_THREADS', '1')),
            seed=int(os.getenv('CNV2_SEED', '0')),
            deterministic=os.getenv('CNV2_DETERMINISTIC', 'true').lower() == 'true'
        )

        self.output = OutputConfig(
            output_directory=os.getenv('CNV2_OUTPUT_DIR', './runs'),
            log_level=os.getenv('CNV2_LOG_LEVEL', 'INFO').upper(),
            log_to_file=os.getenv('CNV2_LOG_TO_FILE', 'true').lower() == 'true'
        )

    def to_dict(self) -> Dict[str, Any]:
        """Convert configuration to dictionary."""
        return {
            'runtime': asdict(self.runtime),
            'output': asdict(self.output)
        }

    def validate_config(self) -> List[str]:
        """Validate configuration and return any errors."""
        errors = []

        if self.runtime.threads < 1:
            errors.append("CNV2_THREADS must be at least 1")

        if self.runtime.seed < 0:
            errors.append("CNV2_SEED must be non-negative")

        valid_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
        if self.output.log_level not in valid_levels:
            errors.append(f"CNV2_LOG_LEVEL must be one of: {valid_levels}")

        output_path = Path(self.output.output_directory)
        if output_path.exists() and not output_path.is_dir():
            errors.append(f"Output path is not a directory: {output_path}")

        return errors

    def worker_count(self, requested: Optional[int] = None) -> int:
        """Workers to use: the request capped by CNV2_THREADS, one when deterministic."""
        if self.runtime.deterministic and requested is None:
            return 1
        cap = max(self.runtime.threads, 1)
        return max(1, min(requested or cap, cap))

    def print_config(self):
        """Print current configuration in a readable format."""

        print("\n" + "=" * 50)
        print("🔧 CONDENSENETV2 SFR CONFIG")
        print("=" * 50)

        print(f"\n⚙️  Runtime:")
        print(f"   Threads: {self.runtime.threads}")
        print(f"   Seed: {self.runtime.seed}")
        print(f"   Deterministic: {'Yes' if self.runtime.deterministic else 'No'}")

        print(f"\n📁 Output Settings:")
        print(f"   Directory: {self.output.output_directory}")
        print(f"   Log Level: {self.output.log_level}")
        print(f"   Log File: {'Yes' if self.output.log_to_file else 'No'}")

        print(f"\n🧱 Network Presets: {', '.join(available_presets())}")
        print(f"🏃 Run Presets: {', '.join(sorted(RUN_PRESETS))}")

        print("=" * 50 + "\n")


def configure_logging(level: Union[str, int] = "INFO",
                      log_file: Optional[Union[str, Path]] = None) -> Optional[logging.FileHandler]:
    """
    Set up root logging: a stderr handler (once) and optionally a log file.

    Returns:
        The file handler that was added, so callers can close it when the run ends
    """
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(format=LOG_FORMAT, handlers=[logging.StreamHandler()])
    root.setLevel(level)

    if log_file is None:
        return None
    log_file = Path(log_file).resolve()
    log_file.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(log_file)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    return handler


def log_file_for(output_dir: Union[str, Path]) -> Path:
    return Path(output_dir) / "logs" / LOG_FILE_NAME


# ---------------------------------------------------------------------------
# Run configs
# ---------------------------------------------------------------------------

@dataclass
class RunSpec:
    """Everything one CLI invocation needs: what to build, how to train, where to write."""
    command: str
    config_path: Optional[Path]
    output_dir: Path
    seed: int
    network: NetworkConfig
    training: TrainConfig = field(default_factory=TrainConfig)
    dataset: Optional[Dict[str, Any]] = None
    overrides: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        """Run config in the file format :func:`load_run_file` reads back."""
        data: Dict[str, Any] = {"network": self.network.to_dict(), "training": self.training.to_dict()}
        if self.dataset is not None:
            data["dataset"] = dict(self.dataset)
        return data

    def default_dataset(self) -> Dict[str, Any]:
        """Dataset section, falling back to synthetic blobs shaped like the network input."""
        if self.dataset is not None:
            return dict(self.dataset)
        return {
            "kind": "synthetic_blobs",
            "count": 200,
            "resolution": self.network.input_resolution,
            "num_classes": self.network.num_classes,
            "channels": self.network.in_channels,
        }


def load_run_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse a JSON or YAML (.yaml / .yml) config file into a mapping."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping, got {type(data).__name__}")
    return data


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply ``section.key=value`` overrides to a run-config mapping.

    Values are parsed as YAML scalars, so ``training.epochs=5`` sets an int and
    ``network.use_sfr=false`` a bool.
    """
    data = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse override value in {item!r}: {e}") from e
        target = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = target.get(part)
            if node is None:
                node = target[part] = {}
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-mapping at '{part}'")
            target = node
        target[parts[-1]] = value
    return data


def is_run_config(data: Dict[str, Any]) -> bool:
    return bool(set(data) & set(RUN_SECTIONS)) and "blocks" not in data


def build_run_spec(data: Dict[str, Any], command: str, config_path: Optional[Union[str, Path]] = None,
                   output_dir: Optional[Union[str, Path]] = None, seed: Optional[int] = None,
                   overrides: Sequence[str] = ()) -> RunSpec:
    """
    Turn a bare network config or a sectioned run config into a validated RunSpec.

    Raises:
        ConfigError: on unknown sections or keys, or an invalid network / training config
    """
    if overrides:
        if "preset" in data and any(o.startswith("network.") for o in overrides):
            data = dict(data)
            data["network"] = preset_config(str(data.pop("preset"))).to_dict()
        data = apply_overrides(data, overrides)
    if is_run_config(data):
        unknown = set(data) - set(RUN_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown run config sections: {sorted(unknown)}")
        if "network" in data and "preset" in data:
            raise ConfigError("give either 'network' or 'preset', not both")
        if "preset" in data:
            network = preset_config(str(data["preset"]))
        elif "network" in data:
            network = NetworkConfig.from_dict(data["network"])
        else:
            raise ConfigError("run config needs a 'network' or 'preset' section")
        training_data = dict(data.get("training") or {})
        dataset = data.get("dataset")
    else:
        network = NetworkConfig.from_dict(data)
        training_data = {}
        dataset = None

    network.check()
    if dataset is not None and not isinstance(dataset, dict):
        raise ConfigError("'dataset' section must be a mapping")

    manager = get_config()
    run_seed = manager.runtime.seed if seed is None else seed
    training_data.setdefault("seed", run_seed)
    training = TrainConfig.from_dict(training_data)

    out = Path(output_dir if output_dir is not None else manager.output.output_directory)
    return RunSpec(command, Path(config_path) if config_path else None, out, run_seed, network, training,
                   dataset, list(overrides))


def load_run_spec(command: str, config: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                  output_dir: Optional[Union[str, Path]] = None, seed: Optional[int] = None,
                  overrides: Sequence[str] = ()) -> RunSpec:
    """Resolve ``--config`` (file) or ``--preset`` (network or run preset name) into a RunSpec."""
    if config is not None and preset is not None:
        raise ConfigError("give either --config or --preset, not both")
    if config is not None:
        data = load_run_file(config)
    elif preset is not None:
        data = load_preset(preset)
    else:
        raise ConfigError("a --config file or --preset name is required")
    return build_run_spec(data, command, config, output_dir, seed, overrides)


# Pre-configured run setups
class PresetConfigs:
    """Pre-configured run setups for common use cases."""

    @staticmethod
    def desk_learning_preset() -> Dict[str, Any]:
        """Toy network on the separable synthetic task; learns in well under five minutes."""
        return {
            'preset': 'toy',
            'training': {
                'epochs': 30,
                'batch_size': 32,
                'lr': 0.1
            },
            'dataset': {
                'kind': 'synthetic_blobs',
                'count': 200,
                'resolution': 8,
                'num_classes': 2
            }
        }

    @staticmethod
    def cifar10_preset() -> Dict[str, Any]:
        """CIFAR-10 model on the extracted binary batches under ./data."""
        return {
            'preset': 'cnv2-cifar',
            'training': {
                'epochs': 300,
                'batch_size': 64,
                'lr': 0.1,
                'weight_decay': 1e-4,
                'workers': 1
            },
            'dataset': {
                'kind': 'cifar10_binary',
                'path': './data/cifar-10-batches-bin',
                'augment': True
            }
        }

    @staticmethod
    def cifar100_preset() -> Dict[str, Any]:
        """CIFAR-100 model on the extracted binary files under ./data."""
        return {
            'preset': 'cnv2-cifar100',
            'training': {
                'epochs': 300,
                'batch_size': 64,
                'lr': 0.1,
                'weight_decay': 1e-4,
                'workers': 1
            },
            'dataset': {
                'kind': 'cifar100_binary',
                'path': './data/cifar-100-binary',
                'augment': True
            }
        }


RUN_PRESETS = {
    'desk_learning': PresetConfigs.desk_learning_preset,
    'cifar10': PresetConfigs.cifar10_preset,
    'cifar100': PresetConfigs.cifar100_preset,
}


# Global configuration instance
config_manager = None


def get_config() -> ConfigManager:
    """Get global configuration manager instance."""
    global config_manager
    if config_manager is None:
        config_manager = ConfigManager()
    return config_manager


def reset_config() -> None:
    """Drop the cached manager so the next get_config() rereads the environment."""
    global config_manager
    config_manager = None


def load_preset(preset_name: str) -> Dict[str, Any]:
    """Load a run preset, or wrap a network preset name as a run config."""
    if preset_name in RUN_PRESETS:
        return RUN_PRESETS[preset_name]()
    if preset_name in available_presets():
        return {'preset': preset_name}
    raise ConfigError(
        f"unknown preset '{preset_name}' (run presets: {', '.join(sorted(RUN_PRESETS))}; "
        f"network presets: {', '.join(available_presets())})"
    )


if __name__ == "__main__":
    import sys

    try:
        config = ConfigManager()

        print("🔧 Testing Configuration Manager...")
        config.print_config()

        errors = config.validate_config()
        if errors:
            print("❌ Configuration Errors:")
            for error in errors:
                print(f"   • {error}")
        else:
            print("✅ Configuration is valid!")

    except Exception as e:
        print(f"❌ Configuration test failed: {e}")
        sys.exit(1)
