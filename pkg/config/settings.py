"""Run configuration: defaults.json < environment (.env) < --config file < command-line flags."""
import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from services.base_models import ConfigurationError
from services.inverse import InverseSchedule
from services.training import TrainConfig

load_dotenv()

CONFIG_DIR = os.path.dirname(os.path.abspath(__file__))
DEFAULTS_PATH = os.path.join(CONFIG_DIR, "defaults.json")
FUZZY_TERMS_PATH = os.path.join(CONFIG_DIR, "fuzzy_terms.json")

# flag name -> (section, key)
FLAG_KEYS = {
    "seed": ("run", "seed"),
    "topology": ("run", "topology"),
    "data": ("run", "data"),
    "out_dir": ("run", "out_dir"),
    "threads": ("run", "threads"),
    "samples": ("run", "samples"),
    "noise": ("run", "noise"),
    "epochs": ("train", "epochs"),
    "folds": ("train", "folds"),
    "t_max": ("train", "t_max"),
    "lambda_soft": ("inverse", "lambda_soft"),
    "steps": ("inverse", "steps"),
}

ENV_KEYS = {
    "FHM_SEED": ("run", "seed", int),
    "FHM_OUT_DIR": ("run", "out_dir", str),
    "FHM_THREADS": ("run", "threads", int),
}

RUN_KEYS = {"seed", "topology", "data", "out_dir", "threads", "samples", "noise"}


@dataclass(frozen=True)
class RunConfig:
    topology: str
    seed: int
    out_dir: str
    threads: int
    data: Optional[str]
    samples: Optional[int]
    noise: Optional[float]
    train: TrainConfig
    inverse: InverseSchedule

    def identity(self) -> Dict[str, Any]:
        """Everything that shapes the artifacts; output location and thread count excluded."""
        train = asdict(self.train)
        train.pop("threads")
        return {
            "topology": self.topology,
            "seed": self.seed,
            "data": self.data,
            "samples": self.samples,
            "noise": self.noise,
            "train": train,
            "inverse": asdict(self.inverse),
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    @property
    def topology_label(self) -> str:
        return os.path.splitext(os.path.basename(self.topology))[0]

    def artifact_dir(self) -> str:
        return os.path.join(self.out_dir, f"{self.topology_label}-{self.config_hash()}")


def _read_json(path: str) -> Dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}") from None


def _merge(layers: Dict, update: Dict, source: str) -> None:
    for section, values in update.items():
        if section not in layers or not isinstance(values, dict):
            raise ConfigurationError(f"{source}: unknown section '{section}'")
        layers[section].update(values)


def load_run_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    layers = copy.deepcopy(_read_json(DEFAULTS_PATH))
    for env_name, (section, key, cast) in ENV_KEYS.items():
        raw = os.getenv(env_name)
        if raw:
            try:
                layers[section][key] = cast(raw)
            except ValueError:
                raise ConfigurationError(f"{env_name}={raw!r} is not a valid {cast.__name__}") from None
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigurationError(f"config file {config_path} does not exist")
        _merge(layers, _read_json(config_path), config_path)
    for flag, value in (overrides or {}).items():
        if value is None:
            continue
        if flag not in FLAG_KEYS:
            raise ConfigurationError(f"unknown override '{flag}'")
        section, key = FLAG_KEYS[flag]
        layers[section][key] = value

    run = layers["run"]
    unknown = set(run) - RUN_KEYS
    if unknown:
        raise ConfigurationError(f"unknown run settings: {sorted(unknown)}")
    if run.get("seed") is None:
        raise ConfigurationError("a seed is mandatory (--seed, FHM_SEED or the config file)")
    seed = int(run["seed"])
    threads = int(run.get("threads", 1))
    try:
        train = TrainConfig(**layers["train"], seed=seed, threads=threads)
        inverse = InverseSchedule(**layers["inverse"], seed=seed)
    except TypeError as e:
        raise ConfigurationError(f"invalid configuration: {e}") from None
    return RunConfig(topology=str(run["topology"]), seed=seed, out_dir=str(run.get("out_dir", "runs")),
                     threads=threads, data=run.get("data"), samples=run.get("samples"),
                     noise=run.get("noise"), train=train, inverse=inverse)


def load_fuzzy_terms(path: Optional[str] = None) -> Dict[str, float]:
    return {term: float(value) for term, value in _read_json(path or FUZZY_TERMS_PATH).items()}
