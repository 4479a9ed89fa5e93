"""Run configuration: YAML presets, resolution of defaults, seeds and run directories."""
from __future__ import annotations

import copy
import hashlib
import json
import os
import zlib
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .diffusion import TrainConfig
from .errors import ConfigError, DataError
from .metrics import MetricConfig
from .unet import UNetConfig
from .utility import UtilityConfig

SEED_ENV = "TRANSCONV_SEED"
OUT_ENV = "TRANSCONV_OUT"
RESOLVED_NAME = "config.resolved"
RUN_SUBDIRS = ("checkpoints", "samples", "reports", "plots", "logs", "data")
INCOMPLETE = "INCOMPLETE"
HASHED_DIRS = ("data", "checkpoints", "samples", "reports")

SECTIONS = ("name", "seed", "data", "schedule", "unet", "train", "generate", "metrics", "utility", "ablation")

DEFAULTS = {
    "name": "run",
    "seed": 0,
    "data": {"source": "toy", "toy": {"kind": "sines", "n": 200, "length": 64, "channels": 3}},
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "sigma": "beta"},
    "unet": {},
    "train": {},
    "generate": {"count": 1000, "shard_size": 100},
    "metrics": {},
    "utility": {},
    "ablation": {"iterations": 300, "samples": 200},
}

RECIPE_KEYS = ("window_length", "window_step", "from_hz", "to_hz", "take", "take_length", "skip_short",
               "delimiter", "scaler", "eval_fraction", "split_seed")


def list_presets() -> list:
    return sorted(p.name[:-5] for p in resources.files("transconv.presets").iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> dict:
    path = resources.files("transconv.presets") / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return yaml.safe_load(path.read_text())


def load_config(source: str) -> dict:
    """Read a YAML file, or a preset name when no such file exists."""
    p = Path(source)
    if p.is_file():
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {p} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {p} must be a mapping at top level")
        base = raw.pop("preset", None)
        return _merge(load_preset(base), raw) if base else raw
    return load_preset(source)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(cls, given: dict, section: str) -> None:
    unknown = set(given) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def _plain(v):
    """Convert tuples and numpy scalars into YAML-friendly values."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def data_shape(cfg: dict) -> tuple:
    """``(channels, length)`` implied by the data section."""
    data = cfg["data"]
    src = data.get("source")
    if src == "toy":
        toy = data["toy"]
        return int(toy["channels"]), int(toy["length"])
    if src == "csv":
        recipe = data.get("recipe", {})
        chans = data.get("channels")
        if not chans or "window_length" not in recipe:
            raise ConfigError("csv data needs 'channels' and recipe.window_length")
        return len(chans), int(recipe["window_length"])
    if src == "manifest":
        if "channels" in data and "length" in data:
            return int(data["channels"]), int(data["length"])
        from .dataio import load_dataset
        m = load_dataset(data["manifest"]).manifest
        return len(m.channel_names), m.window_length
    raise ConfigError(f"data.source must be toy, csv or manifest, got {src!r}")


def resolve(raw: dict, seed_override: Optional[int] = None) -> dict:
    """Fill every default so the result fully describes the run."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - set(SECTIONS) - {"preset"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, {k: v for k, v in raw.items() if k not in ("preset", "data")})
    if "data" in raw:
        cfg["data"] = copy.deepcopy(raw["data"])
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    if not isinstance(cfg["seed"], int):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")

    data = cfg["data"]
    if data.get("source") == "toy":
        toy = data.setdefault("toy", {})
        for k, v in DEFAULTS["data"]["toy"].items():
            toy.setdefault(k, v)
        toy.setdefault("eval_fraction", 0.2)
        toy.setdefault("seed", derive_seed(cfg["seed"], "data"))
    elif data.get("source") == "csv":
        recipe = data.setdefault("recipe", {})
        bad = set(recipe) - set(RECIPE_KEYS)
        if bad:
            raise ConfigError(f"unknown keys in [data.recipe]: {sorted(bad)}")
        from .dataio import Recipe
        recipe.update({k: v for k, v in vars(Recipe(**recipe)).items()})

    channels, length = data_shape(cfg)
    unet = dict(cfg["unet"])
    _check_keys(UNetConfig, unet, "unet")
    unet.setdefault("in_channels", channels)
    unet.setdefault("length", length)
    if (unet["in_channels"], unet["length"]) != (channels, length):
        raise ConfigError(f"unet shape ({unet['in_channels']}, {unet['length']}) disagrees with data ({channels}, {length})")
    cfg["unet"] = UNetConfig.from_dict(unet).to_dict()

    from .schedule import schedule_from_config
    sched = cfg["schedule"]
    unknown = set(sched) - {"T", "beta_start", "beta_end", "sigma"}
    if unknown:
        raise ConfigError(f"unknown keys in [schedule]: {sorted(unknown)}")
    cfg["schedule"] = schedule_from_config(sched).to_dict()

    train = dict(cfg["train"])
    _check_keys(TrainConfig, train, "train")
    train.setdefault("seed", derive_seed(cfg["seed"], "train"))
    cfg["train"] = TrainConfig(**train).to_dict()

    gen = cfg["generate"]
    unknown = set(gen) - {"count", "shard_size", "seed"}
    if unknown:
        raise ConfigError(f"unknown keys in [generate]: {sorted(unknown)}")
    gen.setdefault("seed", derive_seed(cfg["seed"], "generate"))

    metrics = dict(cfg["metrics"])
    metrics.setdefault("seed", derive_seed(cfg["seed"], "metrics"))
    try:
        mc = MetricConfig.from_dict(metrics)
    except TypeError as exc:
        raise ConfigError(f"invalid [metrics] section: {exc}") from exc
    cfg["metrics"] = _plain(asdict(mc))

    util = dict(cfg["utility"])
    util.setdefault("seed", derive_seed(cfg["seed"], "utility"))
    try:
        cfg["utility"] = UtilityConfig(**util).to_dict()
    except TypeError as exc:
        raise ConfigError(f"invalid [utility] section: {exc}") from exc

    abl = cfg["ablation"]
    unknown = set(abl) - {"iterations", "samples"}
    if unknown:
        raise ConfigError(f"unknown keys in [ablation]: {sorted(unknown)}")
    return _plain(cfg)


def derive_seed(seed: int, *tags: str) -> int:
    """Stable 31-bit seed for a named sub-stream of ``seed``."""
    words = [int(seed)] + [zlib.crc32(t.encode()) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0] & 0x7FFFFFFF)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def parse_config_text(text: str) -> dict:
    return yaml.safe_load(text)


# ---------------------------------------------------------------- run directory

class RunDir:
    """Layout: ``config.resolved``, ``checkpoints/``, ``samples/``, ``reports/``,
    ``plots/``, ``logs/``, ``data/``, plus ``run.json`` (command history) and
    ``hashes.json`` (sha256 of every artifact under the hashed folders).
    """

    def __init__(self, path):
        self.path = Path(path)

    def __truediv__(self, other):
        return self.path / other

    @classmethod
    def default_root(cls) -> Path:
        return Path(os.environ.get(OUT_ENV, "runs"))

    def create(self, cfg: dict) -> "RunDir":
        self.path.mkdir(parents=True, exist_ok=True)
        for sub in RUN_SUBDIRS:
            (self.path / sub).mkdir(exist_ok=True)
        existing = self.path / RESOLVED_NAME
        text = dump_config(cfg)
        if existing.exists() and existing.read_text() != text:
            raise ConfigError(f"run directory {self.path} already holds a different resolved config")
        existing.write_text(text)
        return self

    def config(self) -> dict:
        p = self.path / RESOLVED_NAME
        if not p.exists():
            raise DataError("run directory has no resolved config", path=p)
        return parse_config_text(p.read_text())

    def begin(self, command: str) -> None:
        (self.path / INCOMPLETE).write_text(command + "\n")

    def finish(self, command: str, args: dict) -> dict:
        history = self.history()
        history.append({"command": command, "args": args})
        (self.path / "run.json").write_text(json.dumps({"history": history}, indent=1, sort_keys=True))
        hashes = self.hash_artifacts()
        (self.path / INCOMPLETE).unlink(missing_ok=True)
        return hashes

    def history(self) -> list:
        p = self.path / "run.json"
        return json.loads(p.read_text())["history"] if p.exists() else []

    def hash_artifacts(self) -> dict:
        hashes = {}
        for sub in HASHED_DIRS:
            for f in sorted((self.path / sub).rglob("*")):
                if f.is_file() and not f.name.endswith(".tmp"):
                    hashes[f.relative_to(self.path).as_posix()] = _sha256(f)
        (self.path / "hashes.json").write_text(json.dumps(hashes, indent=1, sort_keys=True))
        return hashes

    def hashes(self) -> dict:
        p = self.path / "hashes.json"
        return json.loads(p.read_text()) if p.exists() else {}

    @property
    def incomplete(self) -> bool:
        return (self.path / INCOMPLETE).exists()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
