"""Config resolution and run-directory bookkeeping.

Config files are YAML (JSON is valid YAML) holding a flat mapping of option
names to values. Resolution order is preset defaults, then the file, then
command-line flags; the merged result is stored whole in the run manifest.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from onedatum import __version__
from onedatum.errors import ConfigError
from onedatum.packed import read_json, write_json

MANIFEST_NAME = "manifest.json"
REPORTS_DIR = "reports"
BUDGETS = ("pilot", "paper")

# distillation epochs per budget; the paper figure is the small-scale recipe's 1K epochs
DISTILL_EPOCHS = {"pilot": 30, "paper": 1000}


def load_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping of option names to values")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def merge(*layers: dict) -> dict:
    """Later layers win; ``None`` values in a layer mean "not given"."""
    out: dict = {}
    for layer in layers:
        out.update({k: v for k, v in layer.items() if v is not None})
    return out


def split_known(options: dict, known) -> tuple[dict, dict]:
    known = set(known)
    return ({k: v for k, v in options.items() if k in known},
            {k: v for k, v in options.items() if k not in known})


def now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def file_sha256(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while block := f.read(chunk):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    datasets: dict = field(default_factory=dict)
    code_version: str = __version__
    started: str = field(default_factory=now)
    finished: str | None = None
    metrics: dict = field(default_factory=dict)
    environment: dict = field(default_factory=lambda: {"python": platform.python_version()})

    def to_dict(self) -> dict:
        return {
            "command": self.command, "config": self.config, "seeds": self.seeds,
            "datasets": self.datasets, "code_version": self.code_version,
            "started": self.started, "finished": self.finished, "metrics": self.metrics,
            "environment": self.environment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**{k: d[k] for k in ("command", "config", "seeds", "datasets", "code_version",
                                         "started", "finished", "metrics", "environment") if k in d})

    def inputs(self) -> dict:
        """The part that must match for a restart to count as a resume."""
        return {"command": self.command, "config": self.config, "seeds": self.seeds,
                "datasets": self.datasets}


class RunDir:
    """``RUN/{manifest.json, checkpoints/, metrics.log, reports/}``."""

    def __init__(self, path):
        self.path = Path(path)

    @property
    def manifest_path(self) -> Path:
        return self.path / MANIFEST_NAME

    @property
    def checkpoints(self) -> Path:
        return self.path / "checkpoints"

    @property
    def reports(self) -> Path:
        return self.path / REPORTS_DIR

    @property
    def metrics(self) -> Path:
        return self.path / "metrics.log"

    def read_manifest(self) -> RunManifest | None:
        if not self.manifest_path.exists():
            return None
        return RunManifest.from_dict(read_json(self.manifest_path))

    def write_manifest(self, manifest: RunManifest) -> None:
        write_json(self.manifest_path, manifest.to_dict())

    def begin(self, manifest: RunManifest) -> RunManifest:
        """Create the layout; an existing run is resumed only if its inputs match."""
        old = self.read_manifest()
        if old is not None:
            if json.dumps(old.inputs(), sort_keys=True) != json.dumps(manifest.inputs(), sort_keys=True):
                raise ConfigError(f"{self.path} holds a run with different inputs; choose a new --out")
            manifest.started = old.started
        for d in (self.path, self.checkpoints, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        manifest.finished = None
        self.write_manifest(manifest)
        return manifest

    def finish(self, manifest: RunManifest, metrics: dict) -> RunManifest:
        manifest.metrics = metrics
        manifest.finished = now()
        self.write_manifest(manifest)
        return manifest

    def is_complete(self) -> bool:
        m = self.read_manifest()
        return m is not None and m.finished is not None


def jsonable(obj):
    """Tuples to lists etc., so a config compares equal after a JSON round trip."""
    return json.loads(json.dumps(obj))
