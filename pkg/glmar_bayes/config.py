"""Run configuration: config files, worker defaults, manifests and phase timing."""

import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from dotenv import load_dotenv

from . import __version__
from .errors import ConfigError

logger = logging.getLogger(__name__)

WORKERS_ENV = "GLMAR_WORKERS"


def load_environment():
    """Pick up a ``.env`` file from the working directory, if any."""
    load_dotenv(override=False)


def default_workers():
    value = os.environ.get(WORKERS_ENV)
    if value:
        try:
            workers = int(value)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {value!r}") from None
        if workers < 1:
            raise ConfigError(f"{WORKERS_ENV} must be at least 1")
        return workers
    return os.cpu_count() or 1


def read_config_file(path):
    """Parse ``key=value`` lines into a click ``default_map``.

    ``fit.iters=3000`` targets one command; a bare ``seed=7`` applies to all.
    """
    path = Path(path)
    commands = ("simulate", "fit", "report", "check")
    default_map = {name: {} for name in commands}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if "." in key:
            command, key = key.split(".", 1)
            if command not in default_map:
                raise ConfigError(f"{path}:{lineno}: unknown command {command!r}")
            targets = [command]
        else:
            targets = commands
        for command in targets:
            default_map[command][key] = value
    return default_map


def prepare_output(directory, force=False):
    """Create ``directory``; refuse a non-empty one unless ``force`` clears it."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise ConfigError(f"output directory {directory} is not empty (use --force)")
        logger.info("Clearing %s", directory)
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class RunConfig:
    command: str
    settings: dict
    seed: int = 0
    workers: int = 1
    inputs: list = field(default_factory=list)

    def manifest(self, root=None):
        root = Path(root) if root else None
        hashed = {}
        for path in sorted(Path(p) for p in self.inputs):
            key = str(path.relative_to(root)) if root and path.is_relative_to(root) else str(path)
            hashed[key] = sha256_file(path)
        document = asdict(self)
        document["inputs"] = hashed
        document["version"] = __version__
        return document

    def write_manifest(self, directory, root=None):
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(self.manifest(root), indent=2, sort_keys=True, default=str)
                        + "\n")
        return path


class PhaseTimer:
    """Wall time per named phase, written next to the manifest."""

    def __init__(self):
        self.phases = {}

    @contextmanager
    def phase(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.phases[name] = self.phases.get(name, 0.0) + elapsed
            logger.debug("phase %s took %.3f s", name, elapsed)

    def merge(self, phases):
        for name, seconds in phases.items():
            self.phases[name] = self.phases.get(name, 0.0) + seconds

    def write(self, directory):
        path = Path(directory) / "timing.json"
        path.write_text(json.dumps({k: round(v, 6) for k, v in self.phases.items()},
                                   indent=2, sort_keys=True) + "\n")
        return path
