"""Run manifests: config snapshot, seeds, artifact hashes, and timings.

Every command writes one manifest next to its outputs. Hashes make reruns
checkable; timestamps and wall times are informational and excluded from
determinism comparisons.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

SEED_STREAMS = ("data", "init", "train", "sample")


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def seed_streams(root_seed: int) -> dict:
    """Named child seeds derived from one root so stages never share streams."""
    children = np.random.SeedSequence(root_seed).spawn(len(SEED_STREAMS))
    return {
        name: int(child.generate_state(1)[0])
        for name, child in zip(SEED_STREAMS, children)
    }


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)
    version: str = __version__
    created: str = ""
    wall_seconds: float = 0.0

    def __post_init__(self):
        self._start = time.monotonic()
        if not self.created:
            self.created = datetime.now(timezone.utc).isoformat()

    def add_input(self, path):
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path):
        self.outputs[str(path)] = sha256_file(path)

    def write(self, path) -> Path:
        path = Path(path)
        self.wall_seconds = time.monotonic() - self._start
        doc = {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "notes": self.notes,
            "version": self.version,
            "created": self.created,
            "wall_seconds": self.wall_seconds,
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path
