"""
Stage checkpoints: the parameter blobs of one training stage plus the settings
needed to rebuild its modules, the run's architecture hash, the last epoch and
a metric snapshot (per-epoch loss history).
"""

import hashlib
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import torch
import torch.nn as nn

from src.errors import ConfigurationError, DependencyError

FORMAT_VERSION = 1
REQUIRED_KEYS = ("format_version", "stage", "config_hash", "state", "settings")


@dataclass
class Checkpoint:
    stage: str
    config_hash: str
    state: Dict[str, Dict[str, torch.Tensor]]
    settings: Dict[str, Any]
    epoch: int = 0
    metrics: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "stage": self.stage,
            "config_hash": self.config_hash,
            "state": self.state,
            "settings": self.settings,
            "epoch": self.epoch,
            "metrics": self.metrics,
        }


def module_checksum(*modules: nn.Module) -> str:
    """Short SHA-256 over the parameters and buffers of the given modules."""
    digest = hashlib.sha256()
    for module in modules:
        for name, tensor in sorted(module.state_dict().items()):
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()[:16]


def save_checkpoint(path: str, checkpoint: Checkpoint):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    torch.save(checkpoint.to_dict(), tmp_path)
    os.replace(tmp_path, path)
    print(f"[Checkpoint] Saved {checkpoint.stage} checkpoint (epoch {checkpoint.epoch}) to {path}")


def load_checkpoint(path: Optional[str], stage: str, expected_hash: Optional[str] = None,
                    allow_mismatch: bool = False) -> Checkpoint:
    """
    Loads a stage checkpoint. A missing file is a DependencyError. An unreadable
    file, an unknown format version, a checkpoint of another stage, or one whose
    config hash differs from expected_hash (unless allow_mismatch is set) is a
    ConfigurationError.
    """
    if not path or not os.path.exists(path):
        raise DependencyError(f"No {stage} checkpoint found at {path!r}; train the {stage} stage first")
    try:
        data = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise ConfigurationError(f"{path} is not a readable checkpoint: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} is not a stage checkpoint (got {type(data).__name__})")
    missing = [key for key in REQUIRED_KEYS if key not in data]
    if missing:
        raise ConfigurationError(f"{path} is not a stage checkpoint; missing {missing}")
    if data["format_version"] != FORMAT_VERSION:
        raise ConfigurationError(
            f"{path} has checkpoint format version {data['format_version']!r}, expected {FORMAT_VERSION}")
    checkpoint = Checkpoint(
        stage=data["stage"],
        config_hash=data["config_hash"],
        state=data["state"],
        settings=data["settings"],
        epoch=int(data.get("epoch", 0)),
        metrics=data.get("metrics", {}),
    )
    if checkpoint.stage != stage:
        raise ConfigurationError(f"{path} holds a '{checkpoint.stage}' checkpoint, expected '{stage}'")
    if expected_hash is not None and checkpoint.config_hash != expected_hash:
        message = (f"{stage} checkpoint {path} was trained under config {checkpoint.config_hash}, "
                   f"current config is {expected_hash}")
        if not allow_mismatch:
            raise ConfigurationError(message + " (pass --allow-config-mismatch to load it anyway)")
        print(f"[Checkpoint] Warning: {message}; loading anyway")
    print(f"[Checkpoint] Loaded {stage} checkpoint from {path} (epoch {checkpoint.epoch})")
    return checkpoint
