"""
Run configuration.

Values resolve in this order, later sources winning:
    1. stage defaults (the training-configuration table)
    2. the dotenv config file: generic keys (EPOCHS=...), then stage-prefixed
       keys (PART_PARSER_EPOCHS=...)
    3. DAP_-prefixed environment variables, generic then stage-prefixed
    4. explicit CLI overrides
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values

from src.action_parser import NONVIDEO_FAMILIES, check_families
from src.dataset import DatasetConfig
from src.detector import DetectorSettings
from src.errors import ConfigurationError
from src.part_parser import VARIANTS, ParserSettings

STAGES = ("detector", "part_parser", "action_parser")
OPTIMIZERS = ("sgd", "adam", "adamw")
SCHEDULES = ("step", "cosine")
ENV_PREFIX = "DAP_"

STAGE_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "detector": dict(epochs=12, lr=0.02, schedule="step", drop_steps=(8, 11), optimizer="sgd", batch_size=8),
    "part_parser": dict(epochs=40, lr=1e-4, schedule="step", drop_steps=(30, 35), optimizer="adam",
                        batch_size=32),
    "action_parser": dict(epochs=30, lr=1e-3, schedule="cosine", drop_steps=(), optimizer="adamw",
                          batch_size=16),
}


@dataclass
class RunConfig:
    stage: str
    epochs: int
    lr: float
    schedule: str
    drop_steps: Tuple[int, ...]
    optimizer: str
    batch_size: int
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    train_frames: int = 4

    dataset: str = "data/synth/train.json"
    frames_dir: Optional[str] = None
    out_dir: str = "checkpoints"
    detector_checkpoint: Optional[str] = None
    parser_checkpoint: Optional[str] = None

    # detector block
    anchor_sizes: Tuple[float, ...] = (28.0, 40.0, 56.0)
    anchor_ratios: Tuple[float, ...] = (1.0, 1.4)
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    nms_iou: float = 0.5
    score_floor: float = 0.05
    max_detections: int = 20
    image_mean: Tuple[float, ...] = (0.2, 0.2, 0.2)
    image_std: Tuple[float, ...] = (0.25, 0.25, 0.25)

    # part-parser block
    variant: str = "state_vectors_focal"
    tau: float = 0.5
    lam: float = 0.5
    gamma: float = 2.0
    alpha: float = 0.25
    input_height: int = 256
    input_width: int = 192
    stride: int = 4
    crop_padding: float = 1.1
    hflip: bool = True

    # fusion block
    families: Tuple[str, ...] = NONVIDEO_FAMILIES
    hidden_width: int = 512
    ensemble_members: Tuple[Tuple[str, ...], ...] = ()
    ensemble_weights: Optional[Tuple[float, ...]] = None
    num_frames: int = 32
    num_persons: int = 10
    video_provider: str = ""
    feature_cache: Optional[str] = None

    source: Dict[str, str] = field(default_factory=dict, compare=False, repr=False)

    def validate(self) -> "RunConfig":
        if self.stage not in STAGES:
            raise ConfigurationError(f"Unknown stage '{self.stage}' (expected one of {STAGES})")
        if self.epochs < 0:
            raise ConfigurationError(f"EPOCHS must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigurationError(f"LR must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"BATCH_SIZE must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"Unknown optimizer '{self.optimizer}' (expected one of {OPTIMIZERS})")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"Unknown schedule '{self.schedule}' (expected one of {SCHEDULES})")
        if self.schedule == "step" and list(self.drop_steps) != sorted(set(self.drop_steps)):
            raise ConfigurationError(f"DROP_STEPS must be strictly increasing, got {self.drop_steps}")
        if any(step < 1 for step in self.drop_steps):
            raise ConfigurationError(f"DROP_STEPS must be positive epochs, got {self.drop_steps}")
        if self.num_frames < 1 or self.num_persons < 1:
            raise ConfigurationError("NUM_FRAMES and NUM_PERSONS must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"Unknown part parser variant '{self.variant}' (expected one of {VARIANTS})")
        check_families(self.families)
        for member in self.ensemble_members:
            check_families(member)
        if self.ensemble_weights is not None and len(self.ensemble_weights) != len(self.members):
            raise ConfigurationError(
                f"ENSEMBLE_WEIGHTS has {len(self.ensemble_weights)} entries for {len(self.members)} members")
        return self

    @property
    def members(self) -> Tuple[Tuple[str, ...], ...]:
        """Fusion heads to train: the configured members, or one head over FAMILIES."""
        return self.ensemble_members or (tuple(self.families),)

    def detector_settings(self, num_actions: int) -> DetectorSettings:
        return DetectorSettings(
            num_actions=num_actions,
            anchor_sizes=tuple(self.anchor_sizes),
            anchor_ratios=tuple(self.anchor_ratios),
            pos_iou=self.pos_iou,
            neg_iou=self.neg_iou,
            nms_iou=self.nms_iou,
            score_floor=self.score_floor,
            max_detections=self.max_detections,
            image_mean=tuple(self.image_mean),
            image_std=tuple(self.image_std),
        )

    def parser_settings(self, num_parts: int, num_states: int) -> ParserSettings:
        return ParserSettings(
            num_parts=num_parts,
            num_states=num_states,
            variant=self.variant,
            tau=self.tau,
            lam=self.lam,
            gamma=self.gamma,
            alpha=self.alpha,
            input_height=self.input_height,
            input_width=self.input_width,
            stride=self.stride,
            crop_padding=self.crop_padding,
            image_mean=tuple(self.image_mean),
            image_std=tuple(self.image_std),
        )

    def architecture_fields(self, dataset_config: DatasetConfig) -> Dict[str, Any]:
        """Fields that change the shape or meaning of a stage's parameters."""
        labels = {"actions": list(dataset_config.action_names), "parts": list(dataset_config.part_names),
                  "states": list(dataset_config.state_names)}
        if self.stage == "detector":
            block = asdict(self.detector_settings(dataset_config.C))
        elif self.stage == "part_parser":
            block = asdict(self.parser_settings(dataset_config.K, dataset_config.S))
        else:
            block = {"families": list(self.families), "hidden_width": self.hidden_width,
                     "members": [list(m) for m in self.members], "num_frames": self.num_frames,
                     "num_persons": self.num_persons, "video_provider": self.video_provider}
        return {"stage": self.stage, "labels": labels, "block": block}

    def config_hash(self, dataset_config: DatasetConfig) -> str:
        canonical = json.dumps(self.architecture_fields(dataset_config), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def checkpoint_path(self, stage: Optional[str] = None) -> str:
        return os.path.join(self.out_dir, f"{stage or self.stage}.pt")


# ----------------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------------

def _floats(value: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def _ints(value: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


def _names(value: str) -> Tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _members(value: str) -> Tuple[Tuple[str, ...], ...]:
    """'frame|instance,part,state|all' -> (('frame',), ('instance', 'part', 'state'), (...all non-video...))."""
    members = []
    for chunk in value.split("|"):
        names = _names(chunk)
        if names == ("all",):
            names = NONVIDEO_FAMILIES
        if names:
            members.append(names)
    return tuple(members)


def _bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _optional_str(value: str) -> Optional[str]:
    return value.strip() or None


def _optional_floats(value: str) -> Optional[Tuple[float, ...]]:
    return _floats(value) or None


KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "EPOCHS": ("epochs", int),
    "LR": ("lr", float),
    "SCHEDULE": ("schedule", str.strip),
    "DROP_STEPS": ("drop_steps", _ints),
    "OPTIMIZER": ("optimizer", str.strip),
    "BATCH_SIZE": ("batch_size", int),
    "SEED": ("seed", int),
    "MOMENTUM": ("momentum", float),
    "WEIGHT_DECAY": ("weight_decay", float),
    "TRAIN_FRAMES": ("train_frames", int),
    "DATASET": ("dataset", str.strip),
    "FRAMES_DIR": ("frames_dir", _optional_str),
    "OUT_DIR": ("out_dir", str.strip),
    "DETECTOR_CHECKPOINT": ("detector_checkpoint", _optional_str),
    "PARSER_CHECKPOINT": ("parser_checkpoint", _optional_str),
    "ANCHOR_SIZES": ("anchor_sizes", _floats),
    "ANCHOR_RATIOS": ("anchor_ratios", _floats),
    "POS_IOU": ("pos_iou", float),
    "NEG_IOU": ("neg_iou", float),
    "NMS_IOU": ("nms_iou", float),
    "SCORE_FLOOR": ("score_floor", float),
    "MAX_DETECTIONS": ("max_detections", int),
    "IMAGE_MEAN": ("image_mean", _floats),
    "IMAGE_STD": ("image_std", _floats),
    "VARIANT": ("variant", str.strip),
    "TAU": ("tau", float),
    "LAMBDA": ("lam", float),
    "GAMMA": ("gamma", float),
    "ALPHA": ("alpha", float),
    "INPUT_HEIGHT": ("input_height", int),
    "INPUT_WIDTH": ("input_width", int),
    "STRIDE": ("stride", int),
    "CROP_PADDING": ("crop_padding", float),
    "HFLIP": ("hflip", _bool),
    "FAMILIES": ("families", _names),
    "HIDDEN_WIDTH": ("hidden_width", int),
    "ENSEMBLE_MEMBERS": ("ensemble_members", _members),
    "ENSEMBLE_WEIGHTS": ("ensemble_weights", _optional_floats),
    "NUM_FRAMES": ("num_frames", int),
    "NUM_PERSONS": ("num_persons", int),
    "VIDEO_PROVIDER": ("video_provider", str.strip),
    "FEATURE_CACHE": ("feature_cache", _optional_str),
}


def _collect(values: Mapping[str, Optional[str]], stage: str, prefix: str = "") -> Dict[str, Tuple[str, str]]:
    """{field: (source key, raw value)} for generic keys, then stage-prefixed keys on top."""
    found: Dict[str, Tuple[str, str]] = {}
    stage_prefix = prefix + stage.upper() + "_"
    for scoped in (False, True):
        for key, (name, _) in KEYS.items():
            full_key = (stage_prefix if scoped else prefix) + key
            raw = values.get(full_key)
            if raw is not None:
                found[name] = (full_key, raw)
    return found


def load_run_config(stage: str, config_path: Optional[str] = None,
                    environ: Optional[Mapping[str, str]] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    if stage not in STAGES:
        raise ConfigurationError(f"Unknown stage '{stage}' (expected one of {STAGES})")
    raw: Dict[str, Tuple[str, str]] = {}
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigurationError(f"Config file not found: {config_path}")
        raw.update(_collect(dotenv_values(config_path), stage))
    raw.update(_collect(os.environ if environ is None else environ, stage, prefix=ENV_PREFIX))

    values: Dict[str, Any] = dict(STAGE_DEFAULTS[stage])
    source: Dict[str, str] = {}
    parsers = {name: parser for name, parser in KEYS.values()}
    for name, (key, text) in raw.items():
        try:
            values[name] = parsers[name](text)
        except ValueError as e:
            raise ConfigurationError(f"Invalid value for {key}: {text!r} ({e})") from None
        source[name] = key
    for name, value in (overrides or {}).items():
        if value is not None:
            values[name] = value
            source[name] = "cli"

    known = {f.name for f in fields(RunConfig)}
    config = RunConfig(stage=stage, source=source, **{k: v for k, v in values.items() if k in known})
    return config.validate()
