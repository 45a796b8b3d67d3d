"""
Top-down inference: detect persons, parse parts on their crops, fuse the
latent features into video action scores, and assemble prediction records.
Also rebuilds every stage's modules from checkpoints.
"""

import random
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from src.action_parser import (
    VIDEO_FAMILIES,
    FrameParse,
    FusionNet,
    NonVideoFeatures,
    ensemble,
    extract_nonvideo_features,
    parse_frame,
)
from src.checkpoints import Checkpoint, module_checksum
from src.dataset import (
    DatasetConfig,
    FrameGT,
    PartGT,
    PersonGT,
    PredictionRecord,
    VideoAnnotation,
    clip_box,
    validate_video,
)
from src.detector import DetectorSettings, PersonDetector
from src.errors import ConfigurationError
from src.part_parser import ParserSettings, PartParser
from src.tools.boxes import box_area
from src.tools.feature_cache import FeatureCache
from src.tools.frame_store import FrameStore
from src.video_features import (
    StubVideoModel,
    VideoBackboneFeatures,
    VideoFeatureProvider,
    provider_factory,
    video_feature_provider,
)


def video_seed(seed: int, video_id: str) -> int:
    """Per-video sampling seed, stable across runs and dataset orderings."""
    return (seed * 1000003 + zlib.crc32(video_id.encode("utf-8"))) % (2 ** 31)


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


# ----------------------------------------------------------------------------
# Rebuilding modules
# ----------------------------------------------------------------------------

def _tuples(values: Dict) -> Dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}


def build_detector(checkpoint: Checkpoint) -> PersonDetector:
    detector = PersonDetector(DetectorSettings(**_tuples(checkpoint.settings["detector"])))
    detector.load_state_dict(checkpoint.state["detector"])
    return detector.eval()


def build_parser(checkpoint: Checkpoint) -> PartParser:
    parser = PartParser(ParserSettings(**_tuples(checkpoint.settings["parser"])))
    parser.load_state_dict(checkpoint.state["parser"])
    return parser.eval()


def build_fusion_members(checkpoint: Checkpoint) -> List[FusionNet]:
    settings = checkpoint.settings
    members = []
    for i, families in enumerate(settings["members"]):
        net = FusionNet(settings["num_actions"], families, settings["hidden_width"])
        net.load_state_dict(checkpoint.state[f"member_{i}"])
        members.append(net.eval())
    return members


def build_video_provider(name: Optional[str], checkpoint: Optional[Checkpoint] = None,
                         num_actions: Optional[int] = None) -> Optional[VideoFeatureProvider]:
    """The named provider; the stub is restored from the action-parser checkpoint when one is given."""
    factory = provider_factory(name)
    if factory is None:
        if name:
            print(f"[ActionParser] Warning: video provider '{name}' is not registered; using non-video features only")
        return None
    if name == "stub":
        model = StubVideoModel(num_actions if num_actions is not None else checkpoint.settings["num_actions"])
        if checkpoint is not None and "video_model" in checkpoint.state:
            model.load_state_dict(checkpoint.state["video_model"])
        return factory(model)
    return factory()


def check_member_families(members: Sequence[Sequence[str]], provider: Optional[VideoFeatureProvider]):
    for families in members:
        video = [f for f in families if f in VIDEO_FAMILIES]
        if video and provider is None:
            raise ConfigurationError(f"Feature families {video} need a VIDEO_PROVIDER, none is registered")


# ----------------------------------------------------------------------------
# Features
# ----------------------------------------------------------------------------

def compute_features(videos: Sequence[VideoAnnotation], store: FrameStore, detector: PersonDetector,
                     parser: PartParser, T: int, P: int, seed: int, cache: Optional[FeatureCache] = None,
                     show_progress: bool = False) -> List[NonVideoFeatures]:
    cache = cache or FeatureCache(None)
    checksum = module_checksum(detector, parser)
    features = []
    for video in tqdm(videos, desc="[ActionParser] features", disable=not show_progress):
        vseed = video_seed(seed, video.video_id)
        key = FeatureCache.key(video.video_id, checksum, T, P, vseed)
        arrays = cache.load(key)
        if arrays is not None:
            features.append(NonVideoFeatures.from_arrays(arrays))
            continue
        nvf = extract_nonvideo_features(video, store, detector, parser, T, P, vseed)
        cache.save(key, nvf.to_arrays())
        features.append(nvf)
    if cache.is_enabled():
        print(cache.summary())
    return features


# ----------------------------------------------------------------------------
# Prediction
# ----------------------------------------------------------------------------

@dataclass
class PipelineModels:
    dataset_config: DatasetConfig
    detector: PersonDetector
    parser: PartParser
    members: List[FusionNet]
    weights: Optional[List[float]]
    provider: Optional[VideoFeatureProvider]
    num_frames: int
    num_persons: int
    seed: int


def _person_record(frame_parse: FrameParse, index: int, width: int, height: int) -> Optional[PersonGT]:
    scored = frame_parse.detections.boxes[index]
    box = clip_box(scored.box, (0.0, 0.0, float(width), float(height)))
    if box_area(box) <= 0.0:
        return None
    instance_probs = F.softmax(frame_parse.detections.instance.C_ins[index].double(), dim=-1).numpy()
    parts = []
    for part in frame_parse.parses[index].parts:
        part_box = clip_box(part.box, box)
        if box_area(part_box) <= 0.0:
            continue
        parts.append(PartGT(part_id=part.part_id, box=part_box, state_id=int(part.state_id),
                            score=min(1.0, max(0.0, part.confidence))))
    return PersonGT(box=box, parts=tuple(parts), score=scored.score,
                    action_scores=tuple(float(p) for p in instance_probs / instance_probs.sum()))


@torch.no_grad()
def predict_video(video: VideoAnnotation, store: FrameStore, models: PipelineModels) -> PredictionRecord:
    parsed: Dict[int, FrameParse] = {}
    for frame in video.frames:
        parsed[frame.frame_index] = parse_frame(store.frame(video.video_id, frame.frame_index),
                                                models.detector, models.parser, models.num_persons)
    nvf = extract_nonvideo_features(video, store, models.detector, models.parser, models.num_frames,
                                    models.num_persons, video_seed(models.seed, video.video_id), parsed=parsed)
    vbf = video_feature_provider(video, store, models.provider) if models.provider else VideoBackboneFeatures()
    scores = ensemble([member.predict(nvf, vbf) for member in models.members], models.weights)
    action_id = scores.predicted

    frames = []
    for frame in video.frames:
        frame_parse = parsed[frame.frame_index]
        persons = [_person_record(frame_parse, i, video.width, video.height)
                   for i in range(len(frame_parse.detections.boxes))]
        frames.append(FrameGT(frame_index=frame.frame_index, persons=tuple(p for p in persons if p is not None),
                              frame_action_id=action_id))
    prediction = VideoAnnotation(video_id=video.video_id, action_id=action_id, frames=tuple(frames),
                                 width=video.width, height=video.height,
                                 action_scores=tuple(float(s) for s in scores.scores))
    validate_video(prediction, models.dataset_config, prediction=True)
    return prediction


def predict_dataset(videos: Sequence[VideoAnnotation], store: FrameStore, models: PipelineModels,
                    show_progress: bool = False) -> List[PredictionRecord]:
    seed_everything(models.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        return [predict_video(video, store, models)
                for video in tqdm(videos, desc="[Predict] videos", disable=not show_progress)]
    finally:
        torch.use_deterministic_algorithms(False)
