"""
Training loops for the three stages.

    detector       SGD with momentum, lr x0.1 at DROP_STEPS, loss l_det
    part_parser    Adam, lr x0.1 at DROP_STEPS, loss l_part on ground-truth person crops
    action_parser  AdamW, cosine annealing, cross-entropy on video labels; the stub
                   video model (when VIDEO_PROVIDER=stub) is trained first, then one
                   fusion head per ensemble member on frozen upstream features

Every stage writes a checkpoint even with EPOCHS=0 (initial weights).
"""

import os
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from src.action_parser import FusionNet, NonVideoFeatures, stack_features
from src.checkpoints import Checkpoint, load_checkpoint, module_checksum, save_checkpoint
from src.config import RunConfig, load_run_config
from src.dataset import DatasetConfig, FrameGT, VideoAnnotation, horizontal_flip, load_config, load_dataset
from src.detector import PersonDetector
from src.errors import ConfigurationError, DependencyError
from src.part_parser import PartParser, crop_person
from src.pipeline import (
    build_detector,
    build_parser,
    build_video_provider,
    check_member_families,
    compute_features,
    seed_everything,
)
from src.tools.feature_cache import FeatureCache
from src.tools.frame_store import FrameStore
from src.video_features import VideoBackboneFeatures, load_clip

Sample = Tuple[VideoAnnotation, FrameGT]


@dataclass
class StageData:
    config: DatasetConfig
    videos: List[VideoAnnotation]
    store: FrameStore


def default_frames_dir(dataset_path: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(dataset_path)), "frames")


def load_stage_data(cfg: RunConfig) -> StageData:
    dataset_config = load_config(cfg.dataset)
    videos = load_dataset(cfg.dataset, dataset_config)
    frames_dir = cfg.frames_dir or default_frames_dir(cfg.dataset)
    print(f"[Dataset] {len(videos)} videos from {cfg.dataset} (frames: {frames_dir})")
    return StageData(config=dataset_config, videos=videos, store=FrameStore(frames_dir))


# ----------------------------------------------------------------------------
# Optimizers and schedules
# ----------------------------------------------------------------------------

def build_optimizer(params, cfg: RunConfig) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    raise ConfigurationError(f"Unknown optimizer '{cfg.optimizer}'")


def build_scheduler(optimizer: torch.optim.Optimizer, cfg: RunConfig):
    """Stepped once per epoch."""
    if cfg.schedule == "step":
        return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=list(cfg.drop_steps), gamma=0.1)
    if cfg.schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(cfg.epochs, 1))
    raise ConfigurationError(f"Unknown schedule '{cfg.schedule}'")


def lr_at_epochs(cfg: RunConfig) -> List[float]:
    """Learning rate in effect during each epoch, without training anything."""
    optimizer = build_optimizer([nn.Parameter(torch.zeros(1))], cfg)
    scheduler = build_scheduler(optimizer, cfg)
    rates = []
    for _ in range(cfg.epochs):
        rates.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        scheduler.step()
    return rates


def fit(model: nn.Module, cfg: RunConfig, batches_for_epoch: Callable[[int], Sequence],
        step: Callable[[object], Tuple[torch.Tensor, Dict[str, float]]], tag: str,
        show_progress: bool = True) -> List[Dict[str, float]]:
    """Generic epoch loop; returns one {loss name: epoch mean, 'lr': rate} dict per epoch."""
    optimizer = build_optimizer(model.parameters(), cfg)
    scheduler = build_scheduler(optimizer, cfg)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        sums: Dict[str, float] = {}
        batches = batches_for_epoch(epoch)
        bar = tqdm(batches, desc=f"[Train:{tag}] epoch {epoch + 1}/{cfg.epochs}", leave=False,
                   disable=not show_progress)
        for batch in bar:
            loss, floats = step(batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for name, value in floats.items():
                sums[name] = sums.get(name, 0.0) + value
            bar.set_postfix(loss=f"{float(loss.detach()):.4f}")
        scheduler.step()
        means = {name: total / max(len(batches), 1) for name, total in sums.items()}
        means["lr"] = lr
        history.append(means)
        summary = " ".join(f"{k}={v:.4f}" for k, v in means.items() if k != "lr")
        print(f"[Train:{tag}] Epoch {epoch + 1}/{cfg.epochs} lr={lr:.2e} {summary}")
    model.eval()
    return history


# ----------------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------------

def epoch_samples(videos: Sequence[VideoAnnotation], frames_per_video: int, seed: int) -> List[Sample]:
    """Up to frames_per_video annotated frames from every video, shuffled."""
    rng = np.random.default_rng(seed)
    samples = []
    for video in videos:
        count = min(frames_per_video, len(video.frames))
        for i in sorted(rng.choice(len(video.frames), size=count, replace=False)):
            samples.append((video, video.frames[int(i)]))
    order = rng.permutation(len(samples))
    return [samples[int(i)] for i in order]


def chunk(items: Sequence, size: int) -> List[Sequence]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def load_sample(sample: Sample, store: FrameStore, flip: bool) -> Tuple[FrameGT, np.ndarray]:
    video, frame = sample
    image = store.frame(video.video_id, frame.frame_index)
    if not flip:
        return frame, image
    flipped, pixels = horizontal_flip(replace(video, frames=(frame,)), image[None])
    return flipped.frames[0], pixels[0]


# ----------------------------------------------------------------------------
# Stages
# ----------------------------------------------------------------------------

def _checkpoint(cfg: RunConfig, data: StageData, state: Dict, settings: Dict,
                history: List[Dict[str, float]]) -> Checkpoint:
    settings = dict(settings, labels=data.config.to_record().model_dump())
    return Checkpoint(stage=cfg.stage, config_hash=cfg.config_hash(data.config), state=state, settings=settings,
                      epoch=cfg.epochs, metrics={"history": history})


def train_detector(cfg: RunConfig, data: StageData, show_progress: bool = True) -> Checkpoint:
    seed_everything(cfg.seed)
    detector = PersonDetector(cfg.detector_settings(data.config.C))

    def batches_for_epoch(epoch: int):
        return chunk(epoch_samples(data.videos, cfg.train_frames, cfg.seed + epoch), cfg.batch_size)

    flip_rng = np.random.default_rng(cfg.seed)

    def step(batch):
        frames, images = zip(*(load_sample(s, data.store, cfg.hflip and flip_rng.random() < 0.5) for s in batch))
        gt_boxes = [torch.tensor([p.box for p in f.persons], dtype=torch.float32).reshape(-1, 4) for f in frames]
        actions = torch.tensor([f.frame_action_id for f in frames], dtype=torch.long)
        losses = detector.compute_losses(detector.preprocess(list(images)), gt_boxes, actions)
        return losses.l_det, losses.as_floats()

    history = fit(detector, cfg, batches_for_epoch, step, "detector", show_progress)
    return _checkpoint(cfg, data, {"detector": detector.state_dict()},
                       {"detector": asdict(detector.settings)}, history)


def train_part_parser(cfg: RunConfig, data: StageData, show_progress: bool = True) -> Checkpoint:
    seed_everything(cfg.seed)
    parser = PartParser(cfg.parser_settings(data.config.K, data.config.S))
    flip_rng = np.random.default_rng(cfg.seed)

    def batches_for_epoch(epoch: int):
        crops = []
        for sample in epoch_samples(data.videos, cfg.train_frames, cfg.seed + epoch):
            frame, image = load_sample(sample, data.store, cfg.hflip and flip_rng.random() < 0.5)
            for person in frame.persons:
                crop = crop_person(image, person.box, parser.settings, padding=parser.settings.crop_padding)
                crops.append((crop, person.parts))
        return chunk(crops, cfg.batch_size)

    def step(batch):
        images = torch.stack([crop.image for crop, _ in batch])
        losses = parser.compute_losses(images, [parts for _, parts in batch], [crop.geometry for crop, _ in batch])
        return losses.l_part, losses.as_floats()

    history = fit(parser, cfg, batches_for_epoch, step, "part_parser", show_progress)
    return _checkpoint(cfg, data, {"parser": parser.state_dict()}, {"parser": asdict(parser.settings)}, history)


def _train_video_model(cfg: RunConfig, data: StageData, model: nn.Module, show_progress: bool
                       ) -> List[Dict[str, float]]:
    labels = torch.tensor([v.action_id for v in data.videos], dtype=torch.long)
    flip_rng = np.random.default_rng(cfg.seed)

    def batches_for_epoch(epoch: int):
        order = np.random.default_rng(cfg.seed + epoch).permutation(len(data.videos))
        return chunk([int(i) for i in order], cfg.batch_size)

    def step(batch):
        clips = torch.stack([load_clip(data.videos[i], data.store, flip=cfg.hflip and flip_rng.random() < 0.5)
                             for i in batch])
        loss = model.loss(clips, labels[list(batch)])
        return loss, {"l_video": float(loss.detach())}

    return fit(model, cfg, batches_for_epoch, step, "video_model", show_progress)


def _train_fusion_member(cfg: RunConfig, net: FusionNet, features: List[NonVideoFeatures],
                         video_features: List[VideoBackboneFeatures], labels: torch.Tensor, tag: str,
                         show_progress: bool) -> List[Dict[str, float]]:
    def batches_for_epoch(epoch: int):
        order = np.random.default_rng(cfg.seed + epoch).permutation(len(features))
        return chunk([int(i) for i in order], cfg.batch_size)

    def step(batch):
        nvf = stack_features([features[i] for i in batch])
        vbf = VideoBackboneFeatures(
            f_t=torch.stack([video_features[i].f_t for i in batch]) if video_features[batch[0]].has_t else None,
            f_s=torch.stack([video_features[i].f_s for i in batch]) if video_features[batch[0]].has_s else None,
        )
        loss = F.cross_entropy(net(nvf, vbf), labels[list(batch)])
        return loss, {"l_action": float(loss.detach())}

    return fit(net, cfg, batches_for_epoch, step, tag, show_progress)


def upstream_checkpoint_paths(cfg: RunConfig) -> Tuple[str, str]:
    return (cfg.detector_checkpoint or cfg.checkpoint_path("detector"),
            cfg.parser_checkpoint or cfg.checkpoint_path("part_parser"))


def train_action_parser(cfg: RunConfig, data: StageData, config_path: Optional[str] = None,
                        allow_mismatch: bool = False, show_progress: bool = True) -> Checkpoint:
    detector_path, parser_path = upstream_checkpoint_paths(cfg)
    for stage, path in (("detector", detector_path), ("part_parser", parser_path)):
        if not os.path.exists(path):
            raise DependencyError(f"The action_parser stage needs a trained {stage} checkpoint, none at {path}")
    detector_ckpt = load_checkpoint(detector_path, "detector",
                                    load_run_config("detector", config_path).config_hash(data.config),
                                    allow_mismatch)
    parser_ckpt = load_checkpoint(parser_path, "part_parser",
                                  load_run_config("part_parser", config_path).config_hash(data.config),
                                  allow_mismatch)
    detector = build_detector(detector_ckpt)
    parser = build_parser(parser_ckpt)

    seed_everything(cfg.seed)
    provider = build_video_provider(cfg.video_provider, num_actions=data.config.C)
    check_member_families(cfg.members, provider)

    state: Dict[str, Dict] = {}
    history: List[Dict[str, float]] = []
    if provider is not None and cfg.video_provider == "stub":
        print("[ActionParser] Training stub video model")
        history += _train_video_model(cfg, data, provider.model, show_progress)
        provider.model.eval()
        state["video_model"] = provider.model.state_dict()

    features = compute_features(data.videos, data.store, detector, parser, cfg.num_frames, cfg.num_persons,
                                cfg.seed, FeatureCache(cfg.feature_cache), show_progress)
    video_features = [provider(v, data.store) if provider is not None else VideoBackboneFeatures()
                      for v in data.videos]
    labels = torch.tensor([v.action_id for v in data.videos], dtype=torch.long)

    for i, families in enumerate(cfg.members):
        torch.manual_seed(cfg.seed + i)
        net = FusionNet(data.config.C, families, cfg.hidden_width)
        tag = f"fusion:{'+'.join(net.families)}"
        history += _train_fusion_member(cfg, net, features, video_features, labels, tag, show_progress)
        state[f"member_{i}"] = net.state_dict()

    settings = {
        "num_actions": data.config.C,
        "members": [list(m) for m in cfg.members],
        "weights": list(cfg.ensemble_weights) if cfg.ensemble_weights is not None else None,
        "hidden_width": cfg.hidden_width,
        "num_frames": cfg.num_frames,
        "num_persons": cfg.num_persons,
        "video_provider": cfg.video_provider,
        "seed": cfg.seed,
        "upstream_checksum": module_checksum(detector, parser),
    }
    return _checkpoint(cfg, data, state, settings, history)


def run_stage(cfg: RunConfig, config_path: Optional[str] = None, allow_mismatch: bool = False,
              show_progress: bool = True) -> Checkpoint:
    data = load_stage_data(cfg)
    if cfg.stage == "detector":
        checkpoint = train_detector(cfg, data, show_progress)
    elif cfg.stage == "part_parser":
        checkpoint = train_part_parser(cfg, data, show_progress)
    else:
        checkpoint = train_action_parser(cfg, data, config_path, allow_mismatch, show_progress)
    save_checkpoint(cfg.checkpoint_path(), checkpoint)
    return checkpoint
