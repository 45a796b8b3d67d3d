import argparse
import os
import sys
from dataclasses import replace
from typing import List, Optional

from dotenv import load_dotenv
load_dotenv()

from src.action_parser import ActionScores, ensemble
from src.checkpoints import load_checkpoint
from src.config import load_run_config
from src.dataset import (
    load_config,
    load_dataset,
    save_dataset,
    split_minival,
)
from src.errors import ArgumentError, DapError
from src.evaluation import (
    MatchConfig,
    acc_p,
    align_videos,
    bottleneck_grid,
    restricted_flags,
    substitute_ground_truth,
)
from src.pipeline import (
    PipelineModels,
    build_detector,
    build_fusion_members,
    build_parser,
    build_video_provider,
    check_member_families,
    predict_dataset,
)
from src.report import (
    format_grid_table,
    format_metrics_table,
    grid_report,
    metrics_report,
    plot_grid,
    plot_history,
    write_report,
)
from src.synth import SyntheticSpec, synth_generate
from src.tools.frame_store import FrameStore
from src.trainer import default_frames_dir, run_stage

# Force UTF-8 for stdout/stderr (fixes Windows console encoding issues)
if sys.platform == "win32":
    sys.stdout.reconfigure(encoding='utf-8')
    sys.stderr.reconfigure(encoding='utf-8')


def cmd_synth(args):
    print("\n[Synthetic Dataset]")
    spec = SyntheticSpec(num_actions=args.num_actions, num_parts=args.num_parts, num_states=args.num_states,
                         videos_per_class=args.videos_per_class)
    print(f"[Step 1/3] Generating {spec.num_actions * spec.videos_per_class} videos (seed {args.seed})...")
    dataset = synth_generate(spec, args.seed, show_progress=True)

    print("[Step 2/3] Writing frames...")
    store = FrameStore(os.path.join(args.out, "frames"))
    for video_id, pixels in dataset.frames.items():
        store.save(video_id, pixels)

    print(f"[Step 3/3] Writing annotations (minival fraction {args.fraction})...")
    train, minival = split_minival(dataset.videos, args.fraction, args.seed, stratified=args.stratified)
    save_dataset(os.path.join(args.out, "all.json"), dataset.videos, dataset.config)
    save_dataset(os.path.join(args.out, "train.json"), train, dataset.config)
    save_dataset(os.path.join(args.out, "minival.json"), minival, dataset.config)
    print(f"[Synth] {len(train)} train / {len(minival)} minival videos written to {args.out}")


def cmd_train(args):
    overrides = {"seed": args.seed, "out_dir": args.out, "dataset": args.dataset, "epochs": args.epochs}
    cfg = load_run_config(args.stage, args.config, overrides=overrides)
    print(f"\n[Train:{cfg.stage}] {cfg.epochs} epochs, lr {cfg.lr}, {cfg.optimizer}, "
          f"{cfg.schedule} schedule{' ' + str(list(cfg.drop_steps)) if cfg.schedule == 'step' else ''}")
    checkpoint = run_stage(cfg, config_path=args.config, allow_mismatch=args.allow_config_mismatch)
    if args.plot:
        plot_history(checkpoint.metrics.get("history", []), args.plot, title=f"{cfg.stage} training loss")


def _stage_paths(args, out_dir: str):
    return (args.detector or os.path.join(out_dir, "detector.pt"),
            args.parser or os.path.join(out_dir, "part_parser.pt"),
            args.action or os.path.join(out_dir, "action_parser.pt"))


def load_models(args, dataset_config) -> PipelineModels:
    action_cfg = load_run_config("action_parser", args.config,
                                 overrides={"seed": args.seed, "out_dir": args.checkpoints})
    detector_path, parser_path, action_path = _stage_paths(args, action_cfg.out_dir)
    allow = args.allow_config_mismatch
    detector_ckpt = load_checkpoint(
        detector_path, "detector", load_run_config("detector", args.config).config_hash(dataset_config), allow)
    parser_ckpt = load_checkpoint(
        parser_path, "part_parser", load_run_config("part_parser", args.config).config_hash(dataset_config), allow)
    action_ckpt = load_checkpoint(action_path, "action_parser", action_cfg.config_hash(dataset_config), allow)

    settings = action_ckpt.settings
    provider = build_video_provider(settings["video_provider"], action_ckpt)
    check_member_families(settings["members"], provider)
    return PipelineModels(
        dataset_config=dataset_config,
        detector=build_detector(detector_ckpt),
        parser=build_parser(parser_ckpt),
        members=build_fusion_members(action_ckpt),
        weights=settings["weights"],
        provider=provider,
        num_frames=settings["num_frames"],
        num_persons=settings["num_persons"],
        seed=action_cfg.seed,
    )


def cmd_predict(args):
    print("\n[Predict]")
    print(f"[Step 1/3] Loading dataset {args.dataset}...")
    dataset_config = load_config(args.dataset)
    videos = load_dataset(args.dataset, dataset_config)
    store = FrameStore(args.frames_dir or default_frames_dir(args.dataset))

    print("[Step 2/3] Loading checkpoints...")
    models = load_models(args, dataset_config)

    print(f"[Step 3/3] Predicting {len(videos)} videos...")
    predictions = predict_dataset(videos, store, models, show_progress=True)
    save_dataset(args.out, predictions, dataset_config, predictions=True)
    print(f"[Predict] Predictions saved to: {args.out}")


def _load_pair(args):
    config = load_config(args.gt)
    ground_truth = load_dataset(args.gt, config)
    predictions = load_dataset(args.pred, config, predictions=True)
    align_videos(predictions, ground_truth)
    return config, predictions, ground_truth


def _match_config(args) -> MatchConfig:
    return MatchConfig(iou_threshold=args.iou, psc_threshold=args.theta)


def cmd_evaluate(args):
    config, predictions, ground_truth = _load_pair(args)
    report = metrics_report(predictions, ground_truth, config, _match_config(args))
    table = format_metrics_table(report)
    print(f"\n[Evaluate] {report['videos']} videos")
    print(table)
    if args.out:
        write_report(args.out, report, table)


def cmd_diagnose(args):
    config, predictions, ground_truth = _load_pair(args)
    cfg = _match_config(args)
    grid = bottleneck_grid(predictions, ground_truth, cfg, num_actions=config.C, none_state=config.none_state)
    table = format_grid_table(grid)
    print(f"\n[Diagnose] Ground-truth substitution over {len(ground_truth)} videos")
    print(table)
    document = grid_report(grid)

    flags = restricted_flags(args.flags)
    if flags is not None:
        substituted = substitute_ground_truth(predictions, ground_truth, flags, cfg, config.C, config.none_state)
        value = acc_p(substituted, ground_truth, cfg)
        document["restricted"] = {"label": flags.label(), "acc_p": value}
        print(f"[Diagnose] {flags.label()}: Acc^p = {value * 100:.2f}%")
    if args.out:
        write_report(args.out, document, table)
    if args.plot:
        plot_grid(grid, args.plot)


def cmd_ensemble(args):
    if len(args.preds) < 1:
        raise ArgumentError("ensemble needs at least one prediction file")
    config = load_config(args.preds[0])
    runs = [load_dataset(path, config, predictions=True) for path in args.preds]
    by_id = [{video.video_id: video for video in run} for run in runs]
    for other in runs[1:]:
        align_videos(other, runs[0])
    weights: Optional[List[float]] = [float(w) for w in args.weights.split(",")] if args.weights else None

    merged = []
    for video in runs[0]:
        scores = ensemble([ActionScores(scores=list(run[video.video_id].action_scores), provenance=path)
                           for run, path in zip(by_id, args.preds)], weights)
        action_id = scores.predicted
        frames = tuple(replace(frame, frame_action_id=action_id) for frame in video.frames)
        merged.append(replace(video, action_id=action_id, frames=frames,
                              action_scores=tuple(float(s) for s in scores.scores)))
    save_dataset(args.out, merged, config, predictions=True)
    print(f"[Ensemble] {len(args.preds)} prediction files merged into: {args.out}")


def _add_checkpoint_flags(p):
    p.add_argument("--config", help="Run-config file (dotenv format).")
    p.add_argument("--checkpoints", help="Directory holding detector.pt, part_parser.pt, action_parser.pt.")
    p.add_argument("--detector", help="Detector checkpoint (overrides --checkpoints).")
    p.add_argument("--parser", help="Part parser checkpoint (overrides --checkpoints).")
    p.add_argument("--action", help="Action parser checkpoint (overrides --checkpoints).")
    p.add_argument("--allow-config-mismatch", action="store_true",
                   help="Load checkpoints trained under a different architecture config.")


def _add_metric_flags(p):
    p.add_argument("--pred", required=True, help="Prediction file.")
    p.add_argument("--gt", required=True, help="Ground-truth dataset file.")
    p.add_argument("--out", help="Write the report (JSON + .txt table) here.")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold for person and part matches.")
    p.add_argument("--theta", type=float, default=0.5, help="PSC threshold gating Acc^p.")


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Part-level action parsing pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic dataset with frames and a minival split.")
    p.add_argument("--out", default="data/synth", help="Output directory.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos-per-class", type=int, default=50)
    p.add_argument("--num-actions", type=int, default=4)
    p.add_argument("--num-parts", type=int, default=4)
    p.add_argument("--num-states", type=int, default=3)
    p.add_argument("--fraction", type=float, default=0.3, help="Share of videos held out as minival.")
    p.add_argument("--stratified", action="store_true", help="Hold out the fraction per action class.")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="Train one stage.")
    p.add_argument("stage", choices=["detector", "part_parser", "action_parser"])
    p.add_argument("--config", help="Run-config file (dotenv format).")
    p.add_argument("--dataset", help="Training dataset (overrides DATASET).")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="Checkpoint directory (overrides OUT_DIR).")
    p.add_argument("--plot", help="Write a loss-curve image here.")
    p.add_argument("--allow-config-mismatch", action="store_true",
                   help="Load upstream checkpoints trained under a different architecture config.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="Run the full pipeline and write a prediction file.")
    _add_checkpoint_flags(p)
    p.add_argument("--dataset", required=True, help="Dataset to predict (labels are ignored).")
    p.add_argument("--frames-dir", help="Frame store directory (default: <dataset dir>/frames).")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="Prediction file to write.")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Score a prediction file: mAP, Acc, Acc^p.")
    _add_metric_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="Ground-truth substitution grid.")
    _add_metric_flags(p)
    p.add_argument("--flags", help="Also score one combination, e.g. actor_det,part_det,state_parsing,action_parsing.")
    p.add_argument("--plot", help="Write a bar chart of the grid here.")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ensemble", help="Average the action scores of several prediction files.")
    p.add_argument("preds", nargs="+", help="Prediction files (the first one provides boxes and parts).")
    p.add_argument("--weights", help="Comma-separated weights, one per file.")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        args.func(args)
    except DapError as e:
        print(f"Error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
