"""Command-line interface: synth | train | infer | eval | plot.

Every subcommand can read defaults from a JSON config file (--config);
explicit flags override file values, and the merged result is echoed to
``<out>/effective_config.json`` so any run can be reproduced bit-exactly by
pointing --config at the echo.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import data as data_mod
from . import evaluation, postprocess, training

SYNTH_DEFAULTS = {
    "num_videos": 16,
    "num_snippets": 96,
    "feature_dim": 16,
    "num_classes": 4,
    "instances": 3,
    "noise_sigma": 0.1,
    "seed": 0,
    "min_len": 4,
    "max_len": 16,
}

TRAIN_DEFAULTS = {
    "epochs": training.TrainConfig.epochs,
    "lr": training.TrainConfig.lr,
    "lr_decay_epoch": training.TrainConfig.lr_decay_epoch,
    "lr_decayed": training.TrainConfig.lr_decayed,
    "momentum": training.TrainConfig.momentum,
    "seed": training.TrainConfig.seed,
    "levels": training.TrainConfig.levels,
    "width": training.TrainConfig.width,
    "bins": training.TrainConfig.bins,
    "bin_cov": training.TrainConfig.bin_coverage,
    "sigma": training.TrainConfig.sigma,
    "feature_noise": training.TrainConfig.feature_noise,
    "lambda_rs": training.TrainConfig.reg_threshold,
    "lambda_norm": training.LossConfig.norm,
    "focal_gamma": training.LossConfig.focal_gamma,
    "focal_beta": training.LossConfig.focal_beta,
    "smooth_l1_delta": training.LossConfig.smooth_l1_delta,
    "focal_variant": training.LossConfig.focal_variant,
    "top_n_divisor": 8,
}

INFER_DEFAULTS = {
    "lambda_cls": 0.1,
    "lambda_vid": 0.1,
    "nms": 0.2,
    "max_keep": 200,
    "score_mode": "cls_sqrt_start_end",
    "no_rcm": False,
    "workers": 1,
}

EVAL_DEFAULTS = {
    "thresholds": "0.3:0.1:0.7",
    "f1_score_threshold": None,
    "plot": False,
}


class CliError(SystemExit):
    def __init__(self, message: str, code: int = 2):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(code)


def _merge_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags; unknown file keys rejected."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {config_path}: {e}")
        unknown = set(doc) - set(defaults)
        if unknown:
            raise CliError(f"unknown config keys in {config_path}: {sorted(unknown)}")
        merged.update(doc)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _write_echo(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_thresholds(spec: str):
    try:
        if ":" in spec:
            start, step, stop = (float(x) for x in spec.split(":"))
            return evaluation.threshold_grid(start, step, stop)
        return (float(spec),)
    except ValueError as e:
        raise CliError(f"bad --thresholds {spec!r}: {e}")


def cmd_synth(args) -> int:
    cfg = _merge_config(SYNTH_DEFAULTS, args)
    try:
        spec = data_mod.SynthSpec(
            num_videos=int(cfg["num_videos"]),
            num_snippets=int(cfg["num_snippets"]),
            feature_dim=int(cfg["feature_dim"]),
            num_classes=int(cfg["num_classes"]),
            instances_per_video=int(cfg["instances"]),
            noise_sigma=float(cfg["noise_sigma"]),
            seed=int(cfg["seed"]),
            min_len=int(cfg["min_len"]),
            max_len=int(cfg["max_len"]),
        )
        dataset = data_mod.synth_generate(spec)
    except data_mod.DataError as e:
        raise CliError(str(e))
    manifest = data_mod.save_dataset(dataset, args.out)
    _write_echo(cfg, args.out)
    print(f"wrote {len(dataset.videos)} videos to {manifest}")
    return 0


def _train_config_from(cfg: dict) -> training.TrainConfig:
    loss = training.LossConfig(
        norm=float(cfg["lambda_norm"]),
        focal_gamma=float(cfg["focal_gamma"]),
        focal_beta=float(cfg["focal_beta"]),
        smooth_l1_delta=float(cfg["smooth_l1_delta"]),
        focal_variant=str(cfg["focal_variant"]),
        binarize_threshold=float(cfg["lambda_rs"]),
    )
    decay = cfg["lr_decay_epoch"]
    return training.TrainConfig(
        epochs=int(cfg["epochs"]),
        lr=float(cfg["lr"]),
        lr_decay_epoch=None if decay is None else int(decay),
        lr_decayed=float(cfg["lr_decayed"]),
        momentum=float(cfg["momentum"]),
        seed=int(cfg["seed"]),
        levels=int(cfg["levels"]),
        width=int(cfg["width"]),
        bins=int(cfg["bins"]),
        bin_coverage=float(cfg["bin_cov"]),
        sigma=float(cfg["sigma"]),
        feature_noise=float(cfg["feature_noise"]),
        reg_threshold=float(cfg["lambda_rs"]),
        top_n_divisor=int(cfg["top_n_divisor"]),
        loss=loss,
    )


def cmd_train(args) -> int:
    cfg = _merge_config(TRAIN_DEFAULTS, args)
    try:
        train_cfg = _train_config_from(cfg)
    except ValueError as e:
        raise CliError(str(e))
    try:
        dataset = data_mod.load_dataset(args.data)
    except data_mod.DataError as e:
        raise CliError(str(e))
    try:
        model, history = training.train(dataset, train_cfg)
    except training.TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    training.save_checkpoint(ckpt_path, model, train_cfg)
    training.save_history_csv(history, os.path.join(args.out, "history.csv"))
    _write_echo(cfg, args.out)
    final = history[-1].total if history else float("nan")
    print(f"trained {train_cfg.epochs} epochs; final mean loss {final:.6f}; wrote {ckpt_path}")
    return 0


def _detect_one(task):
    video, model, infer_cfg, divisor = task
    return video.id, postprocess.detect_video(video, model, infer_cfg, divisor)


def cmd_infer(args) -> int:
    cfg = _merge_config(INFER_DEFAULTS, args)
    try:
        model, train_cfg = training.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load checkpoint: {e}")
    try:
        dataset = data_mod.load_dataset(args.data)
    except data_mod.DataError as e:
        raise CliError(str(e))
    if dataset.feature_dim != model.feature_dim:
        raise CliError(
            f"dataset feature_dim {dataset.feature_dim} does not match "
            f"checkpoint feature_dim {model.feature_dim}"
        )
    if dataset.num_classes != model.num_classes:
        raise CliError(
            f"dataset has {dataset.num_classes} classes, checkpoint expects {model.num_classes}"
        )
    try:
        infer_cfg = postprocess.InferenceConfig(
            cls_threshold=float(cfg["lambda_cls"]),
            video_threshold=float(cfg["lambda_vid"]),
            nms_tiou=float(cfg["nms"]),
            max_keep=int(cfg["max_keep"]),
            score_mode=str(cfg["score_mode"]),
            video_gate=not bool(cfg["no_rcm"]),
        )
    except ValueError as e:
        raise CliError(str(e))
    workers = int(cfg["workers"])
    tasks = [(v, model, infer_cfg, train_cfg.top_n_divisor) for v in dataset.videos]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(_detect_one, tasks))
    else:
        pairs = [_detect_one(t) for t in tasks]
    results = {vid: cands for vid, cands in sorted(pairs, key=lambda p: p[0])}
    os.makedirs(args.out, exist_ok=True)
    pred_path = os.path.join(args.out, "predictions.json")
    data_mod.save_predictions(results, pred_path)
    _write_echo(cfg, args.out)
    total = sum(len(c) for c in results.values())
    print(f"wrote {total} detections over {len(results)} videos to {pred_path}")
    return 0


def _plot_report(report_doc: dict, out_path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    thresholds = report_doc["thresholds"]
    values = [report_doc["map_by_threshold"][f"{t:g}"] for t in thresholds]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([f"{t:g}" for t in thresholds], values, color="#4878b0")
    ax.axhline(report_doc["average_map"], color="#c44e52", linestyle="--", linewidth=1,
               label=f"average {report_doc['average_map']:.3f}")
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="upper right", frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def cmd_eval(args) -> int:
    cfg = _merge_config(EVAL_DEFAULTS, args)
    thresholds = _parse_thresholds(str(cfg["thresholds"]))
    try:
        dataset = data_mod.load_dataset(args.data)
        results = data_mod.load_predictions(args.predictions)
    except data_mod.DataError as e:
        raise CliError(str(e))
    try:
        report = evaluation.evaluate(results, dataset, thresholds)
    except ValueError as e:
        raise CliError(str(e))
    f1_thr = cfg["f1_score_threshold"]
    if f1_thr is not None:
        report.category_f1 = evaluation.category_f1(results, dataset, float(f1_thr))
    doc = evaluation.report_to_dict(report)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    table = evaluation.format_report_table(report)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    if cfg["plot"]:
        _plot_report(doc, os.path.join(args.out, "map_chart.png"))
    _write_echo(cfg, args.out)
    print(table)
    print(f"wrote {report_path}")
    return 0


def cmd_plot(args) -> int:
    try:
        with open(args.report, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read report {args.report}: {e}")
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "map_chart.png")
    _plot_report(doc, out_path)
    print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bindet",
        description="Temporal action detection with binned boundary decoding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out", required=True, help="output directory")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p_synth)
    p_synth.add_argument("--num-videos", type=int, dest="num_videos")
    p_synth.add_argument("--num-snippets", type=int, dest="num_snippets")
    p_synth.add_argument("--feature-dim", type=int, dest="feature_dim")
    p_synth.add_argument("--num-classes", type=int, dest="num_classes")
    p_synth.add_argument("--instances", type=int)
    p_synth.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--min-len", type=int, dest="min_len")
    p_synth.add_argument("--max-len", type=int, dest="max_len")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a model on a dataset")
    add_common(p_train)
    p_train.add_argument("--data", required=True, help="dataset manifest path")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--lr-decay-epoch", type=int, dest="lr_decay_epoch")
    p_train.add_argument("--lr-decayed", type=float, dest="lr_decayed")
    p_train.add_argument("--momentum", type=float)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--levels", type=int)
    p_train.add_argument("--width", type=int)
    p_train.add_argument("--bins", type=int)
    p_train.add_argument("--bin-cov", type=float, dest="bin_cov")
    p_train.add_argument("--sigma", type=float)
    p_train.add_argument("--feature-noise", type=float, dest="feature_noise")
    p_train.add_argument("--lambda-rs", type=float, dest="lambda_rs")
    p_train.add_argument("--lambda-norm", type=float, dest="lambda_norm")
    p_train.add_argument("--focal-gamma", type=float, dest="focal_gamma")
    p_train.add_argument("--focal-beta", type=float, dest="focal_beta")
    p_train.add_argument("--smooth-l1-delta", type=float, dest="smooth_l1_delta")
    p_train.add_argument("--focal-variant", choices=("soft", "binarized"), dest="focal_variant")
    p_train.add_argument("--top-n-divisor", type=int, dest="top_n_divisor")
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="run detection with a checkpoint")
    add_common(p_infer)
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--data", required=True)
    p_infer.add_argument("--lambda-cls", type=float, dest="lambda_cls")
    p_infer.add_argument("--lambda-vid", type=float, dest="lambda_vid")
    p_infer.add_argument("--nms", type=float)
    p_infer.add_argument("--max-keep", type=int, dest="max_keep")
    p_infer.add_argument("--score-mode", choices=postprocess.SCORE_MODES, dest="score_mode")
    p_infer.add_argument(
        "--no-rcm",
        action="store_const",
        const=True,
        dest="no_rcm",
        help="disable video-level category gating",
    )
    p_infer.add_argument("--workers", type=int)
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="score predictions against a dataset")
    add_common(p_eval)
    p_eval.add_argument("--predictions", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--thresholds", help="grid start:step:stop or single value")
    p_eval.add_argument("--f1-score-threshold", type=float, dest="f1_score_threshold")
    p_eval.add_argument("--plot", action="store_const", const=True, help="also write a bar chart")
    p_eval.set_defaults(func=cmd_eval)

    p_plot = sub.add_parser("plot", help="bar chart from an existing report")
    p_plot.add_argument("--report", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
