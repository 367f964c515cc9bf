"""
命令行入口
prototypes / factory-preview / synth-corpus / train / score / eval / plot
"""

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from loguru import logger

from .. import __version__
from ..core.config import settings
from ..core.config_loader import ConfigLoader
from ..core.exceptions import DataError, SeeableError, UsageError
from ..core.logging import setup_logging
from ..services.dataset import FaceLoader, filter_records, load_manifest, write_image
from ..services.detector import load_scores, save_scores, score_manifest
from ..services.discrepancy_factory import DiscrepancyFactory, make_contact_sheet
from ..services.prototype_geometry import gram_deviation, make_simplex_prototypes, save_prototypes
from ..services.synthetic_corpus import synth_corpus
from ..services.training_harness import (
    evaluate_auc,
    evaluate_localization,
    load_checkpoint,
    load_training_log,
    save_checkpoint,
    train,
)

CHECKPOINT_FILE = "checkpoint.pt"
TRAINING_LOG_FILE = "training_log.csv"
SCORES_FILE = "scores.csv"


class _Parser(argparse.ArgumentParser):
    """参数错误统一转为 UsageError，由 main 映射退出码"""

    def error(self, message):
        raise UsageError(message)


def _existing_file(value: str, what: str) -> Path:
    path = Path(value)
    if not path.is_file():
        raise DataError(f"{what}不存在: {path}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args):
    path = _existing_file(args.manifest, "清单文件")
    return path, load_manifest(path), FaceLoader(path.parent)


# ---------------------------------------------------------------- 子命令

def cmd_prototypes(args, loader: ConfigLoader) -> int:
    """生成原型文件并打印 Gram 矩阵偏差"""
    if args.count < 2:
        raise UsageError(f"--count 至少为 2，实际为 {args.count}")
    if args.dim < 1:
        raise UsageError(f"--dim 必须为正，实际为 {args.dim}")
    protos = make_simplex_prototypes(args.dim, args.count, reserve_offset=args.reserve_offset)
    path = save_prototypes(protos, _out_dir(args) / "prototypes.txt")
    summary = gram_deviation(protos)
    print(f"prototypes: D={protos.dim} K={protos.count} -> {path}")
    print(f"expected off-diagonal: {summary['expected_offdiag']:.17g}")
    print(f"max off-diagonal deviation: {summary['max_offdiag_deviation']:.3e}")
    print(f"max norm deviation: {summary['max_diag_deviation']:.3e}")
    return 0


def cmd_factory_preview(args, loader: ConfigLoader) -> int:
    """渲染软差异预览拼图"""
    _, records, faces = _manifest(args)
    real = filter_records(records, label="real")
    if not real:
        raise DataError("清单中没有真实帧")
    factory = DiscrepancyFactory(loader.get_submask_scheme(), loader.get_perturbation_config())

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    chosen = rng.choice(len(real), size=min(args.n, len(real)), replace=False)
    originals, results = [], []
    for idx in sorted(chosen.tolist()):
        img = faces.load(real[idx])
        y_loc, y_type = factory.decode(int(rng.integers(factory.n_classes)))
        originals.append(img)
        results.append(factory.synthesize_detailed(img, y_loc, y_type, rng))

    path = write_image(_out_dir(args) / "contact_sheet.png", make_contact_sheet(results, originals))
    for result in results:
        print(f"y={result.label.y} loc={result.label.y_loc} type={result.label.y_type} op={result.draw.op}")
    print(f"contact sheet -> {path}")
    return 0


def cmd_synth_corpus(args, loader: ConfigLoader) -> int:
    """生成合成数据集"""
    cfg = loader.get_corpus_config(
        n_videos=args.n_videos,
        frames_per_video=args.frames_per_video,
        image_size=args.image_size,
        held_out_frac=args.held_out_frac,
        n_fake_videos=args.n_fake_videos,
        seed=args.seed,
    )
    corpus = synth_corpus(
        cfg.n_videos,
        cfg.frames_per_video,
        cfg.seed,
        _out_dir(args),
        image_size=cfg.image_size,
        held_out_frac=cfg.held_out_frac,
        n_fake_videos=cfg.n_fake_videos,
    )
    print(f"manifest -> {corpus.manifest_path} ({len(corpus.records)} frames)")
    return 0


def cmd_train(args, loader: ConfigLoader) -> int:
    """在训练划分的真实帧上训练"""
    _, records, faces = _manifest(args)
    train_records = filter_records(records, split=args.split)
    if not train_records:
        raise DataError(f"清单中没有 split={args.split} 的帧")
    cfg = loader.get_train_config(
        epochs=args.epochs,
        batch_size=args.batch_size,
        embedding_dim=args.embedding_dim,
        grid_rows=args.grid_rows,
        grid_cols=args.grid_cols,
        lambda_mode=args.lambda_mode,
        objective=args.objective,
        optimizer=args.optimizer,
        seed=args.seed,
    )
    out = _out_dir(args)
    checkpoint = train(
        train_records,
        cfg,
        faces,
        scheme=loader.get_submask_scheme(),
        perturbation=loader.get_perturbation_config(),
        encoder_spec=loader.get_encoder_spec(),
        log_path=out / TRAINING_LOG_FILE,
    )
    path = save_checkpoint(checkpoint, out / CHECKPOINT_FILE)
    last = checkpoint.log_tail[-1]
    print(f"final loss: {last.total:.6f} (bcr={last.bcr:.6f}, gui={last.gui:.6f})")
    print(f"checkpoint -> {path}")
    return 0


def cmd_score(args, loader: ConfigLoader) -> int:
    """对清单中的视频评分"""
    checkpoint = load_checkpoint(_existing_file(args.checkpoint, "检查点"))
    _, records, faces = _manifest(args)
    selected = filter_records(records, split=args.split) if args.split else records
    cfg = loader.get_scoring_config(max_frames=args.max_frames, seed=args.seed, jobs=args.jobs)
    reports = score_manifest(selected, faces, checkpoint.model, checkpoint.prototypes, checkpoint.factory(), cfg)
    path = save_scores(reports, _out_dir(args) / SCORES_FILE)
    print(f"scores -> {path} ({len(reports)} videos)")
    return 0


def cmd_eval(args, loader: ConfigLoader) -> int:
    """根据得分表计算 AUC；给出检查点与清单时附带定位准确率"""
    table = load_scores(_existing_file(args.scores, "得分文件"))
    auc = evaluate_auc(table["anomaly_score"].tolist(), (table["label"] == "fake").tolist())
    print(f"AUC: {auc:.3f}")

    if args.checkpoint and args.manifest:
        checkpoint = load_checkpoint(_existing_file(args.checkpoint, "检查点"))
        _, records, faces = _manifest(args)
        held_out = filter_records(records, split=args.split, label="real")
        if not held_out:
            raise DataError(f"清单中没有 split={args.split} 的真实帧")
        accuracy = evaluate_localization(
            checkpoint.model,
            checkpoint.prototypes,
            checkpoint.factory(),
            [faces.load(r) for r in held_out],
            seed=args.seed if args.seed is not None else 0,
        )
        print(f"localization accuracy: {accuracy:.3f}")
    return 0


def cmd_plot(args, loader: ConfigLoader) -> int:
    """绘制损失曲线与得分直方图"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not args.log and not args.scores:
        raise UsageError("plot 需要 --log 或 --scores")
    out = _out_dir(args)

    if args.log:
        history = load_training_log(args.log)
        fig, ax = plt.subplots(figsize=(6, 4))
        for column in ("total", "bcr", "gui"):
            ax.plot(history["epoch"], history[column], label=column)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss_curve.png", dpi=100)
        plt.close(fig)
        print(f"loss curve -> {out / 'loss_curve.png'}")

    if args.scores:
        table = load_scores(args.scores)
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, color in (("real", "tab:green"), ("fake", "tab:red")):
            values = table.loc[table["label"] == label, "consistency_score"]
            if len(values):
                ax.hist(values, bins=20, alpha=0.6, color=color, label=label)
        ax.set_xlabel("consistency score")
        ax.set_ylabel("videos")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "score_hist.png", dpi=100)
        plt.close(fig)
        print(f"score histogram -> {out / 'score_hist.png'}")
    return 0


COMMANDS: Dict[str, Callable] = {
    "prototypes": cmd_prototypes,
    "factory-preview": cmd_factory_preview,
    "synth-corpus": cmd_synth_corpus,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


# ---------------------------------------------------------------- 解析

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML 配置文件路径")
    common.add_argument("--seed", type=int, default=None, help="随机种子(覆盖配置)")
    common.add_argument("--out", default="out", help="输出目录")
    common.add_argument("--jobs", type=int, default=None, help="评分并发数")
    common.add_argument("--log-level", default=None, help="日志级别")
    common.add_argument("--log-file", default=None, help="日志文件路径")

    parser = _Parser(prog="seeable", description="单类深度伪造检测")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prototypes", parents=[common], help="生成超球面原型")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--reserve-offset", type=int, choices=[0, 1], default=0)

    p = sub.add_parser("factory-preview", parents=[common], help="软差异预览")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n", type=int, default=4)

    p = sub.add_parser("synth-corpus", parents=[common], help="生成合成数据集")
    p.add_argument("--n-videos", type=int, default=None)
    p.add_argument("--frames-per-video", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--held-out-frac", type=float, default=None)
    p.add_argument("--n-fake-videos", type=int, default=None)

    p = sub.add_parser("train", parents=[common], help="单类训练")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--embedding-dim", type=int, default=None)
    p.add_argument("--grid-rows", type=int, default=None)
    p.add_argument("--grid-cols", type=int, default=None)
    p.add_argument("--lambda-mode", choices=["ramp", "constant", "off"], default=None)
    p.add_argument("--objective", choices=["bcr", "supcon", "cross_entropy"], default=None)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default=None)

    p = sub.add_parser("score", parents=[common], help="视频评分")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--max-frames", type=int, default=None)

    p = sub.add_parser("eval", parents=[common], help="计算 AUC")
    p.add_argument("--scores", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test")

    p = sub.add_parser("plot", parents=[common], help="绘制损失曲线与得分直方图")
    p.add_argument("--log", default=None)
    p.add_argument("--scores", default=None)
    return parser


def _configure(args) -> ConfigLoader:
    loader = ConfigLoader(args.config)
    log_cfg = loader.get_logging_config()
    setup_logging(
        level=args.log_level or log_cfg.get("level", settings.LOG_LEVEL),
        log_file=args.log_file or log_cfg.get("file"),
        rotation=log_cfg.get("rotation", "100 MB"),
        retention=log_cfg.get("retention", "30 days"),
    )
    if settings.NUM_THREADS > 0:
        torch.set_num_threads(settings.NUM_THREADS)
    loader.validate_config()
    logger.debug(f"配置摘要: {loader.get_config_summary()}")
    return loader


def main(argv: Optional[List[str]] = None) -> int:
    """解析参数并执行子命令，返回退出码"""
    try:
        args = build_parser().parse_args(argv)
        loader = _configure(args)
        logger.debug(f"执行命令: {args.command}")
        return COMMANDS[args.command](args, loader)
    except SeeableError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        # 未被加载器包装的文件系统错误按数据错误处理
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code
    except KeyboardInterrupt:
        logger.info("用户中断")
        return 1
