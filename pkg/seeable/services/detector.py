"""
检测器服务
编码器/投影器约定、玩具编码器，以及帧级与视频级一致性评分
"""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from ..core.exceptions import DataError, DomainError, ModelError
from ..models.data_models import (
    FaceImage,
    FrameScore,
    ManifestRecord,
    PrototypeSet,
    ScoreReport,
    ScoringConfig,
    ToyEncoderSpec,
)
from .dataset import FaceLoader, group_by_video
from .discrepancy_factory import DiscrepancyFactory

SCORE_COLUMNS = ["video_id", "label", "consistency_score", "anomaly_score", "n_frames"]

_ACTIVATIONS = {"relu": nn.ReLU, "gelu": nn.GELU, "tanh": nn.Tanh}


class SeeableModel(nn.Module):
    """
    编码器 f_e 与投影器 f_p 的组合

    forward 返回 (h, z)，h 为骨干特征，z = f_p(h) / ‖f_p(h)‖。
    """

    feature_dim: int
    embedding_dim: int

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def project(self, h: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.encode(x)
        return h, F.normalize(self.project(h), dim=1)


class ToyEncoder(SeeableModel):
    """
    卷积(+BatchNorm) + 平均池化堆叠，自适应池化到 pooled_size×pooled_size 后展平得到 h，
    单层线性投影器

    展平的小特征图保留了粗略位置，差异所在的子掩膜区域因此可分。
    """

    def __init__(self, spec: ToyEncoderSpec):
        super().__init__()
        self.spec = spec
        layers: List[nn.Module] = []
        in_channels = spec.in_channels
        for out_channels in spec.channels:
            layers.append(
                nn.Conv2d(in_channels, out_channels, spec.kernel_size, padding=spec.kernel_size // 2)
            )
            if spec.batch_norm:
                layers.append(nn.BatchNorm2d(out_channels))
            layers += [_ACTIVATIONS[spec.activation](), nn.AvgPool2d(2)]
            in_channels = out_channels
        layers += [nn.AdaptiveAvgPool2d(spec.pooled_size), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        self.feature_norm = (
            nn.LayerNorm(spec.feature_dim, elementwise_affine=False) if spec.feature_norm else nn.Identity()
        )
        self.projector = nn.Linear(spec.feature_dim, spec.embedding_dim)
        self.feature_dim = spec.feature_dim
        self.embedding_dim = spec.embedding_dim

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_norm(self.features(x))

    def project(self, h: torch.Tensor) -> torch.Tensor:
        return self.projector(h)


def toy_encoder(spec: ToyEncoderSpec, seed: int = 0, dtype: torch.dtype = torch.float32) -> ToyEncoder:
    """按种子确定性初始化玩具编码器，不影响全局随机状态"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToyEncoder(spec)
    return model.to(dtype)


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def images_to_tensor(images: Sequence[FaceImage], dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    """N 张 H×W×3 图像 -> N×3×H×W，像素缩放到 [0, 1]"""
    stacked = np.stack([img.pixels for img in images]).transpose(0, 3, 1, 2) / 255.0
    return torch.as_tensor(np.ascontiguousarray(stacked), dtype=dtype, device=device)


def _check_compatible(model: SeeableModel, protos: PrototypeSet, factory: DiscrepancyFactory) -> None:
    if model.embedding_dim != protos.dim:
        raise ModelError(f"模型输出维度 {model.embedding_dim} 与原型维度 {protos.dim} 不一致")
    if protos.n_classes != factory.n_classes:
        raise ModelError(f"原型类别数 {protos.n_classes} 与差异类别数 {factory.n_classes} 不一致")


def score_frame(
    img: FaceImage,
    model: SeeableModel,
    protos: PrototypeSet,
    factory: DiscrepancyFactory,
    seed: int = 0,
) -> FrameScore:
    """
    单帧一致性得分

    对每个差异类别 k 合成一次软差异(种子由 seed、帧号与 k 决定)，
    贡献 = ‖h_k‖·(1 + sim(z_k, p_k))，得分为全部贡献之和。
    """
    _check_compatible(model, protos, factory)
    images = [
        factory.synthesize_class(img, k, np.random.default_rng([seed, img.frame_index, k]))
        for k in range(factory.n_classes)
    ]

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            h, z = model(images_to_tensor(images, dtype=model_dtype(model)))
    finally:
        model.train(was_training)

    vectors = protos.as_tensor(dtype=torch.float64)[protos.reserve_offset:]
    sims = (z.double() * vectors).sum(dim=1).clamp(-1.0, 1.0)
    contributions = (h.double().norm(dim=1) * (1.0 + sims)).tolist()
    return FrameScore(score=float(sum(contributions)), contributions=contributions)


def select_frame_indices(n_frames: int, max_frames: int = 30) -> List[int]:
    """均匀间隔抽取至多 max_frames 帧：i·n // max_frames"""
    if n_frames < 1:
        raise DomainError("帧列表不能为空")
    if n_frames <= max_frames:
        return list(range(n_frames))
    return [i * n_frames // max_frames for i in range(max_frames)]


def _exact_mean(values: np.ndarray) -> float:
    # 以首元素为基准求均值，全部相同时结果与该值完全相等
    base = values[0]
    return float(base + (values - base).mean())


def score_video(
    frames: Sequence[FaceImage],
    model: SeeableModel,
    protos: PrototypeSet,
    factory: DiscrepancyFactory,
    seed: int = 0,
    max_frames: int = 30,
    video_id: str = "",
    label: Optional[str] = None,
) -> ScoreReport:
    """视频得分 = 抽样帧得分的算术平均"""
    if not frames:
        raise DomainError("视频帧列表不能为空")
    indices = select_frame_indices(len(frames), max_frames)
    scored = [score_frame(frames[i], model, protos, factory, seed) for i in indices]

    frame_scores = np.array([s.score for s in scored])
    contributions = np.array([s.contributions for s in scored]).mean(axis=0)
    return ScoreReport(
        video_id=video_id,
        label=label,
        frame_indices=indices,
        frame_scores=frame_scores.tolist(),
        consistency_score=_exact_mean(frame_scores),
        contributions=contributions.tolist(),
    )


def score_manifest(
    records: Sequence[ManifestRecord],
    loader: FaceLoader,
    model: SeeableModel,
    protos: PrototypeSet,
    factory: DiscrepancyFactory,
    cfg: Optional[ScoringConfig] = None,
) -> List[ScoreReport]:
    """
    对清单中的每个视频评分

    只加载被抽中的帧；jobs > 1 时按视频并发，结果按清单中视频首次出现的顺序返回。
    """
    cfg = cfg or ScoringConfig()
    _check_compatible(model, protos, factory)
    groups = group_by_video(records)
    if not groups:
        raise DataError("清单中没有可评分的帧")

    def _score(item) -> ScoreReport:
        video_id, frames = item
        chosen = [frames[i] for i in select_frame_indices(len(frames), cfg.max_frames)]
        report = score_video(
            [loader.load(r) for r in chosen],
            model,
            protos,
            factory,
            seed=cfg.seed,
            max_frames=cfg.max_frames,
            video_id=video_id,
            label=frames[0].label,
        )
        logger.debug(f"视频 {video_id}: consistency={report.consistency_score:.6f} ({report.n_frames} 帧)")
        return report

    logger.info(f"开始评分: {len(groups)} 个视频, jobs={cfg.jobs}")
    # 并发评分前统一切到推理模式，各线程只读参数；结束后恢复调用方的模式
    was_training = model.training
    model.eval()
    try:
        if cfg.jobs == 1:
            return [_score(item) for item in groups.items()]
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(_score, groups.items()))
    finally:
        model.train(was_training)


def save_scores(reports: Sequence[ScoreReport], path: Union[str, Path]) -> Path:
    """写出视频级得分表"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [
            {
                "video_id": r.video_id,
                "label": r.label,
                "consistency_score": r.consistency_score,
                "anomaly_score": r.anomaly_score,
                "n_frames": r.n_frames,
            }
            for r in reports
        ],
        columns=SCORE_COLUMNS,
    )
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"得分表已写出: {path} ({len(frame)} 个视频)")
    return path


def load_scores(path: Union[str, Path]) -> pd.DataFrame:
    """读取视频级得分表"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"得分文件不存在: {path}")
    try:
        frame = pd.read_csv(path, dtype={"video_id": str, "label": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError, OSError) as e:
        raise DataError(f"得分文件解析失败: {path}: {e}") from e
    missing = [c for c in SCORE_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"得分文件缺少字段: {missing}")
    return frame
