"""
训练服务
单类(仅真实人脸)训练循环、批次构造、检查点与评估
"""

import math
import queue
import threading
import time
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..core.exceptions import DataError, DomainError, ModelError, NumericError
from ..models.data_models import (
    EmbeddingBatch,
    FaceImage,
    ManifestRecord,
    PerturbationConfig,
    PrototypeSet,
    SubmaskKind,
    SubmaskScheme,
    ToyEncoderSpec,
    TrainConfig,
    TrainingLogRow,
)
from .dataset import FaceLoader, group_by_video
from .detector import ToyEncoder, images_to_tensor, model_dtype, toy_encoder
from .discrepancy_factory import DiscrepancyFactory
from .guidance_graph import build_graph_for_scheme
from .losses import compute_objective, lambda_schedule
from .prototype_geometry import make_simplex_prototypes, match_prototypes

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ["epoch", "lr", "lam", "bcr", "gui", "total", "wall_clock"]
LOG_TAIL = 20


# ---------------------------------------------------------------- 批次

def ensure_real_only(records: Sequence[ManifestRecord]) -> None:
    """单类约束：训练数据中不允许出现伪造帧"""
    fakes = [r.image_path for r in records if r.is_fake]
    if fakes:
        raise DataError(f"训练数据中包含 {len(fakes)} 个伪造帧，例如 {fakes[0]}")


def epoch_batches(video_ids: Sequence[str], seed: int, epoch: int, batch_size: int) -> List[List[str]]:
    """
    每个 epoch 重新打乱视频顺序并切分为 ⌈n / batch_size⌉ 个批次

    最后一个不满的批次用打乱序列开头、尚未出现在该批次中的视频补齐。
    """
    if len(video_ids) < batch_size:
        raise DataError(f"不同视频数 {len(video_ids)} 少于批大小 {batch_size}")
    order = [video_ids[i] for i in np.random.default_rng([seed, epoch]).permutation(len(video_ids))]
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    last = batches[-1]
    for vid in order:
        if len(last) == batch_size:
            break
        if vid not in last:
            last.append(vid)
    return batches


def build_batch(
    records: Sequence[ManifestRecord],
    rng: np.random.Generator,
    factory: DiscrepancyFactory,
    batch_size: int,
    loader: FaceLoader,
    video_ids: Optional[Sequence[str]] = None,
) -> Tuple[List[FaceImage], np.ndarray]:
    """
    构造一个训练批次

    每个视频至多取一帧；每张图像合成一个差异类别均匀抽取的软差异。
    video_ids 为空时由 rng 从全部视频中无放回抽取。
    """
    ensure_real_only(records)
    groups = group_by_video(records)
    if video_ids is None:
        if len(groups) < batch_size:
            raise DataError(f"不同视频数 {len(groups)} 少于批大小 {batch_size}")
        keys = list(groups)
        video_ids = [keys[i] for i in rng.choice(len(keys), size=batch_size, replace=False)]
    elif len(set(video_ids)) != len(video_ids):
        raise DataError("同一批次中的视频必须互不相同")

    images: List[FaceImage] = []
    labels = np.empty(len(video_ids), dtype=np.int64)
    for i, vid in enumerate(video_ids):
        frames = groups[vid]
        record = frames[int(rng.integers(len(frames)))]
        labels[i] = int(rng.integers(factory.n_classes))
        images.append(factory.synthesize_class(loader.load(record), int(labels[i]), rng))
    return images, labels


def cosine_lr(epoch: int, total_epochs: int, lr_start: float, lr_end: float) -> float:
    """余弦学习率：第 0 个 epoch 为 lr_start，最后一个 epoch 为 lr_end"""
    if total_epochs == 1:
        return lr_start
    progress = epoch / (total_epochs - 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- 检查点

class Checkpoint(BaseModel):
    """训练结果：模型、原型、配置快照与日志尾部"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: ToyEncoder
    encoder_spec: ToyEncoderSpec
    prototypes: PrototypeSet
    train_config: TrainConfig
    scheme: SubmaskScheme
    perturbation: PerturbationConfig
    epoch: int
    log_tail: List[TrainingLogRow] = Field(default_factory=list)
    format_version: int = CHECKPOINT_VERSION

    def factory(self) -> DiscrepancyFactory:
        return DiscrepancyFactory(self.scheme, self.perturbation)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """保存检查点(仅包含张量与基本类型，可用 weights_only 方式加载)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": checkpoint.format_version,
        "model_state": checkpoint.model.state_dict(),
        "encoder_spec": checkpoint.encoder_spec.model_dump(mode="json"),
        "prototypes": {
            "dim": checkpoint.prototypes.dim,
            "count": checkpoint.prototypes.count,
            "reserve_offset": checkpoint.prototypes.reserve_offset,
            "vectors": torch.as_tensor(checkpoint.prototypes.vectors, dtype=torch.float64),
        },
        "train_config": checkpoint.train_config.model_dump(mode="json"),
        "scheme": checkpoint.scheme.model_dump(mode="json"),
        "perturbation": checkpoint.perturbation.model_dump(mode="json"),
        "epoch": checkpoint.epoch,
        "log_tail": [row.model_dump() for row in checkpoint.log_tail],
    }
    torch.save(payload, path)
    logger.info(f"检查点已保存: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """加载检查点并重建模型"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"检查点不存在: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise DataError(f"检查点读取失败: {path}: {e}") from e

    if not isinstance(payload, dict):
        raise DataError(f"检查点格式无效: {path}")
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"不支持的检查点版本: {version}")

    try:
        spec = ToyEncoderSpec(**payload["encoder_spec"])
        state = payload["model_state"]
        proto = payload["prototypes"]
        prototypes = PrototypeSet(
            dim=proto["dim"],
            count=proto["count"],
            vectors=proto["vectors"].numpy(),
            reserve_offset=proto["reserve_offset"],
        )
        snapshot = dict(
            train_config=TrainConfig(**payload["train_config"]),
            scheme=SubmaskScheme(**payload["scheme"]),
            perturbation=PerturbationConfig(**payload["perturbation"]),
            epoch=payload["epoch"],
            log_tail=[TrainingLogRow(**row) for row in payload["log_tail"]],
        )
    except (KeyError, ValidationError) as e:
        raise DataError(f"检查点内容不完整: {path}: {e}") from e

    model = toy_encoder(spec, seed=0, dtype=next(iter(state.values())).dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise ModelError(f"检查点参数与编码器结构不匹配: {path}: {e}") from e

    logger.debug(f"检查点加载成功: {path} (epoch {snapshot['epoch']})")
    return Checkpoint(model=model, encoder_spec=spec, prototypes=prototypes, **snapshot)


def save_training_log(rows: Sequence[TrainingLogRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([row.model_dump() for row in rows], columns=LOG_COLUMNS).to_csv(
        path, index=False, float_format="%.17g"
    )
    return path


def load_training_log(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"训练日志不存在: {path}")
    try:
        return pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError, OSError) as e:
        raise DataError(f"训练日志解析失败: {path}: {e}") from e


# ---------------------------------------------------------------- 训练器

_DONE = object()


class Trainer:
    """单类训练器"""

    def __init__(
        self,
        records: Sequence[ManifestRecord],
        cfg: TrainConfig,
        loader: FaceLoader,
        scheme: Optional[SubmaskScheme] = None,
        perturbation: Optional[PerturbationConfig] = None,
        encoder_spec: Optional[ToyEncoderSpec] = None,
        log_path: Optional[Union[str, Path]] = None,
    ):
        ensure_real_only(records)
        self.records = list(records)
        self.cfg = cfg
        self.loader = loader
        self.log_path = Path(log_path) if log_path else None

        scheme = scheme or SubmaskScheme()
        if scheme.kind != SubmaskKind.CONVEX_HULL:
            scheme = scheme.model_copy(update={"rows": cfg.grid_rows, "cols": cfg.grid_cols})
        self.scheme = scheme
        self.perturbation = perturbation or PerturbationConfig()
        self.factory = DiscrepancyFactory(self.scheme, self.perturbation)
        self.graph = build_graph_for_scheme(self.scheme)

        reserve = 1 if cfg.reserve_pristine else 0
        self.prototypes = make_simplex_prototypes(
            cfg.embedding_dim, self.factory.n_classes + reserve, reserve_offset=reserve
        )
        spec = encoder_spec or ToyEncoderSpec()
        self.encoder_spec = spec.model_copy(update={"embedding_dim": cfg.embedding_dim})
        self.model = toy_encoder(self.encoder_spec, seed=cfg.seed, dtype=cfg.torch_dtype)

        self.groups = group_by_video(self.records)
        self.video_ids = list(self.groups)
        if len(self.video_ids) < cfg.batch_size:
            raise DataError(f"不同视频数 {len(self.video_ids)} 少于批大小 {cfg.batch_size}")
        size = loader.load(self.records[0]).size
        if size != (cfg.image_size, cfg.image_size):
            logger.warning(f"图像尺寸 {size} 与配置 image_size={cfg.image_size} 不一致，按实际尺寸训练")

        self.history: List[TrainingLogRow] = []
        self._stop = threading.Event()
        self.total_steps = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.video_ids) / self.cfg.batch_size)

    def make_batch(self, epoch: int, step: int, video_ids: Sequence[str]) -> Tuple[List[FaceImage], np.ndarray]:
        rng = np.random.default_rng([self.cfg.seed, epoch, step])
        return build_batch(self.records, rng, self.factory, self.cfg.batch_size, self.loader, video_ids)

    def _inline_batches(self, epoch: int) -> Iterator[Tuple[List[FaceImage], np.ndarray]]:
        plan = epoch_batches(self.video_ids, self.cfg.seed, epoch, self.cfg.batch_size)
        for step, video_ids in enumerate(plan):
            yield self.make_batch(epoch, step, video_ids)

    def _prefetched_batches(self, epoch: int) -> Iterator[Tuple[List[FaceImage], np.ndarray]]:
        """后台线程合成批次，经有界队列交给优化循环"""
        buffer: "queue.Queue" = queue.Queue(maxsize=self.cfg.prefetch_batches)

        def _put(item) -> bool:
            while not self._stop.is_set():
                try:
                    buffer.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def _produce():
            try:
                for batch in self._inline_batches(epoch):
                    if not _put(batch):
                        return
            except Exception as e:
                _put(e)
                return
            _put(_DONE)

        producer = threading.Thread(target=_produce, daemon=True)
        producer.start()
        try:
            while True:
                item = buffer.get()
                if item is _DONE:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self._stop.set()
            producer.join(timeout=5)
            self._stop.clear()

    def _batches(self, epoch: int):
        if self.cfg.strict_deterministic:
            return self._inline_batches(epoch)
        return self._prefetched_batches(epoch)

    def _make_optimizer(self) -> torch.optim.Optimizer:
        cfg = self.cfg
        if cfg.optimizer == "adam":
            return torch.optim.Adam(self.model.parameters(), lr=cfg.lr_start, weight_decay=cfg.weight_decay)
        return torch.optim.SGD(
            self.model.parameters(), lr=cfg.lr_start, momentum=cfg.momentum, weight_decay=cfg.weight_decay
        )

    def _step(self, optimizer, images, labels, lam: float) -> Dict[str, float]:
        x = images_to_tensor(images, dtype=model_dtype(self.model))
        h, z = self.model(x)
        batch = EmbeddingBatch(
            z=z, labels=torch.as_tensor(labels, dtype=torch.long), h_norms=h.detach().norm(dim=1)
        )
        parts = compute_objective(
            batch,
            self.prototypes,
            self.graph,
            self.cfg.tau,
            lam,
            n_type=self.factory.n_type,
            objective=self.cfg.objective,
        )
        if not torch.isfinite(parts.total):
            values = parts.as_floats()
            logger.error(f"损失出现非有限值: {values}")
            raise NumericError(f"训练发散: 第 {self.total_steps} 步损失为 {values['total']}")

        optimizer.zero_grad()
        parts.total.backward()
        optimizer.step()
        self.total_steps += 1
        return parts.as_floats()

    def run(self) -> Checkpoint:
        """执行完整训练并返回最终检查点"""
        cfg = self.cfg
        logger.info(
            f"开始训练: {len(self.video_ids)} 个真实视频, {cfg.epochs} 个 epoch, "
            f"每 epoch {self.steps_per_epoch} 步, K={self.prototypes.count}, D={cfg.embedding_dim}"
        )
        started = time.perf_counter()
        optimizer = self._make_optimizer()
        self.model.train()

        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)
            for group in optimizer.param_groups:
                group["lr"] = lr
            lam = lambda_schedule(epoch, cfg.epochs, cfg.lambda_max, cfg.lambda_mode)

            sums = {"bcr": 0.0, "gui": 0.0, "total": 0.0}
            steps = 0
            for images, labels in self._batches(epoch):
                values = self._step(optimizer, images, labels, lam)
                for key in sums:
                    sums[key] += values[key]
                steps += 1

            row = TrainingLogRow(
                epoch=epoch,
                lr=lr,
                lam=lam,
                bcr=sums["bcr"] / steps,
                gui=sums["gui"] / steps,
                total=sums["total"] / steps,
                wall_clock=time.perf_counter() - started,
            )
            self.history.append(row)
            logger.info(
                f"epoch {epoch + 1}/{cfg.epochs}: lr={lr:.2e} λ={lam:.4f} "
                f"bcr={row.bcr:.4f} gui={row.gui:.4f} total={row.total:.4f}"
            )
            if self.log_path:
                save_training_log(self.history, self.log_path)

        logger.info(f"训练完成: 共 {self.total_steps} 步, 耗时 {time.perf_counter() - started:.1f} 秒")
        return Checkpoint(
            model=self.model,
            encoder_spec=self.encoder_spec,
            prototypes=self.prototypes,
            train_config=cfg,
            scheme=self.scheme,
            perturbation=self.perturbation,
            epoch=cfg.epochs - 1,
            log_tail=self.history[-LOG_TAIL:],
        )


def train(
    records: Sequence[ManifestRecord],
    cfg: TrainConfig,
    loader: FaceLoader,
    scheme: Optional[SubmaskScheme] = None,
    perturbation: Optional[PerturbationConfig] = None,
    encoder_spec: Optional[ToyEncoderSpec] = None,
    log_path: Optional[Union[str, Path]] = None,
) -> Checkpoint:
    """在真实人脸清单上训练并返回检查点"""
    trainer = Trainer(records, cfg, loader, scheme, perturbation, encoder_spec, log_path)
    return trainer.run()


# ---------------------------------------------------------------- 评估

def evaluate_auc(scores: Sequence[float], labels: Optional[Sequence[bool]] = None) -> float:
    """
    基于秩的 AUC (伪造为正类，并列计 1/2)

    可传入 (anomaly_score, is_fake) 对的列表，或分开的得分与标签。
    """
    if labels is None:
        pairs = list(scores)
        scores = [s for s, _ in pairs]
        labels = [y for _, y in pairs]
    values = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(labels, dtype=bool)
    if values.shape != positive.shape:
        raise DomainError("得分与标签数量不一致")
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC 需要同时包含正负样本")

    ranks = pd.Series(values).rank(method="average").to_numpy()
    # 正样本秩和减去其内部配对数，即胜场数 + 0.5·平局数
    wins = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(wins / (n_pos * n_neg))


def evaluate_localization(
    model: ToyEncoder,
    protos: PrototypeSet,
    factory: DiscrepancyFactory,
    images: Sequence[FaceImage],
    seed: int = 0,
) -> float:
    """对每张留出图像合成全部差异类别，统计原型匹配的差异类别准确率"""
    if not images:
        raise DomainError("评估图像不能为空")
    correct = 0
    total = 0
    was_training = model.training
    model.eval()
    try:
        for i, img in enumerate(images):
            sds = [
                factory.synthesize_class(img, k, np.random.default_rng([seed, i, k]))
                for k in range(factory.n_classes)
            ]
            with torch.no_grad():
                _, z = model(images_to_tensor(sds, dtype=model_dtype(model)))
            predicted = match_prototypes(z, protos, classes_only=True)
            correct += int((predicted == torch.arange(factory.n_classes)).sum())
            total += factory.n_classes
    finally:
        model.train(was_training)
    accuracy = correct / total
    logger.info(f"差异类别定位准确率: {accuracy:.4f} ({correct}/{total})")
    return accuracy
