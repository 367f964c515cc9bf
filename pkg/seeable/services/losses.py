"""
损失函数服务
NT-Xent、SupCon、有界对比回归(BCR)、引导损失及总目标
"""

from typing import Dict, NamedTuple, Tuple

import torch
import torch.nn.functional as F

from ..core.exceptions import DegenerateBatchError, DomainError
from ..models.data_models import EmbeddingBatch, PrototypeSet
from .guidance_graph import PatchGraph, guidance_weight
from .prototype_geometry import match_prototypes


class LossBreakdown(NamedTuple):
    """一次前向的各项损失"""
    bcr: torch.Tensor
    guidance: torch.Tensor
    lam: float
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "bcr": float(self.bcr.detach()),
            "gui": float(self.guidance.detach()),
            "lam": float(self.lam),
            "total": float(self.total.detach()),
        }


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise DomainError(f"温度必须为正: tau={tau}")


def nt_xent(anchor: torch.Tensor, positive: torch.Tensor, contrast: torch.Tensor, tau: float) -> torch.Tensor:
    """
    -log( exp(sim(a,p)/τ) / Σ_j exp(sim(a,c_j)/τ) )

    contrast 为分母中的对比集合(M×D)，按惯例应包含正样本本身。
    """
    _check_tau(tau)
    contrast = contrast.reshape(-1, anchor.shape[-1])
    if contrast.shape[0] == 0:
        raise DomainError("对比集合不能为空")
    a = F.normalize(anchor.reshape(-1), dim=0)
    p = F.normalize(positive.reshape(-1), dim=0)
    logits = F.normalize(contrast, dim=1) @ a / tau
    return torch.logsumexp(logits, dim=0) - (a @ p) / tau


def _pairwise_logits(z: torch.Tensor, tau: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """批内余弦相似度/τ，以及屏蔽对角线后的版本"""
    zn = F.normalize(z, dim=1)
    logits = zn @ zn.T / tau
    eye = torch.eye(z.shape[0], dtype=torch.bool, device=z.device)
    return logits, logits.masked_fill(eye, float("-inf"))


def _supcon_terms(batch: EmbeddingBatch, tau: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """每个锚点的 SupCon 项(已除以 |P(i)|)及正样本数 |P(i)|"""
    _check_tau(tau)
    labels = batch.labels
    logits, masked = _pairwise_logits(batch.z, tau)
    log_denominator = torch.logsumexp(masked, dim=1)

    eye = torch.eye(len(batch), dtype=torch.bool, device=labels.device)
    positives = (labels[:, None] == labels[None, :]) & ~eye
    counts = positives.sum(dim=1)
    weight = positives.to(logits.dtype)
    per_anchor = (weight * (log_denominator[:, None] - logits)).sum(dim=1)
    return per_anchor / counts.clamp(min=1).to(logits.dtype), counts


def supcon(batch: EmbeddingBatch, tau: float) -> torch.Tensor:
    """Σ_i (1/|P(i)|) Σ_{p∈P(i)} NT-Xent(z_i, z_p)，对比集合为除 i 外的全部批内样本"""
    terms, counts = _supcon_terms(batch, tau)
    if int(counts.sum()) == 0:
        raise DegenerateBatchError("批次中没有任何样本拥有同类正样本")
    return terms.sum()


def _prototype_targets(batch: EmbeddingBatch, protos: PrototypeSet) -> torch.Tensor:
    if batch.z.shape[1] != protos.dim:
        raise DomainError(f"嵌入维度 {batch.z.shape[1]} 与原型维度 {protos.dim} 不一致")
    targets = batch.labels + protos.reserve_offset
    if int(targets.max()) >= protos.count:
        raise DomainError(f"标签超出原型数量: max={int(batch.labels.max())}, K={protos.count}")
    return targets


def bcr(batch: EmbeddingBatch, protos: PrototypeSet, tau: float) -> torch.Tensor:
    """
    有界对比回归：SupCon + Σ_i NT-Xent(z_i, p_{y_i}) / |P(i)|

    原型项的对比集合 = 除 z_i 外的批内嵌入 + 全部 K 个原型(目标原型即正样本)；
    |P(i)| = 0 时除数取 1，该样本的 SupCon 项为 0。
    """
    targets = _prototype_targets(batch, protos)
    supcon_part, counts = _supcon_terms(batch, tau)

    vectors = protos.as_tensor(dtype=batch.z.dtype, device=batch.z.device)
    zn = F.normalize(batch.z, dim=1)
    _, masked = _pairwise_logits(batch.z, tau)
    proto_logits = zn @ vectors.T / tau
    log_denominator = torch.logsumexp(torch.cat([masked, proto_logits], dim=1), dim=1)
    positive = proto_logits.gather(1, targets[:, None]).squeeze(1)
    proto_part = (log_denominator - positive) / counts.clamp(min=1).to(zn.dtype)
    return supcon_part.sum() + proto_part.sum()


def regression_distance(batch: EmbeddingBatch, protos: PrototypeSet) -> torch.Tensor:
    """r_i = d_sim(z_i, p_{y_i})"""
    targets = _prototype_targets(batch, protos)
    vectors = protos.as_tensor(dtype=batch.z.dtype, device=batch.z.device)
    zn = F.normalize(batch.z, dim=1)
    return 1.0 - (zn * vectors[targets]).sum(dim=1)


def guidance_loss(batch: EmbeddingBatch, protos: PrototypeSet, graph: PatchGraph, n_type: int) -> torch.Tensor:
    """
    Σ_i G(ŷ_i, y_i) · r_i

    ŷ_i 为在差异类别原型中的硬匹配结果，不参与求导。
    """
    r = regression_distance(batch, protos)
    n_classes = graph.n_nodes * n_type
    if int(batch.labels.max()) >= n_classes:
        raise DomainError(f"标签超出差异类别数 {n_classes}")
    predicted = match_prototypes(batch.z, protos, classes_only=True).tolist()
    weights = torch.tensor(
        [guidance_weight(p, int(y), graph, n_type) for p, y in zip(predicted, batch.labels.tolist())],
        dtype=r.dtype,
        device=r.device,
    )
    return (weights * r).sum()


def total_loss(
    batch: EmbeddingBatch,
    protos: PrototypeSet,
    graph: PatchGraph,
    tau: float,
    lam: float,
    n_type: int = 2,
) -> torch.Tensor:
    """L = L_BCR + λ · L_GUI"""
    if lam < 0:
        raise DomainError(f"λ 不能为负: {lam}")
    loss = bcr(batch, protos, tau)
    if lam == 0:
        return loss
    return loss + lam * guidance_loss(batch, protos, graph, n_type)


def prototype_cross_entropy(batch: EmbeddingBatch, protos: PrototypeSet, tau: float) -> torch.Tensor:
    """以固定原型为分类权重的交叉熵(对比基线)"""
    _check_tau(tau)
    _prototype_targets(batch, protos)
    vectors = protos.as_tensor(dtype=batch.z.dtype, device=batch.z.device)[protos.reserve_offset:]
    logits = F.normalize(batch.z, dim=1) @ vectors.T / tau
    return F.cross_entropy(logits, batch.labels, reduction="sum")


def compute_objective(
    batch: EmbeddingBatch,
    protos: PrototypeSet,
    graph: PatchGraph,
    tau: float,
    lam: float,
    n_type: int = 2,
    objective: str = "bcr",
) -> LossBreakdown:
    """按目标类型计算训练损失；引导项总会计算以便记录"""
    guidance = guidance_loss(batch, protos, graph, n_type)
    if objective == "bcr":
        main = bcr(batch, protos, tau)
        total = main + lam * guidance
    elif objective == "supcon":
        main = _supcon_terms(batch, tau)[0].sum()
        total = main
    elif objective == "cross_entropy":
        main = prototype_cross_entropy(batch, protos, tau)
        total = main
    else:
        raise DomainError(f"未知的训练目标: {objective}")
    return LossBreakdown(bcr=main, guidance=guidance, lam=float(lam), total=total)


def lambda_schedule(epoch: int, total_epochs: int, lambda_max: float, mode: str = "ramp") -> float:
    """
    λ 调度
      ramp:     从 0 线性增加到 lambda_max (最后一个 epoch)
      constant: 恒为 lambda_max
      off:      恒为 0
    """
    if not 0 <= epoch < total_epochs:
        raise DomainError(f"epoch 越界: {epoch} / {total_epochs}")
    if mode == "off":
        return 0.0
    if mode == "constant":
        return float(lambda_max)
    if mode != "ramp":
        raise DomainError(f"未知的 λ 调度方式: {mode}")
    if total_epochs == 1:
        return 0.0
    return float(lambda_max) * epoch / (total_epochs - 1)
