"""
原型几何服务
构造超球面上均匀分布的硬原型，并提供相似度与原型匹配
"""

from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch
from loguru import logger

from ..core.exceptions import DataError, DimensionalityError, DomainError
from ..models.data_models import PrototypeSet

FORMAT_VERSION = 1
# 相似度差小于该值视为并列，取最小索引
TIE_TOLERANCE = 1e-12


def make_simplex_prototypes(dim: int, count: int, reserve_offset: int = 0) -> PrototypeSet:
    """
    构造正则单纯形顶点作为原型

    在 R^n (n = count - 1) 中按解析公式生成 n + 1 个顶点:
      p_1 = (1/√n)·1
      p_i = -((1 + √(n+1)) / n^{3/2})·1 + √((n+1)/n)·e_{i-1}
    再零填充到 R^dim。count = dim + 1 时即为 n = dim 的完整单纯形。
    """
    if count < 2 or count > dim + 1:
        raise DimensionalityError(f"原型数量必须满足 2 <= K <= D + 1，实际 D={dim}, K={count}")

    n = count - 1
    ones = np.ones(n)
    vertices = np.empty((count, n), dtype=np.float64)
    vertices[0] = ones / np.sqrt(n)
    shift = (1.0 + np.sqrt(n + 1.0)) / n ** 1.5
    scale = np.sqrt((n + 1.0) / n)
    for i in range(1, count):
        vertices[i] = -shift * ones
        vertices[i, i - 1] += scale
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)

    vectors = np.zeros((count, dim), dtype=np.float64)
    vectors[:, :n] = vertices
    return PrototypeSet(dim=dim, count=count, vectors=vectors, reserve_offset=reserve_offset)


def _as_vector(a) -> np.ndarray:
    vec = np.asarray(a, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(vec)
    if norm == 0.0 or not np.isfinite(norm):
        raise DomainError("余弦相似度的输入向量范数必须为正且有限")
    return vec / norm


def cosine_similarity(a, b) -> float:
    """sim(a, b) = a·b / (‖a‖‖b‖)，结果裁剪到 [-1, 1]"""
    ua, ub = _as_vector(a), _as_vector(b)
    if ua.shape != ub.shape:
        raise DomainError(f"向量维度不一致: {ua.shape} vs {ub.shape}")
    return float(np.clip(ua @ ub, -1.0, 1.0))


def d_sim(a, b) -> float:
    """d_sim(a, b) = 1 - sim(a, b) ∈ [0, 2]"""
    return 1.0 - cosine_similarity(a, b)


def match_prototype(z, protos: PrototypeSet) -> int:
    """返回与 z 余弦相似度最大的原型索引，并列时取最小索引"""
    vec = _as_vector(z)
    if vec.shape[0] != protos.dim:
        raise DomainError(f"嵌入维度 {vec.shape[0]} 与原型维度 {protos.dim} 不一致")
    sims = protos.vectors @ vec
    best = sims.max()
    return int(np.flatnonzero(sims >= best - TIE_TOLERANCE)[0])


def match_prototypes(z: torch.Tensor, protos: PrototypeSet, classes_only: bool = False) -> torch.Tensor:
    """
    批量原型匹配

    classes_only=True 时只在差异类别原型中匹配，返回差异类别编号；
    否则返回原型索引。
    """
    vectors = protos.as_tensor(dtype=z.dtype, device=z.device)
    if classes_only:
        vectors = vectors[protos.reserve_offset:]
    sims = torch.nn.functional.normalize(z.detach(), dim=1) @ vectors.T
    best = sims.max(dim=1, keepdim=True).values
    is_best = sims >= best - TIE_TOLERANCE
    # argmax 对布尔张量返回首个 True 的位置
    return is_best.to(torch.uint8).argmax(dim=1)


def gram_deviation(protos: PrototypeSet) -> Dict[str, float]:
    """Gram 矩阵相对理想单纯形的最大偏差"""
    gram = protos.vectors @ protos.vectors.T
    diag = np.diag(gram)
    off = gram[~np.eye(protos.count, dtype=bool)]
    return {
        "max_diag_deviation": float(np.abs(diag - 1.0).max()),
        "max_offdiag_deviation": float(np.abs(off + 1.0 / (protos.count - 1)).max()),
        "expected_offdiag": -1.0 / (protos.count - 1),
    }


def save_prototypes(protos: PrototypeSet, path: Union[str, Path]) -> Path:
    """以文本矩阵保存原型（行优先，%.17g 保证精确往返）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        f"seeable-prototypes v{FORMAT_VERSION}\n"
        f"dim={protos.dim} count={protos.count} reserve_offset={protos.reserve_offset}"
    )
    np.savetxt(path, protos.vectors, fmt="%.17g", header=header)
    logger.info(f"原型已保存: {path} (D={protos.dim}, K={protos.count})")
    return path


def load_prototypes(path: Union[str, Path]) -> PrototypeSet:
    """读取 save_prototypes 写出的原型文件"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"原型文件不存在: {path}")

    with open(path, "r", encoding="utf-8") as file:
        header = [file.readline(), file.readline()]
    if not header[0].startswith(f"# seeable-prototypes v{FORMAT_VERSION}"):
        raise DataError(f"无法识别的原型文件版本: {header[0].strip()}")
    fields = dict(item.split("=") for item in header[1].lstrip("# ").split())

    dim, count = int(fields["dim"]), int(fields["count"])
    vectors = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if vectors.shape != (count, dim):
        raise DataError(f"原型矩阵形状 {vectors.shape} 与文件头 ({count}, {dim}) 不一致")
    return PrototypeSet(
        dim=dim,
        count=count,
        vectors=vectors,
        reserve_offset=int(fields.get("reserve_offset", 0)),
    )
