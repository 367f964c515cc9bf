"""
数据模型定义
"""

from enum import Enum
from typing import List, Literal, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

N_LANDMARKS = 68


class SubmaskKind(str, Enum):
    """子掩膜划分方式"""
    CONVEX_HULL = "convex_hull"
    MESHGRID = "meshgrid"
    GRID = "grid"


class PerturbationFamily(str, Enum):
    """软差异类型：空间域 / 频域"""
    SPATIAL = "spatial"
    FREQUENCY = "frequency"


class SubmaskScheme(BaseModel):
    """子掩膜方案"""
    kind: SubmaskKind = Field(SubmaskKind.GRID, description="划分方式")
    rows: int = Field(4, ge=1, description="网格行数")
    cols: int = Field(4, ge=1, description="网格列数")
    feather_sigma: float = Field(3.0, ge=0.0, description="高斯羽化标准差(像素)")

    @property
    def n_loc(self) -> int:
        """位置类别数 N_loc"""
        if self.kind == SubmaskKind.CONVEX_HULL:
            return 1
        return self.rows * self.cols

    @property
    def grid_shape(self) -> Tuple[int, int]:
        """用于引导图的行列数"""
        if self.kind == SubmaskKind.CONVEX_HULL:
            return 1, 1
        return self.rows, self.cols


class PerturbationConfig(BaseModel):
    """软差异与全局不变变换的幅度参数"""
    rgb_shift_max: float = Field(20.0, ge=0.0, description="RGB通道偏移上限")
    hsv_shift_max_local: float = Field(0.3, ge=0.0, description="局部HSV偏移上限")
    hsv_shift_max_global: float = Field(0.1, ge=0.0, description="全局HSV偏移上限")
    brightness_contrast_max: float = Field(0.1, ge=0.0, description="亮度/对比度缩放上限")
    downsample_factors: List[int] = Field(default_factory=lambda: [2, 4], description="下采样倍数")
    sharpen_alpha_range: Tuple[float, float] = Field((0.2, 0.5), description="锐化混合系数范围")
    jpeg_quality_range: Tuple[int, int] = Field((30, 70), description="JPEG质量范围")
    translate_frac: Tuple[float, float] = Field((0.03, 0.015), description="平移上限(宽, 高)占比")
    scale_max: float = Field(0.05, ge=0.0, description="缩放上限")
    families: List[PerturbationFamily] = Field(
        default_factory=lambda: [PerturbationFamily.SPATIAL, PerturbationFamily.FREQUENCY],
        description="启用的软差异类型，顺序即 y_type 编号",
    )
    invariant_transforms: bool = Field(True, description="是否在合成前施加全局不变变换")

    @field_validator("downsample_factors")
    @classmethod
    def _check_factors(cls, value: List[int]) -> List[int]:
        if not value or any(f < 2 for f in value):
            raise ValueError("下采样倍数必须非空且不小于2")
        return value

    @field_validator("sharpen_alpha_range", "jpeg_quality_range")
    @classmethod
    def _check_range(cls, value):
        low, high = value
        if low > high:
            raise ValueError(f"范围上下界顺序错误: {value}")
        return value

    @field_validator("jpeg_quality_range")
    @classmethod
    def _check_quality(cls, value):
        if value[0] < 1 or value[1] > 100:
            raise ValueError("JPEG质量必须位于 [1, 100]")
        return value

    @field_validator("families")
    @classmethod
    def _check_families(cls, value):
        if not value or len(set(value)) != len(value):
            raise ValueError("软差异类型列表必须非空且不重复")
        return value

    @property
    def n_type(self) -> int:
        return len(self.families)


class DiscrepancyLabel(BaseModel):
    """自监督标签 (位置, 类型) 及其扁平编码 y"""
    y_loc: int = Field(..., ge=0)
    y_type: int = Field(..., ge=0)
    y: int = Field(..., ge=0)
    n_type: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _check_code(self):
        if self.y_type >= self.n_type or self.y != self.y_loc * self.n_type + self.y_type:
            raise ValueError(f"标签编码不一致: {self}")
        return self


class FaceImage(BaseModel):
    """人脸图像：RGB 浮点像素 [0,255] + 68 个关键点 (x, y)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pixels: np.ndarray
    landmarks: np.ndarray
    # 在源视频中的帧号，用于推导评分时的随机种子
    frame_index: int = 0

    @field_validator("pixels")
    @classmethod
    def _check_pixels(cls, value) -> np.ndarray:
        pixels = np.asarray(value, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"像素数组形状必须为 H×W×3，实际为 {pixels.shape}")
        if pixels.min() < 0.0 or pixels.max() > 255.0:
            raise ValueError("像素值超出 [0, 255]")
        return pixels

    @field_validator("landmarks")
    @classmethod
    def _check_landmarks(cls, value) -> np.ndarray:
        landmarks = np.asarray(value, dtype=np.float64)
        if landmarks.shape != (N_LANDMARKS, 2):
            raise ValueError(f"关键点形状必须为 (68, 2)，实际为 {landmarks.shape}")
        return landmarks

    @model_validator(mode="after")
    def _check_bounds(self):
        h, w = self.pixels.shape[:2]
        xs, ys = self.landmarks[:, 0], self.landmarks[:, 1]
        if xs.min() < 0 or ys.min() < 0 or xs.max() > w - 1 or ys.max() > h - 1:
            raise ValueError("关键点超出图像边界")
        return self

    @property
    def size(self) -> Tuple[int, int]:
        """(高, 宽)"""
        return self.pixels.shape[0], self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray) -> "FaceImage":
        """替换像素，保留关键点与帧号"""
        return FaceImage(pixels=pixels, landmarks=self.landmarks, frame_index=self.frame_index)

    def quantized(self) -> np.ndarray:
        """导出用的 uint8 像素"""
        return np.clip(np.rint(self.pixels), 0, 255).astype(np.uint8)


class BlendMask(BaseModel):
    """混合掩膜 M ∈ [0,1]^{H×W}"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray

    @field_validator("values")
    @classmethod
    def _check_values(cls, value) -> np.ndarray:
        values = np.asarray(value, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("掩膜必须为二维数组")
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("掩膜取值超出 [0, 1]")
        return values

    @property
    def support(self) -> np.ndarray:
        return self.values > 0.0


class PrototypeSet(BaseModel):
    """超球面上均匀分布的硬原型"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    dim: int = Field(..., ge=1)
    count: int = Field(..., ge=2)
    vectors: np.ndarray
    # 1 表示索引 0 保留给"真实"类，差异类别 y 对应原型 y + 1
    reserve_offset: int = Field(0, ge=0, le=1)

    @model_validator(mode="after")
    def _check_geometry(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.count > self.dim + 1:
            raise ValueError(f"原型数量 {self.count} 超过 dim + 1 = {self.dim + 1}")
        if vectors.shape != (self.count, self.dim):
            raise ValueError(f"原型矩阵形状应为 ({self.count}, {self.dim})，实际为 {vectors.shape}")
        gram = vectors @ vectors.T
        target = np.full_like(gram, -1.0 / (self.count - 1))
        np.fill_diagonal(target, 1.0)
        if np.abs(gram - target).max() > 1e-9:
            raise ValueError("原型不满足正则单纯形的 Gram 矩阵约束")
        self.vectors = vectors
        return self

    @property
    def n_classes(self) -> int:
        """差异类别数(不含保留原型)"""
        return self.count - self.reserve_offset

    def class_to_prototype(self, y: int) -> int:
        return y + self.reserve_offset

    def as_tensor(self, dtype: torch.dtype = torch.float64, device=None) -> torch.Tensor:
        return torch.as_tensor(self.vectors, dtype=dtype, device=device)


class EmbeddingBatch(BaseModel):
    """投影器输出 z (单位范数) 及其差异类别标签"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    z: torch.Tensor
    labels: torch.Tensor
    h_norms: Optional[torch.Tensor] = None

    @model_validator(mode="after")
    def _check_batch(self):
        if self.z.ndim != 2 or self.z.shape[0] < 2:
            raise ValueError(f"嵌入必须为 N×D 且 N >= 2，实际为 {tuple(self.z.shape)}")
        if self.labels.shape != (self.z.shape[0],):
            raise ValueError("标签数量与嵌入数量不一致")
        if bool((self.labels < 0).any()):
            raise ValueError("标签必须非负")
        norms = self.z.detach().double().norm(dim=1)
        tolerance = 1e-6 if self.z.dtype == torch.float64 else 1e-5
        if bool(((norms - 1.0).abs() > tolerance).any()):
            raise ValueError("嵌入行向量必须为单位范数")
        return self

    @classmethod
    def from_projections(cls, projections: torch.Tensor, labels, h_norms=None) -> "EmbeddingBatch":
        """对投影输出做 L2 归一化后构造批次"""
        z = torch.nn.functional.normalize(projections, dim=1)
        labels = torch.as_tensor(labels, dtype=torch.long, device=z.device)
        return cls(z=z, labels=labels, h_norms=h_norms)

    def __len__(self) -> int:
        return self.z.shape[0]


class SchemeReport(BaseModel):
    """子掩膜方案的 A1/A2/A3 属性报告"""
    full_coverage: bool = Field(..., description="A1 覆盖整个人脸区域")
    no_overlap: bool = Field(..., description="A2 子掩膜互不重叠")
    balanced: bool = Field(..., description="A3 子掩膜大小均衡")
    coverage: float = Field(..., description="覆盖比例")
    overlap_pixels: int = Field(..., description="两两重叠像素总数")
    area_ratio: float = Field(..., description="最大/最小面积比")


class ManifestRecord(BaseModel):
    """数据清单中的一帧"""
    image_path: str
    video_id: str
    split: str = Field(..., description="train / val / test")
    label: Literal["real", "fake"]
    frame_index: int = 0
    landmarks: List[Tuple[float, float]]

    @field_validator("landmarks")
    @classmethod
    def _check_count(cls, value):
        if len(value) != N_LANDMARKS:
            raise ValueError(f"关键点数量必须为 68，实际为 {len(value)}")
        return value

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"


class ToyEncoderSpec(BaseModel):
    """玩具编码器结构"""
    in_channels: int = Field(3, ge=1)
    channels: List[int] = Field(default_factory=lambda: [16, 32, 64])
    kernel_size: int = Field(3, ge=1)
    activation: Literal["relu", "gelu", "tanh"] = "gelu"
    pooled_size: int = Field(8, ge=1, description="自适应池化后的特征图边长，保留粗略位置信息")
    batch_norm: bool = True
    feature_norm: bool = Field(True, description="对特征 h 做无仿射参数的 LayerNorm")
    embedding_dim: int = Field(32, ge=1, description="投影输出维度 D")

    @field_validator("channels")
    @classmethod
    def _check_channels(cls, value):
        if not value or any(c < 1 for c in value):
            raise ValueError("卷积通道列表必须非空且为正")
        return value

    @property
    def feature_dim(self) -> int:
        return self.channels[-1] * self.pooled_size ** 2


class TrainConfig(BaseModel):
    """训练超参数"""
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(6, ge=2)
    lr_start: float = Field(1e-3, gt=0.0)
    lr_end: float = Field(1e-5, gt=0.0)
    momentum: float = Field(0.9, ge=0.0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    weight_decay: float = Field(0.0, ge=0.0)
    tau: float = Field(0.1, gt=0.0)
    lambda_max: float = Field(0.1, ge=0.0)
    lambda_mode: Literal["ramp", "constant", "off"] = "ramp"
    objective: Literal["bcr", "supcon", "cross_entropy"] = "bcr"
    seed: int = 0
    grid_rows: int = Field(4, ge=1)
    grid_cols: int = Field(4, ge=1)
    embedding_dim: int = Field(128, ge=1)
    image_size: int = Field(256, ge=8)
    reserve_pristine: bool = True
    strict_deterministic: bool = True
    prefetch_batches: int = Field(4, ge=1)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check_lr(self):
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end 不能大于 lr_start")
        return self

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


class ScoringConfig(BaseModel):
    """评分设置"""
    max_frames: int = Field(30, ge=1)
    seed: int = 0
    jobs: int = Field(1, ge=1)


class CorpusConfig(BaseModel):
    """合成数据集设置"""
    n_videos: int = Field(120, ge=1)
    frames_per_video: int = Field(4, ge=1)
    image_size: int = Field(64, ge=32)
    held_out_frac: float = Field(0.1, ge=0.0, lt=1.0)
    n_fake_videos: Optional[int] = Field(None, ge=0, description="默认与留出真实视频数相同")
    seed: int = 0


class TrainingLogRow(BaseModel):
    """每个 epoch 的训练日志"""
    epoch: int
    lr: float
    lam: float
    bcr: float
    gui: float
    total: float
    wall_clock: float


class FrameScore(BaseModel):
    """单帧一致性得分及各类别贡献"""
    score: float
    contributions: List[float]


class ScoreReport(BaseModel):
    """视频级评分报告"""
    video_id: str = ""
    label: Optional[str] = None
    frame_indices: List[int]
    frame_scores: List[float]
    consistency_score: float = Field(..., description="帧得分均值")
    contributions: List[float] = Field(..., description="各差异类别贡献(帧平均)")

    @property
    def anomaly_score(self) -> float:
        return -self.consistency_score

    @property
    def n_frames(self) -> int:
        return len(self.frame_scores)
