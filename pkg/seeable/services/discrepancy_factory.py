"""
软差异合成服务
在人脸的单个子区域内混入细微的空间域/频域扰动，并生成自监督标签
"""

from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import cv2
import numpy as np
from loguru import logger
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from pydantic import BaseModel, ConfigDict

from ..core.exceptions import DomainError
from ..models.data_models import (
    BlendMask,
    DiscrepancyLabel,
    FaceImage,
    PerturbationConfig,
    PerturbationFamily,
    SchemeReport,
    SubmaskKind,
    SubmaskScheme,
)

SHARPEN_KERNEL = np.array([[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]])
COVERAGE_THRESHOLD = 0.999
BALANCE_THRESHOLD = 1.10
MAX_INVARIANT_REDRAWS = 20


class PerturbationDraw(BaseModel):
    """一次采样得到的扰动及其参数"""
    op: Literal["rgb_shift", "hsv_shift", "brightness_contrast", "downsample", "sharpen", "jpeg"]
    params: Dict[str, Any]


class InvariantDraw(BaseModel):
    """全局不变变换参数"""
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0
    hsv: Tuple[float, float, float] = (0.0, 0.0, 0.0)


class SynthesisResult(BaseModel):
    """软差异合成的完整输出"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: FaceImage
    label: DiscrepancyLabel
    base: FaceImage
    mask: BlendMask
    draw: PerturbationDraw


# ---------------------------------------------------------------- 标签编码

def encode_label(y_loc: int, y_type: int, n_type: int, n_loc: Optional[int] = None) -> int:
    """y = y_loc · N_type + y_type"""
    if n_type < 1:
        raise DomainError(f"N_type 必须为正，实际为 {n_type}")
    if y_loc < 0 or (n_loc is not None and y_loc >= n_loc):
        raise DomainError(f"位置标签越界: y_loc={y_loc}, N_loc={n_loc}")
    if not 0 <= y_type < n_type:
        raise DomainError(f"类型标签越界: y_type={y_type}, N_type={n_type}")
    return y_loc * n_type + y_type


def decode_label(y: int, n_type: int, n_loc: Optional[int] = None) -> Tuple[int, int]:
    """encode_label 的逆运算，返回 (y_loc, y_type)"""
    if n_type < 1:
        raise DomainError(f"N_type 必须为正，实际为 {n_type}")
    if y < 0 or (n_loc is not None and y >= n_loc * n_type):
        raise DomainError(f"标签越界: y={y}, N_loc={n_loc}, N_type={n_type}")
    return divmod(int(y), n_type)


def make_label(y_loc: int, y_type: int, n_type: int, n_loc: Optional[int] = None) -> DiscrepancyLabel:
    y = encode_label(y_loc, y_type, n_type, n_loc)
    return DiscrepancyLabel(y_loc=y_loc, y_type=y_type, y=y, n_type=n_type)


# ---------------------------------------------------------------- 混合与掩膜

def blend(mask: BlendMask, source: FaceImage, target: FaceImage) -> FaceImage:
    """M ⊙ source + (1 - M) ⊙ target，逐通道；结果保留 target 的关键点"""
    if source.pixels.shape != target.pixels.shape or mask.values.shape != target.pixels.shape[:2]:
        raise DomainError(
            f"混合输入尺寸不一致: mask={mask.values.shape}, "
            f"source={source.pixels.shape}, target={target.pixels.shape}"
        )
    m = mask.values[..., None]
    pixels = m * source.pixels + (1.0 - m) * target.pixels
    return target.with_pixels(np.clip(pixels, 0.0, 255.0))


def face_box(landmarks: np.ndarray, size: Tuple[int, int]) -> Tuple[int, int, int, int]:
    """关键点的轴对齐包围盒 (x0, y0, x1, y1)，上界不包含"""
    height, width = size
    xs, ys = landmarks[:, 0], landmarks[:, 1]
    if xs.max() - xs.min() <= 0 or ys.max() - ys.min() <= 0:
        raise DomainError("关键点包围盒面积为零")
    x0 = max(int(np.floor(xs.min())), 0)
    y0 = max(int(np.floor(ys.min())), 0)
    x1 = min(int(np.ceil(xs.max())) + 1, width)
    y1 = min(int(np.ceil(ys.max())) + 1, height)
    return x0, y0, x1, y1


def _grid_edges(start: int, stop: int, parts: int, limit: int) -> np.ndarray:
    """
    等分网格边界

    包围盒长度向上取整到 parts 的倍数(居中扩展并限制在图像内)，
    保证所有格子面积相同；图像放不下时退化为近似等分。
    """
    length = stop - start
    padded = -(-length // parts) * parts
    if padded > limit:
        return np.rint(np.linspace(start, stop, parts + 1)).astype(int)
    new_start = start - (padded - length) // 2
    new_start = min(max(new_start, 0), limit - padded)
    return new_start + (padded // parts) * np.arange(parts + 1)


def _mesh_edges(coords: np.ndarray, start: int, stop: int, parts: int) -> np.ndarray:
    """以关键点坐标分位数为锚点的网格边界(格子大小不等，包围盒够宽时每格至少 1 像素)"""
    inner = np.quantile(coords, np.arange(1, parts) / parts) if parts > 1 else np.array([])
    edges = np.clip(np.concatenate([[start], np.rint(inner), [stop]]).astype(int), start, stop)
    if stop - start < parts:
        return np.maximum.accumulate(edges)
    # edges[i] - i 单调不减且不超过 stop - parts，即相邻边界至少相差 1
    steps = np.arange(parts + 1)
    return np.minimum(np.maximum.accumulate(edges - steps), stop - parts) + steps


def _cell_edges(scheme: SubmaskScheme, landmarks: np.ndarray, size: Tuple[int, int]):
    height, width = size
    x0, y0, x1, y1 = face_box(landmarks, size)
    if scheme.kind == SubmaskKind.GRID:
        xs = _grid_edges(x0, x1, scheme.cols, width)
        ys = _grid_edges(y0, y1, scheme.rows, height)
    else:
        xs = _mesh_edges(landmarks[:, 0], x0, x1, scheme.cols)
        ys = _mesh_edges(landmarks[:, 1], y0, y1, scheme.rows)
    return xs, ys


def hull_mask(landmarks: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """关键点凸包内部为 1 的二值掩膜"""
    face_box(landmarks, size)
    canvas = np.zeros(size, dtype=np.uint8)
    points = np.rint(landmarks).astype(np.int32)
    hull = cv2.convexHull(points)
    cv2.fillConvexPoly(canvas, hull, 1)
    return canvas.astype(bool)


def make_binary_submask(
    scheme: SubmaskScheme, landmarks: np.ndarray, y_loc: int, size: Tuple[int, int]
) -> np.ndarray:
    """羽化前的二值子掩膜"""
    if not 0 <= y_loc < scheme.n_loc:
        raise DomainError(f"位置标签越界: y_loc={y_loc}, N_loc={scheme.n_loc}")

    if scheme.kind == SubmaskKind.CONVEX_HULL:
        return hull_mask(landmarks, size)

    xs, ys = _cell_edges(scheme, landmarks, size)
    row, col = divmod(y_loc, scheme.cols)
    mask = np.zeros(size, dtype=bool)
    mask[ys[row]:ys[row + 1], xs[col]:xs[col + 1]] = True
    return mask


def feather(binary: np.ndarray, sigma: float) -> np.ndarray:
    """高斯羽化，sigma 为 0 时原样返回"""
    values = binary.astype(np.float64)
    if sigma <= 0:
        return values
    blurred = cv2.GaussianBlur(values, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REPLICATE)
    return np.clip(blurred, 0.0, 1.0)


def make_submask(
    scheme: SubmaskScheme, landmarks: np.ndarray, y_loc: int, size: Tuple[int, int]
) -> BlendMask:
    """位置 y_loc 处的混合掩膜(已羽化)"""
    binary = make_binary_submask(scheme, np.asarray(landmarks, dtype=np.float64), y_loc, size)
    return BlendMask(values=feather(binary, scheme.feather_sigma))


def validate_scheme(scheme: SubmaskScheme, landmarks: np.ndarray, size: Tuple[int, int]) -> SchemeReport:
    """检查子掩膜方案的 A1 全覆盖 / A2 无重叠 / A3 大小均衡"""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    masks = np.stack([make_binary_submask(scheme, landmarks, k, size) for k in range(scheme.n_loc)])

    if scheme.kind == SubmaskKind.CONVEX_HULL:
        region = hull_mask(landmarks, size)
    else:
        x0, y0, x1, y1 = face_box(landmarks, size)
        region = np.zeros(size, dtype=bool)
        region[y0:y1, x0:x1] = True

    counts = masks.sum(axis=0)
    coverage = float((counts[region] > 0).sum() / region.sum())
    overlap = int(np.maximum(counts - 1, 0).sum())
    areas = masks.reshape(scheme.n_loc, -1).sum(axis=1)
    ratio = float(areas.max() / areas.min()) if areas.min() > 0 else float("inf")

    return SchemeReport(
        full_coverage=coverage >= COVERAGE_THRESHOLD,
        no_overlap=overlap == 0,
        balanced=ratio <= BALANCE_THRESHOLD,
        coverage=coverage,
        overlap_pixels=overlap,
        area_ratio=ratio,
    )


# ---------------------------------------------------------------- 基础扰动

def rgb_shift(pixels: np.ndarray, shifts: Sequence[float]) -> np.ndarray:
    return np.clip(pixels + np.asarray(shifts, dtype=np.float64), 0.0, 255.0)


def hsv_shift(pixels: np.ndarray, shifts: Sequence[float]) -> np.ndarray:
    """在 [0,1] 尺度的 HSV 空间平移，色调取模、饱和度与明度截断"""
    dh, ds, dv = (float(s) for s in shifts)
    hsv = rgb_to_hsv(pixels / 255.0)
    hsv[..., 0] = np.mod(hsv[..., 0] + dh, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + ds, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + dv, 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv) * 255.0, 0.0, 255.0)


def brightness_contrast(pixels: np.ndarray, contrast: float, brightness: float) -> np.ndarray:
    """out = x·(1 + contrast) + brightness·255"""
    return np.clip(pixels * (1.0 + contrast) + brightness * 255.0, 0.0, 255.0)


def downsample(pixels: np.ndarray, factor: int) -> np.ndarray:
    """双线性下采样后再上采样回原尺寸"""
    height, width = pixels.shape[:2]
    small = cv2.resize(
        pixels, (max(width // factor, 1), max(height // factor, 1)), interpolation=cv2.INTER_LINEAR
    )
    return np.clip(cv2.resize(small, (width, height), interpolation=cv2.INTER_LINEAR), 0.0, 255.0)


def sharpen(pixels: np.ndarray, alpha: float) -> np.ndarray:
    """锐化后与原图按 alpha 混合"""
    sharp = cv2.filter2D(pixels, -1, SHARPEN_KERNEL, borderType=cv2.BORDER_REFLECT_101)
    return np.clip((1.0 - alpha) * pixels + alpha * sharp, 0.0, 255.0)


def jpeg_roundtrip(pixels: np.ndarray, quality: int) -> np.ndarray:
    """以给定质量做一次 JPEG 编解码"""
    quantized = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    ok, buffer = cv2.imencode(
        ".jpg", cv2.cvtColor(quantized, cv2.COLOR_RGB2BGR), [int(cv2.IMWRITE_JPEG_QUALITY), int(quality)]
    )
    if not ok:
        raise DomainError("JPEG 编码失败")
    decoded = cv2.imdecode(buffer, cv2.IMREAD_COLOR)
    return cv2.cvtColor(decoded, cv2.COLOR_BGR2RGB).astype(np.float64)


_OPS = {
    "rgb_shift": lambda px, p: rgb_shift(px, p["shifts"]),
    "hsv_shift": lambda px, p: hsv_shift(px, p["shifts"]),
    "brightness_contrast": lambda px, p: brightness_contrast(px, p["contrast"], p["brightness"]),
    "downsample": lambda px, p: downsample(px, p["factor"]),
    "sharpen": lambda px, p: sharpen(px, p["alpha"]),
    "jpeg": lambda px, p: jpeg_roundtrip(px, p["quality"]),
}


def draw_spatial(rng: np.random.Generator, cfg: PerturbationConfig) -> PerturbationDraw:
    """从三种空间域扰动中均匀抽取一种"""
    choice = int(rng.integers(3))
    if choice == 0:
        shifts = rng.uniform(-cfg.rgb_shift_max, cfg.rgb_shift_max, 3)
        return PerturbationDraw(op="rgb_shift", params={"shifts": shifts.tolist()})
    if choice == 1:
        shifts = rng.uniform(-cfg.hsv_shift_max_local, cfg.hsv_shift_max_local, 3)
        return PerturbationDraw(op="hsv_shift", params={"shifts": shifts.tolist()})
    limit = cfg.brightness_contrast_max
    return PerturbationDraw(
        op="brightness_contrast",
        params={"contrast": float(rng.uniform(-limit, limit)), "brightness": float(rng.uniform(-limit, limit))},
    )


def draw_frequency(rng: np.random.Generator, cfg: PerturbationConfig) -> PerturbationDraw:
    """从三种频域扰动中均匀抽取一种"""
    choice = int(rng.integers(3))
    if choice == 0:
        factor = int(rng.choice(cfg.downsample_factors))
        return PerturbationDraw(op="downsample", params={"factor": factor})
    if choice == 1:
        low, high = cfg.sharpen_alpha_range
        return PerturbationDraw(op="sharpen", params={"alpha": float(rng.uniform(low, high))})
    low, high = cfg.jpeg_quality_range
    return PerturbationDraw(op="jpeg", params={"quality": int(rng.integers(low, high + 1))})


def apply_draw(img: FaceImage, draw: PerturbationDraw) -> FaceImage:
    """对整幅图像施加一次采样得到的扰动"""
    return img.with_pixels(_OPS[draw.op](img.pixels, draw.params))


def perturb_spatial(img: FaceImage, rng: np.random.Generator, cfg: PerturbationConfig) -> FaceImage:
    return apply_draw(img, draw_spatial(rng, cfg))


def perturb_frequency(img: FaceImage, rng: np.random.Generator, cfg: PerturbationConfig) -> FaceImage:
    return apply_draw(img, draw_frequency(rng, cfg))


# ---------------------------------------------------------------- 全局不变变换

def draw_invariant(rng: np.random.Generator, cfg: PerturbationConfig, size: Tuple[int, int]) -> InvariantDraw:
    height, width = size
    fx, fy = cfg.translate_frac
    g = cfg.hsv_shift_max_global
    return InvariantDraw(
        tx=float(rng.uniform(-fx * width, fx * width)),
        ty=float(rng.uniform(-fy * height, fy * height)),
        scale=float(1.0 + rng.uniform(0.0, cfg.scale_max)),
        hsv=tuple(float(v) for v in rng.uniform(-g, g, 3)),
    )


def _affine(draw: InvariantDraw, size: Tuple[int, int]) -> np.ndarray:
    """绕图像中心缩放(等价于放大后中心裁剪)再平移"""
    height, width = size
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    s = draw.scale
    return np.array([[s, 0.0, (1.0 - s) * cx + draw.tx], [0.0, s, (1.0 - s) * cy + draw.ty]])


def transform_landmarks(landmarks: np.ndarray, draw: InvariantDraw, size: Tuple[int, int]) -> np.ndarray:
    matrix = _affine(draw, size)
    return landmarks @ matrix[:, :2].T + matrix[:, 2]


def landmarks_in_bounds(landmarks: np.ndarray, size: Tuple[int, int]) -> bool:
    height, width = size
    return bool(
        landmarks[:, 0].min() >= 0 and landmarks[:, 1].min() >= 0
        and landmarks[:, 0].max() <= width - 1 and landmarks[:, 1].max() <= height - 1
    )


def apply_invariant_draw(img: FaceImage, draw: InvariantDraw) -> FaceImage:
    """施加给定参数的全局变换，关键点同步变换"""
    size = img.size
    landmarks = transform_landmarks(img.landmarks, draw, size)
    pixels = img.pixels
    if draw.scale != 1.0 or draw.tx != 0.0 or draw.ty != 0.0:
        pixels = cv2.warpAffine(
            pixels,
            _affine(draw, size),
            (size[1], size[0]),
            flags=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_REFLECT_101,
        )
        pixels = np.clip(pixels, 0.0, 255.0)
    if any(v != 0.0 for v in draw.hsv):
        pixels = hsv_shift(pixels, draw.hsv)
    return FaceImage(pixels=pixels, landmarks=landmarks, frame_index=img.frame_index)


def apply_invariant_transforms(img: FaceImage, rng: np.random.Generator, cfg: PerturbationConfig) -> FaceImage:
    """随机平移 + 缩放中心裁剪 + 全局 HSV 平移；关键点越界时重新采样"""
    for _ in range(MAX_INVARIANT_REDRAWS):
        draw = draw_invariant(rng, cfg, img.size)
        if landmarks_in_bounds(transform_landmarks(img.landmarks, draw, img.size), img.size):
            return apply_invariant_draw(img, draw)
    logger.warning(f"全局变换连续 {MAX_INVARIANT_REDRAWS} 次导致关键点越界，仅保留颜色变换")
    return apply_invariant_draw(img, InvariantDraw(hsv=draw.hsv))


# ---------------------------------------------------------------- 合成工厂

class DiscrepancyFactory:
    """软差异数据工厂"""

    def __init__(self, scheme: SubmaskScheme, cfg: Optional[PerturbationConfig] = None):
        self.scheme = scheme
        self.cfg = cfg or PerturbationConfig()

    @property
    def n_loc(self) -> int:
        return self.scheme.n_loc

    @property
    def n_type(self) -> int:
        return self.cfg.n_type

    @property
    def n_classes(self) -> int:
        return self.n_loc * self.n_type

    def decode(self, y: int) -> Tuple[int, int]:
        return decode_label(y, self.n_type, self.n_loc)

    def draw_perturbation(self, y_type: int, rng: np.random.Generator) -> PerturbationDraw:
        family = self.cfg.families[y_type]
        if family == PerturbationFamily.SPATIAL:
            return draw_spatial(rng, self.cfg)
        return draw_frequency(rng, self.cfg)

    def synthesize_detailed(
        self, img: FaceImage, y_loc: int, y_type: int, rng: np.random.Generator
    ) -> SynthesisResult:
        """合成软差异并返回中间结果(全局变换后的底图、掩膜、扰动参数)"""
        label = make_label(y_loc, y_type, self.n_type, self.n_loc)
        base = apply_invariant_transforms(img, rng, self.cfg) if self.cfg.invariant_transforms else img
        mask = make_submask(self.scheme, base.landmarks, y_loc, base.size)
        draw = self.draw_perturbation(y_type, rng)
        logger.debug(f"合成软差异: y={label.y}, loc={y_loc}, type={y_type}, op={draw.op}")
        image = blend(mask, apply_draw(base, draw), base)
        return SynthesisResult(image=image, label=label, base=base, mask=mask, draw=draw)

    def synthesize(
        self, img: FaceImage, y_loc: int, y_type: int, rng: np.random.Generator
    ) -> Tuple[FaceImage, DiscrepancyLabel]:
        result = self.synthesize_detailed(img, y_loc, y_type, rng)
        return result.image, result.label

    def synthesize_class(self, img: FaceImage, y: int, rng: np.random.Generator) -> FaceImage:
        y_loc, y_type = self.decode(y)
        return self.synthesize(img, y_loc, y_type, rng)[0]


def synthesize_sd(
    img: FaceImage,
    y_loc: int,
    y_type: int,
    rng: np.random.Generator,
    scheme: SubmaskScheme,
    cfg: PerturbationConfig,
) -> Tuple[FaceImage, DiscrepancyLabel]:
    """sd(I, y_loc, y_type)：扰动图像只出现在所选子区域(及羽化边缘)内"""
    return DiscrepancyFactory(scheme, cfg).synthesize(img, y_loc, y_type, rng)


# ---------------------------------------------------------------- 预览

def make_contact_sheet(results: List[SynthesisResult], original: List[FaceImage]) -> np.ndarray:
    """
    预览拼图，每列一个样本
    行依次为：原图 / 软差异图 / 掩膜 / |差值|(按最大值拉伸)
    """
    columns = []
    for source, result in zip(original, results):
        diff = np.abs(result.image.pixels - result.base.pixels)
        peak = max(float(diff.max()), 1.0)
        mask_rgb = np.repeat(result.mask.values[..., None] * 255.0, 3, axis=2)
        column = np.concatenate(
            [source.pixels, result.image.pixels, mask_rgb, diff * (255.0 / peak)], axis=0
        )
        columns.append(np.clip(np.rint(column), 0, 255).astype(np.uint8))
    return np.concatenate(columns, axis=1)
