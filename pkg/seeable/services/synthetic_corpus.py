"""
合成数据集服务
程序化生成类人脸图像(固定 68 点模板)及全局换脸式伪造样本
"""

from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import cv2
import numpy as np
from loguru import logger
from pydantic import BaseModel

from ..models.data_models import CorpusConfig, FaceImage, ManifestRecord
from .dataset import save_manifest, write_image


def landmark_template() -> np.ndarray:
    """
    68 点模板，归一化坐标 (u, v)：u 向右，v 向下，脸部大致位于 [-1, 1]^2
    0-16 下颌, 17-26 眉毛, 27-35 鼻子, 36-47 眼睛, 48-67 嘴唇
    """
    points = []

    t = np.linspace(0.0, np.pi, 17)
    points += list(zip(-np.cos(t), -0.2 + 1.2 * np.sin(t)))

    arch = np.sin(np.linspace(0.0, np.pi, 5))
    for side in (-1.0, 1.0):
        us = np.linspace(0.75, 0.15, 5) if side < 0 else np.linspace(0.15, 0.75, 5)
        points += list(zip(side * us, -0.55 - 0.08 * arch))

    points += [(0.0, v) for v in np.linspace(-0.4, 0.15, 4)]
    points += list(zip(np.linspace(-0.2, 0.2, 5), [0.25, 0.27, 0.28, 0.27, 0.25]))

    left_eye = [(-0.58, -0.3), (-0.48, -0.35), (-0.36, -0.35), (-0.26, -0.3), (-0.36, -0.25), (-0.48, -0.25)]
    right_eye = [(0.26, -0.3), (0.36, -0.35), (0.48, -0.35), (0.58, -0.3), (0.48, -0.25), (0.36, -0.25)]
    points += left_eye + right_eye

    phi = np.pi - np.arange(12) * np.pi / 6.0
    points += list(zip(0.38 * np.cos(phi), 0.6 - 0.14 * np.sin(phi)))
    phi = np.pi - np.arange(8) * np.pi / 4.0
    points += list(zip(0.25 * np.cos(phi), 0.6 - 0.05 * np.sin(phi)))

    template = np.asarray(points, dtype=np.float64)
    assert template.shape == (68, 2)
    return template


TEMPLATE = landmark_template()

# 像素标准差
SKIN_GRAIN = 4.0
SENSOR_NOISE = 2.5


class Identity(BaseModel):
    """单个视频的身份参数"""
    skin: Tuple[float, float, float]
    hair: Tuple[float, float, float]
    lips: Tuple[float, float, float]
    iris: Tuple[float, float, float]
    background: Tuple[Tuple[float, float, float], Tuple[float, float, float]]
    center: Tuple[float, float]
    half_width: float
    aspect: float
    texture_seed: int


class SynthCorpus(BaseModel):
    """合成数据集的输出"""
    manifest_path: str
    records: List[ManifestRecord]
    # 伪造帧路径 -> 源真实帧路径
    fake_sources: Dict[str, str]


def _paint(canvas: np.ndarray, mask: np.ndarray, color) -> None:
    """按 uint8 掩膜(可含抗锯齿)把颜色合成到画布"""
    alpha = (mask.astype(np.float64) / 255.0)[..., None]
    canvas *= 1.0 - alpha
    canvas += alpha * np.asarray(color, dtype=np.float64)


class SyntheticFaceGenerator:
    """类人脸图像生成器"""

    def __init__(self, image_size: int = 64, seed: int = 0):
        self.image_size = image_size
        self.seed = seed

    def identity(self, video_index: int) -> Identity:
        rng = np.random.default_rng([self.seed, 1, video_index])
        s = self.image_size
        skin = rng.uniform([150, 100, 80], [235, 190, 160])
        return Identity(
            skin=tuple(skin),
            hair=tuple(rng.uniform(10, 120, 3)),
            lips=tuple(np.clip(skin * rng.uniform(0.6, 0.8) + [40, 0, 0], 0, 255)),
            iris=tuple(rng.uniform(20, 110, 3)),
            background=(tuple(rng.uniform(30, 220, 3)), tuple(rng.uniform(30, 220, 3))),
            center=(s / 2.0 + rng.uniform(-0.03, 0.03) * s, 0.47 * s + rng.uniform(-0.03, 0.03) * s),
            half_width=float(rng.uniform(0.26, 0.31) * s),
            aspect=float(rng.uniform(1.05, 1.15)),
            texture_seed=int(rng.integers(2**31)),
        )

    def landmarks(self, identity: Identity, frame_index: int) -> np.ndarray:
        """身份几何 + 逐帧抖动"""
        rng = np.random.default_rng([self.seed, 2, identity.texture_seed, frame_index])
        s = self.image_size
        cx = identity.center[0] + rng.uniform(-0.015, 0.015) * s
        cy = identity.center[1] + rng.uniform(-0.015, 0.015) * s
        ax = identity.half_width * rng.uniform(0.98, 1.02)
        ay = ax * identity.aspect
        points = TEMPLATE.copy()
        # 张嘴程度
        points[60:68, 1] = 0.6 + (points[60:68, 1] - 0.6) * rng.uniform(0.5, 2.0)
        landmarks = np.column_stack([cx + points[:, 0] * ax, cy + points[:, 1] * ay])
        return np.clip(landmarks, 0.0, s - 1.0)

    def _texture(self, identity: Identity) -> np.ndarray:
        rng = np.random.default_rng(identity.texture_seed)
        s = self.image_size
        noise = rng.normal(0.0, 1.0, (s, s))
        noise = cv2.GaussianBlur(noise, (0, 0), sigmaX=max(s / 32.0, 1.0))
        return 6.0 * noise / max(float(np.abs(noise).max()), 1e-6)

    def _grain(self, identity: Identity) -> np.ndarray:
        # 皮肤细颗粒：逐身份固定、不做平滑，保留高频能量
        rng = np.random.default_rng([identity.texture_seed, 1])
        return rng.normal(0.0, SKIN_GRAIN, (self.image_size, self.image_size, 1))

    def render(self, identity: Identity, frame_index: int, landmarks: Optional[np.ndarray] = None) -> FaceImage:
        """按身份与帧号渲染一帧"""
        s = self.image_size
        rng = np.random.default_rng([self.seed, 3, identity.texture_seed, frame_index])
        lm = self.landmarks(identity, frame_index) if landmarks is None else landmarks

        top, bottom = identity.background
        ramp = np.linspace(0.0, 1.0, s)[:, None, None]
        canvas = np.broadcast_to((1 - ramp) * np.asarray(top) + ramp * np.asarray(bottom), (s, s, 3)).copy()

        cx = float(lm[:, 0].mean())
        brow_y = float(lm[17:27, 1].min())
        chin_y = float(lm[8, 1])
        ax = (lm[16, 0] - lm[0, 0]) / 2.0
        # 额头高出眉毛 0.45 倍的眉-下巴距离
        face_top = brow_y - 0.45 * (chin_y - brow_y)
        face_cy = (face_top + chin_y) / 2.0
        ay = (chin_y - face_top) / 2.0

        mask = np.zeros((s, s), dtype=np.uint8)
        cv2.ellipse(mask, (int(round(cx)), int(round(face_cy - 0.08 * ay))),
                    (int(round(ax * 1.12)), int(round(ay * 1.08))), 0, 0, 360, 255, -1, cv2.LINE_AA)
        _paint(canvas, mask, identity.hair)

        mask[:] = 0
        cv2.ellipse(mask, (int(round(cx)), int(round(face_cy))),
                    (int(round(ax * 1.02)), int(round(ay))), 0, 0, 360, 255, -1, cv2.LINE_AA)
        yy, xx = np.mgrid[0:s, 0:s]
        radial = ((xx - cx) / max(ax, 1.0)) ** 2 + ((yy - face_cy) / max(ay, 1.0)) ** 2
        shade = (1.0 - 0.15 * np.clip(radial, 0.0, 1.0))[..., None]
        skin = np.asarray(identity.skin) * shade * rng.uniform(0.96, 1.04)
        skin = skin + self._texture(identity)[..., None]
        alpha = (mask.astype(np.float64) / 255.0)[..., None]
        canvas = canvas * (1.0 - alpha) + alpha * skin
        skin_alpha = alpha

        thickness = max(1, s // 48)
        for brow in (lm[17:22], lm[22:27]):
            mask[:] = 0
            cv2.polylines(mask, [np.rint(brow).astype(np.int32)], False, 255, thickness, cv2.LINE_AA)
            _paint(canvas, mask, np.asarray(identity.hair) * 0.8)

        for eye in (lm[36:42], lm[42:48]):
            mask[:] = 0
            cv2.fillPoly(mask, [np.rint(eye).astype(np.int32)], 255, cv2.LINE_AA)
            _paint(canvas, mask, (235.0, 235.0, 230.0))
            mask[:] = 0
            center = eye.mean(axis=0)
            radius = max(1, int(round((eye[:, 1].max() - eye[:, 1].min()) * 0.6)))
            cv2.circle(mask, (int(round(center[0])), int(round(center[1]))), radius, 255, -1, cv2.LINE_AA)
            _paint(canvas, mask, identity.iris)

        mask[:] = 0
        cv2.polylines(mask, [np.rint(lm[27:31]).astype(np.int32)], False, 120, thickness, cv2.LINE_AA)
        cv2.polylines(mask, [np.rint(lm[31:36]).astype(np.int32)], False, 200, thickness, cv2.LINE_AA)
        _paint(canvas, mask, np.asarray(identity.skin) * 0.7)

        mask[:] = 0
        cv2.fillPoly(mask, [np.rint(lm[48:60]).astype(np.int32)], 255, cv2.LINE_AA)
        _paint(canvas, mask, identity.lips)
        mask[:] = 0
        cv2.fillPoly(mask, [np.rint(lm[60:68]).astype(np.int32)], 255, cv2.LINE_AA)
        _paint(canvas, mask, np.asarray(identity.lips) * 0.45)

        canvas = cv2.GaussianBlur(canvas, (0, 0), sigmaX=0.6)
        canvas = canvas + skin_alpha * self._grain(identity)
        canvas = canvas + rng.normal(0.0, SENSOR_NOISE, canvas.shape)
        return FaceImage(pixels=np.clip(canvas, 0.0, 255.0), landmarks=lm, frame_index=frame_index)

    def donor_identity(self, target: Identity, donor_index: int) -> Identity:
        """换脸供体：独立身份，肤色相对目标至少偏移 25"""
        donor = self.identity(10_000 + donor_index)
        rng = np.random.default_rng([self.seed, 4, donor_index])
        offset = rng.uniform(25.0, 40.0, 3) * rng.choice([-1.0, 1.0], 3)
        skin = np.clip(np.asarray(target.skin) + offset, 60.0, 250.0)
        return donor.model_copy(update={"skin": tuple(skin), "texture_seed": donor.texture_seed})

    def make_fake(self, real: FaceImage, donor: Identity) -> FaceImage:
        """
        全局换脸式伪造：在真实帧的几何上渲染供体人脸，经平滑后
        以羽化凸包掩膜整体贴回(非局部扰动)
        """
        swapped = self.render(donor, real.frame_index, landmarks=real.landmarks).pixels
        swapped = cv2.GaussianBlur(swapped, (0, 0), sigmaX=0.8)

        mask = np.zeros(real.size, dtype=np.uint8)
        hull = cv2.convexHull(np.rint(real.landmarks).astype(np.int32))
        cv2.fillConvexPoly(mask, hull, 255)
        alpha = cv2.GaussianBlur(mask.astype(np.float64) / 255.0, (0, 0), sigmaX=max(self.image_size / 64.0, 1.0))
        alpha = alpha[..., None]
        pixels = alpha * swapped + (1.0 - alpha) * real.pixels
        return real.with_pixels(np.clip(pixels, 0.0, 255.0))


def synth_corpus(
    n_videos: int,
    frames_per_video: int,
    seed: int,
    out_dir: Union[str, Path],
    image_size: int = 64,
    held_out_frac: float = 0.1,
    n_fake_videos: Optional[int] = None,
) -> SynthCorpus:
    """
    生成合成数据集并写出清单

    真实视频按 held_out_frac 划出测试集，其余为训练集；伪造视频
    取测试集真实视频逐帧换脸得到，全部属于测试集。
    """
    cfg = CorpusConfig(
        n_videos=n_videos,
        frames_per_video=frames_per_video,
        image_size=image_size,
        held_out_frac=held_out_frac,
        n_fake_videos=n_fake_videos,
        seed=seed,
    )
    out_dir = Path(out_dir)
    generator = SyntheticFaceGenerator(cfg.image_size, cfg.seed)

    n_held = int(round(cfg.n_videos * cfg.held_out_frac))
    n_fake = n_held if cfg.n_fake_videos is None else cfg.n_fake_videos
    held_out = list(range(cfg.n_videos - n_held, cfg.n_videos))

    records: List[ManifestRecord] = []
    fake_sources: Dict[str, str] = {}
    real_frames: Dict[int, List[Tuple[str, FaceImage]]] = {}

    for v in range(cfg.n_videos):
        identity = generator.identity(v)
        video_id = f"real_{v:04d}"
        split = "test" if v in held_out else "train"
        for f in range(cfg.frames_per_video):
            face = generator.render(identity, f)
            rel = Path("frames") / video_id / f"{f:03d}.png"
            write_image(out_dir / rel, face.pixels)
            records.append(ManifestRecord(
                image_path=rel.as_posix(), video_id=video_id, split=split, label="real",
                frame_index=f, landmarks=[tuple(p) for p in face.landmarks],
            ))
            if v in held_out:
                real_frames.setdefault(v, []).append((rel.as_posix(), face))

    sources = held_out or list(range(cfg.n_videos))
    for k in range(n_fake):
        v = sources[k % len(sources)]
        donor = generator.donor_identity(generator.identity(v), k)
        video_id = f"fake_{k:04d}"
        frames = real_frames.get(v) or [
            (f"frames/real_{v:04d}/{f:03d}.png", generator.render(generator.identity(v), f))
            for f in range(cfg.frames_per_video)
        ]
        for source_path, real in frames:
            fake = generator.make_fake(real, donor)
            rel = Path("frames") / video_id / f"{real.frame_index:03d}.png"
            write_image(out_dir / rel, fake.pixels)
            records.append(ManifestRecord(
                image_path=rel.as_posix(), video_id=video_id, split="test", label="fake",
                frame_index=real.frame_index, landmarks=[tuple(p) for p in fake.landmarks],
            ))
            fake_sources[rel.as_posix()] = source_path

    manifest_path = save_manifest(records, out_dir / "manifest.csv")
    logger.info(
        f"合成数据集完成: 真实视频 {cfg.n_videos} (留出 {n_held}), 伪造视频 {n_fake}, "
        f"每视频 {cfg.frames_per_video} 帧, 输出 {out_dir}"
    )
    return SynthCorpus(manifest_path=str(manifest_path), records=records, fake_sources=fake_sources)
