"""
数据清单服务
读写逐帧清单，加载人脸图像，按视频分组
"""

from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import cv2
import numpy as np
import pandas as pd
from loguru import logger
from pydantic import ValidationError

from ..core.exceptions import DataError
from ..models.data_models import N_LANDMARKS, FaceImage, ManifestRecord

# 字段顺序固定：前五列为元数据，随后为 x0, y0, ..., x67, y67
META_COLUMNS = ["image_path", "video_id", "split", "label", "frame_index"]
LANDMARK_COLUMNS = [f"{axis}{i}" for i in range(N_LANDMARKS) for axis in ("x", "y")]
MANIFEST_COLUMNS = META_COLUMNS + LANDMARK_COLUMNS


def save_manifest(records: Iterable[ManifestRecord], path: Union[str, Path]) -> Path:
    """写出 CSV 清单"""
    rows = []
    for record in records:
        row = {
            "image_path": record.image_path,
            "video_id": record.video_id,
            "split": record.split,
            "label": record.label,
            "frame_index": record.frame_index,
        }
        for i, (x, y) in enumerate(record.landmarks):
            row[f"x{i}"] = x
            row[f"y{i}"] = y
        rows.append(row)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False, float_format="%.17g")
    logger.info(f"清单已写出: {path} ({len(rows)} 帧)")
    return path


def load_manifest(path: Union[str, Path]) -> List[ManifestRecord]:
    """读取 CSV 清单"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"清单文件不存在: {path}")

    try:
        frame = pd.read_csv(path, dtype={"image_path": str, "video_id": str, "split": str, "label": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError, OSError) as e:
        raise DataError(f"清单解析失败: {path}: {e}") from e

    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"清单缺少字段: {missing[:5]}{'...' if len(missing) > 5 else ''}")

    try:
        coords = frame[LANDMARK_COLUMNS].to_numpy(dtype=np.float64).reshape(len(frame), N_LANDMARKS, 2)
    except ValueError as e:
        raise DataError(f"清单关键点坐标不是数值: {path}: {e}") from e
    records = []
    for idx, row in enumerate(frame[META_COLUMNS].itertuples(index=False)):
        try:
            records.append(
                ManifestRecord(
                    image_path=row.image_path,
                    video_id=row.video_id,
                    split=row.split,
                    label=row.label,
                    frame_index=int(row.frame_index),
                    landmarks=[tuple(p) for p in coords[idx]],
                )
            )
        except ValidationError as e:
            raise DataError(f"清单第 {idx + 1} 行无效: {e}") from e

    logger.debug(f"清单加载成功: {path} ({len(records)} 帧)")
    return records


def read_image(path: Union[str, Path]) -> np.ndarray:
    """读取 RGB 浮点像素"""
    try:
        image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    except cv2.error as e:
        raise DataError(f"无法读取图像: {path}: {e}") from e
    if image is None:
        raise DataError(f"无法读取图像: {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB).astype(np.float64)


def write_image(path: Union[str, Path], pixels: np.ndarray) -> Path:
    """量化为 uint8 后写出 PNG/JPEG"""
    path = Path(path)
    quantized = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        written = cv2.imwrite(str(path), cv2.cvtColor(quantized, cv2.COLOR_RGB2BGR))
    except (cv2.error, OSError) as e:
        raise DataError(f"写出图像失败: {path}: {e}") from e
    if not written:
        raise DataError(f"写出图像失败: {path}")
    return path


def filter_records(
    records: Iterable[ManifestRecord], split: Optional[str] = None, label: Optional[str] = None
) -> List[ManifestRecord]:
    return [
        r for r in records
        if (split is None or r.split == split) and (label is None or r.label == label)
    ]


def group_by_video(records: Iterable[ManifestRecord]) -> "OrderedDict[str, List[ManifestRecord]]":
    """按视频分组，组内按帧号排序，视频按首次出现顺序排列"""
    groups: "OrderedDict[str, List[ManifestRecord]]" = OrderedDict()
    for record in records:
        groups.setdefault(record.video_id, []).append(record)
    for frames in groups.values():
        frames.sort(key=lambda r: r.frame_index)
    return groups


class FaceLoader:
    """按清单加载 FaceImage，带内存缓存"""

    def __init__(self, root: Union[str, Path], cache: bool = True):
        self.root = Path(root)
        self.cache_enabled = cache
        self._cache: Dict[str, FaceImage] = {}

    def load(self, record: ManifestRecord) -> FaceImage:
        key = record.image_path
        if self.cache_enabled and key in self._cache:
            return self._cache[key]

        path = Path(record.image_path)
        if not path.is_absolute():
            path = self.root / path
        try:
            face = FaceImage(
                pixels=read_image(path),
                landmarks=np.asarray(record.landmarks, dtype=np.float64),
                frame_index=record.frame_index,
            )
        except ValidationError as e:
            raise DataError(f"图像与关键点不一致: {path}: {e}") from e

        if self.cache_enabled:
            self._cache[key] = face
        return face
