"""
Utility functions shared across modules
"""

import hashlib
import random
from typing import Iterable

import numpy as np
import torch

from .errors import ValidationError


def seed_everything(seed: int, threads: int = 1, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; optionally pin threads and kernels"""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def validate_unit_range(values: np.ndarray, name: str = "pixels") -> bool:
    """Raise ValidationError unless every value is finite and in [0, 1]"""
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{name} contain non-finite values")
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ValidationError(
            f"{name} must lie in [0, 1], got [{values.min():.4g}, {values.max():.4g}]"
        )
    return True


def iou_xywh(rects1: np.ndarray, rects2: np.ndarray) -> np.ndarray:
    """
    Row-wise IoU of (left, top, width, height) rectangles

    Args:
        rects1: (N, 4)
        rects2: (N, 4)
    """
    rects1 = np.asarray(rects1, dtype=np.float64).reshape(-1, 4)
    rects2 = np.asarray(rects2, dtype=np.float64).reshape(-1, 4)
    if rects1.shape != rects2.shape:
        raise ValidationError("IoU needs equally many rectangles on both sides")
    # areas from corners, so identical boxes give exactly 1
    r1 = np.concatenate([rects1[:, :2], rects1[:, :2] + rects1[:, 2:]], axis=1)
    r2 = np.concatenate([rects2[:, :2], rects2[:, :2] + rects2[:, 2:]], axis=1)
    x1 = np.maximum(r1[:, 0], r2[:, 0])
    y1 = np.maximum(r1[:, 1], r2[:, 1])
    x2 = np.minimum(r1[:, 2], r2[:, 2])
    y2 = np.minimum(r1[:, 3], r2[:, 3])
    inter = np.maximum(x2 - x1, 0.0) * np.maximum(y2 - y1, 0.0)
    area1 = (r1[:, 2] - r1[:, 0]) * (r1[:, 3] - r1[:, 1])
    area2 = (r2[:, 2] - r2[:, 0]) * (r2[:, 3] - r2[:, 1])
    union = area1 + area2 - inter
    ious = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(ious, 0.0, 1.0)


def center_errors(centers1: np.ndarray, centers2: np.ndarray) -> np.ndarray:
    """Euclidean distance between (N, 2) center arrays"""
    diff = np.asarray(centers1, dtype=np.float64) - np.asarray(centers2, dtype=np.float64)
    return np.sqrt((diff**2).sum(axis=-1))


def median_and_spread(values: Iterable[float]) -> tuple:
    """Median and max-min spread"""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("median of an empty sample")
    return float(np.median(arr)), float(arr.max() - arr.min())


def short_hash(*parts: object, length: int = 12) -> str:
    """Git-style short sha1 over the string forms of parts"""
    h = hashlib.sha1()
    for part in parts:
        h.update(repr(part).encode())
    return h.hexdigest()[:length]


def derive_seed(seed: int, *labels: object) -> int:
    """Stable child seed for a named sub-stream"""
    digest = hashlib.sha256(repr((seed,) + tuple(labels)).encode()).digest()
    return int.from_bytes(digest[:4], "little")