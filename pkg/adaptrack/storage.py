"""
On-disk formats: PPM frame directories, checkpoints and the metrics log
"""

import asyncio
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import aiofiles
import backoff
import numpy as np
import torch
from PIL import Image

from .config import Settings
from .errors import CheckpointError, ConfigurationError, ValidationError
from .models import BBox, DomainTag, Frame, Sequence
from .utils import validate_unit_range

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BACKBONE_GROUP = "backbone"
TEACHER_GROUP = "teacher"

PathLike = Union[str, Path]


# ============== Frames ==============


def encode_ppm(pixels: np.ndarray) -> bytes:
    """Binary P6 bytes of an (H, W, 3) [0, 1] image, 8-bit quantised"""
    validate_unit_range(pixels, "frame pixels")
    raster = np.round(np.asarray(pixels) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(raster).save(buf, format="PPM")
    return buf.getvalue()


def read_ppm(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_ppm(path: PathLike, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


async def write_frame_async(path: PathLike, pixels: np.ndarray) -> None:
    data = encode_ppm(pixels)
    async with aiofiles.open(path, "wb") as f:
        await f.write(data)


def frame_path(directory: PathLike, index: int) -> Path:
    return Path(directory) / "frames" / f"{index:05d}.ppm"


async def save_sequence_async(seq: Sequence, directory: PathLike) -> Path:
    """
    Write frames/NNNNN.ppm, sequence.json and, for source sequences,
    annotations.txt (index cx cy w h)
    """
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    await asyncio.gather(
        *(write_frame_async(frame_path(directory, i), f.pixels) for i, f in enumerate(seq.frames))
    )
    meta = {
        "name": seq.name,
        "domain": seq.domain_tag.value,
        "seed": seq.seed,
        "length": len(seq),
    }
    async with aiofiles.open(directory / "sequence.json", "w") as f:
        await f.write(json.dumps(meta, indent=2))
    if seq.annotations is not None:
        lines = [
            f"{i} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}" for i, b in enumerate(seq.annotations)
        ]
        async with aiofiles.open(directory / "annotations.txt", "w") as f:
            await f.write("\n".join(lines) + "\n")
    logger.debug("Wrote %d frames to %s", len(seq), directory)
    return directory


def save_sequence(seq: Sequence, directory: PathLike) -> Path:
    return asyncio.run(save_sequence_async(seq, directory))


def read_annotations(path: PathLike) -> List[BBox]:
    boxes = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValidationError(f"annotation line must hold 5 fields: '{line}'")
        boxes.append(BBox.from_array(parts[1:]))
    return boxes


def load_sequence(directory: PathLike) -> Sequence:
    """
    Read a sequence directory written by save_sequence

    Raises:
        ConfigurationError: directory or metadata missing
    """
    directory = Path(directory)
    meta_path = directory / "sequence.json"
    if not meta_path.is_file():
        raise ConfigurationError(f"{directory} is not a sequence directory")
    meta = json.loads(meta_path.read_text())
    domain = DomainTag(meta["domain"])
    frames = [
        Frame.from_pixels(read_ppm(frame_path(directory, i)), domain)
        for i in range(meta["length"])
    ]
    ann_path = directory / "annotations.txt"
    annotations = read_annotations(ann_path) if ann_path.is_file() else None
    return Sequence(
        name=meta["name"],
        frames=frames,
        annotations=annotations,
        domain_tag=domain,
        seed=meta["seed"],
    )


# ============== Checkpoints ==============


def _architecture(settings: Settings) -> Dict[str, dict]:
    return {
        "encoder": settings.encoder.model_dump(mode="json"),
        "head": settings.head.model_dump(mode="json"),
    }


@dataclass
class Checkpoint:
    fingerprint: str
    architecture: Dict[str, dict]
    groups: Dict[str, Dict[str, torch.Tensor]] = field(default_factory=dict)

    def adapter_domains(self) -> List[str]:
        return sorted(g.split("/", 1)[1] for g in self.groups if g.startswith("adapter/"))


@backoff.on_exception(backoff.expo, OSError, max_tries=3)
def _atomic_save(payload: dict, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: PathLike, checkpoint: Checkpoint) -> Path:
    """Write the versioned container atomically (temp file + rename)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups = {
        name: {k: v.detach().clone() for k, v in state.items()}
        for name, state in checkpoint.groups.items()
    }
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "fingerprint": checkpoint.fingerprint,
        "architecture": checkpoint.architecture,
        "groups": groups,
        "shapes": {
            name: {k: list(v.shape) for k, v in state.items()} for name, state in groups.items()
        },
    }
    _atomic_save(payload, path)
    logger.info("Checkpoint written to %s (groups: %s)", path, ", ".join(sorted(groups)))
    return path


def load_checkpoint(path: PathLike, settings: Optional[Settings] = None) -> Checkpoint:
    """
    Raises:
        ConfigurationError: file missing
        CheckpointError: unreadable, wrong version, bad shapes or an
            architecture that differs from ``settings``
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable ({e})", str(path))
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported format {payload.get('format_version')}", str(path))
    for group, state in payload["groups"].items():
        for name, tensor in state.items():
            if list(tensor.shape) != payload["shapes"][group][name]:
                raise CheckpointError(f"shape header mismatch for {group}:{name}", str(path))
    if settings is not None and payload["architecture"] != _architecture(settings):
        raise CheckpointError("architecture differs from the current config", str(path))
    return Checkpoint(
        fingerprint=payload["fingerprint"],
        architecture=payload["architecture"],
        groups=payload["groups"],
    )


def new_checkpoint(settings: Settings) -> Checkpoint:
    return Checkpoint(fingerprint=settings.fingerprint(), architecture=_architecture(settings))


# ============== Metrics log ==============


class MetricsLog:
    """Append-only per-step loss log: step cls l1 giou psot total"""

    HEADER = "step cls l1 giou psot total"

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.write_text(self.HEADER + "\n")

    def append(self, line: str) -> None:
        with self.path.open("a") as f:
            f.write(line + "\n")

    def rows(self) -> List[Tuple[float, ...]]:
        lines = self.path.read_text().splitlines()[1:]
        return [tuple(float(x) for x in line.split()) for line in lines if line.strip()]
