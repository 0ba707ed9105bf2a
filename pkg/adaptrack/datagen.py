"""
Synthetic tracking data: labelled source sequences, corrupted target
counterparts, template/search cropping, label maps and ratio-controlled
batch sampling.

Coordinates are continuous pixel units: pixel (row i, col j) covers
[j, j+1) x [i, i+1), so its center sits at (j + 0.5, i + 0.5).
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence as Seq, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .config import DataConfig, EncoderConfig, HeadConfig, SceneConfig, Settings
from .errors import ConfigurationError, ValidationError
from .models import (
    TARGET_DOMAINS,
    BBox,
    DomainTag,
    Frame,
    LabelMaps,
    SamplePair,
    Sequence,
    WeatherKind,
    WeatherParams,
)
from .numerics import DTYPE
from .utils import derive_seed
from .weather import apply_weather

logger = logging.getLogger(__name__)


# ============== Scene rendering ==============


def _texture(rng: np.random.Generator, size: int, contrast: float) -> np.ndarray:
    """Smooth colored background built from a few random plane waves"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    tex = np.zeros((size, size))
    for _ in range(4):
        fx, fy = rng.uniform(-3.0, 3.0, 2)
        phase = rng.uniform(0.0, 2 * math.pi)
        tex += np.sin(2 * math.pi * (fx * xx + fy * yy) / size + phase)
    tex /= 4.0
    base = rng.uniform(0.3, 0.7, 3)
    tint = rng.uniform(0.5, 1.0, 3)
    return np.clip(base[None, None, :] + contrast * tex[:, :, None] * tint, 0.0, 1.0)


def _coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [j, j+1) covered by [lo, hi)"""
    j = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(j + 1.0, hi) - np.maximum(j, lo), 0.0, 1.0)


def shape_mask(box: BBox, size: int, shape: str) -> np.ndarray:
    """Anti-aliased coverage mask of a rectangle or ellipse"""
    x0, y0, x1, y1 = box.to_xyxy()
    if shape == "rect":
        return np.outer(_coverage_1d(y0, y1, size), _coverage_1d(x0, x1, size))
    # ellipse: 4x4 supersampling
    sub = (np.arange(size * 4, dtype=np.float64) + 0.5) / 4.0
    dx = ((sub - box.cx) / (box.w / 2)) ** 2
    dy = ((sub - box.cy) / (box.h / 2)) ** 2
    inside = (dy[:, None] + dx[None, :]) <= 1.0
    return inside.reshape(size, 4, size, 4).mean(axis=(1, 3))


def _reflect(pos: np.ndarray, vel: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    for k in range(2):
        if pos[k] < lo[k]:
            pos[k] = 2 * lo[k] - pos[k]
            vel[k] = -vel[k]
        elif pos[k] > hi[k]:
            pos[k] = 2 * hi[k] - pos[k]
            vel[k] = -vel[k]
    np.clip(pos, lo, hi, out=pos)


class _Walker:
    """Smooth random walk with reflective bounds"""

    def __init__(self, rng, size: int, w: float, h: float, speed: float, momentum: float):
        self.rng = rng
        self.w, self.h = w, h
        self.lo = np.array([w / 2, h / 2])
        self.hi = np.array([size - w / 2, size - h / 2])
        self.pos = rng.uniform(self.lo, self.hi)
        self.vel = rng.normal(0.0, 0.5, 2) * speed
        self.speed = speed
        self.momentum = momentum

    def box(self) -> BBox:
        return BBox(cx=float(self.pos[0]), cy=float(self.pos[1]), w=self.w, h=self.h)

    def step(self) -> None:
        kick = self.rng.normal(0.0, 1.0, 2) * self.speed
        self.vel = self.momentum * self.vel + (1.0 - self.momentum) * kick
        norm = float(np.hypot(*self.vel))
        if norm > self.speed > 0:
            self.vel *= self.speed / norm
        self.pos = self.pos + self.vel
        _reflect(self.pos, self.vel, self.lo, self.hi)


def generate_sequence(cfg: SceneConfig, seed: int, name: Optional[str] = None) -> Sequence:
    """
    Render a labelled source sequence

    Raises:
        ValidationError: target size range does not fit inside the frame
    """
    size = cfg.frame_size
    if cfg.target_min_size > cfg.target_max_size:
        raise ValidationError("target_min_size exceeds target_max_size")
    if cfg.target_max_size >= size:
        raise ValidationError(
            f"target size {cfg.target_max_size} does not fit a {size}px frame"
        )
    rng = np.random.default_rng(seed)
    background = _texture(rng, size, cfg.texture_contrast)

    w, h = rng.uniform(cfg.target_min_size, cfg.target_max_size, 2)
    target = _Walker(rng, size, float(w), float(h), cfg.max_speed, cfg.momentum)
    distractors = []
    for _ in range(cfg.distractors):
        dw, dh = rng.uniform(cfg.target_min_size, cfg.target_max_size, 2)
        walker = _Walker(rng, size, float(dw), float(dh), cfg.max_speed * 0.5, cfg.momentum)
        distractors.append((walker, rng.uniform(0.05, 0.95, 3)))
    color = np.asarray(cfg.target_color, dtype=np.float64)

    frames: List[Frame] = []
    boxes: List[BBox] = []
    for t in range(cfg.length):
        if t > 0:
            target.step()
            for walker, _ in distractors:
                walker.step()
        img = background.copy()
        for walker, dcolor in distractors:
            m = shape_mask(walker.box(), size, cfg.target_shape)[:, :, None]
            img = img * (1.0 - m) + dcolor[None, None, :] * m
        box = target.box()
        m = shape_mask(box, size, cfg.target_shape)[:, :, None]
        img = img * (1.0 - m) + color[None, None, :] * m
        frames.append(Frame.from_pixels(img, DomainTag.SOURCE))
        boxes.append(box)

    return Sequence(
        name=name or f"seq-{seed}",
        frames=frames,
        annotations=boxes,
        domain_tag=DomainTag.SOURCE,
        seed=seed,
    )


def scene_variant(base: SceneConfig, index: int) -> SceneConfig:
    """Distinct scene flavours standing in for separate source datasets"""
    variants = [
        {},
        {"target_shape": "ellipse"},
        {"distractors": base.distractors + 2},
        {"target_shape": "ellipse", "texture_contrast": min(1.0, base.texture_contrast + 0.15)},
    ]
    return base.model_copy(update=variants[index % len(variants)])


def weather_params(kind: WeatherKind, data: DataConfig, seed: int = 0) -> WeatherParams:
    """Default-severity parameters for one weather kind"""
    return WeatherParams(
        kind=kind,
        fog_beta=data.fog_beta,
        gamma=data.gamma,
        brightness=data.brightness,
        rain_density=data.rain_density,
        rain_alpha=data.rain_alpha,
        seed=seed,
    )


def corrupt_sequence(seq: Sequence, params: WeatherParams) -> Tuple[Sequence, List[BBox]]:
    """
    Corrupt every frame; the returned sequence carries no annotations

    Returns:
        (target-domain sequence, the withheld source boxes)
    """
    if seq.annotations is None:
        raise ValidationError("only labelled source sequences can be corrupted")
    frames = []
    for index, frame in enumerate(seq.frames):
        frame_params = params.model_copy(update={"seed": derive_seed(params.seed, index)})
        frames.append(apply_weather(frame, frame_params))
    target = Sequence(
        name=f"{seq.name}-{params.kind.value}",
        frames=frames,
        annotations=None,
        domain_tag=params.kind.domain,
        seed=seq.seed,
    )
    return target, list(seq.annotations)


# ============== Cropping ==============


@dataclass(frozen=True)
class CropTransform:
    """Maps frame coordinates to crop coordinates: crop = (frame - origin) / scale"""

    x0: float
    y0: float
    scale: float
    size: int

    def to_crop(self, box: BBox) -> BBox:
        return BBox(
            cx=(box.cx - self.x0) / self.scale,
            cy=(box.cy - self.y0) / self.scale,
            w=box.w / self.scale,
            h=box.h / self.scale,
        )

    def to_frame(self, box: BBox) -> BBox:
        return BBox(
            cx=box.cx * self.scale + self.x0,
            cy=box.cy * self.scale + self.y0,
            w=box.w * self.scale,
            h=box.h * self.scale,
        )


def crop_region(
    frame: Frame, box: BBox, factor: float, out_size: int
) -> Tuple[np.ndarray, CropTransform]:
    """
    Square crop of side factor*sqrt(w*h) centered on box, resized bilinearly

    Area outside the frame reads as the per-channel frame mean.

    Raises:
        ValidationError: box lies entirely outside the frame
    """
    x0, y0, x1, y1 = box.to_xyxy()
    if x1 <= 0 or y1 <= 0 or x0 >= frame.width or y0 >= frame.height:
        raise ValidationError("box lies outside the frame")
    side = factor * math.sqrt(box.w * box.h)
    scale = side / out_size
    origin_x = box.cx - side / 2
    origin_y = box.cy - side / 2

    centers = (torch.arange(out_size, dtype=DTYPE) + 0.5) * scale
    gx = 2.0 * (origin_x + centers) / frame.width - 1.0
    gy = 2.0 * (origin_y + centers) / frame.height - 1.0
    grid = torch.stack(torch.meshgrid(gx, gy, indexing="xy"), dim=-1).unsqueeze(0)

    pixels = torch.as_tensor(frame.pixels, dtype=DTYPE)
    mean = pixels.mean(dim=(0, 1))
    img = (pixels - mean).permute(2, 0, 1).unsqueeze(0)
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    crop = out[0].permute(1, 2, 0) + mean
    return crop.numpy().clip(0.0, 1.0), CropTransform(origin_x, origin_y, scale, out_size)


def crop_template(
    frame: Frame, box: BBox, data: Optional[DataConfig] = None
) -> Tuple[np.ndarray, CropTransform]:
    data = data or DataConfig()
    return crop_region(frame, box, data.template_factor, data.template_size)


def crop_search(
    frame: Frame, box: BBox, data: Optional[DataConfig] = None
) -> Tuple[np.ndarray, CropTransform]:
    data = data or DataConfig()
    return crop_region(frame, box, data.search_factor, data.search_size)


# ============== Labels ==============


def grid_position(x: float, stride: float, grid: int) -> Tuple[int, float]:
    """Cell index and in-cell offset in [0, 1) of coordinate x"""
    c = x / stride - 0.5
    cell = int(min(max(math.floor(c), 0), grid - 1))
    offset = min(max(c - cell, 0.0), math.nextafter(1.0, 0.0))
    return cell, offset


def make_labels(
    label_box: BBox,
    encoder: Optional[EncoderConfig] = None,
    head: Optional[HeadConfig] = None,
    sigma: Optional[float] = None,
) -> LabelMaps:
    """
    Gaussian center heatmap plus offset and size targets

    Args:
        label_box: box in search-crop pixels
        sigma: heatmap width in cells; default sigma_factor*sqrt(w*h)/stride
    """
    encoder = encoder or EncoderConfig()
    head = head or HeadConfig()
    grid = encoder.grid
    stride = encoder.search_size / grid
    col, off_x = grid_position(label_box.cx, stride, grid)
    row, off_y = grid_position(label_box.cy, stride, grid)
    if sigma is None:
        sigma = max(head.sigma_factor * math.sqrt(label_box.area) / stride, head.sigma_floor)

    rr, cc = np.mgrid[0:grid, 0:grid].astype(np.float64)
    cls_map = np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2.0 * sigma**2))
    offset_map = np.zeros((2, grid, grid))
    size_map = np.zeros((2, grid, grid))
    offset_map[:, row, col] = (off_x, off_y)
    size_map[:, row, col] = (
        label_box.w / encoder.search_size,
        label_box.h / encoder.search_size,
    )
    return LabelMaps(cls_map=cls_map, offset_map=offset_map, size_map=size_map, peak=(row, col))


# ============== Sample pairs and pools ==============


def _jittered(box: BBox, data: DataConfig, rng: np.random.Generator) -> BBox:
    extent = math.sqrt(box.area)
    shift = rng.uniform(-1.0, 1.0, 2) * data.center_jitter * extent
    scale = math.exp(rng.normal(0.0, data.scale_jitter))
    return BBox(
        cx=box.cx + float(shift[0]),
        cy=box.cy + float(shift[1]),
        w=box.w * scale,
        h=box.h * scale,
    )


def make_pairs(
    frames: Seq[Frame],
    boxes: Seq[BBox],
    domain: DomainTag,
    data: DataConfig,
    rng: np.random.Generator,
    count: int,
) -> List[SamplePair]:
    """
    Cut template/search pairs from a sequence

    The template comes from frame i at its box, the search region from a
    frame up to max_frame_gap later around a jittered box. Boxes of target
    sequences are used for geometry only; their pairs carry no label.
    """
    pairs = []
    n = len(frames)
    for _ in range(count):
        i = int(rng.integers(n))
        j = int(min(n - 1, i + rng.integers(0, data.max_frame_gap + 1)))
        template, _ = crop_template(frames[i], boxes[i], data)
        search, transform = crop_search(frames[j], _jittered(boxes[j], data, rng), data)
        label = transform.to_crop(boxes[j]) if domain == DomainTag.SOURCE else None
        pairs.append(
            SamplePair(template=template, search=search, label_box=label, domain_tag=domain)
        )
    return pairs


def frame_budget(settings: Settings) -> Tuple[int, int]:
    """(source frames, target frames) consumed by build_pools"""
    data = settings.data
    source = data.source_pools * data.sequences_per_pool * settings.scene.length
    target = len(TARGET_DOMAINS) * data.target_sequences_per_domain * data.target_sequence_length
    return source, target


def build_pools(settings: Settings, seed: int) -> Dict[str, List[SamplePair]]:
    """Per-pool sample lists: source_0..source_{k-1}, fog, dark, rain"""
    data = settings.data
    pools: Dict[str, List[SamplePair]] = {}
    for k in range(data.source_pools):
        scene = scene_variant(settings.scene, k)
        pool: List[SamplePair] = []
        for s in range(data.sequences_per_pool):
            seq_seed = derive_seed(seed, "source", k, s)
            seq = generate_sequence(scene, seq_seed)
            rng = np.random.default_rng(derive_seed(seq_seed, "pairs"))
            pool += make_pairs(
                seq.frames, seq.annotations, DomainTag.SOURCE, data, rng, data.pairs_per_sequence
            )
        pools[f"source_{k}"] = pool

    for domain in TARGET_DOMAINS:
        kind = WeatherKind(domain.value)
        pool = []
        for s in range(data.target_sequences_per_domain):
            scene = scene_variant(settings.scene, s).model_copy(
                update={"length": data.target_sequence_length}
            )
            seq_seed = derive_seed(seed, "target", domain.value, s)
            clean = generate_sequence(scene, seq_seed)
            corrupted, boxes = corrupt_sequence(clean, weather_params(kind, data, seq_seed))
            rng = np.random.default_rng(derive_seed(seq_seed, "pairs"))
            pool += make_pairs(
                corrupted.frames, boxes, domain, data, rng, data.target_pairs_per_sequence
            )
        pools[domain.value] = pool

    source, target = frame_budget(settings)
    logger.info(
        "Built %d pools: %d source frames, %d target frames (%.2f%%)",
        len(pools), source, target, 100.0 * target / max(source, 1),
    )
    return pools


@dataclass
class EvalCase:
    """A held-out sequence plus the ground truth used only for scoring"""

    name: str
    domain: DomainTag
    sequence: Sequence
    ground_truth: List[BBox]


def build_eval_suite(
    settings: Settings,
    seed: int,
    domains: Seq[DomainTag] = (DomainTag.SOURCE,) + TARGET_DOMAINS,
) -> List[EvalCase]:
    """Held-out sequences per domain; corrupted ones keep their geometry"""
    data = settings.data
    cases = []
    for domain in domains:
        for s in range(data.eval_sequences_per_domain):
            scene = scene_variant(settings.scene, s).model_copy(
                update={"length": data.eval_sequence_length}
            )
            seq_seed = derive_seed(seed, "eval", s)
            clean = generate_sequence(scene, seq_seed, name=f"eval-{s}")
            if domain == DomainTag.SOURCE:
                cases.append(EvalCase(clean.name, domain, clean, list(clean.annotations)))
                continue
            kind = WeatherKind(domain.value)
            corrupted, boxes = corrupt_sequence(clean, weather_params(kind, data, seq_seed))
            cases.append(EvalCase(corrupted.name, domain, corrupted, boxes))
    return cases


# ============== Batch sampling ==============


class BatchSampler:
    """Seeded stream of ratio-weighted draws over named pools"""

    def __init__(
        self,
        pools: Mapping[str, Seq[SamplePair]],
        ratios: Mapping[str, float],
        batch_size: int,
        seed: int,
    ):
        if batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        active = []
        for name, weight in ratios.items():
            if weight < 0:
                raise ConfigurationError(f"ratio for pool '{name}' is negative")
            if weight == 0:
                continue
            if not pools.get(name):
                raise ConfigurationError(f"pool '{name}' is empty but has ratio {weight}")
            active.append(name)
        if not active:
            raise ConfigurationError("all pool ratios are zero")
        weights = np.array([ratios[n] for n in active], dtype=np.float64)
        self.names = active
        self.probs = weights / weights.sum()
        self.pools = pools
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def choose_pools(self, n: int) -> List[str]:
        picks = self.rng.choice(len(self.names), size=n, p=self.probs)
        return [self.names[k] for k in picks]

    def draw(self) -> Tuple[List[SamplePair], List[SamplePair]]:
        source: List[SamplePair] = []
        target: List[SamplePair] = []
        for name in self.choose_pools(self.batch_size):
            pool = self.pools[name]
            pair = pool[int(self.rng.integers(len(pool)))]
            if pair.domain_tag == DomainTag.SOURCE:
                source.append(pair)
            else:
                target.append(pair)
        return source, target


def sample_batch(
    pools: Mapping[str, Seq[SamplePair]],
    ratios: Mapping[str, float],
    batch_size: int,
    seed: int,
) -> Tuple[List[SamplePair], List[SamplePair]]:
    """One ratio-weighted draw of (source batch, target batch)"""
    return BatchSampler(pools, ratios, batch_size, seed).draw()


def stack_crops(pairs: Seq[SamplePair]) -> Tuple[torch.Tensor, torch.Tensor]:
    """(templates, searches) as (N, 3, H, W) float64 tensors"""
    templates = torch.as_tensor(np.stack([p.template for p in pairs]), dtype=DTYPE)
    searches = torch.as_tensor(np.stack([p.search for p in pairs]), dtype=DTYPE)
    return templates.permute(0, 3, 1, 2).contiguous(), searches.permute(0, 3, 1, 2).contiguous()
