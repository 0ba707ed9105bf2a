"""
Supervised tracking losses and the hybrid objective

total = w_cls * cls + beta * l1 + gamma_w * giou + lambda * psot, where the
supervised terms sum the labelled source batch and the pseudo-labelled
target batch.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence as Seq

import numpy as np
import torch

from .config import EncoderConfig, HeadConfig
from .datagen import make_labels
from .errors import NumericalError, ValidationError
from .models import BBox, LossWeights
from .network import ResponseMap, boxes_at
from .numerics import DTYPE, Tensor

logger = logging.getLogger(__name__)

FOCAL_EPS = 1e-7


def _sample_weights(n: int, weights: Optional[Tensor]) -> Tensor:
    if weights is None:
        return torch.ones(n, dtype=DTYPE)
    weights = torch.as_tensor(weights, dtype=DTYPE)
    if weights.shape != (n,):
        raise ValidationError(f"expected {n} sample weights, got {tuple(weights.shape)}")
    return weights


def focal_loss(pred: Tensor, target: Tensor, weights: Optional[Tensor] = None) -> Tensor:
    """
    Penalty-reduced focal loss on Gaussian heatmaps (exponents 2 and 4)

    Args:
        pred: (N, H, W) probabilities; clamped to [1e-7, 1 - 1e-7]
        target: (N, H, W) heatmaps, positives where target == 1
        weights: optional (N,) per-sample weights; zero drops a sample
    """
    if pred.shape != target.shape:
        raise ValidationError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    w = _sample_weights(pred.shape[0], weights).reshape(-1, *([1] * (pred.dim() - 1)))
    p = pred.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
    pos_inds = target.eq(1).to(DTYPE) * w
    neg_inds = target.lt(1).to(DTYPE) * w

    pos_loss = -(torch.log(p) * torch.pow(1 - p, 2) * pos_inds).sum()
    neg_loss = -(torch.log(1 - p) * torch.pow(p, 2) * torch.pow(1 - target, 4) * neg_inds).sum()

    num_pos = pos_inds.sum()
    if num_pos.item() == 0:
        return neg_loss
    return (pos_loss + neg_loss) / num_pos


def _weighted_mean(per_sample: Tensor, weights: Tensor) -> Tensor:
    total = weights.sum()
    if total.item() == 0:
        return (per_sample * weights).sum()
    return (per_sample * weights).sum() / total


def l1_box(pred: Tensor, gt: Tensor, weights: Optional[Tensor] = None) -> Tensor:
    """Mean absolute difference of normalized (cx, cy, w, h)"""
    pred = pred.reshape(-1, 4)
    gt = torch.as_tensor(gt, dtype=DTYPE).reshape(-1, 4)
    per_sample = (pred - gt).abs().mean(dim=1)
    return _weighted_mean(per_sample, _sample_weights(pred.shape[0], weights))


def _to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def giou_loss(pred: Tensor, gt: Tensor, weights: Optional[Tensor] = None) -> Tensor:
    """
    1 - GIoU of (cx, cy, w, h) boxes, averaged over samples

    Raises:
        ValidationError: a box with zero or negative area
    """
    pred = pred.reshape(-1, 4)
    gt = torch.as_tensor(gt, dtype=DTYPE).reshape(-1, 4)
    for name, boxes in (("pred", pred), ("gt", gt)):
        if bool((boxes[:, 2:] <= 0).any()):
            raise ValidationError(f"giou_loss got a zero-area {name} box")
    b1, b2 = _to_xyxy(pred), _to_xyxy(gt)

    lt = torch.max(b1[:, :2], b2[:, :2])
    rb = torch.min(b1[:, 2:], b2[:, 2:])
    wh = (rb - lt).clamp(min=0)
    enclose_wh = torch.max(b1[:, 2:], b2[:, 2:]) - torch.min(b1[:, :2], b2[:, :2])

    overlap = wh[:, 0] * wh[:, 1]
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - overlap
    enclose_area = enclose_wh[:, 0] * enclose_wh[:, 1]
    gious = overlap / union - (enclose_area - union) / enclose_area
    return _weighted_mean(1 - gious, _sample_weights(pred.shape[0], weights))


# ============== Supervision ==============


@dataclass
class Supervision:
    """Stacked label maps for one batch"""

    heatmaps: Tensor  # N, H', W'
    rows: Tensor
    cols: Tensor
    boxes: Tensor  # N, 4 normalized by search size


def make_supervision(
    label_boxes: Seq[BBox],
    encoder: Optional[EncoderConfig] = None,
    head: Optional[HeadConfig] = None,
) -> Supervision:
    encoder = encoder or EncoderConfig()
    maps = [make_labels(box, encoder, head) for box in label_boxes]
    size = encoder.search_size
    return Supervision(
        heatmaps=torch.as_tensor(np.stack([m.cls_map for m in maps]), dtype=DTYPE),
        rows=torch.tensor([m.peak[0] for m in maps], dtype=torch.long),
        cols=torch.tensor([m.peak[1] for m in maps], dtype=torch.long),
        boxes=torch.tensor(
            [[b.cx / size, b.cy / size, b.w / size, b.h / size] for b in label_boxes],
            dtype=DTYPE,
        ),
    )


@dataclass
class SupervisedTerms:
    cls: Tensor
    l1: Tensor
    giou: Tensor

    @classmethod
    def zeros(cls) -> "SupervisedTerms":
        zero = torch.zeros((), dtype=DTYPE)
        return cls(zero, zero, zero)


def supervised_terms(
    resp: ResponseMap, sup: Supervision, weights: Optional[Tensor] = None
) -> SupervisedTerms:
    """Focal, L1 and GIoU terms; boxes are read at the labelled peak cells"""
    pred_boxes = boxes_at(resp, sup.rows, sup.cols)
    return SupervisedTerms(
        cls=focal_loss(resp.scores, sup.heatmaps, weights),
        l1=l1_box(pred_boxes, sup.boxes, weights),
        giou=giou_loss(pred_boxes, sup.boxes, weights),
    )


# ============== Hybrid loss ==============


@dataclass
class LossReport:
    """Loss components, their weighted total and optional gradient norms"""

    cls: Tensor
    l1: Tensor
    giou: Tensor
    psot: Tensor
    total: Tensor
    grad_norm: Optional[float] = None
    term_grad_norms: Dict[str, float] = field(default_factory=dict)

    def values(self) -> Dict[str, float]:
        return {
            "cls": self.cls.item(),
            "l1": self.l1.item(),
            "giou": self.giou.item(),
            "psot": self.psot.item(),
            "total": self.total.item(),
        }

    def line(self, step: int) -> str:
        """Metrics log row: step cls l1 giou psot total"""
        v = self.values()
        return " ".join([str(step)] + [repr(v[k]) for k in ("cls", "l1", "giou", "psot", "total")])


def total_loss(
    src: SupervisedTerms,
    tgt: Optional[SupervisedTerms],
    psot: Tensor,
    weights: LossWeights,
    target_weight: float = 1.0,
) -> LossReport:
    """
    Hybrid objective over source, pseudo-labelled target and PSOT terms

    Raises:
        NumericalError: any component or the total is non-finite
    """
    tgt = tgt or SupervisedTerms.zeros()
    cls = src.cls + target_weight * tgt.cls
    l1 = src.l1 + target_weight * tgt.l1
    giou = src.giou + target_weight * tgt.giou
    psot = torch.as_tensor(psot, dtype=DTYPE)
    total = (
        weights.w_cls * cls + weights.beta * l1 + weights.gamma_w * giou + weights.lambda_ * psot
    )
    report = LossReport(cls=cls, l1=l1, giou=giou, psot=psot, total=total)
    for name, value in (("cls", cls), ("l1", l1), ("giou", giou), ("psot", psot), ("total", total)):
        if not bool(torch.isfinite(value).all()):
            terms = zip(("cls", "l1", "giou", "psot"), (cls, l1, giou, psot))
            diagnostics = {k: v.item() for k, v in terms}
            raise NumericalError(f"loss term {name}", diagnostics)
    return report
