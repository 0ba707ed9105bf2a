"""
Finite-difference checks of every differentiable building block

Each check builds a tiny float64 instance, wraps the tensors it
differentiates in a ParameterSet and compares autograd against central
differences.
"""

import logging
from collections import OrderedDict
from typing import Callable, Dict

import torch

from .config import EncoderConfig, HeadConfig, TCAConfig
from .losses import focal_loss, giou_loss, l1_box, make_supervision, supervised_terms, total_loss
from .models import BBox, LossWeights
from .network import DomainAdapter, Encoder, Head, Tracker, decode_box
from .numerics import DTYPE, GradCheckReport, ParameterSet, grad_check
from .tca import psot_loss, psot_terms

logger = logging.getLogger(__name__)

TINY_ENCODER = EncoderConfig(
    patch_size=4,
    embed_dim=8,
    depth=1,
    heads=2,
    mlp_ratio=2.0,
    template_size=8,
    search_size=16,
    bank_tokens=2,
)
TINY_HEAD = HeadConfig(channels=4)

DEFAULT_TOL = 1e-4
PSOT_TOL = 1e-3


def _leaf(shape, gen: torch.Generator, scale: float = 1.0, offset: float = 0.0) -> torch.Tensor:
    t = torch.rand(shape, generator=gen, dtype=DTYPE) * scale + offset
    return t.requires_grad_(True)


def _projection(module_out_shape, gen) -> torch.Tensor:
    return torch.randn(module_out_shape, generator=gen, dtype=DTYPE)


def check_focal(gen: torch.Generator) -> GradCheckReport:
    logits = _leaf((2, 4, 4), gen, scale=4.0, offset=-2.0)
    target = torch.rand((2, 4, 4), generator=gen, dtype=DTYPE) * 0.9
    target[0, 1, 2] = 1.0
    target[1, 3, 0] = 1.0
    params = ParameterSet(OrderedDict(logits=logits))
    return grad_check(lambda: focal_loss(torch.sigmoid(logits), target), params, tol=DEFAULT_TOL)


def _boxes(gen: torch.Generator) -> torch.Tensor:
    centers = torch.rand((3, 2), generator=gen, dtype=DTYPE)
    sizes = torch.rand((3, 2), generator=gen, dtype=DTYPE) * 0.4 + 0.1
    return torch.cat([centers, sizes], dim=1)


def check_l1(gen: torch.Generator) -> GradCheckReport:
    pred = _boxes(gen).requires_grad_(True)
    gt = _boxes(gen)
    params = ParameterSet(OrderedDict(pred=pred))
    return grad_check(lambda: l1_box(pred, gt), params, tol=DEFAULT_TOL)


def check_giou(gen: torch.Generator) -> GradCheckReport:
    pred = _boxes(gen).requires_grad_(True)
    gt = _boxes(gen)
    params = ParameterSet(OrderedDict(pred=pred))
    return grad_check(lambda: giou_loss(pred, gt), params, tol=DEFAULT_TOL)


def check_psot(gen: torch.Generator) -> GradCheckReport:
    student = _leaf((4, 3, 3), gen)
    teacher = _leaf((4, 3, 3), gen)
    cfg = TCAConfig(epsilon=0.1)
    potentials = psot_terms(student, teacher, cfg).potentials
    params = ParameterSet(OrderedDict(student=student, teacher=teacher))
    return grad_check(lambda: psot_loss(student, teacher, cfg, potentials), params, tol=PSOT_TOL)


def _module_check(module: torch.nn.Module, f: Callable[[], torch.Tensor]) -> GradCheckReport:
    params = ParameterSet.from_module(module)
    return grad_check(f, params, tol=DEFAULT_TOL)


def check_encoder(gen: torch.Generator) -> GradCheckReport:
    encoder = Encoder(TINY_ENCODER).to(DTYPE)
    z = torch.rand((2, 3, 8, 8), generator=gen, dtype=DTYPE)
    x = torch.rand((2, 3, 16, 16), generator=gen, dtype=DTYPE)
    weight = _projection((2, TINY_ENCODER.template_tokens + TINY_ENCODER.search_tokens, 8), gen)
    return _module_check(encoder, lambda: (encoder(z, x) * weight).sum())


def check_adapter(gen: torch.Generator) -> GradCheckReport:
    adapter = DomainAdapter(TINY_ENCODER).to(DTYPE)
    adapter.train()
    x = torch.rand((2, 3, 16, 16), generator=gen, dtype=DTYPE)
    weight = _projection((2, TINY_ENCODER.search_tokens, 8), gen)
    return _module_check(adapter, lambda: (adapter(x) * weight).sum())


def check_head(gen: torch.Generator) -> GradCheckReport:
    head = Head(8, TINY_HEAD).to(DTYPE)
    head.train()
    tokens = torch.randn((2, TINY_ENCODER.search_tokens, 8), generator=gen, dtype=DTYPE)
    ws = _projection((2, 4, 4), gen)
    wo = _projection((2, 2, 4, 4), gen)

    def f() -> torch.Tensor:
        resp = head(tokens)
        return (resp.scores * ws).sum() + (resp.offsets * wo).sum() + (resp.sizes * wo).sum()

    return _module_check(head, f)


def check_total(gen: torch.Generator) -> GradCheckReport:
    """
    Full hybrid objective over encoder, head and adapter parameters

    Source pairs are supervised by their boxes. Target pairs run through the
    adapter, are supervised by boxes decoded from a separate fixed teacher
    and aligned to its response by PSOT with the dual potentials held at
    their solved values.
    """
    tracker = Tracker(TINY_ENCODER, TINY_HEAD).to(DTYPE)
    adapter = tracker.add_adapter("fog")
    tracker.eval()
    teacher = Tracker(TINY_ENCODER, TINY_HEAD).to(DTYPE).eval()
    z = torch.rand((2, 3, 8, 8), generator=gen, dtype=DTYPE)
    x = torch.rand((2, 3, 16, 16), generator=gen, dtype=DTYPE)
    zt = torch.rand((2, 3, 8, 8), generator=gen, dtype=DTYPE)
    xt = torch.rand((2, 3, 16, 16), generator=gen, dtype=DTYPE)
    boxes = [BBox(cx=7.3, cy=8.9, w=5.0, h=6.5), BBox(cx=9.6, cy=5.2, w=4.2, h=3.7)]
    sup = make_supervision(boxes, TINY_ENCODER, TINY_HEAD)
    weights = LossWeights()
    cfg = TCAConfig(epsilon=0.1)

    with torch.no_grad():
        teacher_resp = teacher(zt, xt)
        student_resp = tracker(zt, xt, adapter)
    labels = [
        decode_box(teacher_resp, i, TINY_ENCODER.search_size) for i in range(len(teacher_resp))
    ]
    target_sup = make_supervision(labels, TINY_ENCODER, TINY_HEAD)
    mask = torch.ones(len(labels), dtype=DTYPE)
    potentials = psot_terms(student_resp, teacher_resp, cfg).potentials

    def f() -> torch.Tensor:
        src_terms = supervised_terms(tracker(z, x), sup)
        resp = tracker(zt, xt, adapter)
        tgt_terms = supervised_terms(resp, target_sup, mask)
        psot = psot_loss(resp, teacher_resp, cfg, potentials)
        return total_loss(src_terms, tgt_terms, psot, weights).total

    params = ParameterSet.from_module(tracker)
    return grad_check(f, params, tol=PSOT_TOL)


CHECKS: Dict[str, Callable[[torch.Generator], GradCheckReport]] = {
    "focal": check_focal,
    "l1": check_l1,
    "giou": check_giou,
    "psot": check_psot,
    "dca_attention": check_adapter,
    "encoder": check_encoder,
    "head": check_head,
    "total": check_total,
}


def gradient_suite(seed: int = 0) -> Dict[str, GradCheckReport]:
    """Run every check; reports are keyed by check name"""
    reports = {}
    for name, check in CHECKS.items():
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        reports[name] = check(gen)
        logger.debug("grad check %s: max error %.3e", name, reports[name].max_error)
    return reports
