"""
Checked float64 tensor ops, named parameter sets and a finite-difference
gradient checker.

Tensors are plain ``torch.Tensor`` objects in float64; gradients come from
torch autograd. The helpers here add what the rest of the package relies on:
shape validation with our own errors, and a hard failure on any NaN/Inf.
"""

import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Set, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

Tensor = torch.Tensor


def as_tensor(data, requires_grad: bool = False) -> Tensor:
    """Convert array-like data to a float64 tensor"""
    t = torch.as_tensor(data, dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def check_finite(t: Tensor, where: str) -> Tensor:
    """Raise NumericalError if t holds NaN or Inf"""
    if not bool(torch.isfinite(t).all()):
        raise NumericalError(where)
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (batched when ndim > 2)"""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(
            f"matmul needs at least 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return check_finite(torch.matmul(a, b), "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along axis"""
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"axis {axis} invalid for shape {tuple(x.shape)}")
    return check_finite(torch.softmax(x, dim=axis), "softmax")


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    2-d cross-correlation

    Args:
        x: (N, C_in, H, W) or (C_in, H, W)
        kernel: (C_out, C_in, kH, kW)
        bias: optional (C_out,)

    Returns:
        (N, C_out, H_out, W_out) with H_out = floor((H + 2p - kH) / s) + 1
    """
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4 or kernel.dim() != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {tuple(x.shape)}, {tuple(kernel.shape)}"
        )
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape[1]}, kernel {kernel.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d needs stride >= 1 and padding >= 0")
    padded_h = x.shape[2] + 2 * padding
    padded_w = x.shape[3] + 2 * padding
    if kernel.shape[2] > padded_h or kernel.shape[3] > padded_w:
        raise DimensionError(
            f"kernel {tuple(kernel.shape[2:])} larger than padded input {(padded_h, padded_w)}"
        )
    out = F.conv2d(x, kernel, bias, stride=stride, padding=padding)
    check_finite(out, "conv2d")
    return out.squeeze(0) if unbatched else out


# ============== Parameter sets ==============


class ParameterSet:
    """
    Ordered name -> tensor view over a module's parameters

    Entries are the module's own tensors, so blending a ParameterSet changes
    the module. Float buffers (normalisation statistics) can be included; they
    are always frozen.
    """

    def __init__(
        self,
        entries: "OrderedDict[str, Tensor]",
        frozen: Optional[Iterable[str]] = None,
    ):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict(entries)
        self.freeze_mask: Set[str] = set()
        if frozen:
            self.freeze(frozen)

    @classmethod
    def from_module(
        cls, module: nn.Module, include_buffers: bool = True, prefix: str = ""
    ) -> "ParameterSet":
        entries: "OrderedDict[str, Tensor]" = OrderedDict()
        buffers: List[str] = []
        for name, p in module.named_parameters(prefix=prefix.rstrip(".")):
            entries[name] = p
        if include_buffers:
            for name, b in module.named_buffers(prefix=prefix.rstrip(".")):
                if b.is_floating_point():
                    entries[name] = b
                    buffers.append(name)
        pset = cls(entries)
        pset.freeze_mask.update(buffers)
        for name, p in entries.items():
            if name not in buffers and not p.requires_grad:
                pset.freeze_mask.add(name)
        return pset

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def items(self):
        return self.entries.items()

    def schema(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self.entries.items()}

    def freeze(self, names: Iterable[str]) -> None:
        for name in names:
            if name not in self.entries:
                raise ConfigurationError(f"Unknown parameter {name}")
            self.freeze_mask.add(name)
            t = self.entries[name]
            if t.is_leaf:
                t.requires_grad_(False)

    def freeze_where(self, predicate: Callable[[str], bool]) -> None:
        self.freeze([name for name in self.entries if predicate(name)])

    def trainable(self) -> List[Tensor]:
        return [t for n, t in self.entries.items() if n not in self.freeze_mask]

    def trainable_names(self) -> List[str]:
        return [n for n in self.entries if n not in self.freeze_mask]

    def check_compatible(self, other: "ParameterSet") -> None:
        """Raise ConfigurationError unless both sets share names and shapes"""
        if self.schema() != other.schema():
            mine, theirs = self.schema(), other.schema()
            diff = sorted(set(mine.items()) ^ set(theirs.items()))
            raise ConfigurationError(f"ParameterSet schemas differ: {diff[:4]}")

    @torch.no_grad()
    def blend_(self, other: "ParameterSet", alpha: float) -> None:
        """In place: self <- alpha * self + (1 - alpha) * other, every entry"""
        self.check_compatible(other)
        beta = 1.0 - alpha
        for name, t in self.entries.items():
            t.copy_(alpha * t + beta * other.entries[name])

    def snapshot(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((n, t.detach().clone()) for n, t in self.entries.items())

    @torch.no_grad()
    def load_(self, values: Dict[str, Tensor]) -> None:
        for name, t in self.entries.items():
            t.copy_(values[name])

    def digest(self, names: Optional[Iterable[str]] = None) -> str:
        """sha256 over the raw bytes of the selected entries"""
        h = hashlib.sha256()
        for name in names if names is not None else self.entries:
            t = self.entries[name].detach().contiguous()
            h.update(name.encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()


# ============== Gradient check ==============


@dataclass
class GradCheckReport:
    """Per-entry relative error between autograd and central differences"""

    errors: Dict[str, float] = field(default_factory=dict)
    analytic: Dict[str, Tensor] = field(default_factory=dict)
    numeric: Dict[str, Tensor] = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _evaluate(f: Callable[[], Tensor]) -> Tensor:
    value = f()
    if value.numel() != 1:
        raise DimensionError(f"grad_check needs a scalar function, got {tuple(value.shape)}")
    if not bool(torch.isfinite(value).all()):
        raise NumericalError("grad_check evaluation")
    return value.reshape(())


def grad_check(
    f: Callable[[], Tensor],
    params: ParameterSet,
    eps: float = 1e-6,
    tol: float = 1e-5,
    names: Optional[Iterable[str]] = None,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients of f with central differences

    f takes no arguments and reads the tensors in ``params``. Each entry's
    error is max|g_auto - g_fd| / max(max|g_auto|, max|g_fd|, 1e-12).
    Frozen entries report an exact zero gradient and are not perturbed.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    selected = list(names) if names is not None else list(params.entries)
    report = GradCheckReport(tol=tol)

    live = [n for n in selected if n not in params.freeze_mask]
    value = _evaluate(f)
    grads = torch.autograd.grad(
        value,
        [params[n] for n in live],
        allow_unused=True,
    )
    for name, g in zip(live, grads):
        report.analytic[name] = (
            torch.zeros_like(params[name]) if g is None else g.detach().clone()
        )

    for name in selected:
        if name in params.freeze_mask:
            report.analytic[name] = torch.zeros_like(params[name])
            report.numeric[name] = torch.zeros_like(params[name])
            report.errors[name] = 0.0
            continue
        t = params[name]
        numeric = torch.zeros_like(t)
        flat = t.data.view(-1)
        nflat = numeric.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            with torch.no_grad():
                plus = _evaluate(f).item()
            flat[k] = orig - eps
            with torch.no_grad():
                minus = _evaluate(f).item()
            flat[k] = orig
            nflat[k] = (plus - minus) / (2.0 * eps)
        analytic = report.analytic[name]
        scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
        report.numeric[name] = numeric
        report.errors[name] = (analytic - numeric).abs().max().item() / scale

    logger.debug("grad_check max error %.3e over %d entries", report.max_error, len(selected))
    return report
