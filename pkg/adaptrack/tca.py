"""
Target-aware confidence alignment

Per-sample peak confidences of student and teacher become two discrete
distributions; a confidence + position cost couples them and a log-domain
Sinkhorn solve yields the dual potentials whose inner products with the
marginals form the PSOT loss.

Convention: C[i, j] pairs student sample i (marginal a, potential nu) with
teacher sample j (marginal b, potential mu). The entropic term is
KL(P || a b^T), so P_ij = a_i b_j exp((nu_i + mu_j - C_ij) / epsilon).
"""

import logging
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence as Seq, Tuple, Union

import numpy as np
import ot
import torch

from .config import TCAConfig
from .errors import DimensionError, SinkhornConvergenceWarning, ValidationError
from .network import ResponseMap
from .numerics import DTYPE, Tensor, check_finite

logger = logging.getLogger(__name__)

LP_ORACLE_MAX_N = 6


class ConfidenceSource(str, Enum):
    STUDENT = "student"
    TEACHER = "teacher"


@dataclass
class ConfidenceBatch:
    """d_i = exp(r_i at p_i) together with the cells p_i"""

    values: Tensor  # (N,) > 0
    scores: Tensor  # (N,) r_i at p_i
    cells: Tensor  # (N, 2) long, (row, col)
    source: ConfidenceSource

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class CostMatrix:
    conf: np.ndarray
    pos: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.conf + self.pos


@dataclass
class DualPotentials:
    mu: np.ndarray  # teacher / column side
    nu: np.ndarray  # student / row side
    epsilon: float
    iterations: int
    residual: float
    converged: bool


@dataclass
class TransportPlan:
    P: np.ndarray

    @property
    def mass(self) -> float:
        return float(self.P.sum())


def _score_grid(resp: Union[ResponseMap, Tensor]) -> Tensor:
    scores = resp.scores if isinstance(resp, ResponseMap) else resp
    if scores.dim() != 3:
        raise DimensionError(f"score maps must be (N, H, W), got {tuple(scores.shape)}")
    return check_finite(scores, "confidence scores")


def confidence_batch(
    resp: Union[ResponseMap, Tensor],
    anchor: Optional[Tensor] = None,
    source: ConfidenceSource = ConfidenceSource.STUDENT,
) -> ConfidenceBatch:
    """
    Peak confidences, at the map's own arg-max or at anchor cells

    Raises:
        ValidationError: anchor cells outside the grid
    """
    scores = _score_grid(resp)
    n, h, w = scores.shape
    if anchor is None:
        flat = torch.argmax(scores.detach().reshape(n, -1), dim=1)
        cells = torch.stack([flat // w, flat % w], dim=1)
    else:
        cells = torch.as_tensor(anchor, dtype=torch.long).reshape(-1, 2)
        if cells.shape[0] != n:
            raise DimensionError(f"{cells.shape[0]} anchor cells for {n} maps")
        if bool(((cells < 0) | (cells[:, 0] >= h)[:, None] | (cells[:, 1] >= w)[:, None]).any()):
            raise ValidationError(f"anchor cells outside the {h}x{w} grid")
    picked = scores[torch.arange(n), cells[:, 0], cells[:, 1]]
    return ConfidenceBatch(values=torch.exp(picked), scores=picked, cells=cells, source=source)


def _max_normalized(values: np.ndarray) -> np.ndarray:
    top = values.max()
    if top == 0:
        return np.zeros_like(values)
    return values / top


def cost_map(
    student: ConfidenceBatch, teacher: ConfidenceBatch, anchored: bool = False
) -> CostMatrix:
    """
    Confidence and position costs, each max-normalized to [0, 1]

    A single sample, or a component whose max is 0, gives an all-zero
    component. With ``anchored`` both batches sit on the teacher cells and
    the position component is identically 0.

    Raises:
        ValidationError: empty batches or unequal sizes
    """
    if len(student) == 0:
        raise ValidationError("cost_map needs at least one sample")
    if len(student) != len(teacher):
        raise ValidationError(f"batch sizes differ: {len(student)} vs {len(teacher)}")
    rs = student.scores.detach().numpy().astype(np.float64)
    rt = teacher.scores.detach().numpy().astype(np.float64)
    ps = student.cells.numpy().astype(np.float64)
    pt = teacher.cells.numpy().astype(np.float64)
    n = len(student)
    if n == 1:
        return CostMatrix(conf=np.zeros((1, 1)), pos=np.zeros((1, 1)))
    conf = np.abs(rs[:, None] - rt[None, :])
    if anchored:
        pos = np.zeros((n, n))
    else:
        pos = np.sqrt(((ps[:, None, :] - pt[None, :, :]) ** 2).sum(axis=-1))
    return CostMatrix(conf=_max_normalized(conf), pos=_max_normalized(pos))


# ============== Sinkhorn ==============


def _softmin(H: np.ndarray, log_weights: np.ndarray, epsilon: float, axis: int) -> np.ndarray:
    """-epsilon * log sum_k w_k exp(-H_k / epsilon) along axis, min-shifted"""
    shift = np.min(H, axis=axis, keepdims=True)
    weighted = np.exp(-(H - shift) / epsilon + log_weights)
    return (-epsilon * np.log(np.sum(weighted, axis=axis, keepdims=True)) + shift).squeeze(axis)


def _log_plan(C, log_a, log_b, nu, mu, epsilon) -> np.ndarray:
    return log_a[:, None] + log_b[None, :] + (nu[:, None] + mu[None, :] - C) / epsilon


def _check_marginal(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    if np.any(m <= 0) or not np.all(np.isfinite(m)):
        raise ValidationError(f"marginal {name} must be positive and finite")
    if abs(m.sum() - 1.0) > 1e-9:
        raise ValidationError(f"marginal {name} must sum to 1, got {m.sum():.12g}")
    return m


def _epsilon_schedule(C: np.ndarray, epsilon: float, scaling: bool) -> List[float]:
    if not scaling:
        return [epsilon]
    schedule = []
    eps = max(float(C.max()), epsilon)
    while eps > epsilon:
        schedule.append(eps)
        eps *= 0.5
    schedule.append(epsilon)
    return schedule


def sinkhorn(
    C: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    epsilon: float = 0.05,
    max_iter: int = 1000,
    tol: float = 1e-9,
    epsilon_scaling: bool = False,
    check_every: int = 10,
    warm_iters: int = 25,
) -> Tuple[TransportPlan, DualPotentials]:
    """
    Log-domain Sinkhorn with optional epsilon scaling

    Stops once the row-marginal L1 residual drops below tol (columns are
    exact after every sweep) or after max_iter sweeps at the target epsilon.
    A non-converged result is returned with ``converged=False``.

    Raises:
        ValidationError: epsilon <= 0 or invalid marginals
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    C = np.asarray(C, dtype=np.float64)
    a = _check_marginal(a, "a")
    b = _check_marginal(b, "b")
    if C.shape != (a.size, b.size):
        raise DimensionError(f"cost {C.shape} does not match marginals {(a.size, b.size)}")
    log_a, log_b = np.log(a), np.log(b)

    nu = np.zeros(a.size)
    mu = np.zeros(b.size)
    iterations = 0
    residual = math.inf
    schedule = _epsilon_schedule(C, epsilon, epsilon_scaling)
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        budget = max_iter if final else warm_iters
        for k in range(1, budget + 1):
            nu = _softmin(C - mu[None, :], log_b[None, :], eps, axis=1)
            mu = _softmin(C - nu[:, None], log_a[:, None], eps, axis=0)
            iterations += 1
            if final and (k % check_every == 0 or k == budget):
                P = np.exp(_log_plan(C, log_a, log_b, nu, mu, eps))
                residual = float(np.abs(P.sum(axis=1) - a).sum())
                if residual < tol:
                    break

    shift = mu.mean()
    mu = mu - shift
    nu = nu + shift
    P = np.exp(_log_plan(C, log_a, log_b, nu, mu, epsilon))
    converged = residual < tol
    if not converged:
        logger.debug("Sinkhorn stopped at residual %.3e after %d sweeps", residual, iterations)
    return TransportPlan(P), DualPotentials(mu, nu, epsilon, iterations, residual, converged)


def dual_objective(potentials: DualPotentials, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(potentials.mu, b) + np.dot(potentials.nu, a))


def entropic_primal(
    plan: TransportPlan, C: np.ndarray, a: np.ndarray, b: np.ndarray, epsilon: float
) -> float:
    """<P, C> + epsilon * KL(P || a b^T)"""
    P = plan.P
    ref = np.outer(a, b)
    positive = P > 0
    kl = float(np.sum(P[positive] * np.log(P[positive] / ref[positive])) - P.sum() + ref.sum())
    return float(np.sum(P * C)) + epsilon * kl


def duality_gap(
    plan: TransportPlan, potentials: DualPotentials, C: np.ndarray, a: np.ndarray, b: np.ndarray
) -> float:
    return entropic_primal(plan, C, a, b, potentials.epsilon) - dual_objective(potentials, a, b)


def lp_oracle(C: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Exact discrete OT by network simplex, for instances up to 6 atoms a side

    Raises:
        ValidationError: instance too large for the oracle
    """
    C = np.asarray(C, dtype=np.float64)
    if max(C.shape) > LP_ORACLE_MAX_N:
        raise ValidationError(f"lp_oracle handles N <= {LP_ORACLE_MAX_N}, got {C.shape}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    plan = ot.emd(a, b, C)
    return float(np.sum(plan * C)), plan


# ============== PSOT loss ==============


@dataclass
class PsotResult:
    loss: Tensor
    cost: CostMatrix
    plan: Optional[TransportPlan]
    potentials: DualPotentials
    student: ConfidenceBatch
    teacher: ConfidenceBatch


def psot_terms(
    student: Union[ResponseMap, Tensor],
    teacher: Union[ResponseMap, Tensor],
    cfg: Optional[TCAConfig] = None,
    potentials: Optional[DualPotentials] = None,
) -> PsotResult:
    """
    PSOT loss with its intermediate quantities

    Costs and potentials are constants for autograd; gradients reach both
    score maps through the normalized confidences. Passing ``potentials``
    skips the solve.
    """
    cfg = cfg or TCAConfig()
    teacher_cb = confidence_batch(teacher, source=ConfidenceSource.TEACHER)
    anchored = cfg.position_mode == "anchored"
    anchor = teacher_cb.cells if anchored else None
    student_cb = confidence_batch(student, anchor=anchor, source=ConfidenceSource.STUDENT)
    cost = cost_map(student_cb, teacher_cb, anchored=anchored)

    a = student_cb.values / student_cb.values.sum()
    b = teacher_cb.values / teacher_cb.values.sum()
    plan = None
    if potentials is None:
        plan, potentials = sinkhorn(
            cost.total,
            a.detach().numpy(),
            b.detach().numpy(),
            epsilon=cfg.epsilon,
            max_iter=cfg.max_iter,
            tol=cfg.tol,
            epsilon_scaling=cfg.epsilon_scaling,
            check_every=cfg.check_every,
        )
        if not potentials.converged:
            warnings.warn(
                f"Sinkhorn did not converge: residual {potentials.residual:.3e} "
                f"after {potentials.iterations} sweeps",
                SinkhornConvergenceWarning,
            )
    mu = torch.as_tensor(potentials.mu, dtype=DTYPE)
    nu = torch.as_tensor(potentials.nu, dtype=DTYPE)
    loss = check_finite(torch.dot(mu, b) + torch.dot(nu, a), "psot loss")
    return PsotResult(loss, cost, plan, potentials, student_cb, teacher_cb)


def psot_loss(
    student: Union[ResponseMap, Tensor],
    teacher: Union[ResponseMap, Tensor],
    cfg: Optional[TCAConfig] = None,
    potentials: Optional[DualPotentials] = None,
) -> Tensor:
    """L_p = <mu, b> + <nu, a>"""
    return psot_terms(student, teacher, cfg, potentials).loss


# ============== Benchmark ==============


def random_instance(
    n: int, rng: np.random.Generator, uniform: bool = True
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random cost in [0, 2) (the range of a summed cost map) with marginals"""
    C = rng.uniform(0.0, 2.0, (n, n))
    if uniform:
        a = np.full(n, 1.0 / n)
        b = np.full(n, 1.0 / n)
    else:
        a = rng.uniform(0.2, 1.0, n)
        b = rng.uniform(0.2, 1.0, n)
        a /= a.sum()
        b /= b.sum()
    return C, a, b


def benchmark_solver(
    sizes: Seq[int] = (2, 3, 4),
    epsilons: Seq[float] = (0.01,),
    instances: int = 10,
    seed: int = 0,
    max_iter: int = 20000,
) -> List[Dict[str, float]]:
    """
    Sinkhorn vs the exact oracle on random instances

    Returns:
        rows with N, epsilon, sinkhorn_cost, lp_cost, gap, iters, residual
    """
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        for eps in epsilons:
            for k in range(instances):
                C, a, b = random_instance(n, rng, uniform=k % 2 == 0)
                plan, pot = sinkhorn(C, a, b, eps, max_iter=max_iter, epsilon_scaling=True)
                lp_cost, _ = lp_oracle(C, a, b)
                cost = float(np.sum(plan.P * C))
                rows.append(
                    {
                        "N": n,
                        "epsilon": eps,
                        "sinkhorn_cost": cost,
                        "lp_cost": lp_cost,
                        "gap": cost - lp_cost,
                        "iters": pot.iterations,
                        "residual": pot.residual,
                    }
                )
    logger.info("Benchmarked %d instances", len(rows))
    return rows
