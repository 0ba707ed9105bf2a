"""
Two-stage teacher-student training

Stage 1 trains the whole tracker on labelled source pairs plus
pseudo-labelled target pairs and the PSOT alignment term, with the teacher
following the student by EMA. Stage 2 freezes that tracker and trains one
domain adapter per target domain with the same loss composition.
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence as Seq, Tuple

import torch
from torch import nn

from .config import EmaFrequency, Settings
from .datagen import BatchSampler, stack_crops
from .errors import ConfigurationError
from .losses import (
    LossReport,
    SupervisedTerms,
    make_supervision,
    supervised_terms,
    total_loss,
)
from .models import DomainTag, PseudoLabel, SamplePair
from .network import DomainAdapter, ResponseMap, Tracker, build_tracker, decode_box
from .numerics import DTYPE, ParameterSet, Tensor
from .storage import (
    BACKBONE_GROUP,
    TEACHER_GROUP,
    Checkpoint,
    MetricsLog,
    load_checkpoint,
    new_checkpoint,
    save_checkpoint,
)
from .tca import psot_loss
from .utils import derive_seed

logger = logging.getLogger(__name__)

Forward = Callable[[Tensor, Tensor], ResponseMap]
Evaluator = Callable[[Tracker, Optional[DomainAdapter]], float]


def ema_update(teacher: ParameterSet, student: ParameterSet, alpha: float) -> ParameterSet:
    """
    teacher <- alpha * teacher + (1 - alpha) * student, entry by entry

    Raises:
        ConfigurationError: alpha outside [0, 1] or schemas differ
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"EMA alpha must lie in [0, 1], got {alpha}")
    teacher.blend_(student, alpha)
    return teacher


def pseudo_labels_from_response(
    resp: ResponseMap, tau: float, search_size: int
) -> List[PseudoLabel]:
    labels = []
    for i in range(len(resp)):
        confidence = float(resp.scores[i].max().item())
        labels.append(
            PseudoLabel(
                box=decode_box(resp, i, search_size),
                confidence=confidence,
                accepted=confidence >= tau,
            )
        )
    return labels


@torch.no_grad()
def make_pseudo_labels(
    teacher: Tracker,
    templates: Tensor,
    searches: Tensor,
    tau: float,
    adapter: Optional[DomainAdapter] = None,
) -> List[PseudoLabel]:
    """Teacher-decoded boxes; accepted iff the peak score reaches tau"""
    teacher.eval()
    resp = teacher(templates, searches, adapter)
    return pseudo_labels_from_response(resp, tau, teacher.encoder_cfg.search_size)


# ============== Shared step ==============


def _grad_norm(tensors: Seq[Tensor]) -> float:
    total = 0.0
    for g in tensors:
        if g is not None:
            total += float(g.detach().pow(2).sum().item())
    return total**0.5


def hybrid_losses(
    student: Forward,
    teacher: Forward,
    src: Seq[SamplePair],
    tgt: Seq[SamplePair],
    settings: Settings,
    use_target: bool = True,
) -> LossReport:
    """Source supervision, pseudo-label supervision and PSOT for one batch"""
    train = settings.train
    zero = torch.zeros((), dtype=DTYPE)

    src_terms = SupervisedTerms.zeros()
    if src:
        templates, searches = stack_crops(src)
        sup = make_supervision([p.label_box for p in src], settings.encoder, settings.head)
        src_terms = supervised_terms(student(templates, searches), sup)

    tgt_terms = None
    psot = zero
    if tgt and use_target:
        templates, searches = stack_crops(tgt)
        with torch.no_grad():
            teacher_resp = teacher(templates, searches)
        labels = pseudo_labels_from_response(teacher_resp, train.tau, settings.encoder.search_size)
        student_resp = student(templates, searches)
        mask = torch.tensor([float(label.accepted) for label in labels], dtype=DTYPE)
        if mask.sum().item() > 0:
            sup = make_supervision([label.box for label in labels], settings.encoder, settings.head)
            tgt_terms = supervised_terms(student_resp, sup, mask)
        else:
            logger.warning("All %d pseudo labels rejected at tau=%.2f", len(labels), train.tau)
        if train.loss.lambda_ > 0:
            psot = psot_loss(student_resp, teacher_resp, settings.tca)

    return total_loss(src_terms, tgt_terms, psot, train.loss, train.pseudo_label_weight)


def optimize(
    report: LossReport,
    optimizer: torch.optim.Optimizer,
    trainable: Seq[Tensor],
    weights=None,
    diagnose: bool = False,
) -> LossReport:
    """Backward pass and one optimizer step; fills in gradient norms"""
    if not report.total.requires_grad:
        # no labelled sample, every pseudo label rejected and PSOT switched off
        logger.warning("Loss carries no gradient, skipping the optimizer step")
        report.grad_norm = 0.0
        return report
    if diagnose and weights is not None:
        scaled = {
            "cls": weights.w_cls * report.cls,
            "l1": weights.beta * report.l1,
            "giou": weights.gamma_w * report.giou,
            "psot": weights.lambda_ * report.psot,
        }
        for name, term in scaled.items():
            if not term.requires_grad:
                report.term_grad_norms[name] = 0.0
                continue
            grads = torch.autograd.grad(term, trainable, retain_graph=True, allow_unused=True)
            report.term_grad_norms[name] = _grad_norm(grads)
    optimizer.zero_grad()
    report.total.backward()
    report.grad_norm = _grad_norm([t.grad for t in trainable])
    optimizer.step()
    return report


# ============== Stage 1 ==============


class Trainer:
    """
    Stage-1 student/teacher loop

    The teacher starts as a copy of the student when stage 1 begins and
    afterwards only changes through ema_update. An optional
    ``warmup_epochs`` of source-only training delays that copy.
    """

    def __init__(
        self,
        settings: Settings,
        seed: int = 0,
        metrics_log: Optional[MetricsLog] = None,
    ):
        self.settings = settings
        self.seed = seed
        self.metrics_log = metrics_log
        train = settings.train

        self.student = build_tracker(settings, derive_seed(seed, "init"))
        self.teacher = copy.deepcopy(self.student)
        self.teacher.eval()
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.student_params = ParameterSet.from_module(self.student)
        self.teacher_params = ParameterSet.from_module(self.teacher)

        self.optimizer = torch.optim.AdamW(
            self.student.parameters(), lr=train.lr, weight_decay=train.weight_decay
        )
        self.scheduler = (
            torch.optim.lr_scheduler.StepLR(
                self.optimizer, step_size=train.lr_drop_epoch, gamma=0.1
            )
            if train.lr_drop_epoch
            else None
        )
        self.warmup_epochs = min(train.warmup_epochs, train.epochs_stage1 - 1)
        self.step = 0
        self.epoch = 0
        self.ema_updates = 0
        self.initial_teacher: Optional[Dict[str, Tensor]] = None
        self.student_snapshots: List[Dict[str, Tensor]] = []
        if self.warmup_epochs == 0:
            self._init_teacher()

    @property
    def adapting(self) -> bool:
        return self.epoch >= self.warmup_epochs

    def _init_teacher(self) -> None:
        self.teacher_params.load_(self.student_params.snapshot())
        if self.settings.train.record_ema_snapshots:
            self.initial_teacher = self.teacher_params.snapshot()
            self.student_snapshots = []
        logger.info("Teacher initialised from the student at epoch %d", self.epoch)

    def _student_forward(self, templates: Tensor, searches: Tensor) -> ResponseMap:
        return self.student(templates, searches)

    def _teacher_forward(self, templates: Tensor, searches: Tensor) -> ResponseMap:
        self.teacher.eval()
        return self.teacher(templates, searches)

    def apply_ema(self) -> None:
        if self.settings.train.record_ema_snapshots:
            self.student_snapshots.append(self.student_params.snapshot())
        ema_update(self.teacher_params, self.student_params, self.settings.train.alpha)
        self.ema_updates += 1
        logger.debug("EMA update %d at step %d", self.ema_updates, self.step)

    def train_step_stage1(self, src: Seq[SamplePair], tgt: Seq[SamplePair]) -> LossReport:
        """One optimizer step on the student"""
        train = self.settings.train
        self.student.train()
        report = hybrid_losses(
            self._student_forward,
            self._teacher_forward,
            src,
            tgt,
            self.settings,
            use_target=train.use_target_data and self.adapting,
        )
        optimize(
            report,
            self.optimizer,
            self.student_params.trainable(),
            train.loss,
            train.diagnose_grad_norms,
        )
        self.step += 1
        if self.adapting and train.ema_frequency == EmaFrequency.PER_BATCH:
            self.apply_ema()
        if self.metrics_log is not None:
            self.metrics_log.append(report.line(self.step))
        return report

    def end_epoch(self) -> None:
        train = self.settings.train
        if self.adapting:
            done = self.epoch - self.warmup_epochs + 1
            if train.ema_frequency == EmaFrequency.PER_EPOCH or (
                train.ema_frequency == EmaFrequency.EVERY_K_EPOCHS and done % train.ema_every_k == 0
            ):
                self.apply_ema()
        self.epoch += 1
        if self.scheduler is not None:
            self.scheduler.step()
        if self.epoch == self.warmup_epochs:
            self._init_teacher()

    def _samplers(self, pools: Mapping[str, Seq[SamplePair]]) -> Tuple[BatchSampler, BatchSampler]:
        data = self.settings.data
        ratios = data.ratios()
        source_only = {name: w for name, w in ratios.items() if name.startswith("source_")}
        batch = self.settings.train.batch_size
        return (
            BatchSampler(pools, source_only, batch, derive_seed(self.seed, "warmup")),
            BatchSampler(pools, ratios, batch, derive_seed(self.seed, "sampler")),
        )

    def fit(
        self, pools: Mapping[str, Seq[SamplePair]], epochs: Optional[int] = None
    ) -> List[float]:
        """
        Run stage 1; returns the mean total loss per epoch
        """
        train = self.settings.train
        warmup_sampler, sampler = self._samplers(pools)
        history = []
        for _ in range(epochs or train.epochs_stage1):
            active = sampler if self.adapting else warmup_sampler
            totals = []
            for _ in range(train.steps_per_epoch):
                src, tgt = active.draw()
                totals.append(self.train_step_stage1(src, tgt).total.item())
            history.append(sum(totals) / len(totals))
            logger.info("Epoch %d: mean loss %.5f", self.epoch + 1, history[-1])
            self.end_epoch()
        return history

    def checkpoint(self) -> Checkpoint:
        ckpt = new_checkpoint(self.settings)
        ckpt.groups[BACKBONE_GROUP] = backbone_state(self.student)
        ckpt.groups[TEACHER_GROUP] = backbone_state(self.teacher)
        return ckpt

    def save(self, path) -> Path:
        return save_checkpoint(path, self.checkpoint())


def backbone_state(tracker: Tracker) -> Dict[str, Tensor]:
    return {k: v for k, v in tracker.state_dict().items() if not k.startswith("adapters.")}


def tracker_from_checkpoint(ckpt: Checkpoint, settings: Settings) -> Tracker:
    """Rebuild the tracker with every stored adapter attached"""
    tracker = build_tracker(settings)
    state = dict(ckpt.groups[BACKBONE_GROUP])
    for domain in ckpt.adapter_domains():
        tracker.add_adapter(domain)
        for k, v in ckpt.groups[f"adapter/{domain}"].items():
            state[f"adapters.{domain}.{k}"] = v
    tracker.load_state_dict(state)
    tracker.eval()
    return tracker


# ============== Stage 2 ==============


@dataclass
class Stage2Result:
    domain: str
    adapter: DomainAdapter
    auc_curve: List[float] = field(default_factory=list)
    reports: List[LossReport] = field(default_factory=list)


def _freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def train_stage2_dca(
    checkpoint_path,
    domain: str,
    settings: Settings,
    pools: Mapping[str, Seq[SamplePair]],
    seed: int = 0,
    evaluator: Optional[Evaluator] = None,
    metrics_log: Optional[MetricsLog] = None,
    save: bool = True,
) -> Stage2Result:
    """
    Train the adapter for one target domain against the frozen tracker

    The stored backbone and head stay untouched; the adapter is written back
    into the checkpoint as group ``adapter/<domain>``. With an evaluator the
    result carries the target AUC before training and after every epoch.

    Raises:
        ConfigurationError: checkpoint missing, unknown domain, or a zero
            mixing weight for the domain
    """
    if domain not in {d.value for d in DomainTag if d != DomainTag.SOURCE}:
        raise ConfigurationError(f"Unknown target domain '{domain}'")
    if settings.data.ratios()[domain] <= 0:
        raise ConfigurationError(f"Adapter for '{domain}' needs a positive data.target_ratio")
    ckpt = load_checkpoint(checkpoint_path, settings)
    train = settings.train

    tracker = tracker_from_checkpoint(ckpt, settings)
    _freeze(tracker)
    torch.manual_seed(derive_seed(seed, "adapter", domain))
    student_adapter = tracker.add_adapter(domain)
    teacher_adapter = copy.deepcopy(student_adapter)
    _freeze(teacher_adapter)
    teacher_adapter.eval()
    student_params = ParameterSet.from_module(student_adapter)
    teacher_params = ParameterSet.from_module(teacher_adapter)

    optimizer = torch.optim.AdamW(
        student_adapter.parameters(), lr=train.lr, weight_decay=train.weight_decay
    )
    ratios = {
        name: w
        for name, w in settings.data.ratios().items()
        if name.startswith("source_") or name == domain
    }
    sampler = BatchSampler(pools, ratios, train.batch_size, derive_seed(seed, "stage2", domain))

    def student_forward(templates: Tensor, searches: Tensor) -> ResponseMap:
        return tracker(templates, searches, student_adapter)

    def teacher_forward(templates: Tensor, searches: Tensor) -> ResponseMap:
        return tracker(templates, searches, teacher_adapter)

    result = Stage2Result(domain=domain, adapter=student_adapter)
    if evaluator is not None:
        result.auc_curve.append(evaluator(tracker, None))
    step = 0
    for epoch in range(train.epochs_stage2):
        for _ in range(train.steps_per_epoch):
            tracker.eval()
            student_adapter.train()
            src, tgt = sampler.draw()
            report = hybrid_losses(student_forward, teacher_forward, src, tgt, settings)
            optimize(
                report, optimizer, student_params.trainable(), train.loss, train.diagnose_grad_norms
            )
            step += 1
            result.reports.append(report)
            if metrics_log is not None:
                metrics_log.append(report.line(step))
            if train.ema_frequency == EmaFrequency.PER_BATCH:
                ema_update(teacher_params, student_params, train.alpha)
        every_k = (
            train.ema_frequency == EmaFrequency.EVERY_K_EPOCHS
            and (epoch + 1) % train.ema_every_k == 0
        )
        if train.ema_frequency == EmaFrequency.PER_EPOCH or every_k:
            ema_update(teacher_params, student_params, train.alpha)
        student_adapter.eval()
        if evaluator is not None:
            result.auc_curve.append(evaluator(tracker, student_adapter))
            logger.info("Adapter %s epoch %d: AUC %.4f", domain, epoch + 1, result.auc_curve[-1])

    tracker.eval()
    if save:
        ckpt.groups[f"adapter/{domain}"] = {
            k: v.detach().clone() for k, v in student_adapter.state_dict().items()
        }
        save_checkpoint(checkpoint_path, ckpt)
    logger.info("Adapter stage for %s finished after %d steps", domain, step)
    return result
