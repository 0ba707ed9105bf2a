"""
One-pass evaluation, metric export and the ablation harness
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence as Seq

import numpy as np
import torch

from .config import EmaFrequency, EvalConfig, Settings
from .datagen import EvalCase, build_eval_suite, build_pools, crop_search, crop_template
from .errors import ConfigurationError, ValidationError
from .models import BBox, DomainTag, EvalResult, Frame, RunSummary, Sequence
from .network import DomainAdapter, Tracker, decode_box
from .numerics import DTYPE
from .storage import MetricsLog, load_checkpoint
from .trainer import Evaluator, Trainer, tracker_from_checkpoint, train_stage2_dca
from .utils import center_errors, iou_xywh, median_and_spread, seed_everything, short_hash

logger = logging.getLogger(__name__)

MIN_BOX_SIZE = 2.0


class SingleObjectTracker(Protocol):
    """init on the first frame, then update once per following frame"""

    def init(self, frame: Frame, box: BBox) -> None:
        ...

    def update(self, frame: Frame) -> BBox:
        ...


def _as_tensor(crop: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(crop, dtype=DTYPE).permute(2, 0, 1).unsqueeze(0).contiguous()


def _clamp_box(box: BBox, frame: Frame) -> BBox:
    w = min(max(box.w, MIN_BOX_SIZE), float(frame.width))
    h = min(max(box.h, MIN_BOX_SIZE), float(frame.height))
    return BBox(
        cx=min(max(box.cx, 0.0), float(frame.width)),
        cy=min(max(box.cy, 0.0), float(frame.height)),
        w=w,
        h=h,
    )


class NetworkTracker:
    """Runs a Tracker on search crops centred on the previous prediction"""

    def __init__(
        self, tracker: Tracker, settings: Settings, adapter: Optional[DomainAdapter] = None
    ):
        self.tracker = tracker
        self.settings = settings
        self.adapter = adapter
        self.template: Optional[torch.Tensor] = None
        self.box: Optional[BBox] = None

    def init(self, frame: Frame, box: BBox) -> None:
        crop, _ = crop_template(frame, box, self.settings.data)
        self.template = _as_tensor(crop)
        self.box = box

    @torch.no_grad()
    def update(self, frame: Frame) -> BBox:
        if self.template is None or self.box is None:
            raise ConfigurationError("update called before init")
        crop, transform = crop_search(frame, self.box, self.settings.data)
        self.tracker.eval()
        resp = self.tracker(self.template, _as_tensor(crop), self.adapter)
        box = transform.to_frame(decode_box(resp, 0, self.settings.encoder.search_size))
        self.box = _clamp_box(box, frame)
        return self.box


# ============== Metrics ==============


def iou_thresholds(cfg: Optional[EvalConfig] = None) -> np.ndarray:
    cfg = cfg or EvalConfig()
    return np.linspace(0.0, 1.0, int(round(1.0 / cfg.iou_step)) + 1)


def success_curve(ious: Seq[float], cfg: Optional[EvalConfig] = None) -> List[float]:
    """Fraction of frames with IoU > t, and IoU >= 1 at the top threshold"""
    ious = np.asarray(ious, dtype=np.float64)
    curve = []
    for t in iou_thresholds(cfg):
        hits = ious >= 1.0 if t >= 1.0 else ious > t
        curve.append(float(np.mean(hits)))
    return curve


def precision_curve(errors: Seq[float], cfg: Optional[EvalConfig] = None) -> List[float]:
    """Fraction of frames with center error <= t px, t = 0 .. precision_max"""
    cfg = cfg or EvalConfig()
    errors = np.asarray(errors, dtype=np.float64)
    return [float(np.mean(errors <= t)) for t in range(cfg.precision_max + 1)]


def score_boxes(
    name: str,
    domain: DomainTag,
    predictions: Seq[BBox],
    ground_truth: Seq[BBox],
    cfg: Optional[EvalConfig] = None,
) -> EvalResult:
    cfg = cfg or EvalConfig()
    if len(predictions) != len(ground_truth) or not predictions:
        raise ValidationError("need one prediction per ground-truth box")
    ious = iou_xywh(
        np.array([b.to_xywh() for b in predictions]), np.array([b.to_xywh() for b in ground_truth])
    )
    errors = center_errors(
        np.array([(b.cx, b.cy) for b in predictions]),
        np.array([(b.cx, b.cy) for b in ground_truth]),
    )
    curve = success_curve(ious, cfg)
    return EvalResult(
        name=name,
        domain=domain,
        ious=ious.tolist(),
        center_errors=errors.tolist(),
        success_curve=curve,
        auc=float(np.mean(curve)),
        precision=float(np.mean(errors <= cfg.precision_threshold)),
        precision_curve=precision_curve(errors, cfg),
        ao=float(np.mean(ious)),
        sr50=float(np.mean(ious > 0.5)),
        sr75=float(np.mean(ious > 0.75)),
    )


def run_ope(
    tracker: SingleObjectTracker,
    sequence: Sequence,
    ground_truth: Seq[BBox],
    cfg: Optional[EvalConfig] = None,
) -> EvalResult:
    """
    One-pass evaluation: init on frame 1 ground truth, track the rest

    Frame 1 is not scored; later ground truth is only used for scoring.
    """
    if len(ground_truth) != len(sequence) or len(sequence) < 2:
        raise ValidationError("sequence needs at least two frames and one box per frame")
    tracker.init(sequence.frames[0], ground_truth[0])
    predictions = [tracker.update(frame) for frame in sequence.frames[1:]]
    return score_boxes(sequence.name, sequence.domain_tag, predictions, ground_truth[1:], cfg)


def evaluate_cases(
    make_tracker: Callable[[DomainTag], SingleObjectTracker],
    cases: Seq[EvalCase],
    cfg: Optional[EvalConfig] = None,
) -> List[EvalResult]:
    results = []
    for case in cases:
        result = run_ope(make_tracker(case.domain), case.sequence, case.ground_truth, cfg)
        logger.debug("%s/%s: AUC %.4f", case.domain.value, case.name, result.auc)
        results.append(result)
    return results


def auc_evaluator(cases: Seq[EvalCase], settings: Settings) -> Evaluator:
    """Mean AUC over cases for a tracker plus optional adapter"""

    def evaluate(tracker: Tracker, adapter: Optional[DomainAdapter]) -> float:
        results = evaluate_cases(
            lambda _: NetworkTracker(tracker, settings, adapter), cases, settings.eval
        )
        return float(np.mean([r.auc for r in results]))

    return evaluate


# ============== Export ==============


def _write_csv(path: Path, header: Seq[str], rows: Seq[Seq[Any]]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def write_convergence(curve: Seq[float], path) -> Path:
    """epoch,auc rows; epoch 0 is the tracker before adapter training"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [(epoch, repr(float(auc))) for epoch, auc in enumerate(curve)]
    _write_csv(path, ["epoch", "auc"], rows)
    return path


def export_metrics(
    results: Seq[EvalResult],
    out_dir,
    settings: Settings,
    seeds: Seq[int],
    convergence: Optional[Seq[float]] = None,
) -> RunSummary:
    """
    Write success.csv, precision.csv, optional convergence.csv and
    summary.json; the summary AUC is the mean of the success column

    Raises:
        ValidationError: no results
        OSError: out_dir cannot be written
    """
    if not results:
        raise ValidationError("export_metrics needs at least one result")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = settings.eval

    success = np.mean([r.success_curve for r in results], axis=0)
    precision = np.mean([r.precision_curve for r in results], axis=0)
    _write_csv(
        out_dir / "success.csv",
        ["threshold", "success"],
        [(repr(float(t)), repr(float(s))) for t, s in zip(iou_thresholds(cfg), success)],
    )
    _write_csv(
        out_dir / "precision.csv",
        ["threshold_px", "precision"],
        [(t, repr(float(p))) for t, p in enumerate(precision)],
    )
    if convergence:
        write_convergence(convergence, out_dir / "convergence.csv")

    per_domain: Dict[str, List[float]] = {}
    for r in results:
        per_domain.setdefault(r.domain.value, []).append(r.auc)
    auc = float(np.mean(success))
    fingerprint = settings.fingerprint()
    summary = RunSummary(
        run_id=short_hash(fingerprint, list(seeds), auc),
        fingerprint=fingerprint,
        seeds=list(seeds),
        auc=auc,
        precision=float(np.mean([r.precision for r in results])),
        ao=float(np.mean([r.ao for r in results])),
        sr50=float(np.mean([r.sr50 for r in results])),
        sr75=float(np.mean([r.sr75 for r in results])),
        per_domain_auc={k: float(np.mean(v)) for k, v in sorted(per_domain.items())},
        sequences=len(results),
    )
    (out_dir / "summary.json").write_text(summary.model_dump_json(indent=2))
    logger.info("Metrics for %d sequences written to %s", len(results), out_dir)
    return summary


def load_summary(path) -> RunSummary:
    return RunSummary.model_validate_json(Path(path).read_text())


# ============== Ablation ==============


@dataclass
class AblationCell:
    name: str
    overrides: Dict[str, Any] = field(default_factory=dict)
    stage2: bool = False


_SOURCE_ONLY = {
    "data.target_ratio": 0.0,
    "train.use_target_data": False,
    "train.loss.lambda": 0.0,
}


def ablation_grid(name: str) -> List[AblationCell]:
    """
    Named grids: modules, ema, ratios

    The modules grid is cumulative: generated target data, then alignment
    or the per-domain adapter on top of it, then everything together.

    Raises:
        ConfigurationError: unknown grid name
    """
    if name == "modules":
        return [
            AblationCell("baseline", dict(_SOURCE_ONLY)),
            AblationCell("plus_csg", {"train.loss.lambda": 0.0}),
            AblationCell("plus_tca", {}),
            AblationCell("plus_dca", {"train.loss.lambda": 0.0}, stage2=True),
            AblationCell("full", {}, stage2=True),
        ]
    if name == "ema":
        return [
            AblationCell("ema_per_batch", {"train.ema_frequency": EmaFrequency.PER_BATCH.value}),
            AblationCell("ema_per_epoch", {"train.ema_frequency": EmaFrequency.PER_EPOCH.value}),
            AblationCell(
                "ema_every_3",
                {"train.ema_frequency": EmaFrequency.EVERY_K_EPOCHS.value, "train.ema_every_k": 3},
            ),
            AblationCell(
                "ema_every_5",
                {"train.ema_frequency": EmaFrequency.EVERY_K_EPOCHS.value, "train.ema_every_k": 5},
            ),
        ]
    if name == "ratios":
        return [AblationCell(f"ratio_{k}", {"data.target_ratio": float(k)}) for k in (1, 2, 4, 6)]
    raise ConfigurationError(f"Unknown ablation grid '{name}'")


@dataclass
class AblationRow:
    name: str
    aucs: List[float]
    median_auc: float
    spread: float
    delta_vs_baseline: Optional[float] = None

    def csv_row(self) -> List[str]:
        delta = "" if self.delta_vs_baseline is None else repr(self.delta_vs_baseline)
        return [
            self.name,
            str(len(self.aucs)),
            repr(self.median_auc),
            repr(self.spread),
            delta,
        ]


ABLATION_HEADER = ["name", "seeds", "median_auc", "spread", "delta_vs_baseline"]


def ablate(
    cells: Seq[AblationCell],
    seeds: Seq[int],
    runner: Callable[[AblationCell, int], float],
    baseline: str = "baseline",
) -> List[AblationRow]:
    """
    Run every cell for every seed; rows come back sorted by cell name

    delta_vs_baseline is the median AUC minus the baseline cell's median
    when a cell with that name exists.
    """
    if not seeds:
        raise ConfigurationError("ablate needs at least one seed")
    rows = []
    for cell in sorted(cells, key=lambda c: c.name):
        aucs = [float(runner(cell, seed)) for seed in seeds]
        median, spread = median_and_spread(aucs)
        rows.append(AblationRow(cell.name, aucs, median, spread))
        logger.info("Ablation %s: median AUC %.4f (spread %.4f)", cell.name, median, spread)
    base = next((r for r in rows if r.name == baseline), None)
    if base is not None:
        for row in rows:
            row.delta_vs_baseline = row.median_auc - base.median_auc
    return rows


def write_ablation_csv(rows: Seq[AblationRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(path, ABLATION_HEADER, [r.csv_row() for r in rows])
    return path


def pipeline_runner(
    base: Settings, out_dir, domain: DomainTag = DomainTag.FOG
) -> Callable[[AblationCell, int], float]:
    """Train (stage 1, optionally stage 2) and return the mean target AUC"""
    out_dir = Path(out_dir)

    def run(cell: AblationCell, seed: int) -> float:
        settings = base.with_overrides(cell.overrides)
        run_dir = out_dir / cell.name / f"seed{seed}"
        seed_everything(seed)
        pools = build_pools(settings, seed)
        trainer = Trainer(settings, seed, MetricsLog(run_dir / "metrics.log"))
        trainer.fit(pools)
        checkpoint_path = trainer.save(run_dir / "checkpoint.pt")
        if cell.stage2:
            train_stage2_dca(checkpoint_path, domain.value, settings, pools, seed)
        tracker = tracker_from_checkpoint(load_checkpoint(checkpoint_path, settings), settings)
        cases = build_eval_suite(settings, seed, [domain])
        results = evaluate_cases(
            lambda d: NetworkTracker(tracker, settings, tracker.adapter_for(d.value)),
            cases,
            settings.eval,
        )
        return float(np.mean([r.auc for r in results]))

    return run
