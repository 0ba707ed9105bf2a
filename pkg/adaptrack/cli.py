"""
Command-line entry point: adaptrack <subcommand> [options]
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence as Seq

from .config import RunConfig, Settings, load_settings, parse_overrides
from .datagen import build_eval_suite, build_pools, generate_sequence, scene_variant, weather_params
from .errors import AdaptrackError
from .evaluation import (
    NetworkTracker,
    ablate,
    ablation_grid,
    auc_evaluator,
    evaluate_cases,
    export_metrics,
    pipeline_runner,
    write_ablation_csv,
    write_convergence,
)
from .gradients import gradient_suite
from .models import TARGET_DOMAINS, DomainTag, Frame, Sequence, WeatherKind
from .storage import MetricsLog, load_checkpoint, load_sequence, save_sequence
from .tca import benchmark_solver
from .trainer import Trainer, tracker_from_checkpoint, train_stage2_dca
from .utils import derive_seed, seed_everything
from .weather import apply_weather, ssim

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"


def _int_list(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("runs/default"))
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="config override"
    )
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--verbose", action="store_true")

    domains = [d.value for d in TARGET_DOMAINS]
    parser = argparse.ArgumentParser(prog="adaptrack", description="Multi-domain adaptive tracking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="corrupt a sequence directory")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--domain", choices=domains, required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write labelled source sequences")
    p.add_argument("--count", type=int, default=4)

    sub.add_parser("train-backbone", parents=[common], help="stage-1 training")

    p = sub.add_parser("train-dca", parents=[common], help="stage-2 adapter training")
    p.add_argument("--domain", choices=domains, required=True)
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("eval", parents=[common], help="one-pass evaluation")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--domain", choices=[DomainTag.SOURCE.value] + domains, action="append")

    p = sub.add_parser("ablate", parents=[common], help="ablation grid")
    p.add_argument("--grid", choices=["modules", "ema", "ratios"], default="modules")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--domain", choices=domains, default=DomainTag.FOG.value)

    p = sub.add_parser("ot-bench", parents=[common], help="Sinkhorn vs exact OT")
    p.add_argument("--sizes", type=_int_list, default=[2, 3, 4])
    p.add_argument("--epsilons", type=_float_list, default=[0.01])
    p.add_argument("--instances", type=int, default=10)

    sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    return parser


# ============== Commands ==============


def cmd_synth(args, settings: Settings) -> None:
    source = load_sequence(args.input)
    kind = WeatherKind(args.domain)
    params = weather_params(kind, settings.data, args.seed)
    frames: List[Frame] = []
    manifest = []
    for index, frame in enumerate(source.frames):
        frame_params = params.model_copy(update={"seed": derive_seed(args.seed, index)})
        out = apply_weather(frame, frame_params)
        frames.append(out)
        described = json.dumps(
            frame_params.model_dump(mode="json", exclude={"kind", "seed"}),
            separators=(",", ":"),
            sort_keys=True,
        )
        score = ssim(frame, out)
        manifest.append(f"{index} {kind.value} {described} {frame_params.seed} {score!r}")
    target = Sequence(
        name=f"{source.name}-{kind.value}",
        frames=frames,
        domain_tag=kind.domain,
        seed=args.seed,
    )
    save_sequence(target, args.out)
    (Path(args.out) / "manifest.txt").write_text("\n".join(manifest) + "\n")
    logger.info("Wrote %d %s frames to %s", len(frames), kind.value, args.out)


def cmd_gen_data(args, settings: Settings) -> None:
    for k in range(args.count):
        seed = derive_seed(args.seed, "gen", k)
        seq = generate_sequence(scene_variant(settings.scene, k), seed, name=f"seq-{k:03d}")
        save_sequence(seq, Path(args.out) / seq.name)
    logger.info("Wrote %d sequences to %s", args.count, args.out)


def cmd_train_backbone(args, settings: Settings) -> None:
    pools = build_pools(settings, args.seed)
    trainer = Trainer(settings, args.seed, MetricsLog(Path(args.out) / "metrics.log"))
    trainer.fit(pools)
    trainer.save(Path(args.out) / CHECKPOINT_NAME)


def cmd_train_dca(args, settings: Settings) -> None:
    checkpoint = args.checkpoint or Path(args.out) / CHECKPOINT_NAME
    pools = build_pools(settings, args.seed)
    cases = build_eval_suite(settings, args.seed, [DomainTag(args.domain)])
    result = train_stage2_dca(
        checkpoint,
        args.domain,
        settings,
        pools,
        args.seed,
        evaluator=auc_evaluator(cases, settings),
        metrics_log=MetricsLog(Path(args.out) / f"metrics-dca-{args.domain}.log"),
    )
    write_convergence(result.auc_curve, Path(args.out) / f"dca-{args.domain}" / "convergence.csv")


def cmd_eval(args, settings: Settings) -> None:
    checkpoint = args.checkpoint or Path(args.out) / CHECKPOINT_NAME
    tracker = tracker_from_checkpoint(load_checkpoint(checkpoint, settings), settings)
    if args.domain:
        cases = build_eval_suite(settings, args.seed, [DomainTag(d) for d in args.domain])
    else:
        cases = build_eval_suite(settings, args.seed)
    results = evaluate_cases(
        lambda d: NetworkTracker(tracker, settings, tracker.adapter_for(d.value)),
        cases,
        settings.eval,
    )
    summary = export_metrics(results, Path(args.out) / "eval", settings, [args.seed])
    print(f"AUC {summary.auc:.4f} precision {summary.precision:.4f} run {summary.run_id}")


def cmd_ablate(args, settings: Settings) -> None:
    workdir = Path(args.out) / f"ablate-{args.grid}"
    runner = pipeline_runner(settings, workdir, DomainTag(args.domain))
    rows = ablate(ablation_grid(args.grid), args.seeds, runner)
    path = write_ablation_csv(rows, Path(args.out) / f"ablation-{args.grid}.csv")
    for row in rows:
        print(f"{row.name}: median AUC {row.median_auc:.4f} spread {row.spread:.4f}")
    logger.info("Ablation table written to %s", path)


def cmd_ot_bench(args, settings: Settings) -> None:
    rows = benchmark_solver(args.sizes, args.epsilons, args.instances, args.seed)
    path = Path(args.out) / "ot_bench.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["N", "epsilon", "sinkhorn_cost", "lp_cost", "gap", "iters"]
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    worst = max(abs(r["gap"]) / max(r["lp_cost"], 1e-12) for r in rows)
    print(f"{len(rows)} instances, worst relative gap {worst:.4%}")


def cmd_grad_check(args, settings: Settings) -> None:
    reports = gradient_suite(args.seed)
    failed = []
    for name, report in reports.items():
        status = "ok" if report.passed else "FAIL"
        print(f"{name:14s} max rel err {report.max_error:.3e} (tol {report.tol:g}) {status}")
        if not report.passed:
            failed.append(name)
    if failed:
        raise AdaptrackError(f"gradient check failed: {', '.join(failed)}")


COMMANDS: Dict[str, Callable[[argparse.Namespace, Settings], None]] = {
    "synth": cmd_synth,
    "gen-data": cmd_gen_data,
    "train-backbone": cmd_train_backbone,
    "train-dca": cmd_train_dca,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "ot-bench": cmd_ot_bench,
    "grad-check": cmd_grad_check,
}


def main(argv: Optional[Seq[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run = RunConfig(out_dir=args.out, seed=args.seed, threads=args.threads)
        seed_everything(run.seed, run.threads, run.deterministic)
        settings = load_settings(args.config, parse_overrides(args.set))
        COMMANDS[args.command](args, settings)
    except (AdaptrackError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
