"""Command-line entry points: forge, detect, mitigate, bench.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
Every JSON artifact records the seed it was produced from.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench, io
from .attack import PATCH, PERTURBATION, attack_success_rate, embed_batch
from .detector import (
    DetectionReport,
    DetectorConfig,
    MitigationConfig,
    detect,
    detect_combined,
    detect_multi,
    mitigate,
)
from .errors import InputError
from .nn import accuracy, predict
from .reverse import INTERMEDIATE, REConfig

USAGE_ERROR = 1
VALIDATION_ERROR = 2
RUNTIME_ERROR = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pairscan",
                     description="Plant, detect, and unlearn class-pair backdoors "
                                 "in small dense classifiers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    forge = sub.add_parser("forge", help="train a victim (or benign) classifier")
    forge.add_argument("--out-dir", required=True)
    forge.add_argument("--setting", default="benign",
                       help="benign, a2o, o2o, a2ar, or NtoN (e.g. 2to2)")
    forge.add_argument("--trigger", choices=[PERTURBATION, PATCH], default=PERTURBATION)
    forge.add_argument("--classes", type=int, default=5)
    forge.add_argument("--dim", type=int, default=64)
    forge.add_argument("--per-class", type=int, default=260)
    forge.add_argument("--train-per-class", type=int, default=200)
    forge.add_argument("--defender-per-class", type=int, default=30)
    forge.add_argument("--separation", type=float, default=7.0)
    forge.add_argument("--poison-per-source", type=int, default=300)
    forge.add_argument("--epochs", type=int, default=40)
    forge.add_argument("--train-lr", type=float, default=1e-3)
    forge.add_argument("--batch-size", type=int, default=32)
    forge.add_argument("--seed", type=int, default=0)

    det = sub.add_parser("detect", help="scan a trained model for backdoor class pairs")
    det.add_argument("--model", required=True)
    det.add_argument("--data", required=True, help="clean defender dataset file")
    det.add_argument("--out", required=True, help="report file to write")
    det.add_argument("--mode", default=PERTURBATION,
                     choices=[PERTURBATION, PATCH, INTERMEDIATE, "combined"])
    det.add_argument("--beta", type=float, default=0.05)
    det.add_argument("--pi", type=float, default=0.9)
    det.add_argument("--re-lr", type=float, default=0.005)
    det.add_argument("--max-steps", type=int, default=1000)
    det.add_argument("--images-per-class", type=int, default=None)
    det.add_argument("--restarts", type=int, default=5)
    det.add_argument("--layer-index", type=int, default=1)
    det.add_argument("--max-clusters", type=int, default=1)
    det.add_argument("--workers", type=int, default=1)
    det.add_argument("--seed", type=int, default=0)
    det.add_argument("--emit-tr", action="store_true",
                     help="include the transferability matrix in the report")

    mit = sub.add_parser("mitigate", help="unlearn the backdoors named by a report")
    mit.add_argument("--model", required=True)
    mit.add_argument("--report", required=True)
    mit.add_argument("--data", required=True, help="clean dataset for fine-tuning")
    mit.add_argument("--out", required=True, help="fixed model file to write")
    mit.add_argument("--summary", default=None, help="before/after summary file")
    mit.add_argument("--eval-data", default=None,
                     help="held-out dataset for the before/after summary")
    mit.add_argument("--attack", default=None,
                     help="ground-truth attack spec for true-trigger rates")
    mit.add_argument("--epochs", type=int, default=10)
    mit.add_argument("--finetune-lr", type=float, default=5e-4)
    mit.add_argument("--batch-size", type=int, default=32)
    mit.add_argument("--seed", type=int, default=0)

    bn = sub.add_parser("bench", help="run a seeded suite of attacked and benign models")
    bn.add_argument("--out-dir", required=True)
    bn.add_argument("--num-attacked", type=int, default=10)
    bn.add_argument("--num-benign", type=int, default=10)
    bn.add_argument("--settings", default="2to2,a2ar",
                    help="comma-separated settings cycled over attacked models")
    bn.add_argument("--mode", default=PERTURBATION, choices=[PERTURBATION, PATCH])
    bn.add_argument("--beta", type=float, default=0.05)
    bn.add_argument("--seed", type=int, default=1000)
    bn.add_argument("--workers", type=int, default=1)
    bn.add_argument("--skip-baselines", action="store_true")
    return parser


def _forge_config(args) -> bench.BenchConfig:
    return bench.BenchConfig(
        num_attacked=0, num_benign=1, num_classes=args.classes, input_dim=args.dim,
        per_class=args.per_class, train_per_class=args.train_per_class,
        defender_per_class=args.defender_per_class, separation=args.separation,
        poison_per_source=args.poison_per_source, epochs=args.epochs,
        train_lr=args.train_lr, batch_size=args.batch_size,
        trigger_kind=args.trigger, master_seed=args.seed)


def cmd_forge(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    setting = None if args.setting.lower() == "benign" else args.setting.lower()
    forged = bench.forge_model(_forge_config(args), args.seed, setting)
    io.save_model(forged.model, out / "model.bin")
    io.save_dataset(forged.defender_data, out / "defender.bin")
    io.save_dataset(forged.eval_data, out / "eval.bin")
    summary = {
        "format_version": io.FORMAT_VERSION,
        "seed": args.seed,
        "setting": args.setting.lower(),
        "acc": forged.acc,
        "asr": forged.asr,
        "attack_successful": None if forged.asr is None else forged.asr >= 0.78,
        "files": ["model.bin", "defender.bin", "eval.bin"]
        + (["attack.json"] if forged.spec is not None else []),
    }
    if forged.spec is not None:
        io.save_attack_spec(forged.spec, out / "attack.json", seed=args.seed,
                            setting=setting)
    io.dump_json(summary, out / "summary.json")
    print(f"forged {args.setting} model: acc={forged.acc:.3f}"
          + ("" if forged.asr is None else
             f" asr={forged.asr:.3f} successful={forged.asr >= 0.78}"))
    return 0


def cmd_detect(args) -> int:
    model = io.load_model(args.model)
    data = io.load_dataset(args.data)
    cfg = DetectorConfig(
        re=REConfig(pi=args.pi, learning_rate=args.re_lr, max_steps=args.max_steps,
                    images_per_class=args.images_per_class, restarts=args.restarts,
                    layer_index=args.layer_index, seed=args.seed),
        beta=args.beta, restarts=args.restarts, workers=args.workers,
        include_tr=args.emit_tr)
    if args.max_clusters > 1:
        reports = detect_multi(model, data, cfg, args.max_clusters, mode=args.mode)
        payload = {"format_version": io.FORMAT_VERSION, "seed": args.seed,
                   "clusters": [io._report_payload(r) for r in reports]}
        io.dump_json(payload, args.out)
        flagged = sum(r.attacked for r in reports)
        print(f"{flagged} of {len(reports)} clusters flagged; report: {args.out}")
        return 0
    if args.mode == "combined":
        report = detect_combined(model, data, cfg)
    else:
        report = detect(model, data, args.mode, cfg)
    io.save_report(report, args.out)
    if args.emit_tr and report.tr is not None:
        base = Path(args.out)
        io.save_tr_matrix(report.tr, base.with_suffix(".tr.txt"))
        io.save_tr_matrix(report.tr, base.with_suffix(".tr_rownorm.txt"),
                          row_normalized=True)
    verdict = "ATTACKED" if report.attacked else "clean"
    print(f"{verdict}: score={report.score:.3f} threshold={report.threshold:.3f} "
          f"pairs={[p.astuple() for p in report.detected_pairs]}; report: {args.out}")
    return 0


def _estimated_trigger_rate(model, report: DetectionReport, data) -> float | None:
    """Misclassification rate to each detected target with its estimated trigger."""
    hits = total = 0
    for pair in report.detected_pairs:
        est = report.estimates[pair]
        if est.trigger is None:
            return None
        X = data.class_images(pair.source)
        if X.shape[0] == 0:
            continue
        hits += int(np.sum(predict(model, embed_batch(X, est.trigger)) == pair.target))
        total += X.shape[0]
    return hits / total if total else None


def cmd_mitigate(args) -> int:
    model = io.load_model(args.model)
    report = io.load_report(args.report)
    data = io.load_dataset(args.data)
    if not report.attacked:
        raise InputError("the report does not claim an attack; nothing to mitigate")
    eval_data = io.load_dataset(args.eval_data) if args.eval_data else data
    cfg = MitigationConfig(epochs=args.epochs, learning_rate=args.finetune_lr,
                           batch_size=args.batch_size, seed=args.seed)
    fixed = mitigate(model, report, data, cfg)
    io.save_model(fixed, args.out)
    summary = {
        "format_version": io.FORMAT_VERSION,
        "seed": args.seed,
        "acc_before": accuracy(model, eval_data),
        "acc_after": accuracy(fixed, eval_data),
        "estimated_trigger_rate_before": _estimated_trigger_rate(model, report, eval_data),
        "estimated_trigger_rate_after": _estimated_trigger_rate(fixed, report, eval_data),
    }
    if args.attack:
        spec = io.load_attack_spec(args.attack)
        summary["true_asr_before"] = attack_success_rate(model, eval_data, spec)[0]
        summary["true_asr_after"] = attack_success_rate(fixed, eval_data, spec)[0]
    io.dump_json(summary, args.summary or Path(args.out).with_suffix(".summary.json"))
    print(f"mitigated {len(report.detected_pairs)} pairs: "
          f"acc {summary['acc_before']:.3f} -> {summary['acc_after']:.3f}; "
          f"fixed model: {args.out}")
    return 0


def cmd_bench(args) -> int:
    settings = tuple(s for s in args.settings.split(",") if s)
    cfg = bench.BenchConfig(
        num_attacked=args.num_attacked, num_benign=args.num_benign,
        settings=settings, mode=args.mode, beta=args.beta,
        master_seed=args.seed, workers=args.workers,
        include_baselines=not args.skip_baselines)
    result = bench.run_suite(cfg, out_dir=args.out_dir)
    summary = bench.suite_summary(result)
    print(f"mia={summary['mia']:.3f} mean_pdr={summary['mean_pdr']} "
          f"benign_mia={summary['benign_mia']}; results in {args.out_dir}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    handlers = {"forge": cmd_forge, "detect": cmd_detect,
                "mitigate": cmd_mitigate, "bench": cmd_bench}
    try:
        return handlers[args.command](args)
    except InputError as exc:
        print(f"pairscan {args.command}: {exc}", file=sys.stderr)
        return VALIDATION_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"pairscan {args.command}: unexpected failure: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
