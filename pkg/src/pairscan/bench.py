"""Deterministic benchmark suites: forge victims, detect, and score.

A suite is fully determined by its config: model i draws every random choice
from master_seed + i (benign) or master_seed + 100 + i (attacked), so reruns
and different worker counts produce byte-identical artifacts.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import numpy as np

from . import io
from .attack import (
    PERTURBATION,
    AttackSpec,
    attack_success_rate,
    build_attack_spec,
    poison,
    random_patch_trigger,
    x_diagonal_trigger,
)
from .data import LabeledDataset, make_synthetic_dataset, split_per_class
from .detector import (
    DetectionReport,
    DetectorConfig,
    baseline_dagger,
    baseline_ddagger,
    detect,
    evaluate_benchmark,
    run_pipeline,
)
from .errors import InputError
from .nn import DenseClassifier, TrainConfig, accuracy, init_model, train
from .reverse import REConfig

ATTACKED_SEED_OFFSET = 100


@dataclass(frozen=True)
class BenchConfig:
    num_attacked: int = 10
    num_benign: int = 10
    settings: tuple[str, ...] = ("2to2", "a2ar")
    trigger_kind: str = PERTURBATION
    num_classes: int = 5
    input_dim: int = 64
    per_class: int = 260
    train_per_class: int = 200
    defender_per_class: int = 30
    separation: float = 7.0
    poison_per_source: int = 300
    epochs: int = 40
    train_lr: float = 1e-3
    batch_size: int = 32
    hidden: tuple[int, ...] = (64, 32)
    mode: str = PERTURBATION
    beta: float = 0.05
    re_learning_rate: float = 0.005
    pi: float = 0.9
    images_per_class: int | None = None
    master_seed: int = 1000
    workers: int = 1
    include_baselines: bool = True
    with_clean_twins: bool = True

    def __post_init__(self):
        if self.num_attacked + self.num_benign < 1:
            raise InputError("the suite needs at least one model")
        if max(self.num_attacked, self.num_benign) > ATTACKED_SEED_OFFSET:
            raise InputError(f"suite sides are limited to {ATTACKED_SEED_OFFSET} models")
        if self.num_attacked and not self.settings:
            raise InputError("attacked models need at least one setting")
        if self.per_class <= self.train_per_class + self.defender_per_class:
            raise InputError("per_class must leave room for an evaluation split")

    def detector_config(self, seed: int) -> DetectorConfig:
        return DetectorConfig(
            re=REConfig(pi=self.pi, learning_rate=self.re_learning_rate,
                        images_per_class=self.images_per_class, seed=seed),
            beta=self.beta, workers=self.workers)


@dataclass(frozen=True)
class ForgedModel:
    """One trained classifier plus the data splits and ground truth behind it."""

    seed: int
    setting: str | None          # None for benign models
    model: DenseClassifier
    clean_twin: DenseClassifier | None
    train_data: LabeledDataset
    defender_data: LabeledDataset
    eval_data: LabeledDataset
    spec: AttackSpec | None
    asr: float | None
    acc: float
    acc_twin: float | None


def forge_model(cfg: BenchConfig, seed: int, setting: str | None,
                with_clean_twin: bool = True) -> ForgedModel:
    """Train one victim (or benign) classifier from a single seed."""
    full = make_synthetic_dataset(cfg.num_classes, cfg.input_dim, cfg.per_class,
                                  cfg.separation, seed=seed)
    train_split, rest = split_per_class(full, cfg.train_per_class)
    defender, evaluation = split_per_class(rest, cfg.defender_per_class)
    spec = None
    train_set = train_split
    if setting is not None:
        if cfg.trigger_kind == PERTURBATION:
            trigger = x_diagonal_trigger(cfg.input_dim)
        else:
            trigger = random_patch_trigger(cfg.input_dim, np.random.default_rng(seed))
        spec = build_attack_spec(setting, cfg.num_classes, trigger, seed=seed,
                                 poison_per_source=cfg.poison_per_source)
        train_set = poison(train_split, spec, seed=seed)
    train_cfg = TrainConfig(epochs=cfg.epochs, learning_rate=cfg.train_lr,
                            batch_size=cfg.batch_size, seed=seed)
    model = train(init_model(cfg.num_classes, cfg.input_dim, cfg.hidden, seed=seed),
                  train_set, train_cfg)
    twin = acc_twin = None
    if setting is not None and with_clean_twin:
        twin = train(init_model(cfg.num_classes, cfg.input_dim, cfg.hidden, seed=seed),
                     train_split, train_cfg)
        acc_twin = accuracy(twin, evaluation)
    asr = attack_success_rate(model, evaluation, spec)[0] if spec else None
    return ForgedModel(seed=seed, setting=setting, model=model, clean_twin=twin,
                       train_data=train_set, defender_data=defender,
                       eval_data=evaluation, spec=spec, asr=asr,
                       acc=accuracy(model, evaluation), acc_twin=acc_twin)


@dataclass(frozen=True)
class SuiteEntry:
    forged: ForgedModel
    report: DetectionReport
    dagger: DetectionReport | None
    ddagger: DetectionReport | None

    @property
    def pdr(self) -> float | None:
        if self.forged.spec is None or not self.report.attacked:
            return None
        planted = set(self.forged.spec.pairs)
        return len(set(self.report.detected_pairs) & planted) / len(planted)

    @property
    def o2o_target_shared(self) -> bool | None:
        """For single-pair attacks: do all detected pairs share the planted target?"""
        if self.forged.spec is None or len(self.forged.spec.pairs) != 1 \
                or not self.report.attacked:
            return None
        target = self.forged.spec.pairs[0].target
        return all(p.target == target for p in self.report.detected_pairs)


@dataclass(frozen=True)
class SuiteResult:
    config: BenchConfig
    entries: tuple[SuiteEntry, ...]

    @property
    def attacked_entries(self):
        return [e for e in self.entries if e.forged.spec is not None]

    @property
    def benign_entries(self):
        return [e for e in self.entries if e.forged.spec is None]

    def verdicts(self):
        return [(e.report, e.forged.spec) for e in self.entries]

    def benign_mia(self, which: str = "main") -> float:
        entries = self.benign_entries
        if not entries:
            raise InputError("no benign models in the suite")
        reports = {"main": lambda e: e.report, "dagger": lambda e: e.dagger,
                   "ddagger": lambda e: e.ddagger}[which]
        return sum(1 for e in entries if not reports(e).attacked) / len(entries)


def run_suite(cfg: BenchConfig, out_dir=None) -> SuiteResult:
    """Forge, detect, and (optionally) persist the whole suite in seed order."""
    jobs: list[tuple[str, int, str | None]] = []
    for i in range(cfg.num_attacked):
        jobs.append(("attacked", cfg.master_seed + ATTACKED_SEED_OFFSET + i,
                     cfg.settings[i % len(cfg.settings)]))
    for i in range(cfg.num_benign):
        jobs.append(("benign", cfg.master_seed + i, None))

    entries = []
    for kind, seed, setting in jobs:
        forged = forge_model(cfg, seed, setting, with_clean_twin=cfg.with_clean_twins)
        det_cfg = cfg.detector_config(seed)
        run = run_pipeline(forged.model, forged.defender_data, cfg.mode, det_cfg)
        report = detect(forged.model, forged.defender_data, cfg.mode, det_cfg, run=run)
        dagger = ddagger = None
        if cfg.include_baselines:
            dagger = baseline_dagger(forged.model, forged.defender_data, cfg.mode,
                                     det_cfg, run=run)
            ddagger = baseline_ddagger(forged.model, forged.defender_data, cfg.mode,
                                       det_cfg, run=run)
        entries.append(SuiteEntry(forged=forged, report=report,
                                  dagger=dagger, ddagger=ddagger))
    result = SuiteResult(config=cfg, entries=tuple(entries))
    if out_dir is not None:
        write_suite_artifacts(result, out_dir)
    return result


def suite_summary(result: SuiteResult) -> dict:
    """Stable-key-order summary used for the benchmark result file."""
    bench = evaluate_benchmark(result.verdicts())
    attacked = result.attacked_entries
    rows = []
    for e in result.entries:
        rows.append({
            "seed": e.forged.seed,
            "kind": "attacked" if e.forged.spec is not None else "benign",
            "setting": e.forged.setting,
            "asr": e.forged.asr,
            "acc": e.forged.acc,
            "acc_clean_twin": e.forged.acc_twin,
            "attacked_verdict": e.report.attacked,
            "score": io.encode_float(e.report.score),
            "threshold": e.report.threshold,
            "detected_pairs": [list(p.astuple()) for p in e.report.detected_pairs],
            "pdr": e.pdr,
            "o2o_target_shared": e.o2o_target_shared,
            "dagger_verdict": None if e.dagger is None else e.dagger.attacked,
            "ddagger_verdict": None if e.ddagger is None else e.ddagger.attacked,
        })
    summary = {
        "format_version": io.FORMAT_VERSION,
        "master_seed": result.config.master_seed,
        "mode": result.config.mode,
        "beta": result.config.beta,
        "num_attacked": result.config.num_attacked,
        "num_benign": result.config.num_benign,
        "mia": bench.mia,
        "mean_pdr": bench.mean_pdr,
        "pdr_per_attack": list(bench.pdr_per_attack),
        "min_asr": min((e.forged.asr for e in attacked), default=None),
        "mean_acc_drop": (sum(e.forged.acc_twin - e.forged.acc for e in attacked)
                          / len(attacked))
        if attacked and all(e.forged.acc_twin is not None for e in attacked) else None,
        "benign_mia": result.benign_mia("main") if result.benign_entries else None,
        "benign_mia_dagger": (result.benign_mia("dagger")
                              if result.benign_entries and result.config.include_baselines
                              else None),
        "benign_mia_ddagger": (result.benign_mia("ddagger")
                               if result.benign_entries and result.config.include_baselines
                               else None),
        "models": rows,
    }
    return summary


def write_suite_artifacts(result: SuiteResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for e in result.entries:
        kind = "attacked" if e.forged.spec is not None else "benign"
        io.save_report(e.report, out / f"report_{kind}_{e.forged.seed}.json")
    io.dump_json(suite_summary(result), out / "bench_result.json")
    return out / "bench_result.json"
