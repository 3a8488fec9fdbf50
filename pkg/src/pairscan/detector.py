"""End-to-end backdoor detection, ablation baselines, and mitigation.

The main detector runs four steps: reverse-engineer a trigger per class
pair, compute the transferability matrix, select a candidate set by the
clustering objective, then score the candidates' reciprocal trigger sizes
against the unselected null at an adaptive threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .anomaly import MAD_SCALE, assess, reciprocal_sizes, threshold
from .attack import PATCH, PERTURBATION, AttackSpec, ClassPair, embed_batch
from .data import LabeledDataset
from .errors import InputError
from .nn import DenseClassifier, ModelSplit, TrainConfig, split_at, train
from .reverse import INTERMEDIATE, REConfig, TriggerEstimate, reverse_engineer_all_pairs
from .select import CandidateSet, agglomerative_select
from .transfer import TRMatrix, tr_matrix

CLUSTER_DETECTOR = "cluster"
SIZE_ONLY_DETECTOR = "size-only"
SIZE_MUTUAL_DETECTOR = "size-top-mutual"


@dataclass(frozen=True)
class DetectorConfig:
    re: REConfig = field(default_factory=REConfig)
    beta: float = 0.05
    restarts: int = 5
    workers: int = 1
    include_tr: bool = False

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise InputError("beta must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class DetectionReport:
    attacked: bool
    selected_pairs: tuple[ClassPair, ...]
    detected_pairs: tuple[ClassPair, ...]
    score: float
    threshold: float
    beta: float
    n_null: int
    mode: str
    detector: str
    seed: int
    estimates: Mapping[ClassPair, TriggerEstimate]
    objective_value: float | None = None
    tr: TRMatrix | None = None
    auxiliary: "DetectionReport | None" = None

    def __post_init__(self):
        if self.attacked and not self.detected_pairs:
            raise InputError("an attacked verdict needs detected pairs")

    @property
    def sizes(self) -> dict[ClassPair, float]:
        return {pair: est.size for pair, est in self.estimates.items()}


@dataclass(frozen=True)
class PipelineRun:
    """Shared first half of every detector: estimates plus the TR matrix."""

    mode: str
    estimates: Mapping[ClassPair, TriggerEstimate]
    tr: TRMatrix
    split: ModelSplit | None

    @property
    def sizes(self) -> dict[ClassPair, float]:
        return {pair: est.size for pair, est in self.estimates.items()}


def run_pipeline(model: DenseClassifier, data: LabeledDataset, mode: str,
                 cfg: DetectorConfig) -> PipelineRun:
    estimates = reverse_engineer_all_pairs(model, data, mode, cfg.re, workers=cfg.workers)
    split = split_at(model, cfg.re.layer_index) if mode == INTERMEDIATE else None
    tr = tr_matrix(model, estimates, data, split)
    return PipelineRun(mode=mode, estimates=estimates, tr=tr, split=split)


def _build_report(run: PipelineRun, selected: CandidateSet, cfg: DetectorConfig,
                  null_pairs: Sequence[ClassPair] | None = None) -> DetectionReport:
    sizes = run.sizes
    if null_pairs is None:
        scored = sizes
    else:
        scored = {p: sizes[p] for p in (*selected.pairs, *null_pairs)}
    result = assess(scored, selected.pairs, cfg.beta)
    detected = selected.pairs if result.attacked else ()
    return DetectionReport(
        attacked=result.attacked, selected_pairs=selected.pairs,
        detected_pairs=detected, score=result.score, threshold=result.threshold,
        beta=cfg.beta, n_null=result.n_null, mode=run.mode, detector=CLUSTER_DETECTOR,
        seed=cfg.re.seed, estimates=run.estimates,
        objective_value=selected.objective_value,
        tr=run.tr if cfg.include_tr else None)


def detect(model: DenseClassifier, data: LabeledDataset, mode: str = PERTURBATION,
           cfg: DetectorConfig | None = None,
           run: PipelineRun | None = None) -> DetectionReport:
    """Full detection pipeline for one mode; deterministic given cfg.re.seed."""
    cfg = cfg or DetectorConfig()
    run = run or run_pipeline(model, data, mode, cfg)
    selected = agglomerative_select(run.tr, restarts=cfg.restarts)
    return _build_report(run, selected, cfg)


def detect_combined(model: DenseClassifier, data: LabeledDataset,
                    cfg: DetectorConfig | None = None) -> DetectionReport:
    """Run perturbation- and patch-mode detection; either one claims the attack.

    The perturbation report wins ties; the other execution rides along as
    the auxiliary report.
    """
    cfg = cfg or DetectorConfig()
    pert = detect(model, data, PERTURBATION, cfg)
    patch = detect(model, data, PATCH, cfg)
    if patch.attacked and not pert.attacked:
        winner, other = patch, pert
    else:
        winner, other = pert, patch
    return DetectionReport(
        attacked=winner.attacked or other.attacked,
        selected_pairs=winner.selected_pairs, detected_pairs=winner.detected_pairs,
        score=winner.score, threshold=winner.threshold, beta=winner.beta,
        n_null=winner.n_null, mode=winner.mode, detector=winner.detector,
        seed=winner.seed, estimates=winner.estimates,
        objective_value=winner.objective_value, tr=winner.tr, auxiliary=other)


def detect_multi(model: DenseClassifier, data: LabeledDataset,
                 cfg: DetectorConfig | None = None, max_clusters: int = 1,
                 mode: str = PERTURBATION) -> list[DetectionReport]:
    """Sequentially select up to max_clusters candidate sets, then score each
    against the shared null of pairs belonging to no cluster."""
    if max_clusters < 1:
        raise InputError("max_clusters must be at least 1")
    cfg = cfg or DetectorConfig()
    run = run_pipeline(model, data, mode, cfg)
    clusters: list[CandidateSet] = []
    remaining = list(run.tr.pairs)
    for _ in range(max_clusters):
        if len(remaining) < 3:  # selection needs two pairs plus one outside
            break
        try:
            selected = agglomerative_select(run.tr.submatrix(remaining), restarts=cfg.restarts)
        except InputError:
            break
        clusters.append(selected)
        remaining = [p for p in remaining if p not in set(selected.pairs)]
    null_pairs = tuple(remaining)
    if not null_pairs:
        raise InputError("no pairs left outside the clusters to form a null")
    return [_build_report(run, cluster, cfg, null_pairs=null_pairs)
            for cluster in clusters]


# ---------------------------------------------------------------------------
# ablation baselines: trigger sizes without / with a naive transferability check
# ---------------------------------------------------------------------------

def dagger_scores(sizes: Mapping[ClassPair, float]) -> dict[ClassPair, float]:
    """Per-pair anomaly scores with the MAD estimated over ALL statistics."""
    pairs = sorted(sizes)
    z = np.array([sizes[p] for p in pairs], dtype=np.float64)
    w = reciprocal_sizes(z)
    med = float(np.median(w))
    deviations = np.abs(w - med)
    deviations[np.isnan(deviations)] = 0.0
    sigma = float(np.median(deviations))
    scores = {}
    for pair, wi in zip(pairs, w):
        num = wi - med
        if wi == med:
            scores[pair] = 0.0
        elif sigma == 0.0:
            scores[pair] = math.inf if num > 0 else 0.0
        elif math.isinf(num):
            scores[pair] = math.inf if num > 0 else -math.inf
        elif math.isinf(sigma):
            scores[pair] = 0.0
        else:
            scores[pair] = float(num / (MAD_SCALE * sigma))
    return scores


def _num_classes(pairs: Sequence[ClassPair]) -> int:
    return 1 + max(max(p.source, p.target) for p in pairs)


def _dagger_verdict(sizes: Mapping[ClassPair, float], beta: float):
    scores = dagger_scores(sizes)
    num_classes = _num_classes(tuple(sizes))
    theta = threshold(beta, len(sizes))
    attacked = any(s > theta for s in scores.values())
    top_k = tuple(pair for pair, _ in
                  sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:num_classes])
    best = max(scores.values())
    return attacked, top_k if attacked else (), best, theta, scores


def baseline_dagger(model: DenseClassifier, data: LabeledDataset,
                    mode: str = PERTURBATION, cfg: DetectorConfig | None = None,
                    run: PipelineRun | None = None) -> DetectionReport:
    """Size-only ablation: flag any pair whose reciprocal size is an outlier."""
    cfg = cfg or DetectorConfig()
    run = run or run_pipeline(model, data, mode, cfg)
    sizes = run.sizes
    attacked, detected, best, theta, _ = _dagger_verdict(sizes, cfg.beta)
    return DetectionReport(
        attacked=attacked, selected_pairs=detected, detected_pairs=detected,
        score=best, threshold=theta, beta=cfg.beta, n_null=len(sizes), mode=mode,
        detector=SIZE_ONLY_DETECTOR, seed=cfg.re.seed, estimates=run.estimates,
        tr=run.tr if cfg.include_tr else None)


def mutual_transferability(tr: TRMatrix) -> dict[ClassPair, float]:
    """Max of T[a,b] + T[b,a] over partners b, for every pair a."""
    values = tr.values
    out = {}
    for i, pair in enumerate(tr.pairs):
        both = values[i, :] + values[:, i]
        out[pair] = float(np.nanmax(both))
    return out


def baseline_ddagger(model: DenseClassifier, data: LabeledDataset,
                     mode: str = PERTURBATION, cfg: DetectorConfig | None = None,
                     run: PipelineRun | None = None) -> DetectionReport:
    """Size ablation double-checked by mutual transferability rank.

    Pairs flagged by the size-only ablation survive only if their maximum
    mutual transferability ranks in the top K over all pairs.
    """
    cfg = cfg or DetectorConfig()
    run = run or run_pipeline(model, data, mode, cfg)
    sizes = run.sizes
    attacked, flagged, best, theta, _ = _dagger_verdict(sizes, cfg.beta)
    mutual = mutual_transferability(run.tr)
    num_classes = _num_classes(run.tr.pairs)
    top_k = set(pair for pair, _ in
                sorted(mutual.items(), key=lambda kv: (-kv[1], kv[0]))[:num_classes])
    survivors = tuple(p for p in flagged if p in top_k)
    return DetectionReport(
        attacked=bool(survivors), selected_pairs=flagged, detected_pairs=survivors,
        score=best, threshold=theta, beta=cfg.beta, n_null=len(sizes), mode=mode,
        detector=SIZE_MUTUAL_DETECTOR, seed=cfg.re.seed, estimates=run.estimates,
        tr=run.tr if cfg.include_tr else None)


# ---------------------------------------------------------------------------
# mitigation and benchmark scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MitigationConfig:
    epochs: int = 10
    learning_rate: float = 5e-4
    batch_size: int = 32
    seed: int = 0


def mitigate(model: DenseClassifier, report: DetectionReport, data: LabeledDataset,
             cfg: MitigationConfig | None = None) -> DenseClassifier:
    """Unlearn detected backdoors by fine-tuning on correctly-labeled samples
    that carry each detected pair's reverse-engineered trigger."""
    cfg = cfg or MitigationConfig()
    if not report.attacked:
        raise InputError("mitigation needs a report with a positive verdict")
    images = [data.images]
    labels = [data.labels]
    for pair in report.detected_pairs:
        est = report.estimates[pair]
        if est.trigger is None:
            raise InputError(
                "intermediate-mode estimates have no input-space trigger to unlearn")
        X = data.class_images(pair.source)
        if X.shape[0] == 0:
            raise InputError(f"no clean samples of source class {pair.source}")
        images.append(embed_batch(X, est.trigger))
        labels.append(np.full(X.shape[0], pair.source, dtype=np.int64))
    mixed = LabeledDataset(np.concatenate(images), np.concatenate(labels),
                           data.num_classes)
    return train(model, mixed, TrainConfig(epochs=cfg.epochs,
                                           learning_rate=cfg.learning_rate,
                                           batch_size=cfg.batch_size, seed=cfg.seed))


@dataclass(frozen=True)
class BenchmarkResult:
    mia: float
    pdr_per_attack: tuple[float, ...]
    mean_pdr: float | None


def evaluate_benchmark(verdicts: Sequence[tuple[DetectionReport, AttackSpec | None]]
                       ) -> BenchmarkResult:
    """Model inference accuracy plus pair detection rates over true positives."""
    if not verdicts:
        raise InputError("cannot evaluate an empty suite")
    correct = 0
    pdrs = []
    for report, truth in verdicts:
        is_attacked = truth is not None
        if report.attacked == is_attacked:
            correct += 1
        if report.attacked and is_attacked:
            planted = set(truth.pairs)
            pdrs.append(len(set(report.detected_pairs) & planted) / len(planted))
    mean_pdr = sum(pdrs) / len(pdrs) if pdrs else None
    return BenchmarkResult(mia=correct / len(verdicts),
                           pdr_per_attack=tuple(pdrs), mean_pdr=mean_pdr)
