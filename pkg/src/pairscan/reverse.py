"""Per-class-pair trigger reverse-engineering.

For every ordered pair (s, t) a minimal trigger is estimated that drives a
target fraction pi of class-s samples to class t. Three variants:

* perturbation: additive v, clipped embedding, surrogate -mean p(t|clip(x+v)),
  L2-normalized gradient steps from v=0; size is ||v||_2.
* patch: overlay (u, m) with mask relaxed to [0,1], Lagrangian surrogate
  -mean log p(t|(1-m)*x+m*u) + lambda*||m||_1, adaptive-moment steps, random
  restarts; size is ||m||_1 of the smallest run meeting pi.
* intermediate: additive shift w in a hidden feature space (no clipping),
  surrogate -mean p(t|f1(x)+w); size is ||w||_2.

Non-convergence is reported via the flag, never an exception: the lowest
objective (perturbation/intermediate) or highest-fraction (patch) iterate is
kept so every pair still contributes a statistic.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .attack import PATCH, PERTURBATION, ClassPair, TriggerSpec, all_class_pairs
from .errors import InputError
from .nn import (
    DenseClassifier,
    ModelSplit,
    Adam,
    neg_log_posterior_batch,
    neg_posterior_batch,
    predict,
    split_at,
)

INTERMEDIATE = "intermediate"
MODES = (PERTURBATION, PATCH, INTERMEDIATE)

CHECK_EVERY = 10          # stop checks amortized over this many steps
LAMBDA_STREAK = 5         # consecutive checks before adjusting lambda
LAMBDA_FACTOR = 1.5
DEFAULT_IMAGES_PER_CLASS = {PERTURBATION: 10, PATCH: 20, INTERMEDIATE: 10}


@dataclass(frozen=True)
class REConfig:
    pi: float = 0.9
    learning_rate: float = 0.005
    max_steps: int = 1000
    images_per_class: int | None = None  # mode default when None
    restarts: int = 5                    # patch only
    lambda_init: float = 1e-3            # patch only
    layer_index: int = 1                 # intermediate only
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.pi <= 1.0:
            raise InputError("pi must lie in (0, 1]")
        if self.max_steps < 1:
            raise InputError("max_steps must be at least 1")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be positive")
        if self.restarts < 1:
            raise InputError("restarts must be at least 1")

    def resolve_images_per_class(self, mode: str) -> int:
        return self.images_per_class if self.images_per_class is not None \
            else DEFAULT_IMAGES_PER_CLASS[mode]


@dataclass(frozen=True)
class TriggerEstimate:
    """A reverse-engineered trigger for one class pair plus its size statistic."""

    pair: ClassPair | None
    size: float
    converged: bool
    steps_used: int
    trigger: TriggerSpec | None = None      # perturbation / patch modes
    feature_shift: np.ndarray | None = None  # intermediate mode

    def __post_init__(self):
        if self.size < 0:
            raise InputError("trigger size must be non-negative")
        if (self.trigger is None) == (self.feature_shift is None):
            raise InputError("estimate needs exactly one of trigger / feature_shift")

    @property
    def mode(self) -> str:
        if self.feature_shift is not None:
            return INTERMEDIATE
        return self.trigger.kind


def _misclassified_fraction(model: DenseClassifier, X: np.ndarray, target: int) -> float:
    return float(np.mean(predict(model, X) == target))


def perturbation_surrogate(model: DenseClassifier, X: np.ndarray, v: np.ndarray,
                           target: int):
    """Objective -mean p(target | clip(x+v)) and its gradient w.r.t. v."""
    shifted = X + v
    obj, grad_rows = neg_posterior_batch(model, np.clip(shifted, 0.0, 1.0), target)
    # chain through the clip: zero slope where the sum leaves (0, 1)
    inside = (shifted > 0.0) & (shifted < 1.0)
    return obj, (grad_rows * inside).sum(axis=0)


def reverse_engineer_perturbation(model: DenseClassifier, images: np.ndarray,
                                  target: int, cfg: REConfig) -> TriggerEstimate:
    """Estimate an additive perturbation for (class(images) -> target)."""
    X = np.asarray(images, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("need a non-empty batch of source-class images")
    v = np.zeros(X.shape[1])
    best_obj = np.inf
    best_v = v.copy()
    for step in range(cfg.max_steps + 1):
        if step % CHECK_EVERY == 0 and _misclassified_fraction(
                model, np.clip(X + v, 0.0, 1.0), target) >= cfg.pi:
            return _pert_estimate(v, converged=True, steps=step)
        if step == cfg.max_steps:
            break
        obj, grad = perturbation_surrogate(model, X, v, target)
        if obj < best_obj:
            best_obj = obj
            best_v = v.copy()
        norm = np.linalg.norm(grad)
        if norm == 0.0:
            break
        v = v - cfg.learning_rate * grad / norm
    return _pert_estimate(best_v, converged=False, steps=cfg.max_steps)


def _pert_estimate(v: np.ndarray, converged: bool, steps: int,
                   pair: ClassPair | None = None) -> TriggerEstimate:
    trigger = TriggerSpec(PERTURBATION, perturbation=v)
    return TriggerEstimate(pair=pair, size=float(np.linalg.norm(v)),
                           converged=converged, steps_used=steps, trigger=trigger)


def patch_surrogate(model: DenseClassifier, X: np.ndarray, patch: np.ndarray,
                    mask: np.ndarray, target: int, lam: float):
    """Lagrangian patch objective and its gradients w.r.t. (patch, mask)."""
    embedded = (1.0 - mask) * X + mask * patch
    data_obj, grad_rows = neg_log_posterior_batch(model, embedded, target)
    obj = data_obj + lam * float(np.abs(mask).sum())
    grad_u = (grad_rows * mask).sum(axis=0)
    grad_m = (grad_rows * (patch - X)).sum(axis=0) + lam * np.sign(mask)
    return obj, grad_u, grad_m


def reverse_engineer_patch(model: DenseClassifier, images: np.ndarray, target: int,
                           cfg: REConfig, seed: int = 0) -> TriggerEstimate:
    """Estimate a patch trigger via restarted Lagrangian minimization.

    The mask starts image-wide around 0.5; lambda rises after LAMBDA_STREAK
    consecutive successful stop checks and falls after as many misses. The
    winner is the restart with minimum ||m||_1 among those reaching pi; if
    none does, the highest achieved fraction wins and converged is False.
    """
    X = np.asarray(images, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("need a non-empty batch of source-class images")
    d = X.shape[1]
    winners = []
    for restart in range(cfg.restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, restart]))
        patch = rng.uniform(0.4, 0.6, d)
        mask = rng.uniform(0.4, 0.6, d)
        opt = Adam([patch, mask])
        lam = cfg.lambda_init
        met = missed = 0
        best = None       # (z, step, patch, mask) among pi-meeting checks
        fallback = None   # (-fraction, z, step, patch, mask) otherwise
        for step in range(cfg.max_steps + 1):
            if step % CHECK_EVERY == 0:
                embedded = (1.0 - mask) * X + mask * patch
                frac = _misclassified_fraction(model, embedded, target)
                z = float(np.abs(mask).sum())
                if frac >= cfg.pi:
                    if best is None or z < best[0]:
                        best = (z, step, patch.copy(), mask.copy())
                    met, missed = met + 1, 0
                    if met >= LAMBDA_STREAK:
                        lam *= LAMBDA_FACTOR
                        met = 0
                else:
                    missed, met = missed + 1, 0
                    if missed >= LAMBDA_STREAK:
                        lam /= LAMBDA_FACTOR
                        missed = 0
                if fallback is None or (-frac, z) < fallback[:2]:
                    fallback = (-frac, z, step, patch.copy(), mask.copy())
            if step == cfg.max_steps:
                break
            _, grad_u, grad_m = patch_surrogate(model, X, patch, mask, target, lam)
            opt.step([patch, mask], [grad_u, grad_m], cfg.learning_rate)
            np.clip(patch, 0.0, 1.0, out=patch)
            np.clip(mask, 0.0, 1.0, out=mask)
        if best is not None:
            winners.append((0, best[0], restart, best[1], best[2], best[3]))
        else:
            winners.append((1, (fallback[0], fallback[1]), restart,
                            fallback[2], fallback[3], fallback[4]))
    winners.sort(key=lambda w: (w[0], w[1], w[2]))
    failed, _, _, step, patch, mask = winners[0]
    trigger = TriggerSpec(PATCH, patch=patch, mask=mask)
    return TriggerEstimate(pair=None, size=float(np.abs(mask).sum()),
                           converged=(failed == 0), steps_used=step, trigger=trigger)


def intermediate_surrogate(split: ModelSplit, features: np.ndarray,
                           shift: np.ndarray, target: int):
    """Feature-space surrogate -mean p(target | z + shift) and its gradient."""
    value, grad_rows = neg_posterior_batch(split.suffix, features + shift, target)
    return value, grad_rows.sum(axis=0)


def reverse_engineer_intermediate(split: ModelSplit, images: np.ndarray, target: int,
                                  cfg: REConfig) -> TriggerEstimate:
    """Estimate an additive shift in the split's feature space (no clipping)."""
    X = np.asarray(images, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("need a non-empty batch of source-class images")
    Z = split.features(X)
    w = np.zeros(Z.shape[1])
    best_obj = np.inf
    best_w = w.copy()
    for step in range(cfg.max_steps + 1):
        if step % CHECK_EVERY == 0 and \
                _misclassified_fraction(split.suffix, Z + w, target) >= cfg.pi:
            return TriggerEstimate(pair=None, size=float(np.linalg.norm(w)),
                                   converged=True, steps_used=step, feature_shift=w.copy())
        if step == cfg.max_steps:
            break
        obj, grad = intermediate_surrogate(split, Z, w, target)
        if obj < best_obj:
            best_obj = obj
            best_w = w.copy()
        norm = np.linalg.norm(grad)
        if norm == 0.0:
            break
        w = w - cfg.learning_rate * grad / norm
    return TriggerEstimate(pair=None, size=float(np.linalg.norm(best_w)),
                           converged=False, steps_used=cfg.max_steps,
                           feature_shift=best_w.copy())


def select_clean_samples(model: DenseClassifier, images_by_class: dict[int, np.ndarray],
                         per_class: int) -> dict[int, np.ndarray]:
    """First per_class correctly-classified samples of every class."""
    selected = {}
    for c, X in images_by_class.items():
        correct = X[predict(model, X) == c]
        if correct.shape[0] < per_class:
            raise InputError(
                f"class {c} has only {correct.shape[0]} correctly-classified clean "
                f"samples, need {per_class}")
        selected[c] = correct[:per_class]
    return selected


def _pair_seed(master: int, pair: ClassPair) -> int:
    return int(np.random.SeedSequence([master, pair.source, pair.target])
               .generate_state(1)[0])


def _pair_task(args):
    mode, model, split, images, pair, cfg = args
    if mode == PERTURBATION:
        est = reverse_engineer_perturbation(model, images, pair.target, cfg)
    elif mode == PATCH:
        est = reverse_engineer_patch(model, images, pair.target, cfg,
                                     seed=_pair_seed(cfg.seed, pair))
    else:
        est = reverse_engineer_intermediate(split, images, pair.target, cfg)
    return pair, replace(est, pair=pair)


def reverse_engineer_all_pairs(model: DenseClassifier, data, mode: str,
                               cfg: REConfig | None = None,
                               workers: int = 1) -> dict[ClassPair, TriggerEstimate]:
    """One estimate per ordered pair of distinct classes (K(K-1) total).

    Results are keyed by pair and independent of worker count: the patch
    restarts draw from per-pair seeds derived from cfg.seed.
    """
    if mode not in MODES:
        raise InputError(f"unknown reverse-engineering mode {mode!r}")
    cfg = cfg or REConfig()
    per_class = cfg.resolve_images_per_class(mode)
    by_class = {c: data.class_images(c) for c in range(data.num_classes)}
    selected = select_clean_samples(model, by_class, per_class)
    split = split_at(model, cfg.layer_index) if mode == INTERMEDIATE else None
    tasks = [(mode, model, split, selected[pair.source], pair, cfg)
             for pair in all_class_pairs(data.num_classes)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_pair_task, tasks))
    else:
        results = [_pair_task(t) for t in tasks]
    return {pair: est for pair, est in sorted(results, key=lambda r: r[0])}
