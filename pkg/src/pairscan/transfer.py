"""Transferability statistics between class pairs.

The transferability from pair a_i to pair a_j is the fraction of clean
class-s_j samples classified to t_j once a_i's reverse-engineered trigger is
embedded. Entries are exact rational counts, so they always lie in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .attack import ClassPair, all_class_pairs, embed_batch
from .errors import InputError
from .nn import DenseClassifier, ModelSplit, predict, split_at
from .reverse import INTERMEDIATE, REConfig, TriggerEstimate, reverse_engineer_all_pairs


@dataclass(frozen=True)
class TRMatrix:
    """Square matrix over the ordered list of valid class pairs.

    values[i, j] is the transferability from pairs[i] to pairs[j]; the
    diagonal is a NaN sentinel and must never be read.
    """

    pairs: tuple[ClassPair, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        n = len(self.pairs)
        if values.shape != (n, n):
            raise InputError("matrix shape must match the pair list")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.pairs)})

    def index(self, pair: ClassPair) -> int:
        try:
            return self._index[pair]
        except KeyError:
            raise InputError(f"pair {pair.astuple()} is not in the matrix") from None

    def entry(self, a_i: ClassPair, a_j: ClassPair) -> float:
        if a_i == a_j:
            raise InputError("transferability is undefined from a pair to itself")
        return float(self.values[self.index(a_i), self.index(a_j)])

    def submatrix(self, keep: list[ClassPair]) -> "TRMatrix":
        idx = [self.index(p) for p in keep]
        return TRMatrix(tuple(keep), self.values[np.ix_(idx, idx)])


def transferability(model: DenseClassifier, est: TriggerEstimate, a_j: ClassPair,
                    data, split: ModelSplit | None = None) -> float:
    """Fraction of clean class-s_j samples sent to t_j by est's trigger."""
    if est.pair is not None and est.pair == a_j:
        raise InputError("transferability needs two distinct class pairs")
    X = data.class_images(a_j.source)
    if X.shape[0] == 0:
        raise InputError(f"no clean samples of class {a_j.source}")
    preds = _triggered_predictions(model, est, X, split)
    return float(np.mean(preds == a_j.target))


def _triggered_predictions(model: DenseClassifier, est: TriggerEstimate,
                           X: np.ndarray, split: ModelSplit | None) -> np.ndarray:
    if est.mode == INTERMEDIATE:
        if split is None:
            raise InputError("intermediate-mode estimates need the model split")
        return predict(split.suffix, split.features(X) + est.feature_shift)
    return predict(model, embed_batch(X, est.trigger))


def tr_matrix(model: DenseClassifier, estimates: Mapping[ClassPair, TriggerEstimate],
              data, split: ModelSplit | None = None) -> TRMatrix:
    """Transferability for every ordered pair of distinct valid class pairs."""
    pairs = all_class_pairs(data.num_classes)
    for pair in pairs:
        if pair not in estimates:
            raise InputError(f"missing trigger estimate for pair {pair.astuple()}")
    class_images = {c: data.class_images(c) for c in range(data.num_classes)}
    for c, X in class_images.items():
        if X.shape[0] == 0:
            raise InputError(f"no clean samples of class {c}")
    values = np.full((len(pairs), len(pairs)), np.nan)
    for i, a_i in enumerate(pairs):
        # one triggered forward pass per source class, shared across columns
        preds = {c: _triggered_predictions(model, estimates[a_i], X, split)
                 for c, X in class_images.items()}
        for j, a_j in enumerate(pairs):
            if i == j:
                continue
            values[i, j] = float(np.mean(preds[a_j.source] == a_j.target))
    return TRMatrix(pairs, values)


def bright_entry_count(tr: TRMatrix, threshold: float) -> int:
    """Defined (off-diagonal) entries strictly above the threshold."""
    mask = ~np.isnan(tr.values)
    return int(np.sum(tr.values[mask] > threshold))


def auto_tune_image_count(model: DenseClassifier, data, mode: str, cfg: REConfig,
                          start_n: int, bright_threshold: float = 0.5,
                          tr_builder: Callable[[int], TRMatrix] | None = None) -> int:
    """Halve the per-class image budget until the map is dark enough.

    A map built with n images per class may carry at most 2(K^2-K) entries
    above bright_threshold; while it has more, n is halved (floor 2).
    tr_builder overrides the default pipeline, mainly for testing.
    """
    if start_n < 2:
        raise InputError("start_n must be at least 2")
    num_classes = data.num_classes
    bound = 2 * (num_classes * num_classes - num_classes)

    def build(n: int) -> TRMatrix:
        if tr_builder is not None:
            return tr_builder(n)
        run_cfg = REConfig(pi=cfg.pi, learning_rate=cfg.learning_rate,
                           max_steps=cfg.max_steps, images_per_class=n,
                           restarts=cfg.restarts, lambda_init=cfg.lambda_init,
                           layer_index=cfg.layer_index, seed=cfg.seed)
        estimates = reverse_engineer_all_pairs(model, data, mode, run_cfg)
        split = split_at(model, cfg.layer_index) if mode == INTERMEDIATE else None
        return tr_matrix(model, estimates, data, split)

    n = start_n
    while n > 2 and bright_entry_count(build(n), bright_threshold) > bound:
        n = max(2, n // 2)
    return n
