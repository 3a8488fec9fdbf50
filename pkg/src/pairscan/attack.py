"""Triggers, class-pair attack specifications, poisoning, and attack metrics.

An attack is a set of ordered (source, target) class pairs sharing one
trigger: sources are pairwise distinct and no pair maps a class to itself.
"""
from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .data import LabeledDataset
from .errors import InputError
from .nn import DenseClassifier, predict

PERTURBATION = "perturbation"
PATCH = "patch"


@dataclass(frozen=True, order=True)
class ClassPair:
    """Ordered (source, target) pair of class labels; source != target."""

    source: int
    target: int

    def __post_init__(self):
        if self.source == self.target:
            raise InputError(f"class pair source and target must differ, got {self.source}")

    def astuple(self) -> tuple[int, int]:
        return (self.source, self.target)


def all_class_pairs(num_classes: int) -> tuple[ClassPair, ...]:
    """All K(K-1) ordered pairs of distinct classes, lexicographic order."""
    return tuple(ClassPair(s, t)
                 for s in range(num_classes)
                 for t in range(num_classes) if t != s)


@dataclass(frozen=True)
class TriggerSpec:
    """Additive perturbation (clipped into [0,1]) or a masked patch overlay.

    Patch masks may take values anywhere in [0,1]; attack construction
    additionally requires them to be binary (see AttackSpec).
    """

    kind: str
    perturbation: np.ndarray | None = None
    patch: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == PERTURBATION:
            if self.perturbation is None or self.patch is not None or self.mask is not None:
                raise InputError("perturbation trigger needs exactly a perturbation vector")
            v = np.array(self.perturbation, dtype=np.float64)
            if v.ndim != 1 or not np.isfinite(v).all():
                raise InputError("perturbation must be a finite 1-d vector")
            v.flags.writeable = False
            object.__setattr__(self, "perturbation", v)
        elif self.kind == PATCH:
            if self.patch is None or self.mask is None or self.perturbation is not None:
                raise InputError("patch trigger needs a patch vector and a mask")
            u = np.array(self.patch, dtype=np.float64)
            m = np.array(self.mask, dtype=np.float64)
            if u.shape != m.shape or u.ndim != 1:
                raise InputError("patch and mask must be 1-d vectors of equal length")
            if not (np.isfinite(u).all() and np.isfinite(m).all()):
                raise InputError("patch and mask entries must be finite")
            if m.min() < 0.0 or m.max() > 1.0:
                raise InputError("mask entries must lie in [0,1]")
            u.flags.writeable = False
            m.flags.writeable = False
            object.__setattr__(self, "patch", u)
            object.__setattr__(self, "mask", m)
        else:
            raise InputError(f"unknown trigger kind {self.kind!r}")

    @property
    def input_dim(self) -> int:
        return len(self.perturbation) if self.kind == PERTURBATION else len(self.mask)

    def has_binary_mask(self) -> bool:
        return self.kind == PATCH and bool(np.all((self.mask == 0.0) | (self.mask == 1.0)))


def embed(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Apply a trigger to one flattened image; output stays in [0,1]^d."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (trigger.input_dim,):
        raise InputError(f"image of shape {x.shape} does not match trigger dim {trigger.input_dim}")
    return embed_batch(x[None], trigger)[0]


def embed_batch(X: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != trigger.input_dim:
        raise InputError(f"batch of shape {X.shape} does not match trigger dim {trigger.input_dim}")
    if trigger.kind == PERTURBATION:
        return np.clip(X + trigger.perturbation, 0.0, 1.0)
    return (1.0 - trigger.mask) * X + trigger.mask * trigger.patch


def x_diagonal_trigger(input_dim: int, magnitude: float = 0.15) -> TriggerSpec:
    """Sparse additive trigger lighting both diagonals of the square image grid."""
    side = int(round(np.sqrt(input_dim)))
    if side * side != input_dim:
        raise InputError("the diagonal trigger needs a square image layout")
    v = np.zeros((side, side))
    idx = np.arange(side)
    v[idx, idx] = magnitude
    v[idx, side - 1 - idx] = magnitude
    return TriggerSpec(PERTURBATION, perturbation=v.ravel())


def random_patch_trigger(input_dim: int, rng: np.random.Generator,
                         patch_side: int = 2) -> TriggerSpec:
    """Contiguous square patch at a random position with random colors."""
    side = int(round(np.sqrt(input_dim)))
    if side * side != input_dim:
        raise InputError("the patch trigger needs a square image layout")
    if patch_side > side:
        raise InputError("patch does not fit the image")
    row = int(rng.integers(0, side - patch_side + 1))
    col = int(rng.integers(0, side - patch_side + 1))
    mask = np.zeros((side, side))
    mask[row:row + patch_side, col:col + patch_side] = 1.0
    colors = np.zeros((side, side))
    colors[row:row + patch_side, col:col + patch_side] = rng.random((patch_side, patch_side))
    return TriggerSpec(PATCH, patch=colors.ravel(), mask=mask.ravel())


@dataclass(frozen=True)
class AttackSpec:
    pairs: tuple[ClassPair, ...]
    trigger: TriggerSpec
    poison_per_source: int

    def __post_init__(self):
        pairs = tuple(sorted(self.pairs))
        if not pairs:
            raise InputError("an attack needs at least one class pair")
        sources = [p.source for p in pairs]
        if len(set(sources)) != len(sources):
            raise InputError("attack sources must be pairwise distinct")
        if self.poison_per_source < 0:
            raise InputError("poison_per_source must be non-negative")
        if self.trigger.kind == PATCH and not self.trigger.has_binary_mask():
            raise InputError("attack patch masks must be binary")
        object.__setattr__(self, "pairs", pairs)

    @property
    def sources(self) -> tuple[int, ...]:
        return tuple(p.source for p in self.pairs)


A2O = "a2o"
O2O = "o2o"
A2AR = "a2ar"


def _parse_setting(setting: str) -> tuple[str, int | None]:
    s = setting.lower()
    if s in (A2O, O2O, A2AR):
        return s, None
    if "to" in s:
        left, _, right = s.partition("to")
        if left == right and left.isdigit():
            return "nton", int(left)
    raise InputError(f"unknown attack setting {setting!r}")


def build_attack_spec(setting: str, num_classes: int, trigger: TriggerSpec,
                      seed: int, poison_per_source: int = 0) -> AttackSpec:
    """Draw class pairs for a named setting.

    a2o: every class points at one random target. o2o: a single random pair.
    "NtoN" (e.g. "2to2"): N distinct random sources, each with a random
    target. a2ar: a random fixed-point-free bijection over all classes.
    """
    kind, n = _parse_setting(setting)
    if num_classes < 2:
        raise InputError("attacks need at least 2 classes")
    rng = np.random.default_rng(seed)
    if kind == A2O:
        target = int(rng.integers(0, num_classes))
        pairs = [ClassPair(s, target) for s in range(num_classes) if s != target]
    elif kind == O2O:
        source = int(rng.integers(0, num_classes))
        target = int(rng.choice([c for c in range(num_classes) if c != source]))
        pairs = [ClassPair(source, target)]
    elif kind == A2AR:
        while True:  # rejection-sample a derangement
            perm = rng.permutation(num_classes)
            if not np.any(perm == np.arange(num_classes)):
                break
        pairs = [ClassPair(s, int(perm[s])) for s in range(num_classes)]
    else:
        if n < 1 or n > num_classes:
            raise InputError(f"cannot place {n} distinct sources among {num_classes} classes")
        sources = rng.choice(num_classes, size=n, replace=False)
        pairs = []
        for s in sources:
            target = int(rng.choice([c for c in range(num_classes) if c != int(s)]))
            pairs.append(ClassPair(int(s), target))
    return AttackSpec(tuple(pairs), trigger, poison_per_source)


def poison(data: LabeledDataset, atk: AttackSpec, seed: int = 0) -> LabeledDataset:
    """Append trigger-embedded copies of source-class samples relabeled to the target.

    Copies are drawn with replacement, poison_per_source per pair; clean
    samples are untouched. Deterministic given the seed (pair order irrelevant).
    """
    if atk.trigger.input_dim != data.input_dim:
        raise InputError("trigger dimension does not match the dataset")
    for pair in atk.pairs:
        if pair.source >= data.num_classes or pair.target >= data.num_classes:
            raise InputError(f"pair {pair.astuple()} is outside the dataset's classes")
    if atk.poison_per_source == 0:
        return data
    extra_images, extra_labels = [], []
    for pair in atk.pairs:
        idx = np.flatnonzero(data.labels == pair.source)
        if idx.size == 0:
            raise InputError(f"no samples of source class {pair.source} to poison")
        rng = np.random.default_rng(np.random.SeedSequence([seed, pair.source, pair.target]))
        chosen = rng.choice(idx, size=atk.poison_per_source, replace=True)
        extra_images.append(embed_batch(data.images[chosen], atk.trigger))
        extra_labels.append(np.full(atk.poison_per_source, pair.target, dtype=np.int64))
    images = np.concatenate([data.images, *extra_images], axis=0)
    labels = np.concatenate([data.labels, *extra_labels])
    return LabeledDataset(images, labels, data.num_classes)


def attack_success_rate(model: DenseClassifier, clean_test: LabeledDataset,
                        atk: AttackSpec) -> tuple[float, dict[ClassPair, float]]:
    """Per-pair misclassification rate to the pair target under the trigger.

    Overall rate is the sample-count-weighted mean over pairs.
    """
    per_pair: dict[ClassPair, float] = {}
    hits = total = 0
    for pair in atk.pairs:
        X = clean_test.class_images(pair.source)
        if X.shape[0] == 0:
            raise InputError(f"no test samples for source class {pair.source}")
        preds = predict(model, embed_batch(X, atk.trigger))
        pair_hits = int(np.sum(preds == pair.target))
        per_pair[pair] = pair_hits / X.shape[0]
        hits += pair_hits
        total += X.shape[0]
    return hits / total, per_pair
