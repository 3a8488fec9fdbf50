"""Selection of putative backdoor class pairs from a transferability matrix.

The score of a candidate set A is the worst average mutual transferability
inside A minus the best average incoming transferability from A to any
outside pair; maximizers are found greedily from several seeds, with an
exhaustive maximizer as a validation oracle for small class counts.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, product

from .attack import ClassPair
from .errors import InputError
from .transfer import TRMatrix


@dataclass(frozen=True)
class CandidateSet:
    """Class pairs with pairwise-distinct sources, plus their score."""

    pairs: tuple[ClassPair, ...]
    objective_value: float

    def __post_init__(self):
        pairs = tuple(sorted(self.pairs))
        if len(pairs) < 2:
            raise InputError("a candidate set needs at least two pairs")
        sources = [p.source for p in pairs]
        if len(set(sources)) != len(sources):
            raise InputError("candidate pairs must have pairwise-distinct sources")
        object.__setattr__(self, "pairs", pairs)


def objective_H(tr: TRMatrix, pairs) -> float:
    """Min average mutual TR inside the set minus max average incoming TR outside."""
    inside = sorted(set(pairs))
    if len(inside) < 2:
        raise InputError("the objective needs at least two pairs")
    idx = [tr.index(p) for p in inside]
    outside = [i for i in range(len(tr.pairs)) if i not in set(idx)]
    if not outside:
        raise InputError("the objective needs at least one pair outside the set")
    values = tr.values
    k = len(idx)
    cohesion = min(
        sum(values[i, j] + values[j, i] for j in idx if j != i) / (2.0 * (k - 1))
        for i in idx)
    leakage = max(sum(values[j, o] for j in idx) / k for o in outside)
    return float(cohesion - leakage)


def _source_disjoint(pair: ClassPair, chosen) -> bool:
    return all(pair.source != other.source for other in chosen)


def _grow_greedily(tr: TRMatrix, seed_pairs: tuple[ClassPair, ClassPair],
                   max_size: int) -> list[tuple[float, tuple[ClassPair, ...]]]:
    """All (H, set) states visited while growing one seed set."""
    total = len(tr.pairs)
    chosen = sorted(seed_pairs)
    states = []
    if len(chosen) < total:
        states.append((objective_H(tr, chosen), tuple(chosen)))
    while len(chosen) < max_size:
        if len(chosen) + 1 >= total:  # growing further would leave no outside pair
            break
        candidates = [p for p in tr.pairs
                      if p not in chosen and _source_disjoint(p, chosen)]
        if not candidates:
            break
        scored = [(objective_H(tr, chosen + [p]), p) for p in candidates]
        best_h = max(h for h, _ in scored)
        best_pair = min(p for h, p in scored if h == best_h)
        chosen = sorted(chosen + [best_pair])
        states.append((best_h, tuple(chosen)))
    return states


def agglomerative_select(tr: TRMatrix, restarts: int = 5) -> CandidateSet:
    """Greedy maximization from the top source-disjoint seed entries.

    Seeds are the `restarts` largest entries T[a_i, a_j] with distinct
    sources, deduplicated as unordered sets. Each seed grows one pair at a
    time (stopping early when no source-disjoint candidate remains) and the
    best-scoring visited set wins; ties prefer smaller sets, then
    lexicographic pair order.
    """
    if restarts < 1:
        raise InputError("restarts must be at least 1")
    num_classes = 1 + max(max(p.source, p.target) for p in tr.pairs)
    entries = []
    for i, a_i in enumerate(tr.pairs):
        for j, a_j in enumerate(tr.pairs):
            if i != j and a_i.source != a_j.source:
                entries.append((-tr.values[i, j], a_i, a_j))
    if not entries:
        raise InputError("no source-disjoint pair of class pairs exists")
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    seeds: list[tuple[ClassPair, ClassPair]] = []
    seen = set()
    for _, a_i, a_j in entries:
        key = frozenset((a_i, a_j))
        if key not in seen:
            seen.add(key)
            seeds.append(tuple(sorted((a_i, a_j))))
        if len(seeds) == restarts:
            break
    best: tuple[float, int, tuple[ClassPair, ...]] | None = None
    for seed in seeds:
        for h, pairs in _grow_greedily(tr, seed, max_size=num_classes):
            key = (-h, len(pairs), pairs)
            if best is None or key < best:
                best = key
    if best is None:
        raise InputError("no valid candidate set could be scored")
    return CandidateSet(best[2], -best[0])


def exhaustive_select(tr: TRMatrix, max_classes: int = 5) -> CandidateSet:
    """Brute-force maximizer over every valid candidate set; a test oracle.

    Refuses class counts above max_classes, where enumeration blows up.
    """
    num_classes = 1 + max(max(p.source, p.target) for p in tr.pairs)
    if num_classes > max_classes:
        raise InputError(
            f"exhaustive selection is limited to {max_classes} classes, got {num_classes}")
    by_source: dict[int, list[ClassPair]] = {}
    for p in tr.pairs:
        by_source.setdefault(p.source, []).append(p)
    sources = sorted(by_source)
    total = len(tr.pairs)
    best: tuple[float, int, tuple[ClassPair, ...]] | None = None
    for size in range(2, num_classes + 1):
        for source_combo in combinations(sources, size):
            for combo in product(*(by_source[s] for s in source_combo)):
                if len(combo) >= total:
                    continue
                pairs = tuple(sorted(combo))
                key = (-objective_H(tr, pairs), len(pairs), pairs)
                if best is None or key < best:
                    best = key
    if best is None:
        raise InputError("no valid candidate set exists")
    return CandidateSet(best[2], -best[0])
