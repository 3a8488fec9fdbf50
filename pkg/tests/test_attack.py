import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairscan import attack, nn
from pairscan.data import LabeledDataset, make_synthetic_dataset
from pairscan.errors import InputError


def centroid_model(centroids):
    """Linear net whose logits are monotone in -||x - centroid_c||^2."""
    # ||x-c||^2 = ||x||^2 - 2 c.x + ||c||^2; the ||x||^2 term is shared
    W = 2.0 * centroids
    b = -(centroids ** 2).sum(axis=1)
    return nn.DenseClassifier((nn.Layer(W, b, nn.LINEAR),))


def test_embed_zero_perturbation_is_identity():
    t = attack.TriggerSpec(attack.PERTURBATION, perturbation=np.zeros(8))
    x = np.linspace(0, 1, 8)
    assert np.array_equal(attack.embed(x, t), x)


def test_embed_zero_mask_is_identity():
    t = attack.TriggerSpec(attack.PATCH, patch=np.full(8, 0.7), mask=np.zeros(8))
    x = np.linspace(0, 1, 8)
    assert np.array_equal(attack.embed(x, t), x)


def test_embed_clips_at_one():
    v = np.zeros(8)
    v[3] = 0.3
    t = attack.TriggerSpec(attack.PERTURBATION, perturbation=v)
    x = np.full(8, 0.9)
    out = attack.embed(x, t)
    assert out[3] == 1.0
    assert np.allclose(np.delete(out, 3), 0.9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_patch_embedding_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    d = 16
    mask = (rng.random(d) < 0.4).astype(float)
    t = attack.TriggerSpec(attack.PATCH, patch=rng.random(d), mask=mask)
    x = rng.random(d)
    once = attack.embed(x, t)
    assert np.array_equal(attack.embed(once, t), once)


def test_embed_dimension_mismatch():
    t = attack.TriggerSpec(attack.PERTURBATION, perturbation=np.zeros(8))
    with pytest.raises(InputError):
        attack.embed(np.zeros(9), t)


def test_x_diagonal_trigger_shape():
    t = attack.x_diagonal_trigger(64, magnitude=0.15)
    grid = t.perturbation.reshape(8, 8)
    assert np.count_nonzero(grid) == 16
    assert np.all(grid[np.arange(8), np.arange(8)] == 0.15)
    assert np.all(grid[np.arange(8), 7 - np.arange(8)] == 0.15)


def test_random_patch_trigger_is_binary_square():
    t = attack.random_patch_trigger(64, np.random.default_rng(0), patch_side=2)
    assert t.has_binary_mask()
    assert t.mask.sum() == 4


def test_a2o_pairs_share_drawn_target():
    # seed 1 draws target class 2 for K=5
    spec = attack.build_attack_spec("a2o", 5, attack.x_diagonal_trigger(64), seed=1)
    assert {p.astuple() for p in spec.pairs} == {(0, 2), (1, 2), (3, 2), (4, 2)}


def test_a2ar_is_a_derangement():
    for seed in range(10):
        spec = attack.build_attack_spec("a2ar", 5, attack.x_diagonal_trigger(64), seed=seed)
        assert len(spec.pairs) == 5
        assert sorted(spec.sources) == list(range(5))
        assert all(p.source != p.target for p in spec.pairs)


def test_nton_counts_and_distinct_sources():
    spec = attack.build_attack_spec("3to3", 6, attack.x_diagonal_trigger(64), seed=2)
    assert len(spec.pairs) == 3
    assert len(set(spec.sources)) == 3


def test_duplicate_sources_rejected():
    t = attack.x_diagonal_trigger(64)
    with pytest.raises(InputError):
        attack.AttackSpec((attack.ClassPair(0, 1), attack.ClassPair(0, 2)), t, 10)


def test_infeasible_settings_rejected():
    t = attack.x_diagonal_trigger(64)
    with pytest.raises(InputError):
        attack.build_attack_spec("a2o", 1, t, seed=0)
    with pytest.raises(InputError):
        attack.build_attack_spec("9to9", 5, t, seed=0)
    with pytest.raises(InputError):
        attack.build_attack_spec("sideways", 5, t, seed=0)


def test_class_pair_rejects_equal_source_target():
    with pytest.raises(InputError):
        attack.ClassPair(3, 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=5))
def test_attack_spec_validation_matches_definition(raw_pairs):
    """Accepted exactly when every pair has source != target and sources are distinct."""
    trigger = attack.TriggerSpec(attack.PERTURBATION, perturbation=np.zeros(4))
    valid = (all(s != t for s, t in raw_pairs)
             and len({s for s, _ in raw_pairs}) == len(raw_pairs))
    try:
        pairs = tuple(attack.ClassPair(s, t) for s, t in raw_pairs)
        attack.AttackSpec(pairs, trigger, 0)
        built = True
    except InputError:
        built = False
    assert built == valid


def poisoning_setup():
    data = make_synthetic_dataset(5, 64, 20, 8.0, seed=3)
    pairs = (attack.ClassPair(0, 1), attack.ClassPair(2, 3))
    spec = attack.AttackSpec(pairs, attack.x_diagonal_trigger(64), poison_per_source=300)
    return data, spec


def test_poison_grows_by_pairs_times_count():
    data, spec = poisoning_setup()
    poisoned = attack.poison(data, spec, seed=0)
    assert len(poisoned) == len(data) + 600


def test_poison_zero_count_returns_data_unchanged():
    data, spec = poisoning_setup()
    spec0 = attack.AttackSpec(spec.pairs, spec.trigger, poison_per_source=0)
    assert attack.poison(data, spec0, seed=0) is data


def test_poisoned_labels_are_pair_targets():
    data, spec = poisoning_setup()
    poisoned = attack.poison(data, spec, seed=0)
    appended = poisoned.labels[len(data):]
    assert sorted(set(appended.tolist())) == [1, 3]
    assert np.sum(appended == 1) == 300 and np.sum(appended == 3) == 300


def test_poison_missing_source_class_raises():
    data, spec = poisoning_setup()
    no_class_0 = data.subset(data.labels != 0)
    with pytest.raises(InputError):
        attack.poison(no_class_0, spec, seed=0)


def test_asr_is_one_when_everything_maps_to_target():
    # bias-only model sends every input to class 1
    model = nn.DenseClassifier((nn.Layer(np.zeros((5, 64)),
                                         np.array([0.0, 9.0, 0, 0, 0]), nn.LINEAR),))
    data = make_synthetic_dataset(5, 64, 10, 8.0, seed=0)
    spec = attack.AttackSpec((attack.ClassPair(0, 1), attack.ClassPair(2, 1)),
                             attack.x_diagonal_trigger(64), 0)
    overall, per_pair = attack.attack_success_rate(model, data, spec)
    assert overall == 1.0 and set(per_pair.values()) == {1.0}


def test_asr_is_zero_when_trigger_is_ignored():
    rng = np.random.default_rng(1)
    centroids = rng.random((5, 64))
    data_blocks = [np.clip(centroids[c] + 0.01 * rng.standard_normal((10, 64)), 0, 1)
                   for c in range(5)]
    data = LabeledDataset(np.concatenate(data_blocks),
                          np.repeat(np.arange(5), 10), 5)
    model = centroid_model(centroids)
    assert nn.accuracy(model, data) == 1.0
    spec = attack.AttackSpec((attack.ClassPair(0, 1),),
                             attack.x_diagonal_trigger(64, magnitude=0.01), 0)
    overall, _ = attack.attack_success_rate(model, data, spec)
    assert overall == 0.0


def test_asr_missing_source_samples_raises():
    model = nn.DenseClassifier((nn.Layer(np.zeros((5, 64)), np.zeros(5), nn.LINEAR),))
    data = make_synthetic_dataset(5, 64, 5, 8.0, seed=0).subset(np.arange(5, 25))
    spec = attack.AttackSpec((attack.ClassPair(0, 1),), attack.x_diagonal_trigger(64), 0)
    with pytest.raises(InputError):
        attack.attack_success_rate(model, data, spec)


def test_relaxed_mask_allowed_in_trigger_but_not_attack():
    soft = attack.TriggerSpec(attack.PATCH, patch=np.full(4, 0.5), mask=np.full(4, 0.5))
    assert not soft.has_binary_mask()
    with pytest.raises(InputError):
        attack.AttackSpec((attack.ClassPair(0, 1),), soft, 0)
