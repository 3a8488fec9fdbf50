import numpy as np
import pytest

from pairscan import nn, reverse
from pairscan.data import make_synthetic_dataset
from pairscan.errors import InputError


def biased_model(num_classes, input_dim, target, strength=9.0):
    """Classifies every input to `target` regardless of content."""
    bias = np.zeros(num_classes)
    bias[target] = strength
    return nn.DenseClassifier((nn.Layer(np.zeros((num_classes, input_dim)), bias,
                                        nn.LINEAR),))


def fd_check(analytic, numeric, tol=1e-3):
    err = np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8)
    assert err < tol, f"relative error {err}"


def test_already_misclassifying_returns_zero_trigger():
    model = biased_model(4, 16, target=2)
    X = np.random.default_rng(0).uniform(0.2, 0.8, (10, 16))
    est = reverse.reverse_engineer_perturbation(model, X, 2, reverse.REConfig())
    assert est.converged and est.size == 0.0 and est.steps_used == 0
    assert np.all(est.trigger.perturbation == 0.0)


def test_perturbation_surrogate_matches_finite_differences():
    rng = np.random.default_rng(5)
    for trial in range(8):
        model = nn.init_model(3, 12, hidden=(8,), seed=trial)
        X = rng.uniform(0.3, 0.7, (6, 12))
        v = rng.uniform(-0.05, 0.05, 12)  # keeps every entry inside the clip box
        target = int(rng.integers(0, 3))
        _, grad = reverse.perturbation_surrogate(model, X, v, target)
        h = 1e-4
        numeric = np.zeros_like(v)
        for i in range(v.size):
            vp, vm = v.copy(), v.copy()
            vp[i] += h
            vm[i] -= h
            numeric[i] = (reverse.perturbation_surrogate(model, X, vp, target)[0]
                          - reverse.perturbation_surrogate(model, X, vm, target)[0]) / (2 * h)
        fd_check(grad, numeric)


def test_patch_surrogate_matches_finite_differences():
    rng = np.random.default_rng(6)
    for trial in range(5):
        model = nn.init_model(3, 10, hidden=(8,), seed=trial + 50)
        X = rng.uniform(0.2, 0.8, (5, 10))
        patch = rng.uniform(0.3, 0.7, 10)
        mask = rng.uniform(0.2, 0.8, 10)
        lam = 1e-2
        target = int(rng.integers(0, 3))
        _, grad_u, grad_m = reverse.patch_surrogate(model, X, patch, mask, target, lam)
        h = 1e-5

        def obj(u, m):
            return reverse.patch_surrogate(model, X, u, m, target, lam)[0]

        numeric_u, numeric_m = np.zeros(10), np.zeros(10)
        for i in range(10):
            up, um = patch.copy(), patch.copy()
            up[i] += h
            um[i] -= h
            numeric_u[i] = (obj(up, mask) - obj(um, mask)) / (2 * h)
            mp, mm = mask.copy(), mask.copy()
            mp[i] += h
            mm[i] -= h
            numeric_m[i] = (obj(patch, mp) - obj(patch, mm)) / (2 * h)
        fd_check(grad_u, numeric_u)
        fd_check(grad_m, numeric_m)


def test_intermediate_surrogate_matches_finite_differences():
    rng = np.random.default_rng(7)
    for trial in range(5):
        model = nn.init_model(3, 12, hidden=(9, 6), seed=trial + 80)
        split = nn.split_at(model, 1)
        X = rng.uniform(0.2, 0.8, (6, 12))
        Z = split.features(X)
        w = rng.uniform(-0.2, 0.2, Z.shape[1])
        target = int(rng.integers(0, 3))
        _, grad = reverse.intermediate_surrogate(split, Z, w, target)
        h = 1e-4
        numeric = np.zeros_like(w)
        for i in range(w.size):
            wp, wm = w.copy(), w.copy()
            wp[i] += h
            wm[i] -= h
            numeric[i] = (reverse.intermediate_surrogate(split, Z, wp, target)[0]
                          - reverse.intermediate_surrogate(split, Z, wm, target)[0]) / (2 * h)
        fd_check(grad, numeric)


def test_planted_pair_converges_small(victim_2to2, bench_cfg):
    planted = victim_2to2.spec.pairs[0]
    planted_norm = float(np.linalg.norm(victim_2to2.spec.trigger.perturbation))
    X = victim_2to2.defender_data.class_images(planted.source)[:10]
    cfg = reverse.REConfig(seed=0, learning_rate=bench_cfg.re_learning_rate)
    est = reverse.reverse_engineer_perturbation(victim_2to2.model, X, planted.target, cfg)
    assert est.converged
    assert est.size <= 3.0 * planted_norm


def test_nonconvergence_reports_flag_and_finite_size():
    model = nn.init_model(4, 16, seed=3)
    data = make_synthetic_dataset(4, 16, 30, 7.0, seed=3)
    model = nn.train(model, data, nn.TrainConfig(epochs=20, seed=3))
    X = data.class_images(0)[:10]
    cfg = reverse.REConfig(learning_rate=1e-4, max_steps=30)
    est = reverse.reverse_engineer_perturbation(model, X, 1, cfg)
    assert not est.converged
    assert est.steps_used == 30
    assert np.isfinite(est.size)


def test_rerun_same_seed_is_identical(victim_2to2, bench_cfg):
    pair = victim_2to2.spec.pairs[0]
    X = victim_2to2.defender_data.class_images(pair.source)[:20]
    cfg = reverse.REConfig(seed=5, learning_rate=0.05, max_steps=400)
    a = reverse.reverse_engineer_patch(victim_2to2.model, X, pair.target, cfg, seed=9)
    b = reverse.reverse_engineer_patch(victim_2to2.model, X, pair.target, cfg, seed=9)
    assert a.size == b.size and a.steps_used == b.steps_used
    cfg_p = reverse.REConfig(seed=5, learning_rate=0.005)
    c = reverse.reverse_engineer_perturbation(victim_2to2.model, X, pair.target, cfg_p)
    d = reverse.reverse_engineer_perturbation(victim_2to2.model, X, pair.target, cfg_p)
    assert c.size == d.size


def test_patch_best_size_non_increasing_in_steps(victim_2to2):
    pair = victim_2to2.spec.pairs[0]
    X = victim_2to2.defender_data.class_images(pair.source)[:20]
    sizes = []
    for steps in (200, 400, 800):
        cfg = reverse.REConfig(seed=5, learning_rate=0.05, max_steps=steps, restarts=2)
        est = reverse.reverse_engineer_patch(victim_2to2.model, X, pair.target, cfg, seed=9)
        sizes.append(est.size)
    assert sizes[0] >= sizes[1] >= sizes[2]


def test_patch_values_stay_in_unit_box(victim_2to2):
    pair = victim_2to2.spec.pairs[0]
    X = victim_2to2.defender_data.class_images(pair.source)[:10]
    cfg = reverse.REConfig(seed=1, learning_rate=0.5, max_steps=120, restarts=2)
    est = reverse.reverse_engineer_patch(victim_2to2.model, X, pair.target, cfg, seed=2)
    assert est.trigger.mask.min() >= 0.0 and est.trigger.mask.max() <= 1.0
    assert est.trigger.patch.min() >= 0.0 and est.trigger.patch.max() <= 1.0


def test_planted_patch_recovers_small_mask(bench_cfg):
    from pairscan import bench
    forged = bench.forge_model(
        bench.BenchConfig(trigger_kind="patch"), 1100, "2to2", with_clean_twin=False)
    pair = forged.spec.pairs[0]
    planted_l1 = float(forged.spec.trigger.mask.sum())
    X = forged.defender_data.class_images(pair.source)[:20]
    cfg = reverse.REConfig(seed=0, learning_rate=0.05)
    est = reverse.reverse_engineer_patch(forged.model, X, pair.target, cfg, seed=4)
    assert est.converged
    assert est.size <= 4.0 * planted_l1


def test_intermediate_linear_case_converges_quickly():
    # suffix is the output layer alone: boosting the target logit is linear
    model = nn.init_model(4, 16, hidden=(12, 8), seed=11)
    data = make_synthetic_dataset(4, 16, 40, 7.0, seed=11)
    model = nn.train(model, data, nn.TrainConfig(epochs=20, seed=11))
    split = nn.split_at(model, 2)
    X = data.class_images(0)[:10]
    cfg = reverse.REConfig(learning_rate=0.05, max_steps=1000)
    est = reverse.reverse_engineer_intermediate(split, X, 1, cfg)
    assert est.converged
    assert est.steps_used < 500


def test_intermediate_zero_shift_when_pi_already_met():
    # everything already goes to the target: the zero shift satisfies pi
    layers = (nn.Layer(np.eye(16), np.zeros(16), nn.RELU),
              nn.Layer(np.zeros((4, 16)), np.array([0.0, 0, 0, 9.0]), nn.LINEAR))
    model = nn.DenseClassifier(layers)
    split = nn.split_at(model, 1)
    X = np.random.default_rng(0).uniform(0.2, 0.8, (8, 16))
    est = reverse.reverse_engineer_intermediate(split, X, 3, reverse.REConfig())
    assert est.converged and est.size == 0.0
    assert np.all(est.feature_shift == 0.0)


def test_all_pairs_covers_every_ordered_pair(victim_2to2, bench_cfg):
    cfg = reverse.REConfig(seed=1100, learning_rate=bench_cfg.re_learning_rate)
    estimates = reverse.reverse_engineer_all_pairs(
        victim_2to2.model, victim_2to2.defender_data, "perturbation", cfg)
    assert len(estimates) == 20
    assert all(est.pair == pair for pair, est in estimates.items())
    sources = {p.astuple() for p in estimates}
    assert sources == {(s, t) for s in range(5) for t in range(5) if s != t}


def test_planted_sizes_below_null_sizes(victim_2to2, victim_report):
    sizes = victim_report.sizes
    planted = set(victim_2to2.spec.pairs)
    planted_z = np.median([sizes[p] for p in planted])
    null_z = np.median([z for p, z in sizes.items() if p not in planted])
    assert planted_z < null_z


def test_default_image_budgets_per_mode():
    cfg = reverse.REConfig()
    assert cfg.resolve_images_per_class("perturbation") == 10
    assert cfg.resolve_images_per_class("patch") == 20
    assert cfg.resolve_images_per_class("intermediate") == 10


def test_insufficient_clean_samples_names_the_class():
    model = biased_model(3, 16, target=0)  # classes 1, 2 never predicted correctly
    data = make_synthetic_dataset(3, 16, 12, 7.0, seed=0)
    with pytest.raises(InputError, match="class 1"):
        reverse.reverse_engineer_all_pairs(model, data, "perturbation",
                                           reverse.REConfig(max_steps=10))


def test_worker_count_does_not_change_results():
    data = make_synthetic_dataset(3, 16, 40, 7.0, seed=21)
    model = nn.train(nn.init_model(3, 16, hidden=(12,), seed=21), data,
                     nn.TrainConfig(epochs=60, seed=21))
    cfg = reverse.REConfig(seed=21, learning_rate=0.01, max_steps=200)
    serial = reverse.reverse_engineer_all_pairs(model, data, "perturbation", cfg, workers=1)
    parallel = reverse.reverse_engineer_all_pairs(model, data, "perturbation", cfg, workers=8)
    assert list(serial) == list(parallel)
    for pair in serial:
        assert serial[pair].size == parallel[pair].size
        assert serial[pair].steps_used == parallel[pair].steps_used
        assert np.array_equal(serial[pair].trigger.perturbation,
                              parallel[pair].trigger.perturbation)


def test_unknown_mode_rejected(victim_2to2):
    with pytest.raises(InputError):
        reverse.reverse_engineer_all_pairs(victim_2to2.model,
                                           victim_2to2.defender_data, "sideways")


def test_config_defaults_match_protocol():
    cfg = reverse.REConfig()
    assert cfg.pi == 0.9
    assert cfg.restarts == 5
    assert cfg.max_steps == 1000
    assert cfg.lambda_init == 1e-3
