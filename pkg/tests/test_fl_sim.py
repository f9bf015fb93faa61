import asyncio
import os
from dataclasses import replace

import numpy as np
import pytest

import datasets
import fl_sim
from compressor import ResidualState, sparsify_with_feedback
from config import config
from fl_sim import AdamState, MlpModel, RoundConfig
from quantizer import CodebookCache


def _train(cfg, data, cache, rounds=None):
    train, test = data
    state = fl_sim.setup_simulation(cfg, train, test, cache)
    history = asyncio.run(fl_sim.run_training(state, rounds))
    return state, history


def test_model_parameter_count():
    assert MlpModel((784, 20, 10)).num_params == 15910
    assert MlpModel((20, 8, 4)).num_params == 204


def test_gradient_matches_finite_differences():
    model = MlpModel((5, 4, 3))
    rng = np.random.default_rng(0)
    w = model.init_params(rng)
    X = rng.standard_normal((6, 5))
    y = rng.integers(0, 3, size=6)
    loss, grad = model.loss_and_grad(w, X, y)
    assert loss == pytest.approx(model.loss(w, X, y))

    eps = 1e-6
    numeric = np.zeros_like(w)
    for i in range(w.shape[0]):
        step = np.zeros_like(w)
        step[i] = eps
        numeric[i] = (model.loss(w + step, X, y) - model.loss(w - step, X, y)) / (2 * eps)
    assert np.allclose(grad, numeric, atol=1e-5)


def test_unpack_rejects_wrong_length():
    with pytest.raises(ValueError):
        MlpModel((5, 4, 3)).unpack(np.zeros(10))


def test_partitions_are_disjoint_and_two_class():
    labels = np.repeat(np.arange(10), 60)
    parts = fl_sim.partition_dataset(labels, K=12, count=40, classes_per_device=2, rng=np.random.default_rng(1))
    seen = np.concatenate([p.indices for p in parts])
    assert len(set(seen.tolist())) == 12 * 40
    for part in parts:
        assert part.size == 40
        assert set(labels[part.indices].tolist()) == set(part.classes)
        assert len(part.classes) == 2


def test_partition_needs_enough_samples():
    with pytest.raises(ValueError):
        fl_sim.partition_dataset(np.zeros(10, dtype=np.int64), K=3, count=4, classes_per_device=1)


def test_local_update_is_average_gradient_for_single_step():
    model = MlpModel((5, 4, 3))
    rng = np.random.default_rng(2)
    w = model.init_params(rng)
    X = rng.standard_normal((8, 5))
    y = rng.integers(0, 3, size=8)
    g = fl_sim.local_update(model, w, X, y, E=1, batch=8, lr=0.1, rng=rng)
    assert np.allclose(g, model.loss_and_grad(w, X, y)[1])


def test_global_update_sgd_and_adam():
    w = np.ones(3)
    g = np.array([1.0, -2.0, 0.0])
    assert np.allclose(fl_sim.global_update(w, g, 0.5), [0.5, 2.0, 1.0])

    adam = AdamState()
    stepped = fl_sim.global_update(w, g, 0.1, adam)
    # На первом шаге ADAM двигает каждую ненулевую координату ровно на lr.
    assert np.allclose(stepped, [0.9, 1.1, 1.0], atol=1e-6)
    assert adam.step == 1


def test_round_config_validation():
    with pytest.raises(ValueError):
        RoundConfig(K=0)
    with pytest.raises(ValueError):
        RoundConfig(algorithm="omp")
    with pytest.raises(ValueError):
        RoundConfig(capacity_set=(0.1, -0.1))


def test_uncompressed_training_reduces_loss(tiny_data, tiny_round, memory_cache):
    cfg = replace(tiny_round, compression=False, global_lr=0.5, T=15)
    _, history = _train(cfg, tiny_data, memory_cache)
    assert len(history) == 15
    assert history[-1].train_loss < history[0].train_loss
    assert history[0].bits_per_entry == 32.0


def test_error_feedback_identity_holds_every_round(tiny_data, tiny_round, memory_cache):
    _, history = _train(replace(tiny_round, T=30), tiny_data, memory_cache)
    assert len(history) == 30
    assert sum(m.feedback_violations for m in history) == 0


def test_device_bits_follow_payload_formula(tiny_data, tiny_round, codebook_cache):
    state, history = _train(tiny_round, tiny_data, codebook_cache)
    assert os.listdir(codebook_cache.directory)
    for metrics in history:
        assert metrics.capacity_violations == 0
        for k, bits in enumerate(metrics.device_bits):
            rows = [s for s in metrics.selections if s.device == k]
            assert len(rows) == tiny_round.B
            expected = sum((s.M // s.L) * (s.shape_bits + s.gain_bits) + 32 for s in rows)
            assert bits == expected
            assert bits <= tiny_round.capacity * state.dim + 32 * tiny_round.B
        assert all(s.M % s.L == 0 and s.L == 4 for s in metrics.selections)
        assert len(metrics.recoveries) >= tiny_round.B


def test_lossless_compression_matches_plain_training(tiny_data, tiny_round, memory_cache):
    plain, _ = _train(replace(tiny_round, compression=False), tiny_data, memory_cache)
    lossless_cfg = replace(tiny_round, quantize=False, fixed_ratio=1.0, fixed_sparsity=102, algorithm="oracle")
    lossless, history = _train(lossless_cfg, tiny_data, memory_cache)
    assert lossless.block_len == 102
    assert np.allclose(lossless.weights, plain.weights, atol=1e-6, rtol=0)
    assert all(m.mean_block_nmse < 1e-12 for m in history)


def test_runs_are_deterministic(tiny_data, tiny_round, memory_cache):
    first, one = _train(tiny_round, tiny_data, memory_cache, rounds=2)
    second, two = _train(tiny_round, tiny_data, memory_cache, rounds=2)
    assert np.array_equal(first.weights, second.weights)
    assert [m.train_loss for m in one] == [m.train_loss for m in two]
    assert [s.R for s in one[1].selections] == [s.R for s in two[1].selections]


def test_gamp_rounds_complete(tiny_data, tiny_round, memory_cache):
    _, history = _train(replace(tiny_round, algorithm="gamp", T=2), tiny_data, memory_cache)
    assert all(np.isfinite(m.train_loss) for m in history)
    assert all(r.algorithm == "gamp" for m in history for r in m.recoveries)


def test_synthetic_workload(memory_cache):
    cfg = RoundConfig(K=3, T=2, B=3, cap=2, capacity=0.3, synthetic_dim=600, fixed_subvector_dim=4, seed=5)
    state = fl_sim.setup_synthetic(cfg, memory_cache)
    assert state.block_len == 200
    history = asyncio.run(fl_sim.run_training(state))
    assert len(history) == 2
    assert np.isnan(history[0].train_loss)
    assert history[-1].feedback_violations == 0
    assert state.last_estimate.shape == (600,)


def test_synthetic_update_is_reproducible():
    cfg = RoundConfig(synthetic_dim=500, synthetic_rate=0.1, seed=2)
    a = fl_sim.synthetic_update(cfg, 3, 1)
    assert np.array_equal(a, fl_sim.synthetic_update(cfg, 3, 1))
    assert not np.array_equal(a, fl_sim.synthetic_update(cfg, 3, 2))
    assert 0 < np.count_nonzero(a) < 500


def test_capacity_set_draws_per_device(memory_cache):
    cfg = RoundConfig(K=8, capacity_set=(0.1, 0.3), synthetic_dim=100, B=1, seed=1)
    state = fl_sim.setup_synthetic(cfg, memory_cache)
    assert set(state.capacities.tolist()) <= {0.1, 0.3}


def test_feedback_check_uses_transmitted_block():
    rng = np.random.default_rng(4)
    g = rng.standard_normal(50)
    residual = ResidualState(0.01 * rng.standard_normal(50))
    g_tilde, new_residual = sparsify_with_feedback(g, residual, 5)
    assert fl_sim.feedback_holds(g, residual, g_tilde, new_residual, 5)

    shifted = g_tilde.copy()
    shifted[np.flatnonzero(shifted)[0]] += 1e-12
    assert not fl_sim.feedback_holds(g, residual, shifted, new_residual, 5)
    assert not fl_sim.feedback_holds(g, residual, g_tilde, new_residual, 4)


def test_equal_batches_give_uniform_weights(tiny_data, tiny_round, memory_cache):
    train, test = tiny_data
    state = fl_sim.setup_simulation(tiny_round, train, test, memory_cache)
    weights = fl_sim.device_weights(state)
    assert np.allclose(weights, 1.0 / tiny_round.K, rtol=0, atol=1e-15)
    assert weights.sum() == pytest.approx(1.0, abs=1e-15)


def test_default_step_policy_is_niht():
    assert RoundConfig().step_policy == "niht"
    assert RoundConfig(step_policy="fixed").step_policy == "fixed"
    with pytest.raises(ValueError):
        RoundConfig(step_policy="normalized")


@pytest.fixture(scope="module")
def mnist():
    try:
        return datasets.load_mnist(config.data_dir)
    except FileNotFoundError:
        pytest.skip(f"MNIST IDX files not found in {config.data_dir}")


@pytest.fixture(scope="module")
def shared_cache():
    return CodebookCache(None, seed=0)


def _final_accuracy(cfg, data, cache):
    _, history = _train(cfg, data, cache)
    return history[-1].test_acc, history


def _moving_average(values, window=5):
    return np.convolve(values, np.ones(window) / window, mode="valid")


@pytest.mark.slow
def test_mnist_compressed_accuracy_close_to_baseline(mnist, shared_cache):
    gaps = []
    for seed in range(3):
        compressed, history = _final_accuracy(RoundConfig(seed=seed), mnist, shared_cache)
        baseline, _ = _final_accuracy(RoundConfig(seed=seed, compression=False), mnist, shared_cache)
        gaps.append(baseline - compressed)
        if seed == 0:
            # Средняя по 5 раундам потеря не растёт после пятого раунда.
            averaged = _moving_average([m.train_loss for m in history])
            assert np.all(np.diff(averaged) <= 0)
    assert np.mean(gaps) <= 0.05


@pytest.mark.slow
def test_mnist_ratio_selection_beats_worst_fixed_ratio(mnist, shared_cache):
    base = RoundConfig(capacity=0.07)
    selected = []
    fixed = {R: [] for R in base.candidates}
    for seed in range(3):
        selected.append(_final_accuracy(replace(base, seed=seed), mnist, shared_cache)[0])
        for R in fixed:
            fixed[R].append(_final_accuracy(replace(base, seed=seed, fixed_ratio=R), mnist, shared_cache)[0])
    worst = min(np.mean(values) for values in fixed.values())
    assert np.mean(selected) >= worst
