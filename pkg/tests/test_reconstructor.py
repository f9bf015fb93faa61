import numpy as np
import pytest

import compressor
import quantizer
import reconstructor
from compressor import BlockUpdate, CompressionParams, ProjectionBank, ResidualState
from experiment import make_recovery_trial, support_recovered
from param_opt import CandidateRatios, SubvectorPolicy, max_sparsity
from quantizer import CodebookCache
from reconstructor import DeviceBoundTerm, DeviceContribution, RecoveryError


def _sparse(rng, N, k):
    x = np.zeros(N)
    x[rng.choice(N, size=k, replace=False)] = rng.standard_normal(k)
    return x


def test_groups_follow_ratio_buckets():
    plan = reconstructor.assign_groups({0: 1.5, 1: 2.0, 2: 1.5, 3: 1.5, 4: 2.0}, cap=2)
    assert plan.groups == ((0, 2), (3,), (1, 4))
    assert plan.ratios == (1.5, 1.5, 2.0)
    assert plan.G == 3


def test_every_device_lands_in_exactly_one_group():
    rng = np.random.default_rng(0)
    ratios = {k: float(rng.choice([1.5, 2.0, 2.5])) for k in range(23)}
    plan = reconstructor.assign_groups(ratios, cap=3)
    members = sorted(k for group in plan.groups for k in group)
    assert members == list(range(23))
    assert all(1 <= len(group) <= 3 for group in plan.groups)
    for group, ratio in zip(plan.groups, plan.ratios):
        assert all(ratios[k] == ratio for k in group)


def test_oracle_least_squares_is_exact_without_noise():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((60, 120))
    x = _sparse(rng, 120, 10)
    estimate = reconstructor.oracle_ls_recover(A, A @ x, np.flatnonzero(x))
    assert np.allclose(estimate, x, atol=1e-8)


def test_oracle_rejects_oversized_support():
    A = np.random.default_rng(2).standard_normal((5, 20))
    with pytest.raises(RecoveryError):
        reconstructor.oracle_ls_recover(A, np.ones(5), range(6))


def test_iht_recovers_sparse_signal():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((128, 256))
    x = _sparse(rng, 256, 8)
    result = reconstructor.iht_recover(A, A @ x, 8)
    assert result.algorithm == "iht"
    assert np.allclose(result.estimate, x, atol=1e-6)
    assert support_recovered(result.estimate, np.flatnonzero(x))


def test_iht_fixed_step_keeps_budget():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((64, 128))
    x = _sparse(rng, 128, 5)
    result = reconstructor.iht_recover(A, A @ x, 5, iters=100, step="fixed")
    assert np.count_nonzero(result.estimate) <= 5
    assert 1 <= result.iterations <= 100


def test_iht_on_silent_group():
    result = reconstructor.iht_recover(np.ones((4, 8)), np.zeros(4), 2)
    assert not np.any(result.estimate)
    assert result.converged


def test_iht_rejects_bad_budget():
    with pytest.raises(ValueError):
        reconstructor.iht_recover(np.ones((4, 8)), np.ones(4), 5)
    with pytest.raises(ValueError):
        reconstructor.iht_recover(np.ones((4, 8)), np.ones(4), 2, step="bogus")


def test_gamp_recovers_sparse_signal():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((120, 200))
    x = _sparse(rng, 200, 6)
    result = reconstructor.gamp_recover(A, A @ x, sparsity_rate=6 / 200, noise_var=0.0, iters=100)
    err = result.estimate - x
    assert float(err @ err) / float(x @ x) < 0.1
    assert result.algorithm == "gamp"


def test_spectral_norm_matches_svd():
    A = np.random.default_rng(6).standard_normal((30, 50))
    expected = np.linalg.svd(A, compute_uv=False)[0] ** 2
    assert reconstructor.spectral_norm_sq(A, iters=500) == pytest.approx(expected, rel=1e-4)


def test_oracle_dispatch_needs_support():
    observation = reconstructor.AggregatedObservation(np.ones(3), np.ones((3, 6)), 0.0)
    with pytest.raises(RecoveryError):
        reconstructor.recover(observation, "oracle")
    with pytest.raises(ValueError):
        reconstructor.recover(observation, "lasso")


def _lossless_contribution(device, g, weight, N=64, seed=3):
    params = CompressionParams.build(N, 0.1, 2.0, N, 1, 0, 0, quantize=False)
    payload, _, _ = compressor.compress_block(BlockUpdate(1, 0, g), ResidualState.zeros(N), params, None, seed)
    return DeviceContribution(device, payload, params, weight)


def test_aggregation_weights_decoded_projections():
    rng = np.random.default_rng(7)
    g1, g2 = rng.standard_normal(64), rng.standard_normal(64)
    first = _lossless_contribution(0, g1, 0.25)
    second = _lossless_contribution(1, g2, 0.75)
    silent = _lossless_contribution(2, np.zeros(64), 0.5)
    A = compressor.projection_rows(3, first.params.M, 64)

    observation = reconstructor.aggregate_group([first, second, silent], A, cap=3)
    assert np.allclose(observation.y, A @ (0.25 * g1 + 0.75 * g2), rtol=1e-9, atol=1e-9)
    assert observation.devices == (0, 1, 2)
    assert observation.noise_energy_model == 0.0
    assert observation.conditioning >= 1.0


def test_aggregation_rejects_mixed_dimensions():
    g = np.ones(64)
    first = _lossless_contribution(0, g, 0.5)
    params = CompressionParams.build(64, 0.1, 4.0, 64, 1, 0, 0, quantize=False)
    payload, _, _ = compressor.compress_block(BlockUpdate(1, 0, g), ResidualState.zeros(64), params, None, 3)
    other = DeviceContribution(1, payload, params, 0.5)
    with pytest.raises(RecoveryError):
        reconstructor.aggregate_group([first, other], compressor.projection_rows(3, first.params.M, 64), cap=2)


def test_global_block_sums_group_estimates():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((40, 80))
    x1, x2 = _sparse(rng, 80, 4), _sparse(rng, 80, 3)
    observations = [
        reconstructor.AggregatedObservation(A @ x1, A, 0.0, sparsity=4, support_hint=np.flatnonzero(x1)),
        reconstructor.AggregatedObservation(A @ x2, A, 0.0, sparsity=3, support_hint=np.flatnonzero(x2)),
    ]
    total, results = reconstructor.reconstruct_global_block(observations, "oracle")
    assert len(results) == 2
    assert np.allclose(total, x1 + x2, atol=1e-8)


def test_error_bound_formula():
    terms = [
        DeviceBoundTerm(sparsification_error=2.0, S=10, R=2.0, alpha=0.5, weight=0.5, sigma2=1.5, L=4),
        DeviceBoundTerm(sparsification_error=1.0, S=10, R=2.0, alpha=0.0, weight=0.5, sigma2=1.5, L=4),
    ]
    quant = 2 * 10 * 2.0 * 1.5 / (100 * 4 * 0.25)
    expected = 2 * (0.25 * (2.0 + quant) + 0.25 * 1.0)
    assert reconstructor.theorem2_bound(terms, N=100, cap=2) == pytest.approx(expected)


@pytest.mark.slow
def test_iht_support_recovery_at_phase_transition():
    N, cap, R = 1024, 4, 2.0
    assert max_sparsity(N, cap, R) == 29
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(np.random.SeedSequence([2024, trial]))
        case = make_recovery_trial(N, cap, R, rng, seed=trial)
        result = reconstructor.recover(case.observation, "iht")
        hits += support_recovered(result.estimate, case.support)
    assert hits >= 95


@pytest.mark.slow
def test_error_bound_holds_with_real_quantizers():
    N, C = 1024, 0.1
    cache = CodebookCache(None, seed=0)
    candidates = CandidateRatios().values
    rng = np.random.default_rng(77)
    held = 0
    trials = 200
    for trial in range(trials):
        cap = int(rng.integers(1, 5))
        R = float(rng.choice(candidates))
        s_max = max_sparsity(N, cap, R)
        # Совокупная разреженность K′·S не меньше 32.
        low = max(-(-32 // cap), s_max // 4)
        S = int(rng.integers(low, max(low, s_max // 2) + 1))
        assert cap * S >= 32 and S <= s_max
        L, allocation = SubvectorPolicy().choose(C * R)
        params = CompressionParams.build(N, C, R, S, L, allocation.shape_bits, allocation.gain_bits)
        assert params.M >= 256
        codebooks = cache.pair(L, allocation.shape_bits, allocation.gain_bits)
        bank = ProjectionBank(trial, N)

        weights = rng.random(cap) + 0.5
        weights /= weights.sum()
        g_bar_sum = np.zeros(N)
        contributions, terms, supports = [], [], []
        for k in range(cap):
            g_bar = rng.standard_normal(N)
            payload, residual, _ = compressor.compress_block(
                BlockUpdate(1, 0, g_bar), ResidualState.zeros(N), params, codebooks, trial, bank
            )
            contributions.append(DeviceContribution(k, payload, params, float(weights[k]), codebooks))
            terms.append(
                DeviceBoundTerm(
                    float(residual.values @ residual.values), S, R, payload.alpha, float(weights[k]),
                    quantizer.shape_gain_mse_model(L, allocation.shape_bits, allocation.gain_bits), L,
                )
            )
            supports.append(np.flatnonzero(g_bar - residual.values))
            g_bar_sum += weights[k] * g_bar

        support = np.unique(np.concatenate(supports))
        observation = reconstructor.aggregate_group(contributions, bank.rows(0, params.M), cap, support)
        estimate = reconstructor.recover(observation, "oracle").estimate
        err = g_bar_sum - estimate
        held += float(err @ err) <= reconstructor.theorem2_bound(terms, N, cap)
    assert held >= 0.95 * trials


def test_iht_from_oracle_support_equals_oracle_least_squares():
    rng = np.random.default_rng(9)
    A = rng.standard_normal((80, 200))
    support = rng.choice(200, size=8, replace=False)
    x = np.zeros(200)
    x[support] = rng.choice([-1.0, 1.0], size=8) * (1.0 + np.abs(rng.standard_normal(8)))
    y = A @ x + 1e-3 * rng.standard_normal(80)
    oracle = reconstructor.oracle_ls_recover(A, y, support)
    result = reconstructor.iht_recover(A, y, 8, warm_support=support)
    assert np.allclose(result.estimate, oracle, atol=1e-10)


def test_iht_step_policy_names():
    assert reconstructor.STEP_POLICIES == ("niht", "fixed")
    with pytest.raises(ValueError):
        reconstructor.iht_recover(np.ones((4, 8)), np.ones(4), 2, step="normalized")


def test_gamp_divergence_falls_back_to_iht(monkeypatch):
    rng = np.random.default_rng(10)
    A = rng.standard_normal((60, 120))
    x = _sparse(rng, 120, 5)
    y = A @ x
    denoise = reconstructor._bg_denoise

    def exploding(*args):
        x_hat, *rest = denoise(*args)
        return (x_hat * 1e6, *rest)

    monkeypatch.setattr(reconstructor, "_bg_denoise", exploding)
    result = reconstructor.gamp_recover(A, y, sparsity_rate=5 / 120, noise_var=0.0, fallback_sparsity=5)
    assert result.fell_back
    assert result.algorithm == "gamp"
    assert result.iterations == 1
    assert np.array_equal(result.estimate, reconstructor.iht_recover(A, y, 5).estimate)


def test_oracle_error_shrinks_with_more_rows():
    rng = np.random.default_rng(11)
    N, k = 256, 10
    A_full = compressor.projection_rows(4, 256, N)
    support = rng.choice(N, size=k, replace=False)
    errors = {M: 0.0 for M in (32, 64, 128, 256)}
    for _ in range(50):
        x = np.zeros(N)
        x[support] = rng.standard_normal(k)
        noise = 0.1 * rng.standard_normal(256)
        for M in errors:
            estimate = reconstructor.oracle_ls_recover(A_full[:M], A_full[:M] @ x + noise[:M], support)
            errors[M] += float(np.sum((estimate - x) ** 2))
    values = [errors[M] for M in sorted(errors)]
    assert all(later <= earlier for earlier, later in zip(values, values[1:]))


def _quantized_group(cache, rng, cap=3, N=256, seed=5):
    allocation = quantizer.optimal_bit_allocation(4, 1.0)
    params = CompressionParams.build(N, 0.5, 2.0, 20, 4, allocation.shape_bits, allocation.gain_bits)
    codebooks = cache.pair(4, allocation.shape_bits, allocation.gain_bits)
    weights = np.full(cap, 1.0 / cap)
    contributions, truth = [], np.zeros(N)
    for k in range(cap):
        payload, _, g_tilde = compressor.compress_block(
            BlockUpdate(1, 0, rng.standard_normal(N)), ResidualState.zeros(N), params, codebooks, seed
        )
        contributions.append(DeviceContribution(k, payload, params, float(weights[k]), codebooks))
        truth += weights[k] * g_tilde
    return contributions, truth, compressor.projection_rows(seed, params.M, N)


def test_quantized_aggregation_matches_hand_decoding(memory_cache):
    contributions, _, A = _quantized_group(memory_cache, np.random.default_rng(12))
    observation = reconstructor.aggregate_group(contributions, A, cap=3)

    expected_y = np.zeros(A.shape[0])
    expected_noise = 0.0
    for item in contributions:
        shape_cb, gain_cb = item.codebooks
        decoded = quantizer.vq_decode_batch(item.payload.codes, shape_cb, gain_cb).reshape(-1)
        scale = item.weight / item.payload.alpha
        expected_y += scale * decoded
        sigma2 = quantizer.shape_gain_mse_model(item.params.L, item.params.shape_bits, item.params.gain_bits)
        expected_noise += scale**2 * (item.params.M / item.params.L) * sigma2
    assert np.allclose(observation.y, expected_y, rtol=1e-12, atol=1e-12)
    assert observation.noise_energy_model == pytest.approx(3 * expected_noise)
    assert observation.sparsity == 60


def test_quantization_noise_stays_below_model(memory_cache):
    rng = np.random.default_rng(13)
    measured = modeled = 0.0
    for trial in range(5):
        contributions, truth, A = _quantized_group(memory_cache, rng, seed=trial)
        observation = reconstructor.aggregate_group(contributions, A, cap=3)
        d = observation.y - A @ truth
        measured += float(d @ d)
        modeled += observation.noise_energy_model
    assert measured <= modeled


@pytest.mark.slow
def test_gamp_recovers_bernoulli_gaussian_signals():
    N, M, rate = 1024, 512, 0.03
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(np.random.SeedSequence([31, trial]))
        A = rng.standard_normal((M, N))
        x = rng.standard_normal(N) * (rng.random(N) < rate)
        result = reconstructor.gamp_recover(A, A @ x, sparsity_rate=rate, noise_var=0.0, iters=200)
        err = result.estimate - x
        hits += float(err @ err) < 1e-4 * float(x @ x)
    assert hits >= 90
