"""Training objective: tracking error, diversity penalty, weight corruption."""
import numpy as np
import pytest

from qdportfolio import diffcore as dc
from qdportfolio.generator import (
    GeneratorConfig,
    GeneratorParams,
    GeneratorState,
    init_params,
    sample_noise,
)
from qdportfolio.marketdata import sample_window, synth_dataset
from qdportfolio.objective import (
    LossConfig,
    corrupt,
    max_offdiag_corr,
    pairwise_correlations,
    portfolio_returns,
    total_loss,
    tracking_loss,
)


def make_window(n_assets=4, n_days=40, length=12, seed=2):
    panel, _ = synth_dataset(
        n_assets=n_assets, n_days=n_days, k_sparse=2, noise_scale=0.001, seed=seed
    )
    return sample_window(panel, length, np.random.default_rng(0))


def test_loss_config_defaults_and_validation():
    config = LossConfig()
    assert config.diversity_weight == 1e-6
    assert config.p_zero == 0.1
    assert config.noise_sigma == 0.01
    assert config.corruption_enabled
    with pytest.raises(ValueError):
        LossConfig(diversity_weight=-1.0)
    with pytest.raises(ValueError):
        LossConfig(p_zero=1.5)
    with pytest.raises(ValueError):
        LossConfig(noise_sigma=-0.1)


def test_portfolio_returns_oracle():
    window = make_window()
    weights = np.array(
        [[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25], [0.0, 0.0, 0.0, 1.0]]
    )
    series = portfolio_returns(weights, window)
    np.testing.assert_allclose(series.value, weights @ window.returns.T, atol=1e-15)
    with pytest.raises(dc.GraphError):
        portfolio_returns(weights[:, :3], window)
    with pytest.raises(dc.GraphError):
        portfolio_returns(weights[0], window)


def test_tracking_loss_pinned_values():
    class FakeWindow:
        returns = np.zeros((2, 1))
        index_returns = np.zeros(2)

    series = dc.as_node(np.array([[0.2, 0.0]]))
    assert tracking_loss(series, np.zeros(2)).value == pytest.approx(0.02, abs=1e-15)
    series = dc.as_node(np.full((2, 2), 0.01))
    assert tracking_loss(series, np.zeros(2)).value == pytest.approx(1e-4, abs=1e-18)
    # perfect replication has zero loss
    window = make_window()
    exact = dc.as_node(np.vstack([window.index_returns, window.index_returns]))
    assert tracking_loss(exact, window.index_returns).value == 0.0
    with pytest.raises(dc.GraphError):
        tracking_loss(exact, window.index_returns[:-1])


def test_pairwise_correlations_matches_numpy():
    rng = np.random.default_rng(6)
    series = rng.normal(size=(5, 30))
    np.testing.assert_allclose(
        pairwise_correlations(series), np.corrcoef(series), atol=1e-12
    )


def test_pairwise_correlations_variance_guard():
    rng = np.random.default_rng(1)
    series = rng.normal(size=(3, 20))
    series[1, :] = 0.123  # constant row: below the variance guard
    corr = pairwise_correlations(series)
    np.testing.assert_array_equal(corr[1, :], 0.0)
    np.testing.assert_array_equal(corr[:, 1], 0.0)
    assert corr[0, 0] == 1.0 and corr[2, 2] == 1.0


def test_max_offdiag_corr_value_and_gradient_routing():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(4, 25))
    base[1] = 0.9 * base[0] + 0.1 * rng.normal(size=25)  # make (0, 1) the argmax pair
    series = dc.Node(base, op="series")
    node = max_offdiag_corr(series)
    matrix = np.corrcoef(base)
    iu, ju = np.triu_indices(4, k=1)
    assert node.value == pytest.approx(matrix[iu, ju].max(), abs=1e-12)
    dc.backward(node)
    grad = series.grad
    # only the argmax pair participates in the subgradient
    assert np.any(grad[0] != 0.0) and np.any(grad[1] != 0.0)
    np.testing.assert_array_equal(grad[2], 0.0)
    np.testing.assert_array_equal(grad[3], 0.0)


def test_max_offdiag_corr_single_row_is_zero():
    node = max_offdiag_corr(dc.as_node(np.random.default_rng(0).normal(size=(1, 10))))
    assert node.value == 0.0


def test_corrupt_stays_on_simplex():
    rng = np.random.default_rng(11)
    weights = rng.dirichlet(np.ones(6), size=8)
    out = corrupt(dc.as_node(weights), LossConfig(p_zero=0.3, noise_sigma=0.05), rng)
    np.testing.assert_allclose(out.value.sum(axis=1), 1.0, atol=1e-12)
    assert out.value.min() >= 0.0


def test_corrupt_identity_when_disabled_knobs_are_zero():
    rng = np.random.default_rng(0)
    weights = np.random.default_rng(2).dirichlet(np.ones(5), size=4)
    out = corrupt(dc.as_node(weights), LossConfig(p_zero=0.0, noise_sigma=0.0), rng)
    np.testing.assert_allclose(out.value, weights, atol=1e-15)


def test_corrupt_restores_fully_zeroed_rows():
    rng = np.random.default_rng(0)
    weights = np.random.default_rng(3).dirichlet(np.ones(4), size=5)
    out = corrupt(dc.as_node(weights), LossConfig(p_zero=1.0, noise_sigma=0.0), rng)
    np.testing.assert_array_equal(out.value, weights)


def test_corrupt_consumes_the_stream_deterministically():
    weights = np.random.default_rng(5).dirichlet(np.ones(6), size=4)
    config = LossConfig(p_zero=0.4, noise_sigma=0.02)
    a = corrupt(dc.as_node(weights), config, np.random.default_rng(42)).value
    b = corrupt(dc.as_node(weights), config, np.random.default_rng(42)).value
    c = corrupt(dc.as_node(weights), config, np.random.default_rng(43)).value
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


TINY = GeneratorConfig(
    n_assets=4, noise_dim=4, conv_channels=2, conv_kernel=2, lstm_hidden=3, population=3, seed=0
)


def run_total(config_loss, rng=None, seed=0):
    params = init_params(TINY, np.random.default_rng(seed))
    state = GeneratorState.zeros(TINY)
    noise = sample_noise(TINY, np.random.default_rng(seed + 1))
    window = make_window(n_assets=4, length=10)
    return total_loss(params, state, noise, window, config_loss, rng=rng)


def test_total_loss_zero_weight_equals_tracking_exactly():
    result = run_total(LossConfig(diversity_weight=0.0, corruption_enabled=False))
    assert result.loss.value == result.report.tracking_mse
    assert result.report.total == result.report.tracking_mse


def test_total_loss_composition_and_monotonicity():
    small = run_total(LossConfig(diversity_weight=1e-4, corruption_enabled=False))
    large = run_total(LossConfig(diversity_weight=1e-2, corruption_enabled=False))
    assert small.report.tracking_mse == large.report.tracking_mse
    assert small.report.max_corr == large.report.max_corr
    assert small.report.max_corr > 0.0
    assert large.report.total > small.report.total
    expected = small.report.tracking_mse + 1e-4 * small.report.max_corr
    assert small.report.total == pytest.approx(expected, rel=1e-12)


def test_total_loss_requires_stream_for_corruption():
    with pytest.raises(ValueError, match="random stream"):
        run_total(LossConfig(corruption_enabled=True), rng=None)


def test_total_loss_reports_window_start():
    window = make_window(n_assets=4, length=10)
    params = init_params(TINY)
    result = total_loss(
        params,
        GeneratorState.zeros(TINY),
        sample_noise(TINY, np.random.default_rng(1)),
        window,
        LossConfig(corruption_enabled=False),
    )
    assert result.report.window_start == window.start
    assert result.new_state.iteration == 1
    assert result.population.mode == "train"


def test_total_loss_gradients_match_finite_differences():
    """Central differences over every parameter of a small end-to-end graph."""
    loss_config = LossConfig(diversity_weight=1e-3, corruption_enabled=False)
    params = init_params(TINY, np.random.default_rng(7))
    state = GeneratorState.zeros(TINY)
    noise = sample_noise(TINY, np.random.default_rng(8))
    window = make_window(n_assets=4, length=10)

    result = total_loss(params, state, noise, window, loss_config)
    dc.backward(result.loss)
    analytic = np.concatenate(
        [result.param_nodes[name].grad.ravel() for name in result.param_nodes]
    )

    flat = params.flatten()
    step = 1e-6
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        up = total_loss(
            GeneratorParams.from_flat(TINY, bumped), state, noise, window, loss_config
        ).loss.value
        bumped[i] -= 2 * step
        down = total_loss(
            GeneratorParams.from_flat(TINY, bumped), state, noise, window, loss_config
        ).loss.value
        numeric[i] = (up - down) / (2 * step)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    assert rel.max() < 1e-6
