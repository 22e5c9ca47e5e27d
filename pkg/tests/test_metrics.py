import json

import numpy as np
import pandas as pd
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from bliplab.inference.predict import PredictiveSummary
from bliplab.metrics import (
    MetricReport,
    ece,
    evaluate_predictions,
    gaussian_crps,
    gaussian_nll,
    mae,
    mse,
    spearman,
    uq_aggregates_per_structure,
    write_report,
)


def test_mse_and_mae():
    pred = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    target = np.array([[1.0, 0.0, 0.0], [1.0, 1.0, -1.0]])
    assert mse(pred, target) == pytest.approx(5.0 / 6.0)
    assert mae(pred, target) == pytest.approx(3.0 / 6.0)


def test_error_metrics_check_shapes():
    with pytest.raises(ValueError, match="does not match"):
        mse(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="at least one"):
        mae(np.zeros((0, 3)), np.zeros((0, 3)))


def test_gaussian_nll_closed_form():
    nll = gaussian_nll(np.zeros((4, 3)), np.ones((4, 3)), np.ones((4, 3)))
    assert nll == pytest.approx(3 * (0.5 + 0.5 * np.log(2 * np.pi)))


def test_gaussian_nll_needs_positive_variance():
    with pytest.raises(ValueError, match="strictly positive"):
        gaussian_nll(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))


def test_crps_at_the_mean():
    sigma = 2.0
    crps = gaussian_crps([[0.0]], [[0.0]], [[sigma**2]])
    expected = sigma * (2 * norm.pdf(0.0) - 1 / np.sqrt(np.pi))
    assert crps == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("z", [-3.0, -1.0, 0.0, 0.5, 2.0])
@pytest.mark.parametrize("sigma", [0.1, 1.0, 5.0])
def test_crps_matches_quadrature(z, sigma):
    mu = 0.3
    y = mu + z * sigma

    def below(x):
        return norm.cdf(x, mu, sigma) ** 2

    def above(x):
        return norm.sf(x, mu, sigma) ** 2

    integral = (
        quad(below, mu - 12 * sigma, y, epsabs=1e-12, limit=200)[0]
        + quad(above, y, mu + 12 * sigma, epsabs=1e-12, limit=200)[0]
    )
    crps = gaussian_crps([[mu]], [[y]], [[sigma**2]])
    assert abs(crps - integral) < 1e-6


def test_crps_is_homogeneous():
    rng = np.random.default_rng(7)
    mu, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    var = rng.uniform(0.1, 2.0, size=(20, 3))
    base = gaussian_crps(mu, y, var)
    for scale in (0.5, 2.0, 8.0):
        scaled = gaussian_crps(scale * mu, scale * y, scale**2 * var)
        assert abs(scaled - scale * base) < 1e-12 * max(1.0, scale * base)


def test_crps_sums_components():
    one = gaussian_crps([[0.0]], [[1.0]], [[1.0]])
    three = gaussian_crps(np.zeros((1, 3)), np.ones((1, 3)), np.ones((1, 3)))
    assert three == pytest.approx(3 * one)


def test_ece_of_a_degenerate_forecast():
    error, curve = ece(np.zeros(50), np.ones(50), np.full(50, 100.0))
    assert error == pytest.approx(0.495)
    assert curve.shape == (101, 2)
    assert curve[0, 1] == 0.0
    assert curve[-1, 1] == 1.0


def test_ece_approaches_one_half_on_a_fine_grid():
    error, _ = ece(np.zeros(10), np.ones(10), np.full(10, -100.0), 1001)
    assert abs(error - 0.5) < 1e-3


def test_ece_of_calibrated_forecast_is_small():
    observations = np.random.default_rng(0).normal(size=100_000)
    error, curve = ece(np.zeros(100_000), np.ones(100_000), observations)
    assert error < 0.01
    assert np.all(np.diff(curve[:, 1]) >= 0)


def test_ece_checks_its_inputs():
    with pytest.raises(ValueError, match="n_grid"):
        ece(np.zeros(3), np.ones(3), np.zeros(3), n_grid=5)
    with pytest.raises(ValueError, match="strictly positive"):
        ece(np.zeros(3), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError, match="match in size"):
        ece(np.zeros(3), np.ones(2), np.zeros(3))


def test_spearman_monotone_and_ties():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    ranks_u = np.array([1.0, 2.5, 2.5, 4.0])
    ranks_v = np.array([1.0, 2.0, 3.0, 4.0])
    expected = np.corrcoef(ranks_u, ranks_v)[0, 1]
    assert spearman([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(expected)


def test_spearman_rejects_degenerate_input():
    with pytest.raises(ValueError, match="constant"):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError, match="at least two"):
        spearman([1], [1])
    with pytest.raises(ValueError, match="differ"):
        spearman([1, 2], [1, 2, 3])


def test_uq_aggregates():
    means = np.array([[0.0, 0.0, 0.0], [2.0, 2.0, 2.0], [5.0, 1.0, 0.0]])
    variances = np.full((3, 3), 0.25)
    mean_bar, sigma_bar = uq_aggregates_per_structure(
        means, variances, [0, 0, 1]
    )
    np.testing.assert_allclose(mean_bar, [[1.0, 1.0, 1.0], [5.0, 1.0, 0.0]])
    np.testing.assert_allclose(sigma_bar, [0.5, 0.5])


def test_uq_aggregates_check_inputs():
    with pytest.raises(ValueError, match="at least one atom"):
        uq_aggregates_per_structure(np.zeros((2, 3)), np.ones((2, 3)), [0, 2])
    with pytest.raises(ValueError, match="non-negative"):
        uq_aggregates_per_structure(np.zeros((1, 3)), -np.ones((1, 3)), [0])


def make_summary(mean, epistemic=None, aleatoric=None):
    return PredictiveSummary(mean, epistemic, aleatoric, 10)


def test_evaluate_map_prediction_has_no_uncertainty_scores():
    targets = np.ones((10, 3))
    report = evaluate_predictions(
        make_summary(np.zeros((10, 3))), targets, np.repeat([0, 1], 5)
    )
    assert report.mse == pytest.approx(1.0)
    assert report.n == 2
    assert report.nll is None
    assert report.crps is None
    assert report.ece is None
    assert report.calibration_curve is None


def test_evaluate_sampled_prediction():
    rng = np.random.default_rng(3)
    index = np.repeat(np.arange(20), 5)
    epistemic = rng.uniform(0.1, 2.0, size=(100, 3))
    targets = rng.normal(size=(100, 3))
    summary = make_summary(
        targets + rng.normal(size=(100, 3)),
        epistemic,
        np.full((100, 3), 0.01),
    )
    report = evaluate_predictions(summary, targets, index)
    var = epistemic + 0.01 + 1e-8
    assert report.n == 20
    assert report.nll == pytest.approx(
        gaussian_nll(summary.mean, targets, var)
    )
    assert report.crps == pytest.approx(
        gaussian_crps(summary.mean, targets, var)
    )
    assert 0.0 <= report.ece <= 0.5
    assert len(report.calibration_curve) == 101
    assert -1.0 <= report.spearman <= 1.0


def test_constant_uncertainty_skips_spearman():
    summary = make_summary(
        np.zeros((4, 3)), np.zeros((4, 3)), np.full((4, 3), 1.0)
    )
    report = evaluate_predictions(
        summary, np.arange(12.0).reshape(4, 3), [0, 0, 1, 1]
    )
    assert report.spearman is None
    assert report.ece is not None


def test_write_report(tmp_path):
    report = MetricReport(
        mse=0.5,
        mae=0.25,
        n=3,
        nll=1.0,
        crps=0.2,
        ece=0.1,
        spearman=0.3,
        calibration_curve=[(0.0, 0.0), (0.5, 0.4), (1.0, 1.0)],
    )
    paths = write_report(report, tmp_path / "reports", "metrics_mc")
    assert json.loads(paths["json"].read_text())["mse"] == 0.5
    table = pd.read_csv(paths["csv"])
    assert list(table.columns) == [
        "mse",
        "mae",
        "nll",
        "crps",
        "ece",
        "spearman",
        "n",
    ]
    curve = pd.read_csv(paths["calibration"])
    assert list(curve["p_obs"]) == [0.0, 0.4, 1.0]


def test_write_report_without_curve(tmp_path):
    paths = write_report(MetricReport(mse=0.5, mae=0.25, n=1), tmp_path)
    assert set(paths) == {"json", "csv"}
    assert json.loads(paths["json"].read_text())["nll"] is None


def test_spearman_only_sees_ranks():
    rng = np.random.default_rng(8)
    u = rng.normal(size=40)
    v = u + rng.normal(size=40)
    assert spearman(np.exp(u), v**3) == pytest.approx(spearman(u, v))
    assert spearman(u, -v) == pytest.approx(-spearman(u, v))


def test_ece_is_unchanged_by_a_change_of_units():
    rng = np.random.default_rng(9)
    means = rng.normal(size=300)
    stds = rng.uniform(0.5, 2.0, size=300)
    obs = means + stds * rng.standard_t(3, size=300)
    error, curve = ece(means, stds, obs)
    scaled_error, scaled_curve = ece(
        2.5 * means - 4.0, 2.5 * stds, 2.5 * obs - 4.0
    )
    assert scaled_error == pytest.approx(error, abs=1e-12)
    np.testing.assert_allclose(scaled_curve, curve, atol=1e-12)


def test_metrics_ignore_particle_and_structure_order():
    rng = np.random.default_rng(10)
    index = np.repeat(np.arange(12), 4)
    targets = rng.normal(size=(48, 3))
    summary = make_summary(
        targets + rng.normal(size=(48, 3)),
        rng.uniform(0.1, 2.0, size=(48, 3)),
        np.full((48, 3), 0.05),
    )
    rows = rng.permutation(48)
    relabel = rng.permutation(12)
    shuffled = make_summary(
        summary.mean[rows],
        summary.epistemic_var[rows],
        summary.aleatoric_var[rows],
    )

    report = evaluate_predictions(summary, targets, index)
    other = evaluate_predictions(shuffled, targets[rows], relabel[index[rows]])
    for key, value in report.to_dict().items():
        assert other.to_dict()[key] == pytest.approx(value, rel=1e-9)
