"""
Accuracy and uncertainty metrics for per-particle 3-D predictions.

Arrays are (n, d): n data points with d spatial components. Per-point
scores sum over the d components and average over the n points.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy.integrate import trapezoid
from scipy.stats import norm, spearmanr

from bliplab.inference.predict import PredictiveSummary

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8


@dataclass
class MetricReport:
    """
    Container for one evaluation.

    Attributes
    ----------
    mse, mae : float
        Errors of the predictive mean.
    nll, crps, ece, spearman : Optional[float]
        Uncertainty scores; None when the prediction has no variance.
    n : int
        Number of graphs evaluated.
    calibration_curve : Optional[List[Tuple[float, float]]]
        (p, p_obs) pairs behind ``ece``.
    """

    mse: float
    mae: float
    n: int
    nll: Optional[float] = None
    crps: Optional[float] = None
    ece: Optional[float] = None
    spearman: Optional[float] = None
    calibration_curve: Optional[List[Tuple[float, float]]] = None

    def to_dict(self) -> Dict[str, Optional[float]]:
        """Scalar metrics only."""
        return {
            "mse": self.mse,
            "mae": self.mae,
            "nll": self.nll,
            "crps": self.crps,
            "ece": self.ece,
            "spearman": self.spearman,
            "n": self.n,
        }


def _as_points(values: npt.ArrayLike) -> npt.NDArray[np.float64]:
    values = np.asarray(values, dtype=np.float64)
    return values[:, None] if values.ndim == 1 else values


def _check_pair(pred: npt.NDArray, target: npt.NDArray):
    if pred.shape != target.shape:
        raise ValueError(
            f"Prediction shape {pred.shape} does not match target shape "
            f"{target.shape}"
        )
    if pred.size == 0:
        raise ValueError("Metrics need at least one value")


def _check_var(var: npt.NDArray):
    if np.any(var <= 0):
        raise ValueError("Variances must be strictly positive")


def mse(pred: npt.ArrayLike, target: npt.ArrayLike) -> float:
    """Mean squared error over all components."""
    pred, target = _as_points(pred), _as_points(target)
    _check_pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def mae(pred: npt.ArrayLike, target: npt.ArrayLike) -> float:
    """Mean absolute error over all components."""
    pred, target = _as_points(pred), _as_points(target)
    _check_pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def gaussian_nll(
    pred: npt.ArrayLike, target: npt.ArrayLike, var: npt.ArrayLike
) -> float:
    """
    Gaussian negative log-likelihood.

    ``mean_i sum_k [(y - mu)^2 / (2 var) + log(2 pi var) / 2]``
    """
    pred, target = _as_points(pred), _as_points(target)
    _check_pair(pred, target)
    var = np.broadcast_to(_as_points(var), pred.shape)
    _check_var(var)
    per_component = (target - pred) ** 2 / (2.0 * var) + 0.5 * np.log(
        2.0 * np.pi * var
    )
    return float(np.mean(np.sum(per_component, axis=1)))


def crps_gaussian_terms(
    pred: npt.ArrayLike, target: npt.ArrayLike, var: npt.ArrayLike
) -> npt.NDArray[np.float64]:
    """
    Closed-form CRPS of ``N(mu, var)`` at every observation.

    ``sigma (z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi))`` with
    ``z = (y - mu) / sigma``.
    """
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    sigma = np.sqrt(np.asarray(var, dtype=np.float64))
    _check_var(sigma)
    z = (target - pred) / sigma
    return sigma * (
        z * (2.0 * norm.cdf(z) - 1.0)
        + 2.0 * norm.pdf(z)
        - 1.0 / np.sqrt(np.pi)
    )


def gaussian_crps(
    pred: npt.ArrayLike, target: npt.ArrayLike, var: npt.ArrayLike
) -> float:
    """Mean over points of the component-summed Gaussian CRPS."""
    pred, target = _as_points(pred), _as_points(target)
    _check_pair(pred, target)
    var = np.broadcast_to(_as_points(var), pred.shape)
    terms = crps_gaussian_terms(pred, target, var)
    return float(np.mean(np.sum(terms, axis=1)))


def ece(
    means: npt.ArrayLike,
    stds: npt.ArrayLike,
    observations: npt.ArrayLike,
    n_grid: int = 101,
) -> Tuple[float, npt.NDArray[np.float64]]:
    """
    Expected calibration error of Gaussian predictive distributions.

    For every level ``p`` of a uniform grid on [0, 1], ``p_obs`` is the
    fraction of observations at or below the ``p``-quantile of their own
    predictive distribution. The error is the trapezoidal integral of
    ``|p - p_obs|``.

    Parameters
    ----------
    means, stds, observations : npt.ArrayLike
        Same shape; flattened.
    n_grid : int
        Grid points including both endpoints, at least 11.

    Returns
    -------
    Tuple[float, npt.NDArray]
        The error and the calibration curve, shape (n_grid, 2) of
        (p, p_obs).
    """
    means = np.ravel(np.asarray(means, dtype=np.float64))
    stds = np.ravel(np.asarray(stds, dtype=np.float64))
    observations = np.ravel(np.asarray(observations, dtype=np.float64))
    if not means.shape == stds.shape == observations.shape:
        raise ValueError("means, stds and observations must match in size")
    if means.size == 0:
        raise ValueError("ece needs at least one observation")
    if n_grid < 11:
        raise ValueError(f"n_grid must be >= 11, got {n_grid}")
    if np.any(stds <= 0):
        raise ValueError("Standard deviations must be strictly positive")

    levels = np.linspace(0.0, 1.0, n_grid)
    # ppf gives -inf at p = 0 and +inf at p = 1
    quantiles = norm.ppf(levels)
    standardized = np.sort((observations - means) / stds)
    observed = (
        np.searchsorted(standardized, quantiles, side="right")
        / standardized.size
    )
    error = float(trapezoid(np.abs(levels - observed), levels))
    return error, np.column_stack([levels, observed])


def spearman(u: npt.ArrayLike, v: npt.ArrayLike) -> float:
    """
    Rank correlation with average ranks for ties.

    Raises
    ------
    ValueError
        For different lengths, fewer than two values or a constant input.
    """
    u = np.ravel(np.asarray(u, dtype=np.float64))
    v = np.ravel(np.asarray(v, dtype=np.float64))
    if u.shape != v.shape:
        raise ValueError(f"Lengths differ: {u.size} and {v.size}")
    if u.size < 2:
        raise ValueError("spearman needs at least two values")
    if np.all(u == u[0]) or np.all(v == v[0]):
        raise ValueError("spearman is undefined for a constant input")
    return float(spearmanr(u, v)[0])


def uq_aggregates_per_structure(
    per_atom_means: npt.ArrayLike,
    per_atom_vars: npt.ArrayLike,
    structure_index: npt.ArrayLike,
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """
    Per-structure mean prediction and uncertainty.

    Parameters
    ----------
    per_atom_means : npt.ArrayLike
        Shape (n_atoms, d).
    per_atom_vars : npt.ArrayLike
        Non-negative, shape (n_atoms, d).
    structure_index : npt.ArrayLike
        Structure id of every atom, 0 .. n_structures - 1.

    Returns
    -------
    Tuple[npt.NDArray, npt.NDArray]
        ``mean_bar`` of shape (n_structures, d), the mean over atoms, and
        ``sigma_bar`` of shape (n_structures,), the square root of the
        mean over atoms of each atom's variance norm (mean over d).
    """
    means = _as_points(per_atom_means)
    variances = _as_points(per_atom_vars)
    index = np.asarray(structure_index, dtype=np.int64)
    if means.shape != variances.shape or index.shape != (means.shape[0],):
        raise ValueError(
            f"Inconsistent shapes: means {means.shape}, vars "
            f"{variances.shape}, index {index.shape}"
        )
    if means.shape[0] == 0:
        raise ValueError("Cannot aggregate an empty structure")
    if np.any(variances < 0):
        raise ValueError("Variances must be non-negative")

    n_structures = int(index.max()) + 1
    counts = np.bincount(index, minlength=n_structures).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("Every structure needs at least one atom")
    mean_bar = np.zeros((n_structures, means.shape[1]))
    np.add.at(mean_bar, index, means)
    mean_bar /= counts[:, None]
    variance_norm = np.bincount(
        index, weights=variances.mean(axis=1), minlength=n_structures
    )
    sigma_bar = np.sqrt(variance_norm / counts)
    return mean_bar, sigma_bar


def evaluate_predictions(
    summary: PredictiveSummary,
    targets: npt.ArrayLike,
    structure_index: npt.ArrayLike,
    n_grid: int = 101,
) -> MetricReport:
    """
    All metrics of one prediction.

    MSE and MAE use the per-particle means. NLL and CRPS use the total
    variance plus a floor of 1e-8. ECE compares per-structure mean
    positions against ``sigma_bar``, and Spearman correlates
    ``sigma_bar^2`` with the per-structure mean squared error.
    """
    targets = _as_points(targets)
    index = np.asarray(structure_index, dtype=np.int64)
    n_graphs = int(index.max()) + 1 if index.size else 0
    report = MetricReport(
        mse=mse(summary.mean, targets),
        mae=mae(summary.mean, targets),
        n=n_graphs,
    )
    if not summary.has_variance:
        return report

    var = summary.total_var + VARIANCE_FLOOR
    report.nll = gaussian_nll(summary.mean, targets, var)
    report.crps = gaussian_crps(summary.mean, targets, var)

    mean_bar, sigma_bar = uq_aggregates_per_structure(summary.mean, var, index)
    target_bar, _ = uq_aggregates_per_structure(
        targets, np.zeros_like(targets), index
    )
    report.ece, curve = ece(
        mean_bar,
        np.repeat(sigma_bar[:, None], mean_bar.shape[1], axis=1),
        target_bar,
        n_grid,
    )
    report.calibration_curve = [(float(p), float(q)) for p, q in curve]

    squared_error = np.mean((summary.mean - targets) ** 2, axis=1)
    error_bar = np.bincount(index, weights=squared_error) / np.bincount(
        index
    )
    try:
        report.spearman = spearman(sigma_bar**2, error_bar)
    except ValueError as error:
        logger.warning("Spearman correlation not reported: %s", error)
    return report


def write_report(
    report: MetricReport, directory: Union[str, Path], stem: str = "metrics"
) -> Dict[str, Path]:
    """
    Write ``<stem>.json``, ``<stem>.csv`` and, when available,
    ``<stem>_calibration.csv`` with columns p and p_obs.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": directory / f"{stem}.json",
        "csv": directory / f"{stem}.csv",
    }
    with open(paths["json"], "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    pd.DataFrame([report.to_dict()]).to_csv(paths["csv"], index=False)
    if report.calibration_curve is not None:
        paths["calibration"] = directory / f"{stem}_calibration.csv"
        pd.DataFrame(report.calibration_curve, columns=["p", "p_obs"]).to_csv(
            paths["calibration"], index=False
        )
    return paths
