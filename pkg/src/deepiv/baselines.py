"""Reference estimators: linear two-stage least squares and a naive regression network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .data import Dataset, encode_design
from .errors import ConditioningError, ParameterError
from .outcome import OutcomeModel, SecondStageConfig, predict_h, train_regression


def lstsq_qr(design: np.ndarray, target: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Least squares through a QR factorisation; rank deficiency raises."""
    n, k = design.shape
    if n <= k:
        raise ParameterError(f"{n} rows for {k} regressors")
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if diag.min() <= rtol * diag.max():
        cond = np.inf if diag.min() == 0 else diag.max() / diag.min()
        raise ConditioningError("rank-deficient design", cond)
    return solve_triangular(r, q.T @ target)


@dataclass
class TwoSLSModel:
    """Coefficients ordered ``[intercept, <treatment or instruments>, covariates...]``."""

    first_stage: np.ndarray  # intercept, tau (instruments), beta_p (covariates)
    second_stage: np.ndarray  # intercept, gamma, beta_y (covariates)
    std_errors: np.ndarray  # for second_stage
    x_names: list[str]
    categories: dict

    @property
    def gamma(self) -> float:
        return float(self.second_stage[1])

    @property
    def intercept(self) -> float:
        return float(self.second_stage[0])

    @property
    def beta_y(self) -> np.ndarray:
        return self.second_stage[2:]


def _covariates(data_x, x_names, categories, n_rows: int) -> np.ndarray:
    return encode_design(np.asarray(data_x, dtype=np.float64).reshape(n_rows, len(x_names)), x_names, categories)


def fit_2sls(data: Dataset) -> TwoSLSModel:
    """OLS of ``p`` on ``(1, z, x)``, then OLS of ``y`` on ``(1, p_hat, x)``."""
    n = len(data)
    xd = _covariates(data.x, data.x_names, data.categories, len(data))
    ones = np.ones((n, 1))
    first_design = np.hstack([ones, data.z, xd])
    first = lstsq_qr(first_design, data.p)
    p_hat = first_design @ first
    second_design = np.hstack([ones, p_hat[:, None], xd])
    second = lstsq_qr(second_design, data.y)
    # residuals use the observed treatment, not its projection
    resid = data.y - np.hstack([ones, data.p[:, None], xd]) @ second
    sigma2 = resid @ resid / (n - second_design.shape[1])
    cov = sigma2 * np.linalg.inv(second_design.T @ second_design)
    return TwoSLSModel(first, second, np.sqrt(np.diag(cov)), list(data.x_names), dict(data.categories))


def fit_ols(data: Dataset) -> TwoSLSModel:
    """Naive OLS of ``y`` on ``(1, p, x)``, packaged like a 2SLS fit."""
    n = len(data)
    xd = _covariates(data.x, data.x_names, data.categories, len(data))
    design = np.hstack([np.ones((n, 1)), data.p[:, None], xd])
    coef = lstsq_qr(design, data.y)
    resid = data.y - design @ coef
    sigma2 = resid @ resid / (n - design.shape[1])
    se = np.sqrt(np.diag(sigma2 * np.linalg.inv(design.T @ design)))
    return TwoSLSModel(np.empty(0), coef, se, list(data.x_names), dict(data.categories))


def predict_2sls(model: TwoSLSModel, p, x) -> np.ndarray:
    """``intercept + gamma * p + x @ beta_y``."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    xd = _covariates(x, model.x_names, model.categories, -1 if model.x_names else len(p))
    if len(xd) == 1 and len(p) > 1:
        xd = np.repeat(xd, len(p), axis=0)
    return model.intercept + model.gamma * p + xd @ model.beta_y


FFNetModel = OutcomeModel


def fit_ffnet(data: Dataset, config: SecondStageConfig | None = None) -> FFNetModel:
    """Feed-forward regression of ``y`` on ``(p, x)`` that ignores endogeneity."""
    return train_regression(data, config)


def predict_ffnet(model: FFNetModel, p, x) -> np.ndarray:
    return predict_h(model, p, x)
