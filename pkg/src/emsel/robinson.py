"""Robinson transformation, ATE estimation, and non-selective baseline analyses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import ndtr, ndtri

from .dataset import Dataset, DesignSpec
from .errors import NumericalError, ValidationError
from .lasso import project_out
from .nuisance import NuisanceFit


@dataclass(frozen=True)
class TransformedRegression:
    """Residualized response and design.

    y_tilde = Y - mu_y_hat, t_tilde = T - mu_t_hat, and x_tilde column j is
    t_tilde * Z_j for the chosen effect-modifier columns Z. When ``centered``
    is true, x_tilde columns and y_tilde have been centered (the §-3 style
    drop-the-intercept convention) and downstream fits omit the t_tilde
    column; otherwise t_tilde is carried as an unpenalized regressor.
    """

    y_tilde: np.ndarray
    t_tilde: np.ndarray
    x_tilde: np.ndarray
    column_names: list[str]
    centered: bool = False
    column_means: np.ndarray | None = None
    y_mean: float = 0.0

    @property
    def n(self) -> int:
        return self.x_tilde.shape[0]

    @property
    def p(self) -> int:
        return self.x_tilde.shape[1]

    @property
    def unpenalized(self) -> np.ndarray | None:
        """The unpenalized column for selection/fitting (None in centered mode)."""
        return None if self.centered else self.t_tilde


@dataclass(frozen=True)
class FixedModelInference:
    """Classical Wald inference for a fixed set of columns."""

    names: list[str]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    p_values: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    sigma2_hat: float


def transform(d: Dataset, nf: NuisanceFit, spec: DesignSpec | None = None,
              center: bool = False) -> TransformedRegression:
    """Apply Robinson's transformation with plugged-in nuisance estimates."""
    if len(nf.mu_t_hat) != d.n or len(nf.mu_y_hat) != d.n:
        raise ValidationError("nuisance fit length does not match dataset")
    if spec is None:
        spec = DesignSpec.all_columns(d)
    spec.validate_against(d)
    cols = list(spec.effect_modifier_columns)

    t_tilde = d.t - nf.mu_t_hat
    y_tilde = d.y - nf.mu_y_hat
    scale = max(1.0, float(np.abs(d.t).max()))
    if float(np.abs(t_tilde).max()) <= 1e-12 * scale:
        raise NumericalError(
            "no residual treatment variation: treatment is perfectly predicted "
            "by the covariates (positivity violated)")
    x_tilde = t_tilde[:, None] * d.x[:, cols]
    names = [d.covariate_names[j] for j in cols]

    col_means = None
    y_mean = 0.0
    if center:
        col_means = x_tilde.mean(axis=0)
        x_tilde = x_tilde - col_means
        y_mean = float(y_tilde.mean())
        y_tilde = y_tilde - y_mean
    return TransformedRegression(y_tilde=y_tilde, t_tilde=t_tilde, x_tilde=x_tilde,
                                 column_names=names, centered=center,
                                 column_means=col_means, y_mean=y_mean)


def estimate_ate(tr: TransformedRegression, level: float = 0.05) -> tuple[float, tuple[float, float]]:
    """Average treatment effect from the regression of y~ on t~ alone."""
    t, y = tr.t_tilde, tr.y_tilde
    tn2 = float(t @ t)
    if tn2 <= 0:
        raise NumericalError("no residual treatment variation")
    point = float(t @ y) / tn2
    resid = y - point * t
    sigma = np.sqrt(float(resid @ resid) / (len(y) - 1))
    z = ndtri(1 - level / 2)
    half = z * sigma / np.sqrt(tn2)
    return point, (point - half, point + half)


def _wald(coefficients, cov_diag, sigma2, level):
    se = np.sqrt(sigma2 * np.maximum(cov_diag, 0.0))
    z = ndtri(1 - level / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        zstat = np.abs(coefficients) / se
    p = np.where(np.isnan(zstat), 1.0, 2 * ndtr(-zstat))
    return se, p, coefficients - z * se, coefficients + z * se


def _check_rank(design: np.ndarray, names: list[str]):
    q, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max(initial=0.0) * max(design.shape) * np.finfo(float).eps
    bad = diag <= tol
    if bad.any():
        offenders = [names[piv[k]] for k in np.flatnonzero(bad)]
        raise NumericalError(f"design is rank deficient; collinear columns: {offenders}")


def naive_linear_model(d: Dataset, level: float = 0.05) -> FixedModelInference:
    """OLS of Y on [1, X, T, T*X]; returns inference for the interaction block."""
    n, p = d.n, d.p
    design = np.column_stack([np.ones(n), d.x, d.t, d.t[:, None] * d.x])
    names = (["(intercept)"] + list(d.covariate_names) + ["(treatment)"]
             + [f"T:{c}" for c in d.covariate_names])
    _check_rank(design, names)
    coef, _, _, _ = np.linalg.lstsq(design, d.y, rcond=None)
    resid = d.y - design @ coef
    dof = n - design.shape[1]
    if dof <= 0:
        raise NumericalError("naive linear model is saturated")
    sigma2 = float(resid @ resid) / dof
    cov = np.linalg.inv(design.T @ design)
    block = slice(p + 2, 2 * p + 2)
    se, pv, lo, hi = _wald(coef[block], np.diag(cov)[block], sigma2, level)
    return FixedModelInference(names=list(d.covariate_names), coefficients=coef[block],
                               standard_errors=se, p_values=pv, ci_lower=lo, ci_upper=hi,
                               sigma2_hat=sigma2)


def fixed_model_inference(tr: TransformedRegression, model, level: float = 0.05,
                          sigma: float | None = None) -> FixedModelInference:
    """Least squares on the selected x~ columns with Theorem-2 style covariance.

    The per-coefficient variance is sigma^2 * [(X~_M' X~_M)^{-1}]_jj computed
    on the t~-projected columns (exact OLS covariance of the joint fit with
    the unpenalized column). When ``sigma`` is None it is estimated from the
    fit residuals with divisor n - |M| - 1.
    """
    model = np.asarray(model, dtype=int)
    if model.size == 0:
        raise ValidationError("fixed_model_inference needs a non-empty model")
    names = [tr.column_names[j] for j in model]
    t = tr.unpenalized
    Xm = project_out(t, tr.x_tilde[:, model])
    yp = project_out(t, tr.y_tilde)
    _check_rank(Xm, names)
    gram = Xm.T @ Xm
    coef = np.linalg.solve(gram, Xm.T @ yp)
    resid = yp - Xm @ coef
    dof = tr.n - model.size - 1
    if dof <= 0:
        raise NumericalError("selected model is saturated")
    sigma2 = sigma ** 2 if sigma is not None else float(resid @ resid) / dof
    cov_diag = np.diag(np.linalg.inv(gram))
    se, pv, lo, hi = _wald(coef, cov_diag, sigma2, level)
    return FixedModelInference(names=names, coefficients=coef, standard_errors=se,
                               p_values=pv, ci_lower=lo, ci_upper=hi, sigma2_hat=sigma2)


def univariate_screening(tr: TransformedRegression, level: float = 0.05) -> FixedModelInference:
    """One single-column fit per modifier (method 3), stacked into one report."""
    rows = [fixed_model_inference(tr, [j], level) for j in range(tr.p)]
    return FixedModelInference(
        names=[r.names[0] for r in rows],
        coefficients=np.array([r.coefficients[0] for r in rows]),
        standard_errors=np.array([r.standard_errors[0] for r in rows]),
        p_values=np.array([r.p_values[0] for r in rows]),
        ci_lower=np.array([r.ci_lower[0] for r in rows]),
        ci_upper=np.array([r.ci_upper[0] for r in rows]),
        sigma2_hat=float(np.mean([r.sigma2_hat for r in rows])))


def target_beta_star(delta_values, t, mu_t_true, x, model) -> tuple[float, np.ndarray]:
    """Weighted projection of the true effect onto a submodel.

    Solves argmin over (alpha, beta_M) of
    sum_i (t_i - mu_t(x_i))^2 (delta_i - alpha - x_{i,M}' beta_M)^2,
    the selective inferential target when the truth is known.
    Returns (alpha_star, beta_star).
    """
    delta = np.asarray(delta_values, dtype=float).ravel()
    w = (np.asarray(t, dtype=float).ravel() - np.asarray(mu_t_true, dtype=float).ravel()) ** 2
    model = np.asarray(model, dtype=int)
    x = np.asarray(x, dtype=float)
    design = np.column_stack([np.ones(len(delta)), x[:, model]]) if model.size else np.ones((len(delta), 1))
    wd = design * w[:, None]
    gram = design.T @ wd
    try:
        theta = np.linalg.solve(gram, wd.T @ delta)
    except np.linalg.LinAlgError as e:
        raise NumericalError("singular weighted Gram matrix in target projection") from e
    return float(theta[0]), theta[1:]
