"""L1-penalized selection of the effect-modification model.

The objective solved throughout is the unscaled form

    minimize_{alpha, beta}  sum_i (y_i - alpha*t_i - x_i'beta)^2 + lam * ||beta||_1

with the coefficient ``alpha`` on the treatment-residual column unpenalized.
Stationarity of this objective reads 2*X'(y - fit) = lam*s on the active set,
so the classical selection-event formulas (written for X'(y - fit) = lam*s)
must use lam/KKT_SCALE; see ``selection.build_event``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

# Ratio between this module's penalty scale and the KKT scale in which the
# selection-event offset b1 and the lambda rule are expressed.
KKT_SCALE = 2.0


@dataclass(frozen=True)
class LassoFit:
    """Solution of the penalized problem at a fixed lambda."""

    beta: np.ndarray
    alpha: float
    active: np.ndarray  # ordered indices of nonzero coefficients
    signs: np.ndarray
    lam: float
    kkt_residual: float
    n_sweeps: int


def _soft_threshold(z: float, thr: float) -> float:
    if z > thr:
        return z - thr
    if z < -thr:
        return z + thr
    return 0.0


def project_out(t: np.ndarray | None, m: np.ndarray) -> np.ndarray:
    """Residualize the columns of m against t (no-op when t is None)."""
    if t is None:
        return np.asarray(m, dtype=float)
    m = np.asarray(m, dtype=float)
    tn2 = float(t @ t)
    if tn2 <= 0.0:
        raise ValidationError("unpenalized column has zero norm")
    coef = (t @ m) / tn2
    return m - np.multiply.outer(t, coef) if m.ndim == 2 else m - t * coef


def _kkt_residual(grad2: np.ndarray, beta: np.ndarray, lam: float) -> float:
    """Max violation of 2*X'(y-fit) = lam*sign(beta) / |2*X'(y-fit)| <= lam."""
    active = beta != 0.0
    res = 0.0
    if active.any():
        res = np.abs(grad2[active] - lam * np.sign(beta[active])).max()
    if (~active).any():
        res = max(res, max(0.0, np.abs(grad2[~active]).max() - lam))
    return float(res)


def _cd_gram(G, q, col_norms2, lam, beta0=None, max_sweeps=100_000,
             tol_factor=1e-10, kkt_target=None):
    """Cyclic coordinate descent on the Gram system.

    G = X'X, q = X'y for the (already projected) penalized columns. Iterates
    until the max coefficient change falls below tol_factor*(1+max|beta|) and
    the KKT certificate reaches kkt_target.
    """
    p = len(q)
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    rcorr = q - G @ beta if beta0 is not None else q.copy()
    thr = lam / KKT_SCALE
    if kkt_target is None:
        kkt_target = 5e-9 * lam if lam > 0 else 1e-10 * (1.0 + float(np.abs(q).max(initial=0.0)))
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        delta_max = 0.0
        for j in range(p):
            cj = col_norms2[j]
            if cj <= 0.0:
                continue
            bj_old = beta[j]
            z = rcorr[j] + cj * bj_old
            bj = _soft_threshold(z, thr) / cj
            d = bj - bj_old
            if d != 0.0:
                rcorr -= G[:, j] * d
                beta[j] = bj
                ad = abs(d)
                if ad > delta_max:
                    delta_max = ad
        if delta_max < tol_factor * (1.0 + float(np.abs(beta).max(initial=0.0))):
            rcorr = q - G @ beta  # refresh accumulated drift before certifying
            kkt = _kkt_residual(2.0 * rcorr, beta, lam)
            if kkt <= kkt_target or sweeps >= max_sweeps:
                return beta, kkt, sweeps
    rcorr = q - G @ beta
    kkt = _kkt_residual(2.0 * rcorr, beta, lam)
    return beta, kkt, sweeps


def solve_lasso(x_tilde, t_tilde, y_tilde, lam, *, max_sweeps=100_000,
                tol_factor=1e-10) -> LassoFit:
    """Solve the penalized problem by cyclic coordinate descent.

    The unpenalized t_tilde column (pass None to omit it) is handled by
    partialling: it is projected out of y_tilde and every x_tilde column
    before descent, and alpha is recovered by back-substitution.
    """
    X = np.asarray(x_tilde, dtype=float)
    y = np.asarray(y_tilde, dtype=float).ravel()
    t = None if t_tilde is None else np.asarray(t_tilde, dtype=float).ravel()
    if lam < 0:
        raise ValidationError("lambda must be nonnegative")
    if not np.isfinite(X).all() or not np.isfinite(y).all():
        raise ValidationError("non-finite entries in lasso inputs")
    if t is not None and not np.isfinite(t).all():
        raise ValidationError("non-finite entries in lasso inputs")

    Xp = project_out(t, X)
    yp = project_out(t, y)
    G = Xp.T @ Xp
    q = Xp.T @ yp
    col_norms2 = np.diag(G).copy()

    beta, kkt, sweeps = _cd_gram(G, q, col_norms2, lam, max_sweeps=max_sweeps,
                                 tol_factor=tol_factor)
    kkt_limit = 1e-8 * lam if lam > 0 else 1e-8 * (1.0 + float(np.abs(q).max(initial=0.0)))
    if kkt > kkt_limit and sweeps >= max_sweeps:
        raise NumericalError(
            f"coordinate descent did not converge after {sweeps} sweeps "
            f"(kkt residual {kkt:.3e}, limit {kkt_limit:.3e})")

    if t is not None:
        tn2 = float(t @ t)
        alpha = float(t @ (y - X @ beta)) / tn2
    else:
        alpha = 0.0
    active = np.flatnonzero(beta)
    signs = np.sign(beta[active])
    return LassoFit(beta=beta, alpha=alpha, active=active, signs=signs,
                    lam=float(lam), kkt_residual=kkt, n_sweeps=sweeps)


def choose_lambda(x_tilde, sigma_hat, multiplier=1.1, n_draws=200, seed=0) -> float:
    """Monte Carlo lambda rule: multiplier * E ||X~' eps||_inf, eps ~ N(0, sigma_hat^2 I_n).

    The Gaussian max-correlation is estimated with n_draws seeded draws and
    scaled by sigma_hat afterwards, so doubling sigma_hat doubles the result
    draw-for-draw. The returned value is in the KKT scale of the selection
    event; analysis pipelines using the unscaled objective multiply by
    KKT_SCALE (see pivot.AnalysisConfig.lambda_scale).
    """
    X = np.asarray(x_tilde, dtype=float)
    if sigma_hat < 0:
        raise ValidationError("sigma_hat must be nonnegative")
    if n_draws < 1:
        raise ValidationError("n_draws must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A5]))
    n = X.shape[0]
    maxima = np.empty(n_draws)
    for i in range(n_draws):
        eps = rng.standard_normal(n)
        maxima[i] = np.abs(X.T @ eps).max()
    return float(multiplier * sigma_hat * maxima.mean())


def estimate_sigma(tr) -> float:
    """Noise scale from the unpenalized full regression of y~ on [t~, x~]."""
    X = tr.x_tilde
    n, p = X.shape
    n_params = p + (0 if tr.t_tilde is None else 1)
    if n <= n_params + (1 if tr.t_tilde is None else 0):
        raise NumericalError("full model saturated; supply --sigma")
    design = X if tr.t_tilde is None else np.column_stack([tr.t_tilde, X])
    dof = n - design.shape[1]
    if dof <= 0:
        raise NumericalError("full model saturated; supply --sigma")
    coef, _, rank, _ = np.linalg.lstsq(design, tr.y_tilde, rcond=None)
    if rank < design.shape[1]:
        raise NumericalError("full design is rank deficient; supply --sigma")
    resid = tr.y_tilde - design @ coef
    return float(np.sqrt(resid @ resid / dof))


def relaxed_fit(x_tilde, t_tilde, y_tilde, model) -> tuple[float, np.ndarray]:
    """Unpenalized least squares on the selected columns (t~ projected out).

    Returns (alpha, beta_model).
    """
    X = np.asarray(x_tilde, dtype=float)
    y = np.asarray(y_tilde, dtype=float).ravel()
    t = None if t_tilde is None else np.asarray(t_tilde, dtype=float).ravel()
    model = np.asarray(model, dtype=int)
    if model.size == 0:
        if t is None:
            return 0.0, np.zeros(0)
        return float(t @ y) / float(t @ t), np.zeros(0)
    Xm = project_out(t, X[:, model])
    yp = project_out(t, y)
    beta, _, rank, _ = np.linalg.lstsq(Xm, yp, rcond=None)
    if rank < model.size:
        raise NumericalError("selected design is rank deficient")
    if t is None:
        return 0.0, beta
    alpha = float(t @ (y - X[:, model] @ beta)) / float(t @ t)
    return alpha, beta
