"""Affine representation of the lasso selection event and its truncation geometry.

Conditioning on (selected model, signs) confines the response to the polytope
{a1 @ y <= b1} with

    a1 = -diag(s) X_M^dagger,      b1 = -lam' diag(s) (X_M' X_M)^{-1} s,

where X_M are the (t~-projected) active columns and lam' is the penalty in
the KKT scale X_M'(y - fit) = lam' s. Along the direction eta_j of one
selected coefficient the polytope cuts out an interval [L, U]; moving the
eta-coordinate inside it never leaves the polytope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .lasso import KKT_SCALE, LassoFit, project_out


@dataclass(frozen=True)
class SelectionEvent:
    model: np.ndarray
    signs: np.ndarray
    a1: np.ndarray  # |M| x n
    b1: np.ndarray
    lam: float  # KKT-scale penalty lam' used in b1
    margin: np.ndarray  # b1 - a1 @ y at the observed response
    pinv_rows: np.ndarray  # X_M^dagger, |M| x n
    gram: np.ndarray
    active_abs_coefs: np.ndarray

    @property
    def size(self) -> int:
        return len(self.model)


@dataclass(frozen=True)
class TruncationInterval:
    lower: float
    upper: float
    eta_norm2: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise NumericalError(
                f"inverted truncation interval [{self.lower}, {self.upper}]")


def build_event(fit: LassoFit, x_tilde, t_tilde, y_tilde) -> SelectionEvent:
    """Encode the (model, signs) selection event of a solved lasso.

    The feasibility a1 @ y <= b1 must hold at the observed response; by the
    KKT conditions the achieved margin equals |beta_active| exactly, which is
    the executable check that the penalty scale is right.
    """
    if fit.active.size == 0:
        raise ValidationError("empty model has no selection event")
    if fit.lam <= 0:
        raise ValidationError("selection event undefined at λ=0")
    X = np.asarray(x_tilde, dtype=float)
    y = np.asarray(y_tilde, dtype=float).ravel()
    Xm = project_out(t_tilde, X[:, fit.active])
    gram = Xm.T @ Xm
    try:
        pinv_rows = np.linalg.solve(gram, Xm.T)
    except np.linalg.LinAlgError as e:
        raise NumericalError("active columns are collinear; selection event undefined") from e
    s = fit.signs
    lam_kkt = fit.lam / KKT_SCALE
    a1 = -s[:, None] * pinv_rows
    b1 = -lam_kkt * s * np.linalg.solve(gram, s)
    margin = b1 - a1 @ y
    active_abs = np.abs(fit.beta[fit.active])
    tol = 1e-8 * (1.0 + active_abs.max())
    if margin.min() < -tol:
        raise NumericalError(
            f"selection event infeasible at observed response (margin {margin.min():.3e}); "
            "solver and event disagree")
    return SelectionEvent(model=fit.active.copy(), signs=s.copy(), a1=a1, b1=b1,
                          lam=lam_kkt, margin=margin, pinv_rows=pinv_rows, gram=gram,
                          active_abs_coefs=active_abs)


def truncation_interval(ev: SelectionEvent, y_tilde, j: int) -> TruncationInterval:
    """Truncation interval for the j-th selected coefficient (position in M).

    With eta = (X_M^dagger)' e_j and theta = eta'y, the polytope restricted to
    the line y + (t - theta) * eta/||eta||^2 is

        L = theta + max_{k: (a1 eta)_k < 0} (b1 - a1 y)_k / alpha_k,
        U = theta + min_{k: (a1 eta)_k > 0} (b1 - a1 y)_k / alpha_k,

    alpha_k = (a1 eta)_k / ||eta||^2. Rows with (a1 eta)_k ~ 0 constrain only
    the orthogonal component and are ignored; an empty side gives +-inf.
    """
    y = np.asarray(y_tilde, dtype=float).ravel()
    if not 0 <= j < ev.size:
        raise ValidationError(f"coordinate {j} outside the selected model")
    eta = ev.pinv_rows[j]
    eta_norm2 = float(eta @ eta)
    theta = float(eta @ y)
    rho = ev.a1 @ eta
    slack = ev.b1 - ev.a1 @ y

    row_scale = np.linalg.norm(ev.a1, axis=1) * np.sqrt(eta_norm2)
    negligible = np.abs(rho) <= 1e-12 * row_scale
    alpha = rho / eta_norm2

    lower, upper = -np.inf, np.inf
    neg = (~negligible) & (alpha < 0)
    pos = (~negligible) & (alpha > 0)
    if neg.any():
        lower = theta + float((slack[neg] / alpha[neg]).max())
    if pos.any():
        upper = theta + float((slack[pos] / alpha[pos]).min())
    return TruncationInterval(lower=lower, upper=upper, eta_norm2=eta_norm2)


def diagnostics(ev: SelectionEvent | None, interval: TruncationInterval | None,
                sigma: float, n: int) -> dict:
    """Empirical checks of the asymptotic conditions; warn-only, never block.

    Reports the truncation width over sigma*||eta|| (should stay away from 0),
    the smallest active lasso coefficient scaled by sqrt(n), the model size,
    and the smallest eigenvalue of the selected design's Gram matrix over n.
    """
    if ev is None or ev.size == 0:
        return {"model_size": 0, "interval_ratio": None,
                "min_active_coef_scaled": None, "min_eigenvalue": None}
    record = {"model_size": int(ev.size)}
    if interval is None:
        record["interval_ratio"] = None
    elif np.isinf(interval.lower) or np.isinf(interval.upper):
        record["interval_ratio"] = float("inf")
    else:
        record["interval_ratio"] = float(
            (interval.upper - interval.lower) / (sigma * np.sqrt(interval.eta_norm2)))
    record["min_active_coef_scaled"] = float(ev.active_abs_coefs.min() * np.sqrt(n))
    record["min_eigenvalue"] = float(np.linalg.eigvalsh(ev.gram / n)[0])
    return record
