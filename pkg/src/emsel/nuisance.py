"""Nuisance regressions mu_t(x) = E[T|X] and mu_y(x) = E[Y|X].

Learners are pluggable; the random forest is the workhorse, with a
cross-validated lasso and the zero/oracle reductions for linear-model and
simulation work. Cross-fitting (two seeded halves) is available but off by
default, matching the empirical finding that it hurts forest-based plug-ins.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from sklearn.ensemble import RandomForestRegressor

from .errors import ValidationError
from .lasso import _cd_gram

NUISANCE_METHODS = ("random_forest", "lasso_cv", "oracle", "zero")


@dataclass(frozen=True)
class NuisanceFit:
    """Per-observation fitted values of both nuisance regressions."""

    mu_t_hat: np.ndarray
    mu_y_hat: np.ndarray
    method: str
    cross_fit: str = "none"

    def __post_init__(self):
        mt = np.asarray(self.mu_t_hat, dtype=float).ravel()
        my = np.asarray(self.mu_y_hat, dtype=float).ravel()
        if mt.shape != my.shape:
            raise ValidationError("nuisance vectors must have equal length")
        if not (np.isfinite(mt).all() and np.isfinite(my).all()):
            raise ValidationError("non-finite nuisance fitted values")
        if self.method == "zero" and (np.any(mt != 0) or np.any(my != 0)):
            raise ValidationError("method=zero requires identically zero fitted values")
        object.__setattr__(self, "mu_t_hat", mt)
        object.__setattr__(self, "mu_y_hat", my)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    min_node_size: int = 20
    mtry: int | None = None  # default max(p//3, 1)
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")
        if self.min_node_size < 1:
            raise ValidationError("min_node_size must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValidationError("mtry must be >= 1")


class ForestPredictor:
    """Immutable regression-forest predictor; reentrant."""

    def __init__(self, model: RandomForestRegressor, constant: float | None = None):
        self._model = model
        self._constant = constant

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self._constant is not None:
            return np.full(x.shape[0], self._constant)
        return self._model.predict(x)

    @property
    def oob_predictions(self) -> np.ndarray | None:
        return getattr(self._model, "oob_prediction_", None)


def fit_random_forest(features, targets, params: ForestParams) -> ForestPredictor:
    """Train a regression forest (CART variance-reduction splits).

    Deterministic given params.seed. In-bag predictions are the average of
    the per-tree leaf means. Degenerate (zero-variance) targets yield a
    constant predictor with a warning.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    z = np.asarray(targets, dtype=float).ravel()
    n, p = X.shape
    if len(z) != n:
        raise ValidationError("targets length must match feature rows")
    if n < 2 * params.min_node_size:
        raise ValidationError(f"need n >= 2*min_node_size = {2 * params.min_node_size}, got n={n}")
    if params.mtry is not None and params.mtry > p:
        raise ValidationError("mtry cannot exceed the number of features")
    if np.ptp(z) == 0.0:
        warnings.warn("degenerate targets (zero variance); returning constant predictor")
        return ForestPredictor(None, constant=float(z[0]))
    mtry = params.mtry if params.mtry is not None else max(p // 3, 1)
    model = RandomForestRegressor(
        n_estimators=params.n_trees,
        min_samples_leaf=params.min_node_size,
        max_features=mtry,
        bootstrap=params.bootstrap,
        oob_score=params.bootstrap,
        random_state=int(params.seed) % (2 ** 31),
        n_jobs=1,
    )
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Some inputs do not have OOB scores")
        model.fit(X, z)
    return ForestPredictor(model)


class LassoCVPredictor:
    def __init__(self, beta: np.ndarray, intercept: float, lam: float):
        self.beta = beta
        self.intercept = intercept
        self.lam = lam

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.intercept + x @ self.beta


def fit_lasso_cv(features, targets, k_folds: int = 10, lambda_grid_size: int = 100,
                 seed: int = 0) -> LassoCVPredictor:
    """Lasso with k-fold cross validation over a log-spaced lambda grid.

    The grid runs from lambda_max = 2*max_j |X_j'(y - ybar)| (the smallest
    penalty with an all-zero solution in the unscaled objective) down three
    decades; the winner is refit on the full data.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    n, p = X.shape
    if k_folds < 2:
        raise ValidationError("k_folds must be >= 2")
    if n < k_folds:
        raise ValidationError("need n >= k_folds")

    xbar = X.mean(axis=0)
    ybar = float(y.mean())
    Xc = X - xbar
    yc = y - ybar
    lam_max = 2.0 * float(np.abs(Xc.T @ yc).max(initial=0.0))
    if lam_max <= 0.0:
        return LassoCVPredictor(np.zeros(p), ybar, 0.0)
    grid = lam_max * np.logspace(0, -3, lambda_grid_size)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xCF]))
    fold_of = rng.permuted(np.arange(n) % k_folds)
    cv_mse = np.zeros(lambda_grid_size)
    for k in range(k_folds):
        val = fold_of == k
        Xtr, ytr = Xc[~val], yc[~val]
        G = Xtr.T @ Xtr
        q = Xtr.T @ ytr
        cn = np.diag(G).copy()
        beta = None
        for i, lam in enumerate(grid):
            beta, _, _ = _cd_gram(G, q, cn, lam, beta0=beta, tol_factor=1e-8,
                                  kkt_target=1e-6 * max(lam, 1.0))
            resid = yc[val] - Xc[val] @ beta
            cv_mse[i] += float(resid @ resid)
    best = int(np.argmin(cv_mse))

    G = Xc.T @ Xc
    q = Xc.T @ yc
    beta, _, _ = _cd_gram(G, q, np.diag(G).copy(), grid[best])
    intercept = ybar - float(xbar @ beta)
    return LassoCVPredictor(beta, intercept, float(grid[best]))


class ForestLearner:
    name = "random_forest"

    def __init__(self, params: ForestParams | None = None):
        self.params = params or ForestParams()

    def fit(self, features, targets, seed: int):
        return fit_random_forest(features, targets, replace(self.params, seed=seed))


class LassoCVLearner:
    name = "lasso_cv"

    def __init__(self, k_folds: int = 10, lambda_grid_size: int = 100):
        self.k_folds = k_folds
        self.lambda_grid_size = lambda_grid_size

    def fit(self, features, targets, seed: int):
        return fit_lasso_cv(features, targets, self.k_folds, self.lambda_grid_size, seed)


class OracleNuisance:
    """Known nuisance values (simulation truth); cross_fit passes them through."""

    name = "oracle"

    def __init__(self, mu_t_values, mu_y_values):
        self.mu_t_values = np.asarray(mu_t_values, dtype=float).ravel()
        self.mu_y_values = np.asarray(mu_y_values, dtype=float).ravel()


def _derived_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1)[0] % (2 ** 31))


def cross_fit(d, learner, mode: str = "none", seed: int = 0) -> NuisanceFit:
    """Fit both nuisance regressions, optionally with two-fold cross-fitting.

    Under two_fold, observation i's fitted values come from the model trained
    on the complementary seeded random half.
    """
    if isinstance(learner, OracleNuisance):
        return NuisanceFit(learner.mu_t_values, learner.mu_y_values, method="oracle",
                           cross_fit="none")
    if mode not in ("none", "two_fold"):
        raise ValidationError(f"unknown cross-fit mode {mode!r}")
    n = d.n
    if mode == "none":
        mu_t = learner.fit(d.x, d.t, _derived_seed(seed, 1)).predict(d.x)
        mu_y = learner.fit(d.x, d.y, _derived_seed(seed, 2)).predict(d.x)
        return NuisanceFit(mu_t, mu_y, method=learner.name, cross_fit="none")
    if n < 4:
        raise ValidationError("two_fold cross-fitting needs n >= 4")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x2F]))
    perm = rng.permutation(n)
    halves = (perm[: n // 2], perm[n // 2:])
    mu_t = np.empty(n)
    mu_y = np.empty(n)
    for k, fold in enumerate(halves):
        other = halves[1 - k]
        mu_t[fold] = learner.fit(d.x[other], d.t[other], _derived_seed(seed, 10 + k)).predict(d.x[fold])
        mu_y[fold] = learner.fit(d.x[other], d.y[other], _derived_seed(seed, 20 + k)).predict(d.x[fold])
    return NuisanceFit(mu_t, mu_y, method=learner.name, cross_fit=f"two_fold(seed={seed})")


def zero_nuisance(n: int) -> NuisanceFit:
    """The linear-model reduction mu_t = mu_y = 0."""
    return NuisanceFit(np.zeros(n), np.zeros(n), method="zero", cross_fit="none")


def estimate_nuisance(d, method: str, cross_fit_mode: str = "none", seed: int = 0,
                      forest_params: ForestParams | None = None,
                      oracle: OracleNuisance | None = None,
                      lasso_cv_folds: int = 10) -> NuisanceFit:
    """Dispatch to the requested nuisance method."""
    if method in ("rf", "random_forest"):
        return cross_fit(d, ForestLearner(forest_params), cross_fit_mode, seed)
    if method in ("lasso", "lasso_cv"):
        return cross_fit(d, LassoCVLearner(k_folds=lasso_cv_folds), cross_fit_mode, seed)
    if method == "zero":
        return zero_nuisance(d.n)
    if method == "oracle":
        if oracle is None:
            raise ValidationError("oracle nuisance requires known values")
        return cross_fit(d, oracle, cross_fit_mode, seed)
    raise ValidationError(f"unknown nuisance method {method!r}")


def nuisance_bias(nf: NuisanceFit, mu_t_true) -> float:
    """Signed mean error of the treatment model (Table-1 'bias' column)."""
    return float(np.mean(nf.mu_t_hat - np.asarray(mu_t_true, dtype=float).ravel()))
