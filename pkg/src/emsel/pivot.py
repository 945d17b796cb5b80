"""Truncated-Gaussian pivot, selective p-values/intervals, and the report pipelines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, erfc, log_ndtr

from .errors import NumericalError, ValidationError
from .lasso import KKT_SCALE, choose_lambda, estimate_sigma, relaxed_fit, solve_lasso
from .robinson import TransformedRegression, fixed_model_inference
from .selection import SelectionEvent, TruncationInterval, build_event, diagnostics, truncation_interval

_SQRT2 = math.sqrt(2.0)
# beyond this standardized magnitude erfc underflows; switch to log-space
_LOG_SPACE_CUTOFF = 30.0


def _phi(z: float) -> float:
    """Lower normal CDF, relatively accurate for z <= 0."""
    return 0.5 * erfc(-z / _SQRT2)


def _phibar(z: float) -> float:
    """Upper normal tail, relatively accurate for z >= 0."""
    return 0.5 * erfc(z / _SQRT2)


def truncated_normal_cdf(y: float, mu: float, sigma2: float,
                         l: float = -np.inf, u: float = np.inf) -> float:
    """CDF of N(mu, sigma2) truncated to [l, u], evaluated at y (clamped).

    Computed as a ratio of Gaussian CDF differences in whichever
    representation avoids cancellation: survival functions on the right
    half-line, CDFs on the left, an erf difference across zero, and
    log-CDF differences (Mills-ratio regime) once both standardized
    endpoints share a sign beyond +-30, so the ratio stays finite and
    monotone out to standardized arguments of +-40 and beyond.
    """
    if sigma2 <= 0:
        raise ValidationError("sigma2 must be positive")
    if not l < u:
        raise ValidationError(f"need l < u, got [{l}, {u}]")
    s = math.sqrt(sigma2)
    a = (l - mu) / s
    b = (u - mu) / s
    z = min(max((y - mu) / s, a), b)

    if a == -np.inf and b == np.inf:
        return _phi(z)
    if a == -np.inf:
        if b <= 0:
            return math.exp(log_ndtr(z) - log_ndtr(b))
        return _phi(z) / _phi(b)
    if b == np.inf:
        if a >= 0:
            return -math.expm1(log_ndtr(-z) - log_ndtr(-a))
        return (_cdf_diff(a, z) / _phibar(a)) if z > 0 else (_phi(z) - _phi(a)) / _phibar(a)

    if a >= _LOG_SPACE_CUTOFF:
        la, lz, lb = log_ndtr(-a), log_ndtr(-z), log_ndtr(-b)
        return math.expm1(lz - la) / math.expm1(lb - la)
    if b <= -_LOG_SPACE_CUTOFF:
        la, lz, lb = log_ndtr(a), log_ndtr(z), log_ndtr(b)
        return (math.expm1(lz - lb) - math.expm1(la - lb)) / -math.expm1(la - lb)
    if a >= 0:
        den = _phibar(a) - _phibar(b)
        if den <= 0:
            la, lz, lb = log_ndtr(-a), log_ndtr(-z), log_ndtr(-b)
            return math.expm1(lz - la) / math.expm1(lb - la)
        return (_phibar(a) - _phibar(z)) / den
    if b <= 0:
        den = _phi(b) - _phi(a)
        if den <= 0:
            la, lz, lb = log_ndtr(a), log_ndtr(z), log_ndtr(b)
            return (math.expm1(lz - lb) - math.expm1(la - lb)) / -math.expm1(la - lb)
        return (_phi(z) - _phi(a)) / den
    # a < 0 < b: erf difference has no cancellation across zero
    return _cdf_diff(a, z) / _cdf_diff(a, b)


def _cdf_diff(lo: float, hi: float) -> float:
    return 0.5 * (erf(hi / _SQRT2) - erf(lo / _SQRT2))


def selective_pvalue(beta_hat_j: float, ev: SelectionEvent,
                     interval: TruncationInterval, sigma: float) -> float:
    """Two-sided selective p-value for the null (beta*_M)_j = 0."""
    pivot = truncated_normal_cdf(beta_hat_j, 0.0, sigma ** 2 * interval.eta_norm2,
                                 interval.lower, interval.upper)
    return 2.0 * min(pivot, 1.0 - pivot)


def invert_pivot(beta_hat_j: float, ev: SelectionEvent, interval: TruncationInterval,
                 sigma: float, level: float) -> tuple[float, float]:
    """Selective confidence interval by inverting the truncated pivot in mu.

    The pivot F(beta_hat; mu, ...) is continuous and strictly decreasing in
    mu, so each endpoint is found by geometric bracket expansion followed by
    bisection to 1e-10*sigma*||eta|| in mu (and 1e-8 absolute in F).
    """
    if not 0 < level < 1:
        raise ValidationError("level must be in (0, 1)")
    sd = sigma * math.sqrt(interval.eta_norm2)
    var = sd * sd
    limit = 1e3 * sd

    def pivot_at(mu: float) -> float:
        return truncated_normal_cdf(beta_hat_j, mu, var, interval.lower, interval.upper)

    def solve(target: float) -> float:
        lo = hi = beta_hat_j
        step = sd
        while pivot_at(lo) < target:  # decrease mu to raise F
            lo -= step
            step *= 2.0
            if beta_hat_j - lo > limit:
                raise NumericalError("interval numerically unbounded")
        step = sd
        while pivot_at(hi) > target:
            hi += step
            step *= 2.0
            if hi - beta_hat_j > limit:
                raise NumericalError("interval numerically unbounded")
        while hi - lo > 1e-10 * sd:
            mid = 0.5 * (lo + hi)
            if pivot_at(mid) > target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    return solve(1.0 - level / 2.0), solve(level / 2.0)


@dataclass(frozen=True)
class ReportRow:
    name: str
    estimate: float
    p_value: float
    ci_low: float
    ci_high: float
    trunc_low: float | None = None
    trunc_high: float | None = None
    pivot_value: float | None = None


@dataclass(frozen=True)
class SelectiveReport:
    rows: list[ReportRow]
    sigma_used: float
    lambda_used: float  # solver-scale penalty actually handed to solve_lasso
    mode: str  # "selective" | "snooping"
    model: tuple[int, ...] = ()  # selected x~ column indices, in M-hat order
    diagnostics: dict = field(default_factory=dict)
    note: str = ""


@dataclass(frozen=True)
class AnalysisConfig:
    level: float = 0.05
    sigma: float | None = None  # override estimate_sigma
    lam: float | None = None  # explicit solver-scale penalty, overrides the rule
    lambda_multiplier: float = 1.1
    lambda_draws: int = 200
    lambda_scale: str = "kkt2"  # "kkt2": solver lam = KKT_SCALE * rule; "direct": rule as-is
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ValidationError("level must be in (0, 1)")
        if self.lambda_scale not in ("kkt2", "direct"):
            raise ValidationError("lambda_scale must be 'kkt2' or 'direct'")
        if self.sigma is not None and self.sigma <= 0:
            raise ValidationError("sigma override must be positive")


def _resolve_sigma_lambda(tr: TransformedRegression, config: AnalysisConfig) -> tuple[float, float]:
    sigma = config.sigma if config.sigma is not None else estimate_sigma(tr)
    if config.lam is not None:
        return sigma, config.lam
    rule = choose_lambda(tr.x_tilde, sigma, config.lambda_multiplier,
                         config.lambda_draws, config.seed)
    lam = rule * (KKT_SCALE if config.lambda_scale == "kkt2" else 1.0)
    return sigma, lam


def _select(tr: TransformedRegression, config: AnalysisConfig):
    sigma, lam = _resolve_sigma_lambda(tr, config)
    if lam <= 0:
        raise ValidationError("selection event undefined at λ=0")
    fit = solve_lasso(tr.x_tilde, tr.unpenalized, tr.y_tilde, lam)
    return sigma, lam, fit


def selective_analysis(tr: TransformedRegression, config: AnalysisConfig = AnalysisConfig()
                       ) -> SelectiveReport:
    """Full selective pipeline: sigma, lambda rule, lasso, event, pivots, CIs."""
    sigma, lam, fit = _select(tr, config)
    if fit.active.size == 0:
        return SelectiveReport(rows=[], sigma_used=sigma, lambda_used=lam, mode="selective",
                               diagnostics=diagnostics(None, None, sigma, tr.n),
                               note="empty selected model; nothing to report")
    ev = build_event(fit, tr.x_tilde, tr.unpenalized, tr.y_tilde)
    estimates = ev.pinv_rows @ tr.y_tilde  # relaxed fit, same pinv as the event
    rows = []
    worst = None

    def ratio_of(record):
        return np.inf if record["interval_ratio"] is None else record["interval_ratio"]

    for pos, col in enumerate(ev.model):
        interval = truncation_interval(ev, tr.y_tilde, pos)
        beta_j = float(estimates[pos])
        pvalue = selective_pvalue(beta_j, ev, interval, sigma)
        d_minus, d_plus = invert_pivot(beta_j, ev, interval, sigma, config.level)
        pivot = truncated_normal_cdf(beta_j, 0.0, sigma ** 2 * interval.eta_norm2,
                                     interval.lower, interval.upper)
        rows.append(ReportRow(name=tr.column_names[col], estimate=beta_j, p_value=pvalue,
                              ci_low=d_minus, ci_high=d_plus, trunc_low=interval.lower,
                              trunc_high=interval.upper, pivot_value=pivot))
        record = diagnostics(ev, interval, sigma, tr.n)
        if worst is None or ratio_of(record) < ratio_of(worst):
            worst = record
    return SelectiveReport(rows=rows, sigma_used=sigma, lambda_used=lam, mode="selective",
                           model=tuple(int(c) for c in ev.model), diagnostics=worst or {})


def snooping_analysis(tr: TransformedRegression, config: AnalysisConfig = AnalysisConfig()
                      ) -> SelectiveReport:
    """Same selection pipeline, but classical Wald inference that ignores it."""
    sigma, lam, fit = _select(tr, config)
    if fit.active.size == 0:
        return SelectiveReport(rows=[], sigma_used=sigma, lambda_used=lam, mode="snooping",
                               diagnostics=diagnostics(None, None, sigma, tr.n),
                               note="empty selected model; nothing to report")
    fmi = fixed_model_inference(tr, fit.active, config.level, sigma=sigma)
    rows = [ReportRow(name=fmi.names[k], estimate=float(fmi.coefficients[k]),
                      p_value=float(fmi.p_values[k]), ci_low=float(fmi.ci_lower[k]),
                      ci_high=float(fmi.ci_upper[k]))
            for k in range(len(fmi.names))]
    ev = build_event(fit, tr.x_tilde, tr.unpenalized, tr.y_tilde)
    return SelectiveReport(rows=rows, sigma_used=sigma, lambda_used=lam, mode="snooping",
                           model=tuple(int(c) for c in fit.active),
                           diagnostics=diagnostics(ev, None, sigma, tr.n))
