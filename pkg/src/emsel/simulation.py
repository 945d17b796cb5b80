"""Data generators, replication studies, and error metrics for coverage experiments."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import ndtri, sici

from .dataset import Dataset, center_columns
from .errors import NumericalError, ValidationError
from .lasso import choose_lambda, solve_lasso
from .nuisance import ForestParams, NuisanceFit, OracleNuisance, estimate_nuisance, nuisance_bias
from .pivot import AnalysisConfig, invert_pivot, selective_analysis
from .robinson import estimate_ate, target_beta_star, transform
from .selection import build_event, truncation_interval

FORMS = ("lin", "qua", "FS", "FGS")
_FORM_ALIASES = {"quad": "qua", "fs": "FS", "fgs": "FGS", "linear": "lin"}
_BLOCK_WEIGHTS = np.array([1.0 / k ** 2 for k in range(1, 6)])


def _canon_form(name: str) -> str:
    name = _FORM_ALIASES.get(name, name)
    if name not in FORMS:
        raise ValidationError(f"unknown functional form {name!r}")
    return name


def functional_form(name, x1, x2, x3, x4, x5):
    """The four five-variate test functions on [0,1]^5 (vectorized)."""
    name = _canon_form(name)
    x1, x2, x3, x4, x5 = (np.asarray(v, dtype=float) for v in (x1, x2, x3, x4, x5))
    if name == "lin":
        return 3 * x1 + x2 + x3 + x4 + x5 - 3.5
    if name == "qua":
        return (3 * (x1 - 0.5) ** 2 + (x2 - 0.5) ** 2 + (x3 - 0.5) ** 2
                + (x4 - 0.5) ** 2 + (x5 - 0.5) ** 2
                + 3 * x1 + x2 + x3 + x4 + x5 - 4)
    if name == "FS":
        return (0.1 * np.exp(4 * x1) + 4 / (1 + np.exp(-20 * (x2 - 0.5)))
                + 3 * x3 + 2 * x4 + x5 - 6.3) / 2.5
    return (10 * np.sin(np.pi * x1 * x2) + 20 * (x3 - 0.5) ** 2
            + 10 * x4 + 5 * x5 - 14.3) / 4.9


def compose_sparse(form: str, sparsity: int, x: np.ndarray) -> np.ndarray:
    """Sparse composition: 0 -> 0, 5 -> f(x1..x5), 25 -> sum_k f(block_k)/k^2."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if sparsity == 0:
        return np.zeros(x.shape[0])
    if sparsity not in (5, 25):
        raise ValidationError("sparsity must be 0, 5, or 25")
    if x.shape[1] < sparsity:
        raise ValidationError(f"need p >= {sparsity} covariates, got {x.shape[1]}")
    if sparsity == 5:
        return functional_form(form, *(x[:, j] for j in range(5)))
    out = np.zeros(x.shape[0])
    for k in range(5):
        block = x[:, 5 * k: 5 * k + 5]
        out += functional_form(form, *(block[:, j] for j in range(5))) * _BLOCK_WEIGHTS[k]
    return out


@lru_cache(maxsize=None)
def _form_mean(form: str) -> float:
    """Exact mean of a functional form over independent U[0,1] inputs."""
    form = _canon_form(form)
    if form == "lin":
        return 0.0
    if form == "qua":
        # 7 * Var(U)=7/12 plus linear part 3.5, minus 4
        return 7.0 / 12.0 + 3.5 - 4.0
    if form == "FS":
        # E exp(4U) = (e^4-1)/4; the logistic term is symmetric about 1/2
        return (0.1 * (math.exp(4.0) - 1.0) / 4.0 + 2.0 + 3.0 - 6.3) / 2.5
    # FGS: E sin(pi U V) = (gamma + ln(pi) - Ci(pi)) / pi
    ci_pi = float(sici(math.pi)[1])
    e_sin = (np.euler_gamma + math.log(math.pi) - ci_pi) / math.pi
    return (10.0 * e_sin + 20.0 / 12.0 + 7.5 - 14.3) / 4.9


def population_ate(form: str, sparsity: int) -> float:
    """E[Delta(X)] under the uniform design, used to score ATE coverage."""
    if sparsity == 0:
        return 0.0
    if sparsity == 5:
        return _form_mean(form)
    return _form_mean(form) * float(_BLOCK_WEIGHTS.sum())


@dataclass(frozen=True)
class SimTruth:
    mu_t: np.ndarray
    mu_y: np.ndarray
    delta: np.ndarray


@dataclass(frozen=True)
class SimConfig:
    s_t: int = 0
    f_t: str = "lin"
    s_y: int = 5
    f_y: str = "lin"
    s_delta: int = 5
    f_delta: str = "lin"
    sigma: float = 0.25
    noise: str = "normal"
    n: int = 1000
    p: int = 25
    reps: int = 100
    seed: int = 0
    nuisance_method: str = "rf"
    cross_fit_mode: str = "none"
    level: float = 0.05
    sigma_policy: str = "estimate"  # "estimate" per the lambda rule, or "known"
    lambda_multiplier: float = 1.1
    lambda_draws: int = 200
    lambda_scale: str = "kkt2"
    rf_trees: int = 500
    rf_nodesize: int = 20

    def __post_init__(self):
        if self.s_t not in (0, 5, 25):
            raise ValidationError("s_t must be 0, 5, or 25")
        if self.s_y not in (5, 25) or self.s_delta not in (5, 25):
            raise ValidationError("s_y and s_delta must be 5 or 25")
        for f in (self.f_t, self.f_y, self.f_delta):
            _canon_form(f)
        if self.noise not in ("normal", "double_exp"):
            raise ValidationError("noise must be 'normal' or 'double_exp'")
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")
        if self.p < max(self.s_t, self.s_y, self.s_delta, 1):
            raise ValidationError("p too small for the requested sparsity")
        if self.reps < 1:
            raise ValidationError("reps must be >= 1")
        if self.sigma_policy not in ("estimate", "known"):
            raise ValidationError("sigma_policy must be 'estimate' or 'known'")
        if self.nuisance_method not in ("rf", "lasso", "zero", "oracle"):
            raise ValidationError("nuisance_method must be rf, lasso, zero, or oracle")


def generate_dataset(cfg: SimConfig, rep_index: int) -> tuple[Dataset, SimTruth]:
    """One draw from the simulation design; the RNG stream is (seed, rep_index)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(rep_index)]))
    x = rng.random((cfg.n, cfg.p))
    mu_t = compose_sparse(cfg.f_t, cfg.s_t, x)
    mu_y = compose_sparse(cfg.f_y, cfg.s_y, x)
    delta = compose_sparse(cfg.f_delta, cfg.s_delta, x)
    t = mu_t + rng.standard_normal(cfg.n)
    if cfg.noise == "normal":
        eps = cfg.sigma * rng.standard_normal(cfg.n)
    else:
        eps = rng.laplace(0.0, cfg.sigma / math.sqrt(2.0), cfg.n)
    y = mu_y + (t - mu_t) * delta + eps
    names = [f"x{j + 1}" for j in range(cfg.p)]
    return (Dataset(x=x, t=t, y=y, covariate_names=names),
            SimTruth(mu_t=mu_t, mu_y=mu_y, delta=delta))


def _rep_seed(cfg: SimConfig, rep_index: int, tag: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, int(rep_index), tag]).generate_state(1)[0]
               % (2 ** 31))


def run_replication(cfg: SimConfig, rep_index: int) -> dict:
    """One replication: generate, fit nuisances, select, score against beta*."""
    d, truth = generate_dataset(cfg, rep_index)
    if cfg.nuisance_method == "oracle":
        nf = NuisanceFit(truth.mu_t, truth.mu_y, method="oracle")
    else:
        nf = estimate_nuisance(
            d, cfg.nuisance_method, cfg.cross_fit_mode, seed=_rep_seed(cfg, rep_index, 1),
            forest_params=ForestParams(n_trees=cfg.rf_trees, min_node_size=cfg.rf_nodesize))
    xc, _ = center_columns(d.x)
    dc = Dataset(x=xc, t=d.t, y=d.y, covariate_names=d.covariate_names)
    tr = transform(dc, nf)
    config = AnalysisConfig(
        level=cfg.level,
        sigma=cfg.sigma if cfg.sigma_policy == "known" else None,
        lambda_multiplier=cfg.lambda_multiplier,
        lambda_draws=cfg.lambda_draws,
        lambda_scale=cfg.lambda_scale,
        seed=_rep_seed(cfg, rep_index, 2))
    report = selective_analysis(tr, config)

    model = list(report.model)
    n_miss = n_sig = n_sign_err = 0
    if model:
        _, beta_star = target_beta_star(truth.delta, d.t, truth.mu_t, xc, model)
        for row, target in zip(report.rows, beta_star):
            covered = row.ci_low <= target <= row.ci_high
            n_miss += not covered
            significant = row.p_value < cfg.level
            n_sig += significant
            if significant and target * row.ci_low < 0:
                n_sign_err += 1

    ate_point, ate_ci = estimate_ate(tr, cfg.level)
    true_ate = population_ate(cfg.f_delta, cfg.s_delta)
    return {
        "rep": rep_index,
        "model_size": len(model),
        "n_significant": n_sig,
        "n_miss": n_miss,
        "n_sign_err": n_sign_err,
        "bias_mu_t": nuisance_bias(nf, truth.mu_t),
        "ate_covered": bool(ate_ci[0] <= true_ate <= ate_ci[1]),
        "sigma_used": report.sigma_used,
        "lambda_used": report.lambda_used,
    }


@dataclass(frozen=True)
class SimMetrics:
    mean_model_size: float
    mean_num_significant: float
    fcr: float
    stie: float
    fsr: float
    bias_mu_t: float
    ate_coverage_error: float
    reps_used: int
    n_failed: int
    records: list = field(default_factory=list, repr=False)


def _replication_task(args):
    cfg, rep = args
    try:
        return run_replication(cfg, rep)
    except NumericalError as e:
        return {"rep": rep, "failed": str(e)}


def run_study(cfg: SimConfig, jobs: int = 1) -> SimMetrics:
    """Run cfg.reps independent replications and aggregate the error metrics.

    FCR and FSR are means of per-replication ratios with denominator
    max(|M|, 1); STIE is the pooled per-coordinate miscoverage. Results are
    identical for any jobs count (per-replication RNG streams).
    """
    tasks = [(cfg, rep) for rep in range(cfg.reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_replication_task, tasks, chunksize=1))
    else:
        records = [_replication_task(t) for t in tasks]

    good = [r for r in records if "failed" not in r]
    n_failed = len(records) - len(good)
    if not good:
        raise NumericalError("all replications failed")
    sizes = np.array([r["model_size"] for r in good], dtype=float)
    misses = np.array([r["n_miss"] for r in good], dtype=float)
    signerr = np.array([r["n_sign_err"] for r in good], dtype=float)
    denom = np.maximum(sizes, 1.0)
    total_selected = sizes.sum()
    return SimMetrics(
        mean_model_size=float(sizes.mean()),
        mean_num_significant=float(np.mean([r["n_significant"] for r in good])),
        fcr=float((misses / denom).mean()),
        stie=float(misses.sum() / total_selected) if total_selected > 0 else 0.0,
        fsr=float((signerr / denom).mean()),
        bias_mu_t=float(np.mean([r["bias_mu_t"] for r in good])),
        ate_coverage_error=float(1.0 - np.mean([r["ate_covered"] for r in good])),
        reps_used=len(good),
        n_failed=n_failed,
        records=records)


@dataclass(frozen=True)
class PerturbationResult:
    gamma: float
    n: int
    fcp_selective: float
    fcp_naive: float
    mean_model_size: float
    n_failed: int


def perturbation_experiment(gamma: float, n: int, reps: int = 100, seed: int = 0,
                            level: float = 0.10, lambda_multiplier: float = 2.0,
                            lambda_draws: int = 200, p: int = 30) -> PerturbationResult:
    """Measurement-error phase-transition experiment.

    Draws X ~ N(0, I_p), Y ~ N(X beta, 1) with beta = (1,1,1,0,...), perturbs
    X row-wise by (1 + n^-gamma D1) and Y by n^-gamma D2, then runs selective
    and naive inference on the perturbed data as if it were the truth. Both
    false coverage proportions are scored against the projection of the
    unperturbed mean onto the selected columns of the unperturbed design,
    with sigma = 1 known.
    """
    if gamma <= 0:
        raise ValidationError("gamma must be positive")
    beta_true = np.zeros(p)
    beta_true[:3] = 1.0
    sigma = 1.0
    z = ndtri(1 - level / 2)
    scale = float(n) ** (-gamma)

    fcp_sel = []
    fcp_naive = []
    sizes = []
    n_failed = 0
    for rep in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), rep, 0x5EC]))
        x = rng.standard_normal((n, p))
        y = x @ beta_true + rng.standard_normal(n)
        d1 = rng.standard_normal(n)
        d2 = rng.standard_normal(n)
        xp = x * (1.0 + scale * d1)[:, None]
        yp = y + scale * d2
        try:
            lam = choose_lambda(xp, sigma, lambda_multiplier, lambda_draws,
                                seed=_rep_seed_perturb(seed, rep))
            fit = solve_lasso(xp, None, yp, lam)
            if fit.active.size == 0:
                fcp_sel.append(0.0)
                fcp_naive.append(0.0)
                sizes.append(0)
                continue
            ev = build_event(fit, xp, None, yp)
            estimates = ev.pinv_rows @ yp
            xm_true = x[:, fit.active]
            beta_star, _, rank, _ = np.linalg.lstsq(xm_true, x @ beta_true, rcond=None)
            if rank < fit.active.size:
                raise NumericalError("unperturbed selected design is rank deficient")
            se = sigma * np.sqrt(np.diag(np.linalg.inv(ev.gram)))
            miss_sel = miss_naive = 0
            for pos in range(ev.size):
                interval = truncation_interval(ev, yp, pos)
                d_minus, d_plus = invert_pivot(float(estimates[pos]), ev, interval,
                                               sigma, level)
                target = float(beta_star[pos])
                miss_sel += not (d_minus <= target <= d_plus)
                lo = estimates[pos] - z * se[pos]
                hi = estimates[pos] + z * se[pos]
                miss_naive += not (lo <= target <= hi)
            m = max(ev.size, 1)
            fcp_sel.append(miss_sel / m)
            fcp_naive.append(miss_naive / m)
            sizes.append(ev.size)
        except NumericalError:
            n_failed += 1
    if not fcp_sel:
        raise NumericalError("all perturbation replications failed")
    return PerturbationResult(gamma=gamma, n=n, fcp_selective=float(np.mean(fcp_sel)),
                              fcp_naive=float(np.mean(fcp_naive)),
                              mean_model_size=float(np.mean(sizes)), n_failed=n_failed)


def _rep_seed_perturb(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(seed), rep, 0xA11]).generate_state(1)[0] % (2 ** 31))
