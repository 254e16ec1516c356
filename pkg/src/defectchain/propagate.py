"""Strength propagation: forward models, Monte Carlo, Weibull, surrogate.

Posterior wrinkle samples are pushed through a strength model to obtain
the corner-bend-strength distribution.  The shipped reference model is
the exponential slope-knockdown surrogate; arbitrary external solvers
can be plugged in through a subprocess adapter exchanging a wrinkle-grid
CSV for a JSON strength value.
"""

from __future__ import annotations

import csv
import json
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .errors import DataError, FitError, NumericalError, ParameterError
from .klfield import (BasisCache, DecaySpec, GeometrySpec, KLBasis,
                      WrinkleParams, default_jacobian_grid, eval_wrinkle,
                      wrinkle_gradient)

__all__ = [
    "Allowables",
    "camanho",
    "max_abs_slope",
    "SurrogateModel",
    "surrogate_strength",
    "fit_surrogate",
    "SurrogateStrengthModel",
    "ExternalProcessModel",
    "StrengthDistribution",
    "monte_carlo",
    "weibull_fit",
    "weibull_cdf",
    "knockdown_report",
]


@dataclass(frozen=True)
class Allowables:
    """Interlaminar allowable stresses (MPa); defaults from the case study."""

    s_13: float = 97.0
    s_23: float = 97.0
    s_33: float = 61.0

    def __post_init__(self):
        if min(self.s_13, self.s_23, self.s_33) <= 0:
            raise ParameterError("allowable stresses must be positive")


def camanho(sigma_33: float, sigma_23: float, sigma_13: float,
            allow: Allowables) -> float:
    """Failure index F; failure at F >= 1.  Through-thickness compression
    does not contribute (sigma_33 clamped at 0)."""
    if not np.all(np.isfinite([sigma_33, sigma_23, sigma_13])):
        raise ParameterError("stresses must be finite")
    s33p = max(sigma_33, 0.0)
    return float(np.sqrt((s33p / allow.s_33) ** 2
                         + (sigma_23 / allow.s_23) ** 2
                         + (sigma_13 / allow.s_13) ** 2))


def max_abs_slope(xi: WrinkleParams, basis: KLBasis, decay: DecaySpec,
                  x1_grid: np.ndarray, x3_grid: np.ndarray) -> float:
    """Maximum |dW/dx1| over the part: the misalignment-driving slope."""
    d1, _ = wrinkle_gradient(xi, basis, decay,
                             x1_grid[None, :], x3_grid[:, None])
    return float(np.max(np.abs(d1)))


@dataclass(frozen=True)
class SurrogateModel:
    """Exponential slope-knockdown law M_c = M* exp(-slope^q / lambda_q).

    Default parameters reproduce the published fit; the optional lower
    pair gives a 99% lower-confidence-bound curve.
    """

    m_star: float = 8.93
    q: float = 2.867
    lambda_q: float = 4.212
    q_lower: float | None = 2.587
    lambda_q_lower: float | None = 3.834

    def __post_init__(self):
        if min(self.m_star, self.q, self.lambda_q) <= 0:
            raise ParameterError("m_star, q and lambda_q must be positive")


def surrogate_strength(slope: float, model: SurrogateModel,
                       lower_bound: bool = False) -> float:
    """Predicted failure moment (kN mm/mm) for a maximum wrinkle slope."""
    if slope < 0:
        raise ParameterError("slope must be non-negative")
    if lower_bound:
        if model.q_lower is None or model.lambda_q_lower is None:
            raise ParameterError("model carries no lower-bound parameters")
        q, lq = model.q_lower, model.lambda_q_lower
    else:
        q, lq = model.q, model.lambda_q
    return float(model.m_star * np.exp(-(slope ** q) / lq))


def _fit_decay_law(slopes: np.ndarray, y: np.ndarray):
    """Least-squares (q, lambda_q) for y = slope^q / lambda_q, y > 0."""
    ln_s = np.log(slopes)
    ln_y = np.log(y)
    # double-log linearization gives the starting point
    A = np.column_stack([ln_s, np.ones_like(ln_s)])
    coef, *_ = np.linalg.lstsq(A, ln_y, rcond=None)
    q0 = max(coef[0], 1e-3)
    lq0 = float(np.exp(-coef[1]))

    def residual(p):
        q, lq = p
        return slopes ** q / lq - y

    res = optimize.least_squares(residual, x0=[q0, lq0],
                                 bounds=([1e-6, 1e-9], [np.inf, np.inf]))
    if not res.success:
        raise FitError("surrogate fit did not converge")
    return float(res.x[0]), float(res.x[1])


def fit_surrogate(pairs, m_star: float, residual_floor: float = 1e-9,
                  bound_quantile: float = 0.99) -> SurrogateModel:
    """Fit (q, lambda_q) to (slope, M_c) pairs on ln(M*/M_c).

    Near-pristine samples (M_c >= M*) carry no shape information; their
    log residual is floored.  A lower-confidence curve is refit through
    the bound_quantile of positive fit residuals.
    """
    pairs = [(float(s), float(m)) for s, m in pairs]
    if len(pairs) < 5:
        raise FitError("need at least 5 (slope, strength) pairs")
    slopes = np.array([p[0] for p in pairs])
    mc = np.array([p[1] for p in pairs])
    if np.any(slopes <= 0):
        raise FitError("slopes must be positive")
    y = np.maximum(np.log(m_star / mc), residual_floor)
    if np.allclose(y, y[0]):
        raise FitError("degenerate strength data")
    q, lq = _fit_decay_law(slopes, y)

    resid = y - slopes ** q / lq
    pos = resid[resid > 0]
    if pos.size:
        shift = float(np.quantile(pos, bound_quantile))
        q_lb, lq_lb = _fit_decay_law(slopes, slopes ** q / lq + shift)
    else:
        q_lb, lq_lb = q, lq
    return SurrogateModel(m_star=m_star, q=q, lambda_q=lq,
                          q_lower=q_lb, lambda_q_lower=lq_lb)


class SurrogateStrengthModel:
    """Reference ForwardStrengthModel: surrogate law on the max slope."""

    identifier = "surrogate"
    fidelity = 0  # analytic look-up, no FE degrees of freedom

    def __init__(self, surrogate: SurrogateModel, basis_cache: BasisCache,
                 decay: DecaySpec, geom: GeometrySpec):
        self.surrogate = surrogate
        self.basis_cache = basis_cache
        self.decay = decay
        self.x1_grid, self.x3_grid = default_jacobian_grid(geom)

    def max_slope(self, xi: WrinkleParams) -> float:
        basis = self.basis_cache.get(xi.length_scale)
        return max_abs_slope(xi, basis, self.decay,
                             self.x1_grid, self.x3_grid)

    def evaluate(self, xi: WrinkleParams) -> float:
        return surrogate_strength(self.max_slope(xi), self.surrogate)


class ExternalProcessModel:
    """Adapter spawning one external solver process per sample.

    Writes the wrinkle displacement sampled on a grid to CSV
    (x1_mm,x3_mm,W_mm), invokes `command <wrinkle_csv> <result_json>` and
    reads back {"M_c": <number>}.
    """

    fidelity = -1  # unknown: set by the external solver

    def __init__(self, command: list, basis_cache: BasisCache,
                 decay: DecaySpec, geom: GeometrySpec,
                 grid_n1: int = 64, grid_n3: int = 32,
                 timeout: float = 600.0, retries: int = 1,
                 workdir=None):
        self.command = list(command)
        self.basis_cache = basis_cache
        self.decay = decay
        self.geom = geom
        self.x1 = np.linspace(0.0, geom.arc_length, grid_n1)
        self.x3 = np.linspace(0.0, geom.total_thickness, grid_n3)
        self.timeout = timeout
        self.retries = retries
        self.workdir = workdir
        self.identifier = "external:" + " ".join(self.command)

    def max_slope(self, xi: WrinkleParams) -> float:
        basis = self.basis_cache.get(xi.length_scale)
        return max_abs_slope(xi, basis, self.decay, self.x1, self.x3)

    def _write_wrinkle(self, xi: WrinkleParams, path):
        basis = self.basis_cache.get(xi.length_scale)
        w = eval_wrinkle(xi, basis, self.decay,
                         self.x1[None, :], self.x3[:, None])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x1_mm", "x3_mm", "W_mm"])
            for i, z in enumerate(self.x3):
                for j, x in enumerate(self.x1):
                    writer.writerow([f"{x:.12g}", f"{z:.12g}",
                                     f"{w[i, j]:.12g}"])

    def evaluate(self, xi: WrinkleParams) -> float:
        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            wrinkle_csv = str(Path(tmp) / "wrinkle.csv")
            result_json = str(Path(tmp) / "result.json")
            self._write_wrinkle(xi, wrinkle_csv)
            last_err = None
            for _ in range(self.retries + 1):
                try:
                    subprocess.run(self.command + [wrinkle_csv, result_json],
                                   check=True, timeout=self.timeout,
                                   capture_output=True)
                    with open(result_json) as fh:
                        mc = float(json.load(fh)["M_c"])
                    if mc <= 0:
                        raise NumericalError("external model returned M_c <= 0")
                    return mc
                except (subprocess.SubprocessError, OSError, KeyError,
                        ValueError, json.JSONDecodeError) as exc:
                    last_err = exc
            raise NumericalError(f"external model failed: {last_err}")


@dataclass
class StrengthDistribution:
    """Monte Carlo strength samples with estimator statistics."""

    strengths: np.ndarray
    max_slopes: np.ndarray
    sample_ids: list
    failed_ids: list
    mean: float
    variance: float
    ci_half_width_95: float
    model_id: str
    bias_note: str = ("model-fidelity bias E[Q - Q_M] not computed; "
                      "supply from solver mesh-convergence data")
    weibull: tuple | None = None

    @property
    def n_success(self) -> int:
        return int(self.strengths.size)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "max_slope", "Mc"])
            for sid, s, m in zip(self.sample_ids, self.max_slopes,
                                 self.strengths):
                writer.writerow([sid, f"{s:.12g}", f"{m:.12g}"])


def monte_carlo(samples, model, workers: int = 1) -> StrengthDistribution:
    """Plain Monte Carlo estimate of expected strength over wrinkle samples.

    Model failures are recorded per sample and the estimator is taken
    over the successes.  Aggregation is by sample index, so results do
    not depend on worker completion order.
    """
    samples = list(samples)
    if not samples:
        raise DataError("no samples to propagate")

    def one(idx_xi):
        idx, xi = idx_xi
        try:
            mc = model.evaluate(xi)
            slope = model.max_slope(xi) if hasattr(model, "max_slope") \
                else np.nan
            return idx, slope, mc, None
        except Exception as exc:  # noqa: BLE001 - per-sample failure record
            return idx, np.nan, np.nan, str(exc)

    tasks = list(enumerate(samples))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    ok = [(i, s, m) for i, s, m, err in results if err is None]
    failed = [i for i, _, _, err in results if err is not None]
    if not ok:
        raise NumericalError("all model evaluations failed")
    ids = [i for i, _, _ in ok]
    slopes = np.array([s for _, s, _ in ok])
    strengths = np.array([m for _, _, m in ok])
    n = strengths.size
    mean = float(strengths.mean())
    var = float(strengths.var(ddof=1)) if n > 1 else 0.0
    half = float(stats.norm.ppf(0.975) * np.sqrt(var / n)) if n > 1 else 0.0
    return StrengthDistribution(strengths=strengths, max_slopes=slopes,
                                sample_ids=ids, failed_ids=failed, mean=mean,
                                variance=var, ci_half_width_95=half,
                                model_id=getattr(model, "identifier", "?"))


def weibull_cdf(m_c, shape: float, scale: float):
    m_c = np.asarray(m_c, dtype=float)
    return 1.0 - np.exp(-(m_c / scale) ** shape)


def weibull_fit(strengths, iters: int = 200, eps: float = 1e-10):
    """Two-parameter Weibull MLE: Newton on the profile shape equation,
    closed-form scale.  Returns (shape M_W, scale M_S)."""
    x = np.asarray(strengths, dtype=float)
    if x.size < 10:
        raise FitError("need at least 10 strength samples")
    if np.any(x <= 0):
        raise FitError("strengths must be positive")
    if np.allclose(x, x[0]):
        raise FitError("degenerate strength data (all samples equal)")
    # normalize by the geometric mean: the fit is scale-equivariant and
    # x^k overflows for the large shape values of narrow distributions
    gmean = float(np.exp(np.mean(np.log(x))))
    x = x / gmean
    ln_x = np.log(x)
    # moment-based start is robust for large shape values
    k = max(1e-2, 1.2 / max(np.std(ln_x), 1e-12) / np.sqrt(6.0) * np.pi)
    for _ in range(iters):
        if k > 1e8:
            raise FitError("Weibull shape diverged (near-degenerate data)")
        xk = x ** k
        xk_ln = xk * ln_x
        s0, s1, s2 = np.sum(xk), np.sum(xk_ln), np.sum(xk * ln_x ** 2)
        f = s1 / s0 - np.mean(ln_x) - 1.0 / k
        fp = (s2 * s0 - s1 ** 2) / s0 ** 2 + 1.0 / k ** 2
        step = f / fp
        k_new = k - step
        if k_new <= 0:
            k_new = k / 2.0
        if not np.isfinite(k_new):
            raise FitError("Weibull shape iteration diverged")
        if abs(k_new - k) < eps * max(1.0, k):
            k = k_new
            break
        k = k_new
    scale = float(np.mean(x ** k) ** (1.0 / k)) * gmean
    return float(k), scale


def empirical_cdf(values: np.ndarray):
    """Median-rank plotting positions for the sorted sample."""
    v = np.sort(np.asarray(values, dtype=float))
    p = (np.arange(1, v.size + 1) - 0.3) / (v.size + 0.4)
    return v, p


def knockdown_report(dist: StrengthDistribution, m_star: float,
                     surrogate: SurrogateModel | None = None) -> dict:
    """Knockdown summary: mean/worst knockdown, tail quantiles, fits.

    Both the knockdown (1 - M/M*) and the retained fraction (M/M*) are
    reported to keep the two conventions unambiguous.
    """
    if dist.n_success == 0:
        raise DataError("empty strength distribution")
    s = dist.strengths
    knock = 1.0 - s / m_star
    n = s.size
    quantiles = {
        "q_1_over_n": float(np.min(s)),
        "q05": float(np.quantile(s, 0.05)),
        "q50": float(np.quantile(s, 0.50)),
        "q95": float(np.quantile(s, 0.95)),
    }
    report = {
        "n_samples": n,
        "n_failed": len(dist.failed_ids),
        "m_star": m_star,
        "mean_strength": dist.mean,
        "variance": dist.variance,
        "ci_half_width_95": dist.ci_half_width_95,
        "mean_knockdown": float(np.mean(knock)),
        "worst_knockdown": float(np.max(knock)),
        "mean_retained_fraction": float(np.mean(s / m_star)),
        "worst_retained_fraction": float(np.min(s / m_star)),
        "strength_quantiles": quantiles,
        "bias_note": dist.bias_note,
        "model_id": dist.model_id,
    }
    try:
        mw, ms = weibull_fit(s)
        report["weibull"] = {"modulus": mw, "scale": ms}
    except FitError as exc:
        report["weibull"] = {"error": str(exc)}
    if surrogate is not None:
        report["surrogate"] = {
            "q": surrogate.q, "lambda_q": surrogate.lambda_q,
            "q_lower": surrogate.q_lower,
            "lambda_q_lower": surrogate.lambda_q_lower,
        }
    return report
