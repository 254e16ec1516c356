"""Prior construction, min-misfit likelihood and pCN Metropolis-Hastings.

The unknown is the wrinkle coefficient vector [a_1 .. a_Nw, lambda].  A
Gaussian prior is built from least-squares fits to each observed scan,
with sample variances inflated by a student-t factor to reflect the small
number of scans.  The likelihood compares predicted misalignment angles
against the *closest* observation (min over scans), giving a multi-modal
posterior that is sampled with a preconditioned Crank-Nicolson proposal
applied in prior-whitened coordinates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .errors import (DataError, DiagnosticError, FitError, NumericalError,
                     ParameterError)
from .klfield import (BasisCache, DecaySpec, GeometrySpec, WrinkleParams,
                      default_jacobian_grid, jacobian_positive)
from .mfia import MisalignmentSamples

__all__ = [
    "ObservationSet",
    "PriorModel",
    "NoiseModel",
    "ChainConfig",
    "Chain",
    "ChainState",
    "ForwardOperator",
    "Posterior",
    "fit_map_observation",
    "build_prior",
    "misfit",
    "data_misfit",
    "log_posterior",
    "pcn_propose",
    "mh_step",
    "run_chain",
    "iact",
    "chain_convergence",
    "ConvergenceReport",
    "tune_beta",
    "TuneResult",
    "student_t_factor",
]


@dataclass
class ObservationSet:
    """The n observed misalignment datasets."""

    observations: list

    def __post_init__(self):
        if len(self.observations) < 1:
            raise DataError("need at least one observation")
        for obs in self.observations:
            if len(obs) == 0:
                raise DataError("empty observation")

    def __len__(self):
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def __getitem__(self, i):
        return self.observations[i]


def student_t_factor(n: int, confidence: float = 0.95) -> float:
    """Two-sided student-t quantile for n samples (df = n - 1)."""
    if n < 2:
        raise ParameterError("need n >= 2 for a student-t factor")
    return float(stats.t.ppf(0.5 + confidence / 2.0, df=n - 1))


@dataclass(frozen=True)
class PriorModel:
    """Independent Gaussian prior over [a_1 .. a_Nw, lambda]."""

    mean: np.ndarray
    variance: np.ndarray
    inflation: float = 1.0
    confidence: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "variance",
                           np.asarray(self.variance, dtype=float))
        if self.mean.shape != self.variance.shape:
            raise ParameterError("mean and variance shapes differ")
        if np.any(self.variance <= 0):
            raise ParameterError("prior variances must be positive")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def whiten(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v, dtype=float) - self.mean) / self.std

    def unwhiten(self, z: np.ndarray) -> np.ndarray:
        return self.mean + self.std * np.asarray(z, dtype=float)

    def log_density(self, v: np.ndarray) -> float:
        z = self.whiten(v)
        return float(-0.5 * z @ z
                     - 0.5 * np.sum(np.log(2.0 * np.pi * self.variance)))

    def sample(self, rng) -> np.ndarray:
        return self.unwhiten(rng.standard_normal(self.dim))


def build_prior(fits: list, confidence: float = 0.95) -> PriorModel:
    """Componentwise mean and t-inflated sample variance over MAP fits.

    4 fits at 95% confidence give the inflation factor 3.18.
    """
    if len(fits) < 2:
        raise ParameterError("need at least 2 fits to build a prior")
    vectors = np.array([f.as_vector() if isinstance(f, WrinkleParams)
                        else np.asarray(f, dtype=float) for f in fits])
    mean = vectors.mean(axis=0)
    var = vectors.var(axis=0, ddof=1)
    if np.any(var == 0):
        raise FitError("degenerate prior: a component has zero sample variance")
    factor = student_t_factor(len(fits), confidence)
    return PriorModel(mean=mean, variance=var * factor,
                      inflation=factor, confidence=confidence)


@dataclass(frozen=True)
class NoiseModel:
    """Isotropic measurement noise Sigma_eps = variance * I (rad^2)."""

    variance: float

    def __post_init__(self):
        if self.variance <= 0:
            raise ParameterError("noise variance must be positive")

    @classmethod
    def case_study(cls, n_points: int, base_rad: float = 0.044,
                   confidence: float = 0.95) -> "NoiseModel":
        """Base MFIA angular accuracy inflated for finite sampling.

        The finite-sample factor is the student-t quantile normalized by
        the Gaussian quantile so it tends to 1 as n_points grows.
        """
        tau = (student_t_factor(n_points, confidence)
               / float(stats.norm.ppf(0.5 + confidence / 2.0)))
        return cls(variance=tau * base_rad)


class ForwardOperator:
    """Maps wrinkle coefficients to misalignment angles at scan points.

    tan(phi_j) is linear in the amplitudes at fixed lambda, so each
    (observation, quantized lambda) pair caches a design matrix with rows
    g3(x3_j) * d[g1 f_i]/dx1 (x1_j).
    """

    def __init__(self, basis_cache: BasisCache, decay: DecaySpec):
        self.basis_cache = basis_cache
        self.decay = decay
        self._matrices: dict = {}
        self._pinned: dict = {}

    def tan_matrix(self, obs: MisalignmentSamples, lam: float) -> np.ndarray:
        key = (id(obs), self.basis_cache.key(lam))
        hit = self._matrices.get(key)
        if hit is not None:
            return hit
        basis = self.basis_cache.get(lam)
        g1 = self.decay.g1(obs.x1)
        dg1 = self.decay.g1.deriv(obs.x1)
        g3 = self.decay.g3(obs.x3)
        f = basis.mode_values(obs.x1)
        df = basis.mode_derivs(obs.x1)
        M = g3[:, None] * (dg1[:, None] * f + g1[:, None] * df)
        self._matrices[key] = M
        self._pinned[id(obs)] = obs
        return M

    def predict_angles(self, xi: WrinkleParams,
                       obs: MisalignmentSamples) -> np.ndarray:
        M = self.tan_matrix(obs, xi.length_scale)
        return np.arctan(M @ xi.amplitudes)


def misfit(xi: WrinkleParams, obs: MisalignmentSamples, noise: NoiseModel,
           operator: ForwardOperator, mode: str = "squared") -> float:
    """Weighted data misfit delta_i for one observation.

    Default is the squared-norm form ||Sigma^-1/2 r||^2 / 2; the
    "as_written" switch gives the unsquared ||.|| / 2 variant.
    """
    pred = operator.predict_angles(xi, obs)
    if pred.shape != obs.phi.shape:
        raise DataError("prediction/observation length mismatch")
    q = float(np.sum((pred - obs.phi) ** 2)) / noise.variance
    if mode == "squared":
        return 0.5 * q
    if mode == "as_written":
        return 0.5 * np.sqrt(q)
    raise ParameterError("mode must be 'squared' or 'as_written'")


def data_misfit(xi: WrinkleParams, d_obs: ObservationSet, noise: NoiseModel,
                operator: ForwardOperator, mode: str = "squared") -> float:
    """Min-over-observations misfit Delta: distance to the closest scan."""
    return min(misfit(xi, obs, noise, operator, mode) for obs in d_obs)


class Posterior:
    """Unnormalized posterior over the wrinkle coefficient vector."""

    def __init__(self, d_obs: ObservationSet, prior: PriorModel,
                 noise: NoiseModel, operator: ForwardOperator,
                 geom: GeometrySpec | None = None,
                 misfit_mode: str = "squared",
                 jacobian_grids=None):
        self.d_obs = d_obs
        self.prior = prior
        self.noise = noise
        self.operator = operator
        self.misfit_mode = misfit_mode
        if jacobian_grids is None:
            if geom is None:
                raise ParameterError("need geom or explicit jacobian grids")
            jacobian_grids = default_jacobian_grid(geom)
        self.x1_grid, self.x3_grid = jacobian_grids

    def admissible(self, v: np.ndarray) -> bool:
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)) or v[-1] <= 0:
            return False
        xi = WrinkleParams.from_vector(v)
        basis = self.operator.basis_cache.get(xi.length_scale)
        return jacobian_positive(xi, basis, self.operator.decay,
                                 self.x1_grid, self.x3_grid)

    def log_likelihood(self, v: np.ndarray) -> float:
        xi = WrinkleParams.from_vector(v)
        return -data_misfit(xi, self.d_obs, self.noise, self.operator,
                            self.misfit_mode)

    def log_posterior(self, v: np.ndarray) -> float:
        if not self.admissible(v):
            return -np.inf
        return self.log_likelihood(v) + self.prior.log_density(v)


def log_posterior(xi, d_obs, prior, noise, operator, posterior=None) -> float:
    """Functional wrapper around :meth:`Posterior.log_posterior`."""
    v = xi.as_vector() if isinstance(xi, WrinkleParams) else np.asarray(xi)
    if posterior is None:
        return -data_misfit(WrinkleParams.from_vector(v), d_obs, noise,
                            operator) + prior.log_density(v)
    return posterior.log_posterior(v)


def fit_map_observation(obs: MisalignmentSamples, basis_cache: BasisCache,
                        decay: DecaySpec, lambda0: float | None = None,
                        geom: GeometrySpec | None = None,
                        max_iter: int = 200,
                        noise_var: float = 0.044 ** 2) -> WrinkleParams:
    """Regularized least-squares wrinkle fit to one scan.

    Nested optimization: Nelder-Mead over the length scale with an inner
    linear solve for the amplitudes (tan-space), objective evaluated in
    angle space.  The amplitude solve is ridge-regularized toward the
    unit-normal amplitude scale of the KL construction: high-order modes
    carry vanishing sqrt-eigenvalue weight, so the unregularized problem
    is severely ill-conditioned and measurement error explodes along the
    weak directions.  The returned wrinkle is admissibility checked;
    amplitudes are shrunk if the fit self-intersects.
    """
    n_modes = basis_cache.n_modes
    if len(obs) < n_modes + 1:
        raise DataError("need at least N_w + 1 measurement points")
    if lambda0 is None:
        lambda0 = basis_cache.cov_template.corr_length
    operator = ForwardOperator(basis_cache, decay)
    tan_phi = np.tan(obs.phi)

    def solve_amplitudes(lam: float) -> np.ndarray:
        M = operator.tan_matrix(obs, lam)
        lhs = M.T @ M / noise_var + np.eye(n_modes)
        return np.linalg.solve(lhs, M.T @ tan_phi / noise_var)

    def objective(p) -> float:
        lam = float(p[0])
        if lam <= basis_cache.quantum:
            return np.inf
        a = solve_amplitudes(lam)
        pred = np.arctan(operator.tan_matrix(obs, lam) @ a)
        # the ridge penalty must appear here too: without it a shorter
        # length scale wins by overfitting with enormous amplitudes
        return float(np.sum((pred - obs.phi) ** 2) / noise_var + a @ a)

    res = optimize.minimize(objective, x0=[lambda0], method="Nelder-Mead",
                            options={"maxiter": max_iter, "xatol": 1e-3,
                                     "fatol": 1e-12})
    lam = float(res.x[0])
    a = solve_amplitudes(lam)
    xi = WrinkleParams(amplitudes=a, length_scale=lam)
    if not res.success and not np.isfinite(res.fun):
        raise FitError("MAP fit failed to converge", best=xi)

    if geom is not None:
        x1g, x3g = default_jacobian_grid(geom)
        basis = basis_cache.get(lam)
        shrink = 0
        while not jacobian_positive(xi, basis, decay, x1g, x3g):
            shrink += 1
            if shrink > 120:
                raise FitError("could not shrink fit to admissibility", best=xi)
            xi = WrinkleParams(amplitudes=xi.amplitudes * 0.9,
                               length_scale=lam)
    return xi


@dataclass(frozen=True)
class ChainConfig:
    """pCN chain tuning constants."""

    beta: float = 0.25
    sigma_pcn: float = 1.0
    burn_in: int | None = None       # default: 10 * estimated IACT
    thinning: int | None = None      # default: 2 * estimated IACT
    n_samples: int = 40              # thinned samples per chain
    n_chains: int = 5
    iact_pilot: int = 1000
    max_init_redraws: int = 1000
    check_admissibility: bool = True

    def __post_init__(self):
        if not (0 <= self.beta <= 1):
            raise ParameterError("beta must lie in [0, 1]")
        if self.sigma_pcn <= 0:
            raise ParameterError("sigma_pcn must be positive")
        if self.burn_in is not None and self.burn_in < 1:
            raise ParameterError("burn_in must be >= 1")
        if self.thinning is not None and self.thinning < 1:
            raise ParameterError("thinning must be >= 1")


def pcn_propose(v: np.ndarray, prior: PriorModel, cfg: ChainConfig,
                rng) -> np.ndarray:
    """xi' = sqrt(1 - beta^2) xi + beta omega, in prior-whitened coordinates."""
    z = prior.whiten(v)
    omega = cfg.sigma_pcn * rng.standard_normal(z.size)
    z_new = np.sqrt(1.0 - cfg.beta ** 2) * z + cfg.beta * omega
    return prior.unwhiten(z_new)


@dataclass
class ChainState:
    v: np.ndarray
    log_like: float


def _log_accept(posterior, z, z_new, ll, ll_new, sigma: float) -> float:
    """Log MH ratio for the whitened pCN proposal.

    Includes the proposal-density correction; at sigma_pcn = 1 the prior
    and correction terms cancel and the ratio is likelihood-only, the
    standard prior-reversible pCN acceptance.
    """
    zz = float(z @ z)
    zz_new = float(z_new @ z_new)
    return ((ll_new - ll) + 0.5 * (zz - zz_new)
            + (zz_new - zz) / (2.0 * sigma ** 2))


def mh_step(state: ChainState, posterior, cfg: ChainConfig, rng):
    """One Metropolis-Hastings step; returns (new_state, accepted)."""
    prior = posterior.prior
    v_new = pcn_propose(state.v, prior, cfg, rng)
    if cfg.check_admissibility and not posterior.admissible(v_new):
        return state, False
    ll_new = posterior.log_likelihood(v_new)
    log_alpha = _log_accept(posterior, prior.whiten(state.v),
                            prior.whiten(v_new), state.log_like, ll_new,
                            cfg.sigma_pcn)
    if np.log(rng.random()) < log_alpha:
        return ChainState(v=v_new, log_like=ll_new), True
    return state, False


@dataclass
class Chain:
    """Recorded pCN chain with diagnostics and thinned output."""

    states: np.ndarray          # (n_recorded, dim), from step 0
    log_likes: np.ndarray
    accepted: np.ndarray        # bool per step
    burn_in: int
    thinning: int
    thinned: np.ndarray         # (n_samples, dim)
    iact_per_component: np.ndarray
    chain_id: int = 0

    @property
    def acceptance_ratio(self) -> float:
        return float(np.mean(self.accepted))

    @property
    def iact_max(self) -> float:
        return float(np.max(self.iact_per_component))

    def to_csv(self, path):
        dim = self.states.shape[1]
        headers = (["step", "accepted", "log_like"]
                   + [f"a_{i + 1}" for i in range(dim - 1)] + ["lambda"])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(headers)
            for k in range(self.states.shape[0]):
                writer.writerow(
                    [k, int(self.accepted[k]), f"{self.log_likes[k]:.12g}"]
                    + [f"{x:.12g}" for x in self.states[k]])


def _initial_state(posterior, cfg: ChainConfig, rng) -> ChainState:
    for _ in range(cfg.max_init_redraws):
        v = posterior.prior.sample(rng)
        if not cfg.check_admissibility or posterior.admissible(v):
            return ChainState(v=v, log_like=posterior.log_likelihood(v))
    raise NumericalError("could not draw an admissible initial state")


def run_chain(posterior, cfg: ChainConfig, rng, chain_id: int = 0) -> Chain:
    """Burn in, estimate IACT, then record thinned posterior samples.

    When burn_in/thinning are not given they default to 10x and 2x the
    IACT estimated on an initial pilot segment.
    """
    state = _initial_state(posterior, cfg, rng)
    states, lls, accs = [state.v.copy()], [state.log_like], [False]

    def advance(n):
        nonlocal state
        for _ in range(n):
            state, acc = mh_step(state, posterior, cfg, rng)
            states.append(state.v.copy())
            lls.append(state.log_like)
            accs.append(acc)

    if cfg.burn_in is None or cfg.thinning is None:
        advance(cfg.iact_pilot)
        pilot = np.array(states)
        try:
            lam_est = max(iact(pilot[:, j]) for j in range(pilot.shape[1]))
        except DiagnosticError:
            lam_est = 10.0
        lam_est = float(np.clip(lam_est, 1.0, cfg.iact_pilot / 5.0))
    else:
        lam_est = None
    burn_in = cfg.burn_in if cfg.burn_in is not None \
        else int(np.ceil(10.0 * lam_est))
    thinning = cfg.thinning if cfg.thinning is not None \
        else max(1, int(np.ceil(2.0 * lam_est)))

    done = len(states) - 1
    if done < burn_in:
        advance(burn_in - done)

    thinned = []
    while len(thinned) < cfg.n_samples:
        advance(thinning)
        thinned.append(state.v.copy())

    arr = np.array(states)
    post = arr[burn_in:]
    iacts = np.array([_iact_or_one(post[:, j]) for j in range(arr.shape[1])])
    return Chain(states=arr, log_likes=np.array(lls),
                 accepted=np.array(accs, dtype=bool), burn_in=burn_in,
                 thinning=thinning, thinned=np.array(thinned),
                 iact_per_component=iacts, chain_id=chain_id)


def _acf(x: np.ndarray) -> np.ndarray:
    n = x.size
    x = x - x.mean()
    f = np.fft.rfft(x, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    if acf[0] <= 0:
        return np.zeros(n)
    return acf / acf[0]


def iact(series, c: float = 5.0) -> float:
    """Integrated autocorrelation time with automatic window truncation.

    Lambda = 1 + 2 sum rho_k, truncated at the smallest window W with
    W >= c * Lambda(W) (Sokal's criterion).
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise DiagnosticError("iact expects a scalar sequence")
    if x.size < 100:
        raise DiagnosticError("series too short for IACT estimation")
    rho = _acf(x)
    taus = 2.0 * np.cumsum(rho) - 1.0
    below = np.arange(taus.size) >= c * taus
    window = int(np.argmax(below)) if below.any() else taus.size - 1
    return float(max(taus[window], 1.0))


def _iact_or_one(x: np.ndarray) -> float:
    try:
        return iact(x)
    except DiagnosticError:
        return 1.0


@dataclass
class ConvergenceReport:
    rhat: np.ndarray
    max_rhat: float
    mean_discrepancy: float
    threshold: float
    converged: bool

    def as_dict(self):
        return {
            "rhat": [float(r) for r in self.rhat],
            "max_rhat": self.max_rhat,
            "mean_discrepancy": self.mean_discrepancy,
            "threshold": self.threshold,
            "converged": self.converged,
        }


def chain_convergence(chains, threshold: float = 1.1,
                      split: bool = False) -> ConvergenceReport:
    """Potential-scale-reduction statistic plus cross-chain mean check.

    The statistic per component is sqrt(1 + B_n / W) where B_n is the
    variance of the chain means and W the mean within-chain variance;
    identical chains give exactly 1.  With split=True each chain is first
    halved (more sensitive to non-stationarity, but identical chains no
    longer give exactly 1).
    """
    if len(chains) < 2:
        raise ParameterError("need at least 2 chains")
    groups = []
    for ch in chains:
        arr = ch.thinned if isinstance(ch, Chain) else np.asarray(ch, float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if split and arr.shape[0] >= 4:
            half = arr.shape[0] // 2
            groups.append(arr[:half])
            groups.append(arr[half:2 * half])
        else:
            groups.append(arr)
    dim = groups[0].shape[1]
    means = np.array([g.mean(axis=0) for g in groups])
    wvars = np.array([g.var(axis=0, ddof=1) for g in groups])
    W = wvars.mean(axis=0)
    B_n = means.var(axis=0, ddof=1)
    rhat = np.empty(dim)
    for j in range(dim):
        if B_n[j] == 0:
            rhat[j] = 1.0
        elif W[j] == 0:
            rhat[j] = np.inf
        else:
            rhat[j] = np.sqrt(1.0 + B_n[j] / W[j])
    pooled = np.sqrt(np.where(W > 0, W, 1.0))
    disc = 0.0
    for i in range(means.shape[0]):
        for k in range(i + 1, means.shape[0]):
            disc = max(disc, float(np.max(np.abs(means[i] - means[k]) / pooled)))
    max_rhat = float(np.max(rhat))
    return ConvergenceReport(rhat=rhat, max_rhat=max_rhat,
                             mean_discrepancy=disc, threshold=threshold,
                             converged=bool(max_rhat < threshold))


@dataclass
class TuneResult:
    beta: float
    achieved_ratio: float
    trace: list
    warning: str | None = None


def tune_beta(posterior, cfg: ChainConfig, rng, target_ratio: float = 0.25,
              pilot_steps: int = 5000, block: int = 100,
              tol: float = 0.05) -> TuneResult:
    """Robbins-Monro adjustment of beta toward a target acceptance ratio.

    Runs pilot blocks, nudging log(beta) by the acceptance error with a
    decaying gain; tuning stops once two consecutive blocks land inside
    the tolerance band.  Returns the tuned beta and the tuning trace.
    """
    if pilot_steps < 500:
        raise ParameterError("pilot_steps must be >= 500")
    lo, hi = 1e-3, 1.0
    beta = float(np.clip(cfg.beta, lo, hi))
    state = _initial_state(posterior, cfg, rng)
    trace = []
    in_band = 0
    for k in range(pilot_steps // block):
        block_cfg = ChainConfig(beta=beta, sigma_pcn=cfg.sigma_pcn,
                                burn_in=1, thinning=1,
                                check_admissibility=cfg.check_admissibility)
        n_acc = 0
        for _ in range(block):
            state, acc = mh_step(state, posterior, block_cfg, rng)
            n_acc += acc
        ratio = n_acc / block
        trace.append((beta, ratio))
        if abs(ratio - target_ratio) <= tol:
            in_band += 1
            if in_band >= 2:
                return TuneResult(beta=beta, achieved_ratio=ratio, trace=trace)
        else:
            in_band = 0
        gain = 2.0 / (k + 1) ** 0.6
        beta = float(np.clip(beta * np.exp(gain * (ratio - target_ratio)),
                             lo, hi))
    last_beta, last_ratio = trace[-1]
    warning = None
    if abs(last_ratio - target_ratio) > tol:
        warning = ("target acceptance not reached"
                   + (" (beta pinned at bound)"
                      if last_beta in (lo, hi) else ""))
    return TuneResult(beta=last_beta, achieved_ratio=last_ratio, trace=trace,
                      warning=warning)
