import numpy as np
import pytest
from scipy import stats

from defectchain.bayes import (Chain, ChainConfig, ChainState, ForwardOperator,
                               NoiseModel, ObservationSet, Posterior,
                               PriorModel, build_prior, chain_convergence,
                               data_misfit, fit_map_observation, iact, mh_step,
                               misfit, pcn_propose, run_chain,
                               student_t_factor, tune_beta)
from defectchain.errors import (DataError, DiagnosticError, FitError,
                                ParameterError)
from defectchain.klfield import WrinkleParams, eval_misalignment
from defectchain.mfia import MisalignmentSamples


def _observation(basis, decay, rng, n_points=120, scale=0.5, lam=12.9,
                 amplitudes=None):
    if amplitudes is None:
        amplitudes = scale * rng.standard_normal(basis.n_modes)
    xi = WrinkleParams(amplitudes=amplitudes, length_scale=lam)
    x1 = rng.uniform(0.05 * basis.length, 0.95 * basis.length, n_points)
    x3 = rng.uniform(1.0, 9.0, n_points)
    phi = eval_misalignment(xi, basis, decay, x1, x3)
    return xi, MisalignmentSamples(x1, x3, phi)


class _FlatPosterior:
    """Likelihood == const: the chain should target the prior."""

    def __init__(self, prior):
        self.prior = prior

    def admissible(self, v):
        return True

    def log_likelihood(self, v):
        return 0.0


class TestPriorModel:
    def test_student_t_factor_values(self):
        assert student_t_factor(4) == pytest.approx(3.18, abs=0.005)
        assert student_t_factor(2) == pytest.approx(12.71, abs=0.005)
        with pytest.raises(ParameterError):
            student_t_factor(1)

    def test_whiten_round_trip(self, rng):
        prior = PriorModel(mean=rng.standard_normal(6),
                           variance=rng.uniform(0.5, 2.0, 6))
        v = rng.standard_normal(6)
        assert np.allclose(prior.unwhiten(prior.whiten(v)), v)

    def test_log_density_matches_scipy(self, rng):
        mean = np.array([1.0, -2.0])
        var = np.array([0.5, 3.0])
        prior = PriorModel(mean=mean, variance=var)
        v = np.array([0.3, 0.7])
        expected = stats.norm.logpdf(v, loc=mean, scale=np.sqrt(var)).sum()
        assert prior.log_density(v) == pytest.approx(expected)

    def test_build_prior(self):
        fits = [np.array([1.0, 10.0]), np.array([2.0, 11.0]),
                np.array([3.0, 12.0]), np.array([2.0, 9.0])]
        prior = build_prior(fits)
        vectors = np.array(fits)
        assert np.allclose(prior.mean, vectors.mean(axis=0))
        assert np.allclose(prior.variance,
                           vectors.var(axis=0, ddof=1) * prior.inflation)
        assert prior.inflation == pytest.approx(3.18, abs=0.005)

    def test_build_prior_degenerate(self):
        fits = [np.array([1.0, 5.0]), np.array([1.0, 6.0]),
                np.array([1.0, 7.0])]
        with pytest.raises(FitError):
            build_prior(fits)

    def test_build_prior_needs_two(self):
        with pytest.raises(ParameterError):
            build_prior([np.array([1.0])])


class TestNoiseModel:
    def test_large_n_approaches_base(self):
        assert NoiseModel.case_study(10 ** 6).variance == pytest.approx(
            0.044, rel=1e-4)

    def test_small_n_inflates(self):
        assert NoiseModel.case_study(5).variance > 0.044

    def test_positive_required(self):
        with pytest.raises(ParameterError):
            NoiseModel(variance=0.0)


class TestForwardOperator:
    def test_predicts_misalignment(self, cache, decay, basis, rng):
        xi, obs = _observation(basis, decay, rng)
        op = ForwardOperator(cache, decay)
        pred = op.predict_angles(xi, obs)
        assert np.allclose(pred, obs.phi, atol=1e-10)

    def test_design_matrix_cached(self, cache, decay, basis, rng):
        _, obs = _observation(basis, decay, rng)
        op = ForwardOperator(cache, decay)
        M1 = op.tan_matrix(obs, 12.9)
        M2 = op.tan_matrix(obs, 12.91)  # same quantized bucket
        assert M1 is M2


class TestMisfit:
    def test_squared_value(self, cache, decay, basis, rng):
        xi, obs = _observation(basis, decay, rng)
        noise = NoiseModel(variance=0.044)
        op = ForwardOperator(cache, decay)
        shifted = MisalignmentSamples(obs.x1, obs.x3, obs.phi + 0.01)
        d = misfit(xi, shifted, noise, op)
        assert d == pytest.approx(0.5 * len(obs) * 0.01 ** 2 / 0.044,
                                  rel=1e-6)

    def test_as_written_is_sqrt(self, cache, decay, basis, rng):
        xi, obs = _observation(basis, decay, rng)
        noise = NoiseModel(variance=0.044)
        op = ForwardOperator(cache, decay)
        shifted = MisalignmentSamples(obs.x1, obs.x3, obs.phi + 0.02)
        sq = misfit(xi, shifted, noise, op, mode="squared")
        aw = misfit(xi, shifted, noise, op, mode="as_written")
        assert aw == pytest.approx(0.5 * np.sqrt(2.0 * sq))
        with pytest.raises(ParameterError):
            misfit(xi, shifted, noise, op, mode="nope")

    def test_min_over_observations(self, cache, decay, basis, rng):
        xi, obs = _observation(basis, decay, rng)
        noise = NoiseModel(variance=0.044)
        op = ForwardOperator(cache, decay)
        far = MisalignmentSamples(obs.x1, obs.x3, obs.phi + 0.3)
        d_obs = ObservationSet([far, obs])
        assert data_misfit(xi, d_obs, noise, op) == pytest.approx(
            misfit(xi, obs, noise, op))


class TestMapFit:
    def test_recovers_generating_wrinkle(self, cache, decay, basis, geom,
                                         rng):
        xi, obs = _observation(basis, decay, rng, n_points=400, scale=0.4)
        fit = fit_map_observation(obs, cache, decay, geom=geom)
        op = ForwardOperator(cache, decay)
        pred = op.predict_angles(fit, obs)
        rms = np.sqrt(np.mean((pred - obs.phi) ** 2))
        assert rms < 1e-3

    def test_needs_enough_points(self, cache, decay, basis, rng):
        _, obs = _observation(basis, decay, rng, n_points=10)
        with pytest.raises(DataError):
            fit_map_observation(obs, cache, decay)


class TestPcn:
    def test_beta_zero_identity(self, rng):
        prior = PriorModel(mean=np.zeros(4), variance=np.ones(4))
        cfg = ChainConfig(beta=0.0)
        v = rng.standard_normal(4)
        assert np.allclose(pcn_propose(v, prior, cfg, rng), v)

    def test_beta_one_iid(self, rng):
        prior = PriorModel(mean=np.full(4, 2.0), variance=np.full(4, 9.0))
        cfg = ChainConfig(beta=1.0)
        draws = np.array([pcn_propose(np.zeros(4), prior, cfg, rng)
                          for _ in range(2000)])
        assert draws.mean() == pytest.approx(2.0, abs=0.15)
        assert draws.std() == pytest.approx(3.0, abs=0.15)

    def test_flat_likelihood_always_accepts_at_unit_sigma(self, rng):
        prior = PriorModel(mean=np.zeros(3), variance=np.ones(3))
        post = _FlatPosterior(prior)
        cfg = ChainConfig(beta=0.5, sigma_pcn=1.0)
        state = ChainState(v=prior.sample(rng), log_like=0.0)
        accepts = [mh_step(state, post, cfg, rng)[1] for _ in range(200)]
        assert all(accepts)

    def test_invalid_config(self):
        with pytest.raises(ParameterError):
            ChainConfig(beta=1.5)
        with pytest.raises(ParameterError):
            ChainConfig(sigma_pcn=0.0)


class TestRunChain:
    def test_counts_and_csv(self, tmp_path, rng):
        prior = PriorModel(mean=np.zeros(3), variance=np.ones(3))
        post = _FlatPosterior(prior)
        cfg = ChainConfig(beta=0.4, burn_in=50, thinning=5, n_samples=20,
                          iact_pilot=200)
        chain = run_chain(post, cfg, rng, chain_id=3)
        assert chain.thinned.shape == (20, 3)
        assert chain.burn_in == 50 and chain.thinning == 5
        assert chain.states.shape[0] == 1 + 50 + 20 * 5
        assert 0.0 < chain.acceptance_ratio <= 1.0
        path = tmp_path / "chain.csv"
        chain.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "step,accepted,log_like,a_1,a_2,lambda"

    def test_auto_burn_in(self, rng):
        prior = PriorModel(mean=np.zeros(2), variance=np.ones(2))
        post = _FlatPosterior(prior)
        cfg = ChainConfig(beta=0.8, n_samples=5, iact_pilot=300)
        chain = run_chain(post, cfg, rng)
        assert chain.burn_in >= 10
        assert chain.thinning >= 2


class TestIact:
    def test_short_series_rejected(self):
        with pytest.raises(DiagnosticError):
            iact(np.arange(50, dtype=float))
        with pytest.raises(DiagnosticError):
            iact(np.zeros((200, 2)))

    def test_iid_near_one(self, rng):
        lam = iact(rng.standard_normal(50_000))
        assert lam == pytest.approx(1.0, abs=0.2)


class TestConvergence:
    def test_identical_chains_give_exactly_one(self, rng):
        arr = rng.standard_normal((40, 3))
        report = chain_convergence([arr, arr.copy(), arr.copy()])
        assert np.all(report.rhat == 1.0)
        assert report.converged

    def test_disjoint_chains_flagged(self, rng):
        a = rng.standard_normal((40, 2))
        b = a + 50.0
        report = chain_convergence([a, b])
        assert report.max_rhat > 5.0
        assert not report.converged
        assert report.mean_discrepancy > 5.0

    def test_needs_two_chains(self, rng):
        with pytest.raises(ParameterError):
            chain_convergence([rng.standard_normal((40, 2))])

    def test_as_dict_round_trips_to_json(self, rng):
        import json

        a = rng.standard_normal((40, 2))
        report = chain_convergence([a, a + 0.01])
        json.dumps(report.as_dict())


class TestTuneBeta:
    def test_pilot_floor(self, rng):
        prior = PriorModel(mean=np.zeros(2), variance=np.ones(2))
        post = _FlatPosterior(prior)
        with pytest.raises(ParameterError):
            tune_beta(post, ChainConfig(), rng, pilot_steps=100)

    def test_flat_posterior_pins_beta_high(self, rng):
        # everything is accepted, so beta is driven to the upper bound
        prior = PriorModel(mean=np.zeros(2), variance=np.ones(2))
        post = _FlatPosterior(prior)
        res = tune_beta(post, ChainConfig(beta=0.2), rng, pilot_steps=1000)
        assert res.beta == 1.0
        assert res.warning is not None
