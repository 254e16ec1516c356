"""Pipeline CLI: synth | extract | infer | propagate | compare.

Each subcommand reads the shared YAML config, derives its random streams
from the master seed and a per-stage code (so stages are reproducible in
isolation), writes machine-readable artifacts into the output directory
and emits a run manifest with artifact checksums.

Exit codes: 0 success, 2 validation error, 3 numerical/fit error,
4 convergence warning.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .bayes import (ChainConfig, ForwardOperator, NoiseModel, ObservationSet,
                    Posterior, build_prior, chain_convergence,
                    fit_map_observation, run_chain, tune_beta)
from .config import PipelineConfig, load_config
from .errors import (DataError, DefectChainError, NumericalError,
                     ParameterError, FitError)
from .klfield import WrinkleParams, default_jacobian_grid, jacobian_positive
from .mfia import (GrayImage, MisalignmentSamples, TrialFibreConfig,
                   hierarchical_sample, synth_bscan, unwrap_corner)
from .propagate import (ExternalProcessModel, SurrogateModel,
                        SurrogateStrengthModel, empirical_cdf, fit_surrogate,
                        knockdown_report, monte_carlo, weibull_cdf,
                        weibull_fit)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_CONVERGENCE = 4

_STAGE_CODES = {"synth": 1, "extract": 2, "infer": 3,
                "propagate": 4, "compare": 5}


def _rng(cfg: PipelineConfig, stage: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([cfg.seed, _STAGE_CODES[stage], *extra]))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(cfg: PipelineConfig, out: Path, stage: str,
                    artifacts: list, timings: dict):
    payload = {
        "stage": stage,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.snapshot(),
        "artifacts": {p.name: _sha256(p) for p in artifacts},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    _write_json(out / f"manifest_{stage}.json", payload)


def _prepare(config_path, seed, out):
    cfg = load_config(config_path)
    if seed is not None:
        cfg.raw["seed"] = int(seed)
    if out is not None:
        cfg.raw["output_dir"] = str(out)
    out_dir = Path(cfg.raw["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, out_dir


def _fibre_config(cfg: PipelineConfig) -> TrialFibreConfig:
    m = cfg["mfia"]
    ply_px = cfg.geometry().ply_thickness / m["pitch_x3_mm"]
    theta = np.deg2rad(m["theta_max_deg"])
    length = max(3.0, m["fibre_ply_multiple"] * ply_px)
    return TrialFibreConfig(fibre_length=length, theta_min=-theta,
                            theta_max=theta)


def _surrogate(cfg: PipelineConfig) -> SurrogateModel:
    m = cfg["model"]
    return SurrogateModel(m_star=m["m_star"], q=m["q"],
                          lambda_q=m["lambda_q"], q_lower=m["q_lower"],
                          lambda_q_lower=m["lambda_q_lower"])


def _strength_model(cfg: PipelineConfig, basis_cache, decay, geom):
    m = cfg["model"]
    if m["kind"] == "surrogate":
        return SurrogateStrengthModel(_surrogate(cfg), basis_cache, decay,
                                      geom)
    return ExternalProcessModel(m["command"], basis_cache, decay, geom,
                                timeout=m["timeout_s"], retries=m["retries"])


def _workers(cfg: PipelineConfig) -> int:
    env = os.environ.get("DEFECT_CHAIN_WORKERS")
    return int(env) if env else int(cfg["model"]["workers"])


def _load_xi_csv(path) -> list:
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(t) for t in row[1:]] for row in reader]
    if not rows:
        raise DataError(f"no samples in {path}")
    del header
    return [WrinkleParams.from_vector(np.array(r)) for r in rows]


def _write_xi_csv(path, samples: list):
    dim = samples[0].n_modes
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [f"a_{i + 1}" for i in range(dim)]
                        + ["lambda"])
        for k, xi in enumerate(samples):
            writer.writerow([k] + [f"{x:.12g}" for x in xi.as_vector()])


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(exists=True),
                      help="pipeline YAML config")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="override the master seed")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="override the output directory")(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Bayesian wrinkle-defect strength pipeline."""


def _run(stage, body):
    try:
        code = body()
    except (ParameterError, DataError) as exc:
        click.echo(f"{stage}: validation error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    except (NumericalError, FitError) as exc:
        click.echo(f"{stage}: numerical error: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except DefectChainError as exc:
        click.echo(f"{stage}: error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    sys.exit(code or EXIT_OK)


def _draw_scan_wrinkles(cfg: PipelineConfig, rng, count: int,
                        basis_cache, decay, geom) -> list:
    """Generating wrinkles for synthetic scans: one base profile with
    per-scan amplitude scaling and small shape/length-scale jitter."""
    s = cfg["synth"]
    n_modes = basis_cache.n_modes
    lam0 = cfg["covariance"]["lambda_mm"]
    x1g, x3g = default_jacobian_grid(geom)
    # a coherent base shape: amplitudes aligned with the mode-slope
    # direction at an off-center point, so the defect is locally steep
    # (random sign combinations of the same energy are much gentler)
    basis0 = basis_cache.get(lam0)
    x_star = 0.45 * basis0.length
    u = (decay.g1.deriv(x_star) * basis0.mode_values(x_star)
         + decay.g1(x_star) * basis0.mode_derivs(x_star))
    base = s["amplitude_sigma"] * u / np.linalg.norm(u)
    wrinkles = []
    factors = list(s["scale_factors"])
    for k in range(count):
        factor = factors[k % len(factors)]
        jitter = s["component_jitter"] * s["amplitude_sigma"] \
            * rng.standard_normal(n_modes)
        lam = lam0 * (1.0 + s["lambda_jitter"] * rng.standard_normal())
        lam = max(lam, basis_cache.quantum * 2)
        a = factor * base + jitter
        xi = WrinkleParams(amplitudes=a, length_scale=lam)
        guard = 0
        while not jacobian_positive(xi, basis_cache.get(lam), decay,
                                    x1g, x3g):
            a = a * 0.8
            xi = WrinkleParams(amplitudes=a, length_scale=lam)
            guard += 1
            if guard > 60:
                raise NumericalError("could not draw an admissible wrinkle")
        wrinkles.append(xi)
    return wrinkles


@main.command()
@_common_options
@click.option("--count", type=int, default=4, show_default=True,
              help="number of synthetic scans")
def synth(config_path, seed, out, count):
    """Generate synthetic B-scans with ground-truth misalignment."""

    def body():
        t0 = time.perf_counter()
        cfg, out_dir = _prepare(config_path, seed, out)
        if count < 0:
            raise ParameterError("count must be >= 0")
        geom = cfg.geometry()
        cache = cfg.basis_cache()
        decay = cfg.decay()
        m = cfg["mfia"]
        s = cfg["synth"]
        rng = _rng(cfg, "synth")
        artifacts = []
        wrinkles = _draw_scan_wrinkles(cfg, rng, count, cache, decay, geom)
        for k, xi in enumerate(wrinkles):
            img, truth = synth_bscan(
                xi, cache.get(xi.length_scale), decay, geom,
                pitch_x1=m["pitch_x1_mm"], pitch_x3=m["pitch_x3_mm"],
                noise_sigma=s["noise_sigma_gray"], rng=rng,
                blur_rate=s["blur_rate_mm"],
                focus_depth=cfg["decay"]["focus_depth_mm"])
            scan = out_dir / f"scan_{k}.pgm"
            img.to_pgm(scan)
            truth_csv = out_dir / f"truth_{k}.csv"
            truth.to_samples(source=scan.name).to_csv(truth_csv)
            artifacts += [scan, truth_csv]
        gen_csv = out_dir / "generating_wrinkles.csv"
        if wrinkles:
            _write_xi_csv(gen_csv, wrinkles)
            artifacts.append(gen_csv)
        _write_manifest(cfg, out_dir, "synth", artifacts,
                        {"total": time.perf_counter() - t0})
        click.echo(f"synth: wrote {count} scan/truth pairs to {out_dir}")

    _run("synth", body)


@main.command()
@_common_options
@click.argument("images", nargs=-1, type=click.Path(exists=True))
def extract(config_path, seed, out, images):
    """Extract misalignment samples from B-scan images."""

    def body():
        t0 = time.perf_counter()
        cfg, out_dir = _prepare(config_path, seed, out)
        geom = cfg.geometry()
        m = cfg["mfia"]
        paths = [Path(p) for p in images] \
            or sorted(out_dir.glob("scan_*.pgm"))
        if not paths:
            raise ParameterError("no input images given or found")
        fibre_cfg = _fibre_config(cfg)
        artifacts = []
        failures = 0
        for k, path in enumerate(paths):
            try:
                img = GrayImage.load(path, m["pitch_x1_mm"], m["pitch_x3_mm"])
                img = unwrap_corner(
                    img, geom,
                    focus_radius=geom.radius + m["focus_radius_offset_mm"],
                    flat=m["flat_scans"])
                tree, samples = hierarchical_sample(
                    img, fibre_cfg, levels=m["levels"], budgets=m["budgets"],
                    rng=_rng(cfg, "extract", k), m0=m["m0"],
                    source=path.name)
            except DefectChainError as exc:
                click.echo(f"extract: {path}: {exc}", err=True)
                failures += 1
                continue
            samples_csv = out_dir / f"samples_{k}.csv"
            samples.to_csv(samples_csv)
            tree_json = out_dir / f"tree_{k}.json"
            tree.to_json(tree_json)
            artifacts += [samples_csv, tree_json]
        _write_manifest(cfg, out_dir, "extract", artifacts,
                        {"total": time.perf_counter() - t0})
        click.echo(f"extract: processed {len(paths) - failures}/{len(paths)} "
                   f"images into {out_dir}")
        return EXIT_VALIDATION if failures else EXIT_OK

    _run("extract", body)


@main.command()
@_common_options
@click.argument("observations", nargs=-1, type=click.Path(exists=True))
def infer(config_path, seed, out, observations):
    """Fit MAP wrinkles, build the prior and run the pCN chains."""

    def body():
        t0 = time.perf_counter()
        cfg, out_dir = _prepare(config_path, seed, out)
        geom = cfg.geometry()
        cache = cfg.basis_cache()
        decay = cfg.decay()
        paths = [Path(p) for p in observations] \
            or sorted(out_dir.glob("samples_*.csv"))
        if not paths:
            raise ParameterError("no observation CSVs given or found")
        obs_set = ObservationSet([MisalignmentSamples.from_csv(p, p.name)
                                  for p in paths])
        timings = {}

        t = time.perf_counter()
        fit_var = float(cfg["prior"]["fit_noise_rad"]) ** 2
        fits = [fit_map_observation(obs, cache, decay, geom=geom,
                                    noise_var=fit_var)
                for obs in obs_set]
        timings["map_fits"] = time.perf_counter() - t
        prior = build_prior(fits, confidence=cfg["prior"]["confidence"])
        n_mean = int(np.mean([len(o) for o in obs_set]))
        noise = NoiseModel.case_study(n_mean,
                                      base_rad=cfg["noise"]["base_rad"],
                                      confidence=cfg["noise"]["confidence"])
        operator = ForwardOperator(cache, decay)
        posterior = Posterior(obs_set, prior, noise, operator, geom=geom)

        ch = cfg["chain"]
        per_chain = int(np.ceil(ch["n_samples_total"] / ch["n_chains"]))
        chain_cfg = ChainConfig(beta=ch["beta"], sigma_pcn=ch["sigma_pcn"],
                                burn_in=ch["burn_in"],
                                thinning=ch["thinning"],
                                n_samples=per_chain,
                                n_chains=ch["n_chains"],
                                iact_pilot=ch["iact_pilot"])
        tune_info = None
        if ch["tune"]:
            t = time.perf_counter()
            tuned = tune_beta(posterior, chain_cfg, _rng(cfg, "infer", 999),
                              target_ratio=ch["tune_target"],
                              pilot_steps=ch["tune_pilot_steps"])
            chain_cfg = ChainConfig(beta=tuned.beta,
                                    sigma_pcn=ch["sigma_pcn"],
                                    burn_in=ch["burn_in"],
                                    thinning=ch["thinning"],
                                    n_samples=per_chain,
                                    n_chains=ch["n_chains"],
                                    iact_pilot=ch["iact_pilot"])
            tune_info = {"beta": tuned.beta,
                         "achieved_ratio": tuned.achieved_ratio,
                         "warning": tuned.warning}
            timings["tune"] = time.perf_counter() - t

        t = time.perf_counter()
        chains = [run_chain(posterior, chain_cfg, _rng(cfg, "infer", c),
                            chain_id=c)
                  for c in range(ch["n_chains"])]
        timings["chains"] = time.perf_counter() - t

        artifacts = []
        for chain in chains:
            p = out_dir / f"chain_{chain.chain_id}.csv"
            chain.to_csv(p)
            artifacts.append(p)
        thinned = [WrinkleParams.from_vector(v)
                   for chain in chains for v in chain.thinned]
        thinned = thinned[:ch["n_samples_total"]]
        xi_csv = out_dir / "xi_samples.csv"
        _write_xi_csv(xi_csv, thinned)
        artifacts.append(xi_csv)

        fits_csv = out_dir / "map_fits.csv"
        _write_xi_csv(fits_csv, fits)
        artifacts.append(fits_csv)
        prior_json = out_dir / "prior.json"
        _write_json(prior_json, {
            "mean": [float(v) for v in prior.mean],
            "variance": [float(v) for v in prior.variance],
            "inflation": prior.inflation,
            "confidence": prior.confidence,
        })
        artifacts.append(prior_json)

        report = chain_convergence(chains) if len(chains) >= 2 else None
        diagnostics = {
            "seed": cfg.seed,
            "config": cfg.snapshot(),
            "noise_variance": noise.variance,
            "beta": chain_cfg.beta,
            "sigma_pcn": chain_cfg.sigma_pcn,
            "tuning": tune_info,
            "chains": [{
                "chain_id": c.chain_id,
                "acceptance_ratio": c.acceptance_ratio,
                "burn_in": c.burn_in,
                "thinning": c.thinning,
                "iact_per_component": [float(v)
                                       for v in c.iact_per_component],
                "iact_max": c.iact_max,
            } for c in chains],
            "convergence": report.as_dict() if report else None,
            "n_thinned": len(thinned),
        }
        diag_json = out_dir / "diagnostics.json"
        _write_json(diag_json, diagnostics)
        artifacts.append(diag_json)
        timings["total"] = time.perf_counter() - t0
        _write_manifest(cfg, out_dir, "infer", artifacts, timings)
        click.echo(f"infer: {len(thinned)} thinned samples from "
                   f"{len(chains)} chains -> {out_dir}")
        if report and not report.converged:
            click.echo(f"infer: convergence warning, max R-hat "
                       f"{report.max_rhat:.3f}", err=True)
            return EXIT_CONVERGENCE
        return EXIT_OK

    _run("infer", body)


def _propagate_set(cfg, samples, basis_cache, decay, geom):
    model = _strength_model(cfg, basis_cache, decay, geom)
    dist = monte_carlo(samples, model, workers=_workers(cfg))
    return model, dist


def _cdf_points_csv(path, dist, shape_scale):
    v, p = empirical_cdf(dist.strengths)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Mc", "empirical_cdf", "fitted_cdf"])
        for vi, pi in zip(v, p):
            fitted = (f"{weibull_cdf(vi, *shape_scale):.12g}"
                      if shape_scale else "")
            writer.writerow([f"{vi:.12g}", f"{pi:.12g}", fitted])


@main.command()
@_common_options
@click.option("--xi", "xi_path", type=click.Path(exists=True), default=None,
              help="thinned posterior sample CSV (default out/xi_samples.csv)")
def propagate(config_path, seed, out, xi_path):
    """Propagate posterior wrinkles through the strength model."""

    def body():
        t0 = time.perf_counter()
        cfg, out_dir = _prepare(config_path, seed, out)
        geom = cfg.geometry()
        cache = cfg.basis_cache()
        decay = cfg.decay()
        xi_file = Path(xi_path) if xi_path else out_dir / "xi_samples.csv"
        samples = _load_xi_csv(xi_file)
        model, dist = _propagate_set(cfg, samples, cache, decay, geom)

        pairs = [(s, m) for s, m in zip(dist.max_slopes, dist.strengths)
                 if np.isfinite(s) and s > 0]
        m_star = cfg["model"]["m_star"]
        try:
            surrogate_fit = fit_surrogate(pairs, m_star) if len(pairs) >= 5 \
                else None
        except FitError as exc:
            surrogate_fit = None
            surrogate_err = str(exc)
        else:
            surrogate_err = None

        report = knockdown_report(dist, m_star, surrogate=surrogate_fit)
        if surrogate_err:
            report["surrogate"] = {"error": surrogate_err}
        artifacts = []
        strengths_csv = out_dir / "strengths.csv"
        dist.to_csv(strengths_csv)
        artifacts.append(strengths_csv)
        report_json = out_dir / "strength_report.json"
        _write_json(report_json, report)
        artifacts.append(report_json)
        shape_scale = None
        if isinstance(report.get("weibull"), dict) \
                and "modulus" in report["weibull"]:
            shape_scale = (report["weibull"]["modulus"],
                           report["weibull"]["scale"])
        cdf_csv = out_dir / "cdf_points.csv"
        _cdf_points_csv(cdf_csv, dist, shape_scale)
        artifacts.append(cdf_csv)
        _write_manifest(cfg, out_dir, "propagate", artifacts,
                        {"total": time.perf_counter() - t0})
        click.echo(f"propagate: {dist.n_success} strengths "
                   f"(mean {dist.mean:.4g}) -> {out_dir}")

    _run("propagate", body)


def _draw_prior_samples(prior_payload, n, basis_cache, decay, geom, rng):
    mean = np.array(prior_payload["mean"])
    std = np.sqrt(np.array(prior_payload["variance"]))
    x1g, x3g = default_jacobian_grid(geom)
    out = []
    guard = 0
    while len(out) < n:
        v = mean + std * rng.standard_normal(mean.size)
        guard += 1
        if guard > 100 * n:
            raise NumericalError("could not draw admissible prior samples")
        if v[-1] <= 0:
            continue
        xi = WrinkleParams.from_vector(v)
        if jacobian_positive(xi, basis_cache.get(xi.length_scale), decay,
                             x1g, x3g):
            out.append(xi)
    return out


@main.command()
@_common_options
@click.option("--xi", "xi_path", type=click.Path(exists=True), default=None,
              help="posterior sample CSV (default out/xi_samples.csv)")
@click.option("--prior", "prior_path", type=click.Path(exists=True),
              default=None, help="prior JSON (default out/prior.json)")
def compare(config_path, seed, out, xi_path, prior_path):
    """Contrast posterior sampling against independent prior sampling."""

    def body():
        t0 = time.perf_counter()
        cfg, out_dir = _prepare(config_path, seed, out)
        geom = cfg.geometry()
        cache = cfg.basis_cache()
        decay = cfg.decay()
        xi_file = Path(xi_path) if xi_path else out_dir / "xi_samples.csv"
        prior_file = Path(prior_path) if prior_path else out_dir / "prior.json"
        posterior_samples = _load_xi_csv(xi_file)
        with open(prior_file) as fh:
            prior_payload = json.load(fh)
        rng = _rng(cfg, "compare")
        prior_samples = _draw_prior_samples(prior_payload,
                                            len(posterior_samples), cache,
                                            decay, geom, rng)

        def summarize(samples):
            _, dist = _propagate_set(cfg, samples, cache, decay, geom)
            entry = {
                "n_samples": dist.n_success,
                "mean_strength": dist.mean,
                "variance": dist.variance,
            }
            try:
                mw, ms = weibull_fit(dist.strengths)
                entry["weibull_modulus"] = mw
                entry["weibull_scale"] = ms
            except FitError as exc:
                entry["weibull_error"] = str(exc)
            return entry

        report = {
            "model_kind": cfg["model"]["kind"],
            "posterior_sampling": summarize(posterior_samples),
            "prior_sampling": summarize(prior_samples),
        }
        artifacts = []
        report_json = out_dir / "compare_report.json"
        _write_json(report_json, report)
        artifacts.append(report_json)
        prior_csv = out_dir / "prior_samples.csv"
        _write_xi_csv(prior_csv, prior_samples)
        artifacts.append(prior_csv)
        _write_manifest(cfg, out_dir, "compare", artifacts,
                        {"total": time.perf_counter() - t0})
        post_mw = report["posterior_sampling"].get("weibull_modulus")
        prior_mw = report["prior_sampling"].get("weibull_modulus")
        click.echo(f"compare: Weibull modulus posterior={post_mw} "
                   f"prior={prior_mw} -> {out_dir}")

    _run("compare", body)


if __name__ == "__main__":
    main()
