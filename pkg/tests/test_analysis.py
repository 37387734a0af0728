import json
import math

import numpy as np
import pytest

from deepprior.analysis import (
    FlowSpec,
    GridSpec,
    LinearLikelihood,
    SineLikelihood,
    analysis_summary,
    detect_modes,
    export_grid_csv,
    fit_iaf_to_likelihood,
    grid_posterior,
    log_density,
    mode_coverage,
    posterior_bridge_mass,
    prior_samples,
    sample_grid,
)
from deepprior.datasets import Task, gen_single_sine
from deepprior.rng import make_rng


@pytest.fixture(scope="module")
def sine_task():
    return gen_single_sine(0)


@pytest.fixture(scope="module")
def sine_grid(sine_task):
    return grid_posterior(sine_task[0])


class MixtureLikelihood:
    """Log of an equal mixture of isotropic Gaussian bumps, standing in for a likelihood."""

    y = np.zeros(1)

    def __init__(self, centers, scale=0.15):
        self.centers = np.asarray(centers, dtype=float)
        self.scale = scale

    def grid(self, w, b):
        w, b = np.asarray(w)[..., None], np.asarray(b)[..., None]
        r2 = (w - self.centers[:, 0]) ** 2 + (b - self.centers[:, 1]) ** 2
        return np.logaddexp.reduce(-0.5 * r2 / self.scale ** 2, axis=-1)


def test_prior_grid_matches_renormalized_analytic_prior():
    grid = grid_posterior(None)
    W, B = np.meshgrid(grid.omega, grid.b, indexing="ij")
    analytic = np.exp(-0.5 * (W ** 2 + B ** 2)) / (2 * math.pi)
    analytic /= analytic.sum() * grid.cell_area
    assert np.abs(grid.density - analytic).max() < 1e-10


def test_grid_density_is_normalized(sine_grid):
    assert sine_grid.density.sum() * sine_grid.cell_area == pytest.approx(1.0, abs=1e-12)
    assert np.all(sine_grid.density >= 0)


def test_true_parameters_sit_above_median_density(sine_task, sine_grid):
    _, (omega, b) = sine_task
    i, j = sine_grid.cell_index(np.array([[omega, b]]))[0]
    assert sine_grid.density[i, j] > np.median(sine_grid.density)


def test_two_point_sine_task_is_multimodal(sine_grid):
    assert len(sine_grid.modes) >= 2
    dens = [m.density for m in sine_grid.modes]
    assert dens == sorted(dens, reverse=True)


def test_gaussian_posterior_has_one_mode():
    lik = LinearLikelihood([-1.0, 0.5, 2.0], [0.3, -0.2, 1.1], noise=0.5)
    assert len(grid_posterior(None, likelihood=lik).modes) == 1
    assert len(grid_posterior(None).modes) == 1  # flat 2x2 peak of the prior at the centre


def test_likelihood_is_periodic_in_b(sine_task):
    lik = SineLikelihood.from_task(sine_task[0])
    rng = make_rng(0, "period")
    w, b = rng.normal(size=50), rng.normal(size=50)
    np.testing.assert_allclose(lik.grid(w, b + 2 * math.pi / 5), lik.grid(w, b), atol=1e-10)


def test_shifted_modes_have_equal_likelihood(sine_task, sine_grid):
    lik = SineLikelihood.from_task(sine_task[0])
    m = sine_grid.modes[0]
    for k in (-2, -1, 1, 2):
        assert lik.grid(m.omega, m.b + 2 * math.pi * k / 5) == pytest.approx(lik.grid(m.omega, m.b), abs=1e-10)


def test_modes_invariant_to_monotone_rescaling(sine_grid):
    base = [(m.i, m.j) for m in sine_grid.modes]
    for f in (lambda d: 3.0 * d, np.sqrt, lambda d: d ** 2 * 7.0):
        scaled = type(sine_grid)(sine_grid.spec, sine_grid.omega, sine_grid.b, f(sine_grid.density), 0.0)
        # the relative-height threshold moves under nonlinear maps, so compare with it disabled
        assert {(m.i, m.j) for m in detect_modes(scaled, 0.0)} == {(m.i, m.j) for m in detect_modes(sine_grid, 0.0)}
    scaled = type(sine_grid)(sine_grid.spec, sine_grid.omega, sine_grid.b, 5.0 * sine_grid.density, 0.0)
    assert [(m.i, m.j) for m in detect_modes(scaled, 0.1)] == base


def test_log_density_agrees_with_grid(sine_task, sine_grid):
    lik = SineLikelihood.from_task(sine_task[0])
    W, B = np.meshgrid(sine_grid.omega[::37], sine_grid.b[::41], indexing="ij")
    ld = log_density(sine_grid, np.column_stack([W.ravel(), B.ravel()]), lik)
    np.testing.assert_allclose(np.exp(ld), sine_grid.density[::37, ::41].ravel(), rtol=1e-10)


def test_gaussian_fit_recovers_linear_posterior_mode():
    x = np.array([-1.0, 0.0, 1.0, 2.0])
    y = np.array([-1.2, -0.4, 0.3, 1.2])
    lik = LinearLikelihood(x, y, noise=0.3)
    grid = grid_posterior(None, likelihood=lik)
    # closed-form Gaussian posterior mean
    X = np.column_stack([x, np.ones_like(x)])
    prec = np.eye(2) + X.T @ X / lik.noise ** 2
    mean = np.linalg.solve(prec, X.T @ y / lik.noise ** 2)
    top = grid.modes[0]
    assert np.abs(np.array([top.omega, top.b]) - mean).max() <= grid.spec.step
    fit = fit_iaf_to_likelihood(None, FlowSpec("gaussian"), steps=1500, lr=1e-2, seed=0, likelihood=lik, grid=grid)
    assert np.abs(fit.params["q.mu"] - mean).max() <= grid.spec.step


def test_zero_steps_leaves_the_prior(sine_task):
    fit = fit_iaf_to_likelihood(sine_task[0], FlowSpec("gaussian"), steps=0, n_eval=4000)
    assert np.abs(fit.samples.mean(axis=0)).max() < 0.1
    assert np.abs(fit.samples.std(axis=0) - 1).max() < 0.05


def test_fitted_flow_beats_prior_samples(sine_task, sine_grid):
    lik = SineLikelihood.from_task(sine_task[0])
    fit = fit_iaf_to_likelihood(sine_task[0], FlowSpec("iaf", 4, 16), steps=600, lr=3e-3, seed=1,
                                likelihood=lik, grid=sine_grid, n_eval=500)
    prior = log_density(sine_grid, prior_samples(500), lik).mean()
    assert fit.mean_log_density > prior
    assert np.isfinite(fit.losses).all()
    assert np.all((fit.hpd_quantile >= 0) & (fit.hpd_quantile <= 1 + 1e-12))


def test_coverage_of_samples_at_a_single_mode(sine_grid):
    m = sine_grid.modes[0]
    cov = mode_coverage(np.tile([m.omega, m.b], (100, 1)), sine_grid)
    assert cov.covered == 1
    assert cov.coverage == pytest.approx(1 / len(sine_grid.modes))
    assert cov.bridge_mass == 0.0


def test_grid_samples_cover_every_mode_of_a_mixture():
    lik = MixtureLikelihood([[-1.0, 0.0], [1.0, 1.0], [0.5, -1.2]])
    grid = grid_posterior(None, likelihood=lik)
    assert len(grid.modes) == 3
    samples = sample_grid(grid, 20000, make_rng(0, "grid-samples"))
    cov = mode_coverage(samples, grid)
    assert cov.coverage == 1.0
    assert cov.bridge_mass == pytest.approx(posterior_bridge_mass(grid), abs=0.01)


def test_empty_sample_set_is_flagged(sine_grid):
    cov = mode_coverage(np.zeros((0, 2)), sine_grid)
    assert cov.empty and cov.coverage == 0.0


def test_grid_csv_and_summary(tmp_path, sine_grid):
    path = export_grid_csv(sine_grid, tmp_path / "grid.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "omega,b,density" and len(lines) == 200 * 200 + 1
    doc = analysis_summary(sine_grid)
    json.dumps(doc)
    assert doc["n_modes"] == len(sine_grid.modes)


def test_invalid_grid_rejected():
    with pytest.raises(ValueError):
        grid_posterior(None, GridSpec(1.0, -1.0, 10))
    with pytest.raises(ValueError):
        grid_posterior(Task(0, [1.0], [0.0]), GridSpec(-1.0, 1.0, 1))
