"""Two-parameter posterior study for the single-sine task.

With ``y ~ N(sin(5 (w x + b)), 0.1^2)`` and ``w, b ~ N(0, 1)`` the exact
posterior is cheap to tabulate on a grid, so an IAF fitted against the same
analytic likelihood can be scored against it: how much true density its
samples reach, and how many of the grid's modes they visit.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datasets import Task
from .errors import NumericError, TrainingDiverged
from .networks import LOG_2PI
from .posterior import IAFStack, gaussian_sample, iaf_sample, kl_terms
from .rng import make_rng
from .trainer import AdamState, LossTerms, TrainConfig, gradient_step

SINE_NOISE = 0.1


class SineLikelihood:
    """``y_i ~ N(sin(freq (w x_i + b)), noise^2)`` over ``z = (w, b)``."""

    def __init__(self, x, y, noise: float = SINE_NOISE, freq: float = 5.0):
        self.x = np.asarray(x, dtype=float).reshape(-1)
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.noise, self.freq = noise, freq

    @classmethod
    def from_task(cls, task: Task, **kw):
        return cls(task.x[:, 0], task.y, **kw)

    @property
    def _const(self):
        return -0.5 * LOG_2PI - math.log(self.noise)

    def mean(self, w, b):
        return np.sin((w * self.x + b) * self.freq)

    def mean_node(self, w, b):
        return ad.sin((ad.matmul(w, self.x[None, :]) + b) * self.freq)

    def grid(self, w, b) -> np.ndarray:
        """Summed log-likelihood at broadcastable arrays ``w``, ``b``."""
        r = (self.y - self.mean(np.asarray(w)[..., None], np.asarray(b)[..., None])) / self.noise
        return (self._const - 0.5 * r ** 2).sum(axis=-1)

    def node(self, z) -> ad.Node:
        """Summed log-likelihood per row of ``z [S, 2]`` as a tape node."""
        r = (self.y - self.mean_node(z[:, 0:1], z[:, 1:2])) * (1.0 / self.noise)
        return ad.sum_(self._const - 0.5 * ad.square(r), axis=1)


class LinearLikelihood(SineLikelihood):
    """``y_i ~ N(w x_i + b, noise^2)``; its posterior is Gaussian, hence unimodal."""

    def mean(self, w, b):
        return w * self.x + b

    def mean_node(self, w, b):
        return ad.matmul(w, self.x[None, :]) + b


def prior_logpdf(w, b):
    return -LOG_2PI - 0.5 * (np.square(w) + np.square(b))


@dataclass(frozen=True)
class GridSpec:
    lo: float = -3.0
    hi: float = 3.0
    n: int = 200

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.n

    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n) + 0.5) * self.step


@dataclass
class Mode:
    i: int  # omega index
    j: int  # b index
    omega: float
    b: float
    density: float


@dataclass
class PosteriorGrid:
    spec: GridSpec
    omega: np.ndarray
    b: np.ndarray
    density: np.ndarray  # [n_omega, n_b], integrates to 1 over the grid
    log_norm: float  # log of the cell-weighted sum of the unnormalized posterior
    modes: list = field(default_factory=list)

    @property
    def cell_area(self) -> float:
        return self.spec.step ** 2

    def cell_index(self, z):
        """Grid indices of points ``z [S, 2]``, clipped to the grid."""
        idx = np.floor((np.asarray(z) - self.spec.lo) / self.spec.step).astype(int)
        return np.clip(idx, 0, self.spec.n - 1)


def grid_posterior(task: Task | None, spec: GridSpec = GridSpec(), likelihood=None,
                   min_rel_height: float = 0.1) -> PosteriorGrid:
    """Tabulate the normalized posterior at cell centers; ``task=None`` gives the prior."""
    if spec.n < 2 or spec.hi <= spec.lo:
        raise ValueError(f"invalid grid {spec}")
    c = spec.centers()
    W, B = np.meshgrid(c, c, indexing="ij")
    logp = prior_logpdf(W, B)
    if likelihood is None and task is not None and task.n:
        likelihood = SineLikelihood.from_task(task)
    if likelihood is not None and len(likelihood.y):
        logp = logp + likelihood.grid(W, B)
    top = logp.max()
    if not np.isfinite(top):
        raise NumericError("non-finite log-posterior on the grid")
    unnorm = np.exp(logp - top)
    mass = unnorm.sum() * spec.step ** 2
    if not mass > 0 or not np.isfinite(mass):
        raise NumericError("posterior grid has zero total mass")
    grid = PosteriorGrid(spec, c, c.copy(), unnorm / mass, float(top + math.log(mass)))
    grid.modes = detect_modes(grid, min_rel_height)
    return grid


def log_density(grid: PosteriorGrid, z, likelihood) -> np.ndarray:
    """Normalized true log-posterior at arbitrary points ``z [S, 2]``."""
    z = np.asarray(z, dtype=float)
    logp = prior_logpdf(z[:, 0], z[:, 1])
    if likelihood is not None and len(likelihood.y):
        logp = logp + likelihood.grid(z[:, 0], z[:, 1])
    return logp - grid.log_norm


def detect_modes(grid: PosteriorGrid, min_rel_height: float = 0.1) -> list[Mode]:
    """Maxima over 8-neighbourhoods with density at least ``min_rel_height`` times the peak.

    Ties are broken in raster order: a cell must strictly exceed the
    neighbours that precede it and match or exceed the rest, so a flat
    peak yields one mode.
    """
    d = grid.density
    padded = np.pad(d, 1, constant_values=-np.inf)
    n0, n1 = d.shape
    is_max = np.ones_like(d, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                nb = padded[1 + di:1 + di + n0, 1 + dj:1 + dj + n1]
                is_max &= (d > nb) if (di, dj) < (0, 0) else (d >= nb)
    is_max &= d >= min_rel_height * d.max()
    modes = [Mode(int(i), int(j), float(grid.omega[i]), float(grid.b[j]), float(d[i, j]))
             for i, j in zip(*np.nonzero(is_max))]
    return sorted(modes, key=lambda m: -m.density)


def sample_grid(grid: PosteriorGrid, n: int, rng) -> np.ndarray:
    """Inverse-CDF draws over cells, uniform within each cell."""
    p = (grid.density * grid.cell_area).ravel()
    cells = np.minimum(np.searchsorted(np.cumsum(p), rng.random(n) * p.sum()), p.size - 1)
    i, j = np.unravel_index(cells, grid.density.shape)
    jitter = rng.random((n, 2)) * grid.spec.step
    return np.column_stack([grid.spec.lo + i * grid.spec.step, grid.spec.lo + j * grid.spec.step]) + jitter


# ---------------------------------------------------------------- coverage


@dataclass
class CoverageReport:
    n_modes: int
    n_samples: int
    covered: int
    coverage: float
    bridge_mass: float
    counts: list
    empty: bool = False


def _basin_assignment(points_idx, grid: PosteriorGrid, radius: float):
    """Nearest mode within ``radius`` cells for each grid-index point, or -1."""
    if not grid.modes:
        return np.full(len(points_idx), -1)
    centers = np.array([[m.i, m.j] for m in grid.modes], dtype=float)
    dist = np.sqrt(((points_idx[:, None, :] - centers[None]) ** 2).sum(axis=-1))
    nearest = dist.argmin(axis=1)
    return np.where(dist[np.arange(len(points_idx)), nearest] <= radius, nearest, -1)


def mode_coverage(samples, grid: PosteriorGrid, radius: float = 3.0, min_frac: float = 0.01) -> CoverageReport:
    """Fraction of grid modes receiving at least ``min_frac`` of the samples.

    Samples farther than ``radius`` cells from every mode count as bridge mass.
    """
    samples = np.asarray(samples, dtype=float).reshape(-1, 2)
    n_modes = len(grid.modes)
    if len(samples) == 0:
        return CoverageReport(n_modes, 0, 0, 0.0, 0.0, [0] * n_modes, empty=True)
    pos = (samples - grid.spec.lo) / grid.spec.step - 0.5  # continuous cell-index coordinates
    owner = _basin_assignment(pos, grid, radius)
    counts = np.bincount(owner[owner >= 0], minlength=n_modes)
    covered = int(np.sum(counts >= min_frac * len(samples)))
    return CoverageReport(n_modes, len(samples), covered, covered / max(n_modes, 1),
                          float(np.mean(owner < 0)), counts.tolist())


def posterior_bridge_mass(grid: PosteriorGrid, radius: float = 3.0) -> float:
    """Grid probability mass outside every mode basin."""
    n = grid.spec.n
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    owner = _basin_assignment(np.column_stack([ii.ravel(), jj.ravel()]).astype(float), grid, radius)
    p = (grid.density * grid.cell_area).ravel()
    return float(p[owner < 0].sum())


# ---------------------------------------------------------------- IAF fitting


@dataclass
class FlowSpec:
    posterior: str = "iaf"
    n_layers: int = 12
    hidden: int = 64
    reverse_alternate: bool = True


@dataclass
class FitResult:
    samples: np.ndarray
    log_q: np.ndarray
    log_density: np.ndarray  # true normalized log-posterior at the samples
    hpd_quantile: np.ndarray  # grid mass with density at or below each sample's cell
    params: dict
    losses: list

    @property
    def mean_log_density(self) -> float:
        return float(self.log_density.mean())


def hpd_quantiles(grid: PosteriorGrid, samples) -> np.ndarray:
    idx = grid.cell_index(samples)
    dens = grid.density[idx[:, 0], idx[:, 1]]
    flat = np.sort(grid.density.ravel())
    cum = np.cumsum(flat) * grid.cell_area
    pos = np.searchsorted(flat, dens, side="right") - 1
    return np.where(pos >= 0, cum[np.maximum(pos, 0)], 0.0)


def _draw(flow, params, eps):
    post = (params["q.mu"], params["q.log_sigma"])
    if flow is None:
        return gaussian_sample(post, eps)
    return iaf_sample(post, flow, params, eps)


def fit_iaf_to_likelihood(task: Task | None, flow_spec: FlowSpec = FlowSpec(), steps: int = 2000, seed: int = 0,
                          lr: float = 2e-4, n_samples: int = 64, n_eval: int = 1000, likelihood=None,
                          grid: PosteriorGrid | None = None) -> FitResult:
    """Minimize the single-task negative ELBO of a 2-d posterior against a fixed likelihood."""
    likelihood = likelihood if likelihood is not None else SineLikelihood.from_task(task)
    grid = grid or grid_posterior(task, likelihood=likelihood)
    flow = None
    params = {"q.mu": np.zeros(2), "q.log_sigma": np.zeros(2)}
    if flow_spec.posterior == "iaf":
        flow = IAFStack(2, 0, flow_spec.hidden, flow_spec.n_layers, flow_spec.reverse_alternate)
        params.update(flow.init(make_rng(seed, "fit-iaf", "init")))
    rng = make_rng(seed, "fit-iaf", "eps")
    cfg = TrainConfig()
    state, losses = AdamState(), []

    def loss_fn(nodes, eps):
        sample = _draw(flow, nodes, eps)
        terms = kl_terms(sample) - likelihood.node(sample.z)
        return LossTerms(ad.mean(terms), 0.0, 0.0)

    for step in range(steps):
        eps = rng.standard_normal((n_samples, 2))
        try:
            params, state, terms = gradient_step(params, lambda nodes: loss_fn(nodes, eps), state, lr, cfg)
        except NumericError as exc:
            raise TrainingDiverged(f"posterior fit diverged at step {step}: {exc}", step=step) from exc
        losses.append(float(terms.loss.value))
    eps = rng.standard_normal((n_eval, 2))
    sample = _draw(flow, params, eps)
    z = sample.z.value
    return FitResult(z, sample.log_q.value, log_density(grid, z, likelihood), hpd_quantiles(grid, z), params, losses)


def prior_samples(n: int, seed: int = 0) -> np.ndarray:
    return make_rng(seed, "prior-samples").standard_normal((n, 2))


# ---------------------------------------------------------------- exports


def export_grid_csv(grid: PosteriorGrid, path) -> Path:
    path = Path(path)
    W, B = np.meshgrid(grid.omega, grid.b, indexing="ij")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["omega", "b", "density"])
        for row in zip(W.ravel(), B.ravel(), grid.density.ravel()):
            w.writerow([repr(float(v)) for v in row])
    return path


def analysis_summary(grid: PosteriorGrid, coverage: CoverageReport | None = None, extra=None) -> dict:
    doc = {"grid": asdict(grid.spec), "n_modes": len(grid.modes), "modes": [asdict(m) for m in grid.modes],
           "bridge_mass_true": posterior_bridge_mass(grid)}
    if coverage is not None:
        doc["coverage"] = asdict(coverage)
    if extra:
        doc.update(extra)
    return doc


def export_summary_json(doc: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path
