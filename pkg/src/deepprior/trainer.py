"""Joint stochastic-ELBO training of the shared network and the per-task posteriors.

Shared parameters (``net.*``, ``flow.*``) and the per-task tables (``task.mu``,
``task.log_sigma``, ``task.context``) live in one flat parameter map. A
mini-batch draws ``(x, y, j)`` triples; each triple gets its own posterior draw
``z_j`` and contributes ``-n_j log p(y | x, z_j) + kl_weight * KL_j`` to the
batch-mean loss.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .datasets import MetaDataset, Minibatch, Task, sample_minibatch
from .errors import ConfigurationError, ContractError, FormatError, NumericError, TrainingDiverged
from .networks import ResidualMLP, gaussian_loglik, hetero_noise, regress_forward
from .posterior import IAFStack, TaskPosteriorParams, gaussian_sample, iaf_sample, kl_terms
from .rng import make_rng, restore_rng, rng_state

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DPCK"
CHECKPOINT_VERSION = 1
BASELINE_MODES = ("full", "no_kl_deterministic")
METRICS_COLUMNS = ("step", "loss", "nll", "kl", "wall_ms")


@dataclass
class ModelConfig:
    d_x: int = 1
    d_z: int = 16
    d_c: int | None = None  # defaults to d_z
    width: int = 128
    n_layers: int = 12
    layer_norm: bool = True
    posterior: str = "iaf"
    flow_layers: int = 2
    flow_hidden: int = 32
    flow_reverse: bool = False

    def __post_init__(self):
        if self.d_c is None:
            self.d_c = self.d_z
        if self.posterior not in ("iaf", "gaussian"):
            raise ConfigurationError(f"unknown posterior family '{self.posterior}'")


@dataclass
class TrainConfig:
    n_mb: int = 64
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    kl_weight: float = 1.0
    n_mc: int = 1
    max_steps: int = 50_000
    eval_every: int = 500
    seed: int = 0
    baseline_mode: str = "full"
    weight_decay: float = 1e-5
    sampling: str = "task"
    adapt_steps: int = 1000
    adapt_lr: float | None = None
    record_wall_time: bool = True

    def __post_init__(self):
        if self.kl_weight < 0:
            raise ConfigurationError("kl_weight must be nonnegative")
        if self.n_mb < 1 or self.n_mc < 1:
            raise ConfigurationError("n_mb and n_mc must be at least 1")
        if self.baseline_mode not in BASELINE_MODES:
            raise ConfigurationError(f"unknown baseline_mode '{self.baseline_mode}'")

    @property
    def deterministic(self) -> bool:
        return self.baseline_mode == "no_kl_deterministic"


def is_shared(name: str) -> bool:
    return not name.startswith("task.")


class LatentModel:
    """Per-task latent posteriors over ``z`` with an optional shared IAF."""

    cfg: object
    flow: IAFStack | None = None

    def _make_flow(self):
        cfg = self.cfg
        if cfg.posterior == "iaf" and cfg.d_z:
            return IAFStack(cfg.d_z, cfg.d_c, cfg.flow_hidden, cfg.flow_layers, cfg.flow_reverse)
        return None

    def task_tables(self, n_tasks: int) -> dict[str, np.ndarray]:
        """Prior-initialized posteriors: mu = 0, sigma = 1, context = 0."""
        if not self.cfg.d_z:
            return {}
        return {"task.mu": np.zeros((n_tasks, self.cfg.d_z)),
                "task.log_sigma": np.zeros((n_tasks, self.cfg.d_z)),
                "task.context": np.zeros((n_tasks, self.cfg.d_c))}

    def draw(self, params, rows, eps, deterministic=False):
        """Posterior draws for task-table ``rows``; returns ``(z [B, d_z], kl [B])``."""
        mu = ad.gather_rows(params["task.mu"], rows)
        if deterministic:
            return mu, ad.Node(np.zeros(len(rows)))
        log_sigma = ad.gather_rows(params["task.log_sigma"], rows)
        if self.flow is None:
            sample = gaussian_sample((mu, log_sigma), eps)
        else:
            context = ad.gather_rows(params["task.context"], rows)
            sample = iaf_sample((mu, log_sigma, context), self.flow, params, eps)
        return sample.z, kl_terms(sample)


class DeepPrior(LatentModel):
    """Regression model: the conditioned network plus an optional shared flow."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.net = ResidualMLP(cfg.d_x, cfg.d_z, cfg.width, cfg.n_layers, cfg.layer_norm)
        self.flow = self._make_flow()

    def init_shared(self, rng) -> dict[str, np.ndarray]:
        params = self.net.init(rng)
        if self.flow is not None:
            params.update(self.flow.init(rng))
        return params

    def loglik(self, params, x, y, z):
        mu_y, s = regress_forward(x, z, params, self.net)
        return gaussian_loglik(y, mu_y, hetero_noise(s))


@dataclass
class LossTerms:
    loss: ad.Node
    nll: float
    kl: float
    likelihood_rows: np.ndarray | None = None
    kl_rows: np.ndarray | None = None


def minibatch_loss(batch: Minibatch, model: DeepPrior, params, cfg: TrainConfig, eps) -> LossTerms:
    """Batch mean of ``-n_j log p(y | x, z_j) + kl_weight * KL_j``.

    ``eps`` holds ``n_mc`` standard-normal draws per batch element, shape
    ``[len(batch) * n_mc, d_z]``; element rows are repeated ``n_mc`` times.
    """
    n_tasks = params["task.mu"].shape[0]
    if np.any(batch.j < 0) or np.any(batch.j >= n_tasks):
        raise ContractError("mini-batch references a task without registered posterior")
    reps = cfg.n_mc
    rows = np.repeat(batch.j, reps)
    x = np.repeat(batch.x, reps, axis=0)
    y = np.repeat(batch.y, reps)
    n_j = np.repeat(batch.n_j, reps).astype(float)
    z, kl = model.draw(params, rows, eps, cfg.deterministic)
    ll = model.loglik(params, x, y, z)
    per_row = ll * (-n_j)
    if not cfg.deterministic and cfg.kl_weight:
        per_row = per_row + kl * cfg.kl_weight
    return LossTerms(ad.mean(per_row), float(-ll.value.mean()), float(kl.value.mean()),
                     -n_j * ll.value, kl.value)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999,
              eps=1e-8, weight_decay=0.0, decay: Callable[[str], bool] = is_shared):
    """One bias-corrected Adam update over the entries of ``grads``.

    ``weight_decay`` adds ``weight_decay * p`` to the gradient of every entry
    selected by ``decay``. Returns new ``(params, state)``; inputs are not mutated.
    """
    t = state.t + 1
    new_params, m_new, v_new = dict(params), dict(state.m), dict(state.v)
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if weight_decay and decay(name):
            g = g + weight_decay * p
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


def gradient_step(params, loss_fn, state, lr, cfg: TrainConfig, trainable=None, weight_decay=0.0):
    """Evaluate ``loss_fn(nodes)`` on fresh leaves, back-propagate, and apply Adam."""
    names = [k for k in params if trainable is None or trainable(k)]
    nodes = dict(params)
    for k in names:
        nodes[k] = ad.param(params[k])
    terms = loss_fn(nodes)
    if not np.isfinite(terms.loss.value):
        raise NumericError("non-finite loss")
    leaves = [nodes[k] for k in names]
    grads = ad.backward(terms.loss, leaves)
    grads = {k: grads[nodes[k]] for k in names}
    params, state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, weight_decay)
    return params, state, terms


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_cfg: object
    train_cfg: TrainConfig
    params: dict
    adam: AdamState
    rng_state: dict
    step: int
    kind: str = "regression"
    version: int = CHECKPOINT_VERSION

    def shared_checksum(self) -> int:
        """CRC32 over all shared (non-task) parameter bytes."""
        crc = 0
        for name in sorted(self.params):
            if is_shared(name):
                crc = zlib.crc32(name.encode() + self.params[name].tobytes(), crc)
        return crc


def _model_cfg_registry():
    from .classifier import ClassifierConfig

    return {"regression": ModelConfig, "classification": ClassifierConfig}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.params)
    moment_names = sorted(ckpt.adam.m)
    header = {
        "kind": ckpt.kind, "step": ckpt.step, "model_cfg": asdict(ckpt.model_cfg),
        "train_cfg": asdict(ckpt.train_cfg), "rng_state": ckpt.rng_state, "adam_t": ckpt.adam.t,
        "params": [[n, list(ckpt.params[n].shape)] for n in names],
        "moments": [[n, list(np.shape(ckpt.adam.m[n]))] for n in moment_names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = [np.ascontiguousarray(ckpt.params[n], "<f8").tobytes() for n in names]
    for table in (ckpt.adam.m, ckpt.adam.v):
        body += [np.ascontiguousarray(table[n], "<f8").tobytes() for n in moment_names]
    return b"".join([CHECKPOINT_MAGIC, struct.pack("<HI", ckpt.version, len(hbytes)), hbytes] + body)


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a DPCK checkpoint (bad magic)")
    if len(buf) < 10:
        raise FormatError("truncated checkpoint")
    version, hlen = struct.unpack("<HI", buf[4:10])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupted checkpoint header: {exc}") from exc
    pos = 10 + hlen

    def read(shape):
        nonlocal pos
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(buf):
            raise FormatError("truncated checkpoint")
        arr = np.frombuffer(buf[pos:end], "<f8").astype(float).reshape(shape)
        pos = end
        return arr

    params = {n: read(tuple(s)) for n, s in header["params"]}
    m = {n: read(tuple(s)) for n, s in header["moments"]}
    v = {n: read(tuple(s)) for n, s in header["moments"]}
    if pos != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    cfg_cls = _model_cfg_registry()[header["kind"]]
    mcfg = header["model_cfg"]
    if "hidden" in mcfg:
        mcfg["hidden"] = tuple(mcfg["hidden"])
    return Checkpoint(cfg_cls(**mcfg), TrainConfig(**header["train_cfg"]), params,
                      AdamState(m, v, header["adam_t"]), header["rng_state"], header["step"], header["kind"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes())


# ---------------------------------------------------------------- training


class MetricsWriter:
    """Accumulates per-step terms and emits one averaged row every ``eval_every`` steps."""

    def __init__(self, path=None, every=500, record_wall_time=True, append=False):
        self.rows: list[dict] = []
        self.every = max(1, every)
        self.record_wall_time = record_wall_time
        self._acc = []
        self._t0 = time.perf_counter()
        self._fh = None
        if path is not None:
            path = Path(path)
            fresh = not (append and path.exists())
            self._fh = open(path, "a" if not fresh else "w", newline="")
            self._writer = csv.writer(self._fh)
            if fresh:
                self._writer.writerow(METRICS_COLUMNS)

    def add(self, step, terms: LossTerms):
        self._acc.append((float(terms.loss.value), terms.nll, terms.kl))
        if step % self.every == 0:
            acc = np.array(self._acc)
            wall = round((time.perf_counter() - self._t0) * 1000.0) if self.record_wall_time else 0
            loss, nll, kl = (float(v) for v in acc.mean(axis=0))
            row = {"step": step, "loss": loss, "nll": nll, "kl": kl, "wall_ms": wall}
            self.rows.append(row)
            if self._fh is not None:
                self._writer.writerow([row["step"], repr(loss), repr(nll), repr(kl), wall])
                self._fh.flush()
            self._acc = []

    def close(self):
        if self._fh is not None:
            self._fh.close()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list


def init_checkpoint(ds: MetaDataset, model_cfg: ModelConfig, cfg: TrainConfig) -> Checkpoint:
    model = DeepPrior(model_cfg)
    params = model.init_shared(make_rng(cfg.seed, "init"))
    params.update(model.task_tables(len(ds)))
    return Checkpoint(model_cfg, cfg, params, AdamState(), rng_state(make_rng(cfg.seed, "train")), 0)


def train(ds: MetaDataset, model_cfg: ModelConfig | None = None, cfg: TrainConfig | None = None,
          resume: Checkpoint | None = None, metrics_path=None, max_steps: int | None = None) -> TrainResult:
    """Run mini-batch ELBO training up to ``cfg.max_steps`` total steps."""
    if len(ds) == 0:
        raise ContractError("empty meta-dataset")
    if resume is not None:
        ckpt = resume
        model_cfg, cfg = ckpt.model_cfg, cfg or ckpt.train_cfg
        if ckpt.params["task.mu"].shape[0] != len(ds):
            raise ContractError("checkpoint task table does not match the dataset")
    else:
        model_cfg, cfg = model_cfg or ModelConfig(d_x=ds.d_x), cfg or TrainConfig()
        ckpt = init_checkpoint(ds, model_cfg, cfg)
    model = DeepPrior(model_cfg)

    def step_loss(rng):
        batch = sample_minibatch(ds, cfg.n_mb, rng, cfg.sampling)
        eps = rng.standard_normal((cfg.n_mb * cfg.n_mc, model_cfg.d_z))
        return lambda nodes: minibatch_loss(batch, model, nodes, cfg, eps)

    return run_training(ckpt, cfg, step_loss, metrics_path, max_steps, resumed=resume is not None)


def run_training(ckpt: Checkpoint, cfg: TrainConfig, step_loss, metrics_path=None, max_steps=None,
                 resumed=False) -> TrainResult:
    """Shared optimization loop; ``step_loss(rng)`` builds the loss closure of one step."""
    total = cfg.max_steps if max_steps is None else max_steps
    rng = restore_rng(ckpt.rng_state)
    params, adam, step = ckpt.params, ckpt.adam, ckpt.step
    writer = MetricsWriter(metrics_path, cfg.eval_every, cfg.record_wall_time, append=resumed)
    try:
        while step < total:
            last_good = replace(ckpt, train_cfg=cfg, params=params, adam=adam, rng_state=rng_state(rng), step=step)
            loss_fn = step_loss(rng)
            try:
                params, adam, terms = gradient_step(params, loss_fn, adam, cfg.learning_rate, cfg,
                                                    weight_decay=cfg.weight_decay)
            except NumericError as exc:
                raise TrainingDiverged(f"training diverged at step {step + 1}: {exc}", last_good, step) from exc
            step += 1
            writer.add(step, terms)
            if step % cfg.eval_every == 0:
                log.info("step %d loss %.4f", step, writer.rows[-1]["loss"])
    finally:
        writer.close()
    final = replace(ckpt, train_cfg=cfg, params=params, adam=adam, rng_state=rng_state(rng), step=step)
    return TrainResult(final, writer.rows)


# ---------------------------------------------------------------- adaptation and prediction


def _task_rows(tasks, reps):
    sizes = np.array([t.n for t in tasks])
    x = np.concatenate([t.x for t in tasks])
    y = np.concatenate([t.y for t in tasks])
    owner = np.repeat(np.arange(len(tasks)), sizes)
    # replicate: rows of MC draw r use posterior row r * n_tasks + owner
    n = len(tasks)
    rows = np.concatenate([owner + r * n for r in range(reps)])
    return np.tile(x, (reps, 1)), np.tile(y, reps), rows


def adapt_tasks(ckpt: Checkpoint, tasks: list, steps: int | None = None, lr: float | None = None,
                seed: int | None = None) -> list[TaskPosteriorParams]:
    """Fit fresh posteriors for ``tasks`` with every shared parameter frozen.

    Tasks are optimized jointly but independently: the objective is a sum of
    per-task negative ELBOs and Adam acts elementwise.
    """
    cfg = ckpt.train_cfg
    model = DeepPrior(ckpt.model_cfg)
    steps = cfg.adapt_steps if steps is None else steps
    lr = lr or cfg.adapt_lr or cfg.learning_rate
    seed = cfg.seed if seed is None else seed
    n, reps, d_z = len(tasks), cfg.n_mc, ckpt.model_cfg.d_z
    shared = {k: v for k, v in ckpt.params.items() if is_shared(k)}
    params = {**shared, **model.task_tables(n)}
    x, y, rows = _task_rows(tasks, reps)
    draw_rows = np.tile(np.arange(n), reps)
    streams = [make_rng(seed, "adapt", t.task_id) for t in tasks]
    state = AdamState()
    for _ in range(steps):
        eps = np.stack([g.standard_normal((reps, d_z)) for g in streams], axis=1).reshape(reps * n, d_z)

        def loss_fn(nodes):
            z, kl = model.draw(nodes, draw_rows, eps, cfg.deterministic)
            ll = model.loglik(nodes, x, y, ad.gather_rows(z, rows))
            loss = -ad.sum_(ll)
            if not cfg.deterministic and cfg.kl_weight:
                loss = loss + ad.sum_(kl) * cfg.kl_weight
            return LossTerms(loss * (1.0 / reps), 0.0, 0.0)

        params, state, _ = gradient_step(params, loss_fn, state, lr, cfg, trainable=lambda k: not is_shared(k))
    return [TaskPosteriorParams(params["task.mu"][i].copy(), params["task.log_sigma"][i].copy(),
                                params["task.context"][i].copy()) for i in range(n)]


def adapt_new_task(ckpt: Checkpoint, task: Task, steps: int | None = None, lr: float | None = None,
                   seed: int | None = None) -> TaskPosteriorParams:
    return adapt_tasks(ckpt, [task], steps, lr, seed)[0]


@dataclass
class Prediction:
    mean: np.ndarray
    std: np.ndarray
    epistemic_std: np.ndarray
    aleatoric_std: np.ndarray
    sample_mu: np.ndarray  # [n_samples, len(x)]
    sample_sigma: np.ndarray
    z: np.ndarray
    log_q: np.ndarray


def sample_posterior(ckpt: Checkpoint, posterior: TaskPosteriorParams, eps):
    """``(z, log_q)`` arrays for draws ``eps [S, d_z]`` from a task posterior."""
    model = DeepPrior(ckpt.model_cfg)
    S = len(eps)
    if ckpt.train_cfg.deterministic:
        return np.tile(posterior.mu, (S, 1)), np.zeros(S)
    params = {k: v for k, v in ckpt.params.items() if is_shared(k)}
    params["task.mu"] = posterior.mu[None, :]
    params["task.log_sigma"] = posterior.log_sigma[None, :]
    params["task.context"] = np.reshape(posterior.context, (1, -1))
    z, kl = model.draw(params, np.zeros(S, dtype=int), eps)
    from .posterior import standard_normal_logpdf

    return z.value, kl.value + standard_normal_logpdf(z.value).value


def predict_marginal(ckpt: Checkpoint, posterior: TaskPosteriorParams, x, n_samples: int = 20,
                     rng: np.random.Generator | None = None) -> Prediction:
    """Posterior predictive moments at inputs ``x`` by marginalizing ``n_samples`` draws of ``z``."""
    if n_samples < 1:
        raise ContractError("n_samples must be at least 1")
    rng = rng or make_rng(ckpt.train_cfg.seed, "predict")
    model = DeepPrior(ckpt.model_cfg)
    x = np.asarray(x, dtype=float).reshape(-1, ckpt.model_cfg.d_x)
    eps = rng.standard_normal((n_samples, ckpt.model_cfg.d_z))
    z, log_q = sample_posterior(ckpt, posterior, eps)
    m = len(x)
    mu_y, s = regress_forward(np.tile(x, (n_samples, 1)), np.repeat(z, m, axis=0), ckpt.params, model.net)
    mu = mu_y.value.reshape(n_samples, m)
    sig = hetero_noise(s.value).reshape(n_samples, m)
    mean = mu.mean(axis=0)
    dev = mu - mu[0]  # exact zero spread for identical draws
    epi = np.maximum((dev ** 2).mean(axis=0) - dev.mean(axis=0) ** 2, 0.0)
    alea = (sig ** 2).mean(axis=0)
    return Prediction(mean, np.sqrt(alea + epi), np.sqrt(epi), np.sqrt(alea), mu, sig, z, log_q)


def eval_mse(ckpt: Checkpoint, eval_tasks: list, train_sizes=(2, 8, 16, 64), n_samples: int = 20,
             steps: int | None = None, lr: float | None = None, seed: int | None = None,
             predictor=None) -> list[dict]:
    """Mean squared error of the predictive mean on each task's held-out points, per train size.

    ``predictor(task) -> mean at task.x_eval`` replaces adaptation plus
    marginal prediction when given (``ckpt`` is then only used for the seed).
    """
    seed = (ckpt.train_cfg.seed if ckpt is not None else 0) if seed is None else seed
    table = []
    for size in train_sizes:
        subset = [t.subset(size) for t in eval_tasks]
        if predictor is None:
            posts = adapt_tasks(ckpt, subset, steps, lr, seed=seed + size)
            means = [predict_marginal(ckpt, post, t.x_eval, n_samples, make_rng(seed, "eval", size, t.task_id)).mean
                     for t, post in zip(subset, posts)]
        else:
            means = [predictor(t) for t in subset]
        errs = np.array([float(np.mean((m - t.y_eval) ** 2)) for m, t in zip(means, subset)])
        stderr = float(errs.std(ddof=1) / math.sqrt(len(errs))) if len(errs) > 1 else 0.0
        table.append({"train_size": size, "mse_mean": float(errs.mean()), "mse_stderr": stderr,
                      "n_tasks": len(errs)})
    return table


def epistemic_by_size(ckpt: Checkpoint, eval_tasks: list, train_sizes=(1, 8, 64), n_samples: int = 20,
                      steps: int | None = None, lr: float | None = None, seed: int | None = None) -> list[dict]:
    """Mean posterior-predictive epistemic std on held-out inputs, per train size."""
    seed = ckpt.train_cfg.seed if seed is None else seed
    table = []
    for size in train_sizes:
        subset = [t.subset(size) for t in eval_tasks]
        posts = adapt_tasks(ckpt, subset, steps, lr, seed=seed + size)
        stds = [float(predict_marginal(ckpt, p, t.x_eval, n_samples,
                                       make_rng(seed, "epistemic", size, t.task_id)).epistemic_std.mean())
                for t, p in zip(subset, posts)]
        table.append({"train_size": size, "epistemic_std": float(np.mean(stds)),
                      "sigma_mean": float(np.mean([p.sigma.mean() for p in posts])), "n_tasks": len(stds)})
    return table


def with_overrides(cfg, **changes):
    valid = {f.name for f in fields(cfg)}
    unknown = set(changes) - valid
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return replace(cfg, **changes)
