"""Episode-level training and evaluation of the prototypical latent classifier.

The embedding ``gamma = phi(x, z_j)`` is conditioned on the task latent. Each
episode's support set is scored by its own leave-one-out log-likelihood, which
stands in for ``log p(S_j | z_j)`` in the per-task ELBO. ``d_z = 0`` gives the
unconditioned baseline trained with the same objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .datasets import MetaDataset
from .errors import ConfigurationError, ContractError
from .latent import accuracy, bootstrap_ci, compute_prototypes, loo_marginal_loglik, proto_predict
from .networks import EmbeddingNet
from .rng import make_rng, rng_state
from .trainer import (AdamState, Checkpoint, LatentModel, LossTerms, TrainConfig, TrainResult, gradient_step,
                      is_shared, run_training)


@dataclass
class ClassifierConfig:
    d_x: int = 8
    d_z: int = 8
    d_c: int | None = None
    hidden: tuple = (64, 64)
    d_gamma: int = 32
    layer_norm: bool = True
    posterior: str = "gaussian"
    flow_layers: int = 2
    flow_hidden: int = 32
    flow_reverse: bool = False
    squared: bool = False
    n_pred_samples: int = 8

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.d_c is None:
            self.d_c = self.d_z
        if self.posterior not in ("iaf", "gaussian"):
            raise ConfigurationError(f"unknown posterior family '{self.posterior}'")
        if self.d_z < 0:
            raise ConfigurationError("d_z must be nonnegative")


class ProtoModel(LatentModel):
    def __init__(self, cfg: ClassifierConfig):
        self.cfg = cfg
        self.embed = EmbeddingNet(cfg.d_x, cfg.d_z, cfg.hidden, cfg.d_gamma, cfg.layer_norm)
        self.flow = self._make_flow()

    def init_shared(self, rng) -> dict[str, np.ndarray]:
        params = self.embed.init(rng)
        if self.flow is not None:
            params.update(self.flow.init(rng))
        return params

    def embed_episodes(self, params, x, z):
        """``x [E, n, d_x]`` and per-episode ``z [E, d_z]`` (or None) to ``gamma [E, n, d_gamma]``."""
        E, n = x.shape[:2]
        flat = x.reshape(E * n, -1)
        zz = None if z is None else ad.gather_rows(z, np.repeat(np.arange(E), n))
        g = self.embed.forward(params, flat, zz)
        return ad.reshape(g, (E, n, self.cfg.d_gamma))


def _stack(tasks, attr):
    arrays = [getattr(t, attr) for t in tasks]
    if len({a.shape for a in arrays}) != 1:
        raise ContractError("episodes in one batch must share their shape")
    return np.stack(arrays)


def episode_loss(model: ProtoModel, params, tasks, rows, eps, cfg: TrainConfig) -> LossTerms:
    """Mean over episodes of ``-LOO(S_j | z_j) + kl_weight * KL_j``."""
    x, y = _stack(tasks, "x"), _stack(tasks, "y").astype(np.int64)
    if model.cfg.d_z:
        z, kl = model.draw(params, rows, eps, cfg.deterministic)
    else:
        z, kl = None, ad.Node(np.zeros(len(tasks)))
    gammas = model.embed_episodes(params, x, z)
    loo = loo_marginal_loglik(gammas, y, squared=model.cfg.squared)
    loss = -loo
    if model.cfg.d_z and cfg.kl_weight and not cfg.deterministic:
        loss = loss + ad.sum_(kl) * cfg.kl_weight
    E = len(tasks)
    return LossTerms(loss * (1.0 / E), float(-loo.value / y.size), float(kl.value.mean()))


def init_classifier(ds: MetaDataset, model_cfg: ClassifierConfig, cfg: TrainConfig) -> Checkpoint:
    model = ProtoModel(model_cfg)
    params = model.init_shared(make_rng(cfg.seed, "init"))
    params.update(model.task_tables(len(ds)))
    return Checkpoint(model_cfg, cfg, params, AdamState(), rng_state(make_rng(cfg.seed, "train")), 0,
                      kind="classification")


def train_classifier(ds: MetaDataset, model_cfg: ClassifierConfig | None = None, cfg: TrainConfig | None = None,
                     resume: Checkpoint | None = None, metrics_path=None, max_steps=None) -> TrainResult:
    """Train on whole episodes; ``cfg.n_mb`` episodes per step, drawn uniformly."""
    if len(ds) == 0:
        raise ContractError("empty meta-dataset")
    if resume is not None:
        ckpt, model_cfg, cfg = resume, resume.model_cfg, cfg or resume.train_cfg
    else:
        model_cfg, cfg = model_cfg or ClassifierConfig(d_x=ds.d_x), cfg or TrainConfig(kl_weight=0.1)
        ckpt = init_classifier(ds, model_cfg, cfg)
    model = ProtoModel(model_cfg)

    def step_loss(rng):
        rows = rng.integers(0, len(ds), size=cfg.n_mb)
        eps = rng.standard_normal((cfg.n_mb, model_cfg.d_z))
        tasks = [ds.tasks[j] for j in rows]
        return lambda nodes: episode_loss(model, nodes, tasks, rows, eps, cfg)

    return run_training(ckpt, cfg, step_loss, metrics_path, max_steps, resumed=resume is not None)


def adapt_episodes(ckpt: Checkpoint, tasks, steps: int | None = None, lr: float | None = None, seed=None):
    """Fit posteriors of new episodes on their support sets with the embedding frozen.

    Each episode draws its noise from its own stream, so fitting a batch
    equals fitting its episodes one at a time.

    Returns the task-table arrays ``task.mu``, ``task.log_sigma``, ``task.context``.
    """
    cfg = ckpt.train_cfg
    model = ProtoModel(ckpt.model_cfg)
    n = len(tasks)
    if not ckpt.model_cfg.d_z:
        return {}
    steps = cfg.adapt_steps if steps is None else steps
    lr = lr or cfg.adapt_lr or cfg.learning_rate
    seed = cfg.seed if seed is None else seed
    params = {**{k: v for k, v in ckpt.params.items() if is_shared(k)}, **model.task_tables(n)}
    rows = np.arange(n)
    rngs = [make_rng(seed, "adapt-episodes", t.task_id) for t in tasks]
    state = AdamState()
    for _ in range(steps):
        eps = np.stack([r.standard_normal(ckpt.model_cfg.d_z) for r in rngs])

        def loss_fn(nodes):
            terms = episode_loss(model, nodes, tasks, rows, eps, cfg)
            terms.loss = terms.loss * float(n)  # per-episode sums keep the tasks independent
            return terms

        params, state, _ = gradient_step(params, loss_fn, state, lr, cfg, trainable=lambda k: not is_shared(k))
    return {k: params[k] for k in ("task.mu", "task.log_sigma", "task.context")}


def query_log_probs(ckpt: Checkpoint, tasks, tables=None, n_samples: int | None = None, seed=None) -> np.ndarray:
    """Predictive class log-probabilities of every query point, ``[E, n_query, K]``.

    Probabilities are averaged over posterior draws of ``z``; each draw
    recomputes the support prototypes.
    """
    model = ProtoModel(ckpt.model_cfg)
    cfg = ckpt.train_cfg
    shared = {k: v for k, v in ckpt.params.items() if is_shared(k)}
    xs, ys = _stack(tasks, "x"), _stack(tasks, "y").astype(np.int64)
    xq = _stack(tasks, "x_eval")
    E = len(tasks)
    if not ckpt.model_cfg.d_z:
        draws = [None]
    else:
        n_samples = n_samples or ckpt.model_cfg.n_pred_samples
        seed = cfg.seed if seed is None else seed
        rngs = [make_rng(seed, "query", t.task_id) for t in tasks]
        params = {**shared, **tables}
        draws = [model.draw(params, np.arange(E), np.stack([r.standard_normal(ckpt.model_cfg.d_z) for r in rngs]),
                            cfg.deterministic)[0].value for _ in range(n_samples)]
    probs = 0.0
    for z in draws:
        protos = compute_prototypes(model.embed_episodes(shared, xs, z), ys)
        gq = model.embed_episodes(shared, xq, z)
        probs = probs + np.exp(proto_predict(gq, protos, ckpt.model_cfg.squared).value)
    return np.log(probs / len(draws))


def episode_accuracies(ckpt: Checkpoint, test: MetaDataset, batch: int = 50, steps=None, lr=None) -> np.ndarray:
    """Query accuracy of each test episode after support-set adaptation."""
    accs = []
    for start in range(0, len(test), batch):
        tasks = test.tasks[start:start + batch]
        tables = adapt_episodes(ckpt, tasks, steps, lr)
        lp = query_log_probs(ckpt, tasks, tables)
        accs += [accuracy(lp[e], t.y_eval) for e, t in enumerate(tasks)]
    return np.array(accs)


def accuracy_report(accs, level: float = 0.9, seed: int = 0) -> dict:
    mean, lo, hi = bootstrap_ci(accs, level, rng=make_rng(seed, "bootstrap"))
    return {"accuracy": mean, "ci_low": lo, "ci_high": hi, "level": level, "n_episodes": len(accs)}
