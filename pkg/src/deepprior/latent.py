"""Prototypical latent classifier with the closed-form leave-one-out rescale.

All functions accept leading batch dimensions: ``gammas [..., n, d]`` with
``labels [..., n]`` scores several episodes in one graph, provided every
episode has the same number of classes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DegenerateClassError, DimensionError
from .rng import make_rng


@dataclass
class PrototypeSet:
    prototypes: object  # Node or array [..., K, d]
    counts: np.ndarray  # [..., K]

    @property
    def n_classes(self) -> int:
        return self.counts.shape[-1]


def _one_hot(labels, n_classes=None):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or not np.issubdtype(labels.dtype, np.integer)
                        and np.any(labels != np.round(labels))):
        raise ContractError("labels must be nonnegative integers")
    labels = labels.astype(np.int64)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    return (labels[..., None] == np.arange(k)).astype(float)


def compute_prototypes(gammas, labels, n_classes: int | None = None) -> PrototypeSet:
    """Class means of the rows of ``gammas``."""
    g = ad.as_node(gammas)
    if g.shape[:-1] != np.shape(labels):
        raise DimensionError(f"labels shape {np.shape(labels)} does not match gammas {g.shape}")
    onehot = _one_hot(labels, n_classes)
    counts = onehot.sum(axis=-2)
    if np.any(counts < 1):
        raise ContractError("every class needs at least one example")
    avg = np.swapaxes(onehot, -1, -2) / counts[..., :, None]
    return PrototypeSet(ad.matmul(avg, g), counts)


def _distances(gammas, protos):
    g = ad.as_node(gammas)
    p = ad.as_node(protos)
    diff = ad.reshape(g, g.shape[:-1] + (1, g.shape[-1])) - ad.reshape(p, p.shape[:-2] + (1,) + p.shape[-2:])
    return ad.l2_norm_rows(diff)


def proto_predict(gamma, protos: PrototypeSet, squared: bool = False):
    """Class log-probabilities, log-softmax over negative distances to the prototypes."""
    g = ad.as_node(gamma)
    single = g.ndim == 1
    if single:
        g = ad.reshape(g, (1, -1))
    if g.shape[-1] != protos.prototypes.shape[-1]:
        raise DimensionError("embedding and prototype dimensions differ")
    d = _distances(g, protos.prototypes)
    if squared:
        d = ad.square(d)
    out = ad.log_softmax(-d, axis=-1)
    return ad.reshape(out, (-1,)) if single else out


def loo_factor(counts):
    """Distance rescale ``|K| / (|K| - 1)`` applied to an example's own class."""
    counts = np.asarray(counts, dtype=float)
    return counts / (counts - 1.0)


def loo_logprob(gammas, labels, protos: PrototypeSet | None = None, squared: bool = False):
    """Leave-one-out class log-probabilities for every example.

    Removing example ``i`` from its own class ``k`` moves ``c_k`` so that
    ``gamma_i - c_k^{-i} = |K| / (|K| - 1) * (gamma_i - c_k)``; other
    prototypes do not change.
    """
    onehot = _one_hot(labels, None if protos is None else protos.n_classes)
    protos = protos or compute_prototypes(gammas, labels)
    counts = protos.counts
    own = (onehot * counts[..., None, :]).sum(axis=-1)
    if np.any(own < 2):
        raise DegenerateClassError("leave-one-out needs at least two examples in the scored class")
    factor = np.where(onehot > 0, loo_factor(np.maximum(counts[..., None, :], 2)), 1.0)
    d = _distances(gammas, protos.prototypes)
    if squared:
        d = ad.square(d)
        factor = factor ** 2
    return ad.log_softmax(-(d * factor), axis=-1)


def loo_marginal_loglik(gammas, labels, squared: bool = False):
    """Sum over examples of the leave-one-out log-probability of the true label."""
    onehot = _one_hot(labels)
    return ad.sum_(loo_logprob(gammas, labels, squared=squared) * onehot)


def brute_force_loo(gammas, labels, squared: bool = False) -> np.ndarray:
    """Reference leave-one-out: recompute all prototypes without each example."""
    gammas = np.asarray(ad.value_of(gammas), dtype=float)
    labels = np.asarray(labels).astype(np.int64)
    n, k = len(labels), int(labels.max()) + 1
    out = np.empty((n, k))
    for i in range(n):
        keep = np.arange(n) != i
        protos = []
        for c in range(k):
            members = gammas[keep & (labels == c)]
            if len(members) == 0:
                raise DegenerateClassError("leave-one-out leaves an empty class")
            protos.append(members.mean(axis=0))
        d = np.sqrt(((gammas[i] - np.array(protos)) ** 2).sum(axis=1))
        if squared:
            d = d ** 2
        out[i] = -d - np.logaddexp.reduce(-d)
    return out


def accuracy(log_probs, labels) -> float:
    return float(np.mean(np.argmax(ad.value_of(log_probs), axis=-1) == np.asarray(labels).astype(int)))


def bootstrap_ci(values, level: float = 0.9, n_boot: int = 2000, rng=None):
    """Mean of ``values`` and a percentile bootstrap interval."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ContractError("bootstrap over an empty sample")
    rng = rng or make_rng(0, "bootstrap")
    means = values[rng.integers(0, values.size, size=(n_boot, values.size))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(values.mean()), float(lo), float(hi)
