"""Per-task variational posteriors over the latent task code ``z``.

Two families are provided: a factorized Gaussian ``N(mu, sigma)`` and an
inverse autoregressive flow (IAF) stacked on top of it, shared across tasks
and conditioned on a per-task context vector. Sampling returns ``z`` together
with ``log q(z)`` so that the KL to the standard-normal prior can be estimated
by Monte Carlo at the sampled points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError

LOG_2PI = math.log(2.0 * math.pi)
# sigmoid(SCALE_SHIFT) + SCALE_FLOOR == 1, so zeroed output weights give the identity map
SCALE_FLOOR = 0.1
SCALE_SHIFT = math.log(9.0)


@dataclass
class TaskPosteriorParams:
    mu: np.ndarray
    log_sigma: np.ndarray
    context: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def prior(cls, d_z: int, d_c: int = 0) -> "TaskPosteriorParams":
        return cls(np.zeros(d_z), np.zeros(d_z), np.zeros(d_c))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def d_z(self) -> int:
        return int(np.shape(self.mu)[-1])


@dataclass
class PosteriorSample:
    """Sampled latents ``z`` (``[..., d_z]``) and their log-density ``log_q`` (``[...]``).

    Both are tape nodes so the sample stays differentiable in the posterior
    parameters.
    """

    z: ad.Node
    log_q: ad.Node


def standard_normal_logpdf(z) -> ad.Node:
    """Sum over the last axis of ``log N(z_i; 0, 1)``."""
    z = ad.as_node(z)
    d = z.shape[-1]
    return ad.sum_(ad.square(z), axis=-1) * -0.5 - 0.5 * d * LOG_2PI


def _unpack(params):
    if isinstance(params, TaskPosteriorParams):
        return params.mu, params.log_sigma, params.context
    return params


def gaussian_sample(params, eps) -> PosteriorSample:
    """Reparameterized draw ``z = mu + sigma * eps`` from ``N(mu, sigma)``.

    ``params`` is a :class:`TaskPosteriorParams` or a ``(mu, log_sigma[, context])``
    tuple of arrays/nodes; batched ``[B, d_z]`` inputs are supported.
    """
    mu, log_sigma = _unpack(params)[:2]
    eps = np.asarray(eps, dtype=float)
    log_sigma = ad.as_node(log_sigma)
    z = ad.add(mu, ad.exp(log_sigma) * eps)
    d = eps.shape[-1]
    log_q = (ad.sum_(log_sigma, axis=-1) * -1.0
             + (-0.5 * d * LOG_2PI - 0.5 * (eps * eps).sum(axis=-1)))
    return PosteriorSample(z, log_q)


def made_masks(d_z: int, hidden: int, reverse: bool = False):
    """Input->hidden and hidden->output masks of a one-hidden-layer MADE.

    Output ``i`` may depend only on inputs that precede it in the ordering.
    """
    order = np.arange(d_z, 0, -1) if reverse else np.arange(1, d_z + 1)
    top = max(1, d_z - 1)
    hidden_deg = np.arange(hidden) % top + 1
    m_in = (hidden_deg[None, :] >= order[:, None]).astype(float)
    m_out = (order[None, :] > hidden_deg[:, None]).astype(float)
    return m_in, m_out, order


def check_autoregressive(m_in, m_out, order) -> None:
    """Raise if the composed connectivity lets any output see a non-preceding input."""
    reach = (m_in @ m_out) > 0  # reach[i, j]: input i influences output j
    allowed = order[:, None] < order[None, :]
    if np.any(reach & ~allowed):
        raise ConfigurationError("MADE mask violates the autoregressive ordering")


class IAFStack:
    """Shared stack of affine autoregressive layers conditioned on a task context.

    Layer ``l`` maps ``z`` to ``m_l(z, c) + s_l(z, c) * z`` with
    ``s_l = sigmoid(raw + log 9) + 0.1 > 0``; the context enters every MADE
    hidden layer as an unmasked additive input.
    """

    def __init__(self, d_z: int, d_c: int = 0, hidden: int = 64, n_layers: int = 2,
                 reverse_alternate: bool = False, prefix: str = "flow"):
        if d_z < 1 or hidden < 1 or n_layers < 0 or d_c < 0:
            raise ConfigurationError("invalid IAF dimensions")
        self.d_z, self.d_c, self.hidden, self.n_layers = d_z, d_c, hidden, n_layers
        self.prefix = prefix
        self.masks = []
        for layer in range(n_layers):
            m_in, m_out, order = made_masks(d_z, hidden, reverse_alternate and layer % 2 == 1)
            check_autoregressive(m_in, m_out, order)
            self.masks.append((m_in, m_out, order))

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Random first layers, zeroed output layers (identity transform at start)."""
        params = {}
        for layer in range(self.n_layers):
            p = f"{self.prefix}.l{layer}"
            bound = math.sqrt(6.0 / self.d_z)
            params[f"{p}.W1"] = rng.uniform(-bound, bound, size=(self.d_z, self.hidden))
            params[f"{p}.b1"] = np.zeros(self.hidden)
            if self.d_c:
                bc = math.sqrt(6.0 / self.d_c)
                params[f"{p}.Wc"] = rng.uniform(-bc, bc, size=(self.d_c, self.hidden))
            for head in ("m", "s"):
                params[f"{p}.W{head}"] = np.zeros((self.hidden, self.d_z))
                params[f"{p}.b{head}"] = np.zeros(self.d_z)
        return params

    def _made(self, params, layer, z, c):
        p = f"{self.prefix}.l{layer}"
        m_in, m_out, _ = self.masks[layer]
        pre = ad.masked_matmul(z, params[f"{p}.W1"], m_in) + params[f"{p}.b1"]
        if self.d_c:
            pre = pre + ad.matmul(c, params[f"{p}.Wc"])
        h = ad.relu(pre)
        m = ad.masked_matmul(h, params[f"{p}.Wm"], m_out) + params[f"{p}.bm"]
        raw = ad.masked_matmul(h, params[f"{p}.Ws"], m_out) + params[f"{p}.bs"]
        s = ad.sigmoid(raw + SCALE_SHIFT) + SCALE_FLOOR
        return m, s

    def forward(self, params, z, context=None):
        """Transform ``z [B, d_z]``; returns ``(z_out, sum_log_s [B])``."""
        z = ad.as_node(z)
        c = None if not self.d_c else ad.as_node(context)
        log_det = None
        for layer in range(self.n_layers):
            m, s = self._made(params, layer, z, c)
            z = m + s * z
            ls = ad.sum_(ad.log(s), axis=-1)
            log_det = ls if log_det is None else log_det + ls
        if log_det is None:
            log_det = ad.Node(np.zeros(z.shape[:-1]))
        return z, log_det

    def inverse(self, params, z, context=None) -> np.ndarray:
        """Invert the stack numerically by sequential coordinate-wise solves."""
        arrays = {k: ad.value_of(v) for k, v in params.items()}
        z = np.array(z, dtype=float)
        c = None if not self.d_c else np.asarray(context, dtype=float)
        for layer in reversed(range(self.n_layers)):
            order = self.masks[layer][2]
            prev = np.zeros_like(z)
            for i in np.argsort(order):
                m, s = self._made(arrays, layer, prev, c)
                prev[..., i] = (z[..., i] - m.value[..., i]) / s.value[..., i]
            z = prev
        return z


def iaf_sample(params, flow: IAFStack, flow_params, eps) -> PosteriorSample:
    """Draw from the Gaussian base then push it through the shared flow."""
    base = gaussian_sample(params, eps)
    context = _unpack(params)[2] if flow.d_c else None
    if flow.d_c and context is not None and ad.value_of(context).ndim < np.ndim(eps):
        context = ad.broadcast(context, np.shape(eps)[:-1] + (flow.d_c,))
    z, log_det = flow.forward(flow_params, base.z, context)
    return PosteriorSample(z, base.log_q - log_det)


def kl_terms(sample: PosteriorSample) -> ad.Node:
    """Per-draw single-sample KL estimates ``log q(z) - log N(z; 0, I)``."""
    return sample.log_q - standard_normal_logpdf(sample.z)


def kl_monte_carlo(samples: Sequence[PosteriorSample] | PosteriorSample) -> ad.Node:
    """Mean of per-draw KL estimates across all draws in ``samples``."""
    if isinstance(samples, PosteriorSample):
        samples = [samples]
    if not samples:
        raise ContractError("kl_monte_carlo needs at least one sample")
    terms = [ad.reshape(kl_terms(s), (-1,)) for s in samples]
    total = terms[0] if len(terms) == 1 else ad.concat(terms, axis=0)
    return ad.mean(total)


def kl_closed_form_gaussian(params) -> float:
    """``KL(N(mu, sigma) || N(0, I))`` summed over coordinates."""
    mu, log_sigma = (np.asarray(ad.value_of(t), dtype=float) for t in _unpack(params)[:2])
    return float(np.sum(0.5 * (np.exp(2.0 * log_sigma) + mu ** 2 - 1.0 - 2.0 * log_sigma), axis=-1))
