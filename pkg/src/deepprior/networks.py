"""Task-conditioned predictive networks.

Parameters live in flat ``dict[str, ndarray]`` maps so that the optimizer and
the checkpoint code can treat every network uniformly. Forward functions
accept either raw arrays (frozen weights) or tape nodes (trainable weights).
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DomainError, NumericError

RELU_GAIN = math.sqrt(2.0)
NOISE_SCALE = 0.1
NOISE_FLOOR = 0.001
LOG_2PI = math.log(2.0 * math.pi)


def _uniform_fan_in(rng, fan_in, fan_out, gain):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _dense(params, name, h, layer_norm):
    h = ad.matmul(h, params[f"{name}.W"]) + params[f"{name}.b"]
    if layer_norm:
        h = ad.layer_norm(h) * params[f"{name}.ln_g"] + params[f"{name}.ln_b"]
    return ad.relu(h)


def _init_dense(rng, params, name, fan_in, fan_out, layer_norm, gain=RELU_GAIN):
    params[f"{name}.W"] = _uniform_fan_in(rng, fan_in, fan_out, gain)
    params[f"{name}.b"] = np.zeros(fan_out)
    if layer_norm:
        params[f"{name}.ln_g"] = np.ones(fan_out)
        params[f"{name}.ln_b"] = np.zeros(fan_out)


class ResidualMLP:
    """Regressor over ``concat(x, z)`` with a two-unit head ``(mu_y, s)``.

    An input projection maps ``d_x + d_z`` to ``width``; it is followed by
    ``n_layers`` hidden layers grouped in pairs, each pair wrapped by an
    identity skip connection.
    """

    def __init__(self, d_x: int, d_z: int, width: int = 128, n_layers: int = 12,
                 layer_norm: bool = True, prefix: str = "net"):
        if n_layers < 0 or n_layers % 2:
            raise ConfigurationError(f"n_layers must be even, got {n_layers}")
        if width < 1 or d_x < 1 or d_z < 0:
            raise ConfigurationError("invalid network dimensions")
        self.d_x, self.d_z = d_x, d_z
        self.width, self.n_layers = width, n_layers
        self.layer_norm = layer_norm
        self.prefix = prefix

    @property
    def d_in(self):
        return self.d_x + self.d_z

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        p = self.prefix
        params: dict[str, np.ndarray] = {}
        _init_dense(rng, params, f"{p}.in", self.d_in, self.width, self.layer_norm)
        for k in range(self.n_layers):
            _init_dense(rng, params, f"{p}.h{k}", self.width, self.width, self.layer_norm)
        params[f"{p}.out.W"] = _uniform_fan_in(rng, self.width, 2, 1.0)
        params[f"{p}.out.b"] = np.zeros(2)
        return params

    def forward(self, params, inputs):
        """Map a batch ``[B, d_x + d_z]`` to head outputs ``[B, 2]``."""
        p = self.prefix
        h = self._layer(0, lambda: _dense(params, f"{p}.in", inputs, self.layer_norm))
        for k in range(0, self.n_layers, 2):
            skip = h

            def block(h=h, k=k):
                u = _dense(params, f"{p}.h{k}", h, self.layer_norm)
                return skip + _dense(params, f"{p}.h{k + 1}", u, self.layer_norm)

            h = self._layer(k + 1, block)
        return self._layer(self.n_layers + 1,
                           lambda: ad.matmul(h, params[f"{p}.out.W"]) + params[f"{p}.out.b"])

    @staticmethod
    def _layer(index, fn):
        try:
            return fn()
        except NumericError as exc:
            raise NumericError(f"non-finite activation in layer {index}: {exc}") from exc


def regress_forward(x, z, params, net: ResidualMLP):
    """Return ``(mu_y, s)`` tape nodes for a batch of inputs and latents.

    ``x`` is ``[B, d_x]`` (or ``[B]`` for scalar inputs) and ``z`` is ``[B, d_z]``;
    a single example may be passed unbatched.
    """
    x = ad.as_node(x)
    z = ad.as_node(z)
    single = z.ndim == 1
    if single:
        z = ad.reshape(z, (1, -1))
        x = ad.reshape(x, (1, -1))
    elif x.ndim == 1:
        x = ad.reshape(x, (-1, 1))
    out = net.forward(params, ad.concat([x, z], axis=1))
    mu, s = out[:, 0], out[:, 1]
    if single:
        mu, s = ad.reshape(mu, ()), ad.reshape(s, ())
    return mu, s


def hetero_noise(s):
    """Observation noise ``sigmoid(s) * 0.1 + 0.001``; works on floats, arrays, or nodes."""
    if isinstance(s, ad.Node):
        return ad.sigmoid(s) * NOISE_SCALE + NOISE_FLOOR
    return ad._sigmoid_np(np.asarray(s, dtype=float)) * NOISE_SCALE + NOISE_FLOOR


def gaussian_loglik(y, mu_y, sigma_y):
    """Elementwise ``log N(y; mu_y, sigma_y^2)``."""
    if np.any(ad.value_of(sigma_y) <= 0):
        raise DomainError("gaussian_loglik requires sigma_y > 0")
    if any(isinstance(t, ad.Node) for t in (y, mu_y, sigma_y)):
        resid = ad.sub(y, mu_y)
        return (-0.5 * LOG_2PI) - ad.log(sigma_y) - ad.square(resid) / (ad.square(sigma_y) * 2.0)
    y, mu_y, sigma_y = (np.asarray(t, dtype=float) for t in (y, mu_y, sigma_y))
    return -0.5 * LOG_2PI - np.log(sigma_y) - (y - mu_y) ** 2 / (2.0 * sigma_y ** 2)


class EmbeddingNet:
    """MLP computing ``gamma = phi(x, z)``; ``d_z = 0`` gives an unconditioned embedding."""

    def __init__(self, d_x: int, d_z: int, hidden=(64, 64), d_gamma: int = 32,
                 layer_norm: bool = True, prefix: str = "embed"):
        if d_gamma < 1:
            raise ConfigurationError("d_gamma must be positive")
        self.d_x, self.d_z = d_x, d_z
        self.hidden = tuple(hidden)
        self.d_gamma = d_gamma
        self.layer_norm = layer_norm
        self.prefix = prefix

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        fan_in = self.d_x + self.d_z
        for k, width in enumerate(self.hidden):
            _init_dense(rng, params, f"{self.prefix}.h{k}", fan_in, width, self.layer_norm)
            fan_in = width
        params[f"{self.prefix}.out.W"] = _uniform_fan_in(rng, fan_in, self.d_gamma, 1.0)
        params[f"{self.prefix}.out.b"] = np.zeros(self.d_gamma)
        return params

    def forward(self, params, x, z=None):
        h = ad.as_node(x)
        if self.d_z:
            h = ad.concat([h, ad.as_node(z)], axis=1)
        for k in range(len(self.hidden)):
            try:
                h = _dense(params, f"{self.prefix}.h{k}", h, self.layer_norm)
            except NumericError as exc:
                raise NumericError(f"non-finite activation in layer {k}: {exc}") from exc
        return ad.matmul(h, params[f"{self.prefix}.out.W"]) + params[f"{self.prefix}.out.b"]


def embed_forward(x, z, params, net: EmbeddingNet):
    """Batch embedding ``[B, d_gamma]`` of inputs ``x [B, d_x]`` under latents ``z [B, d_z]``."""
    return net.forward(params, x, z)
