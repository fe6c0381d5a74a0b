"""Distribution primitives: diagonal Gaussians, categoricals, their KLs and
entropies, and reparameterized samplers.

All quantities are in nats.  Fields may be plain ndarrays or autodiff
Tensors; with Tensors the results stay differentiable.  Batch dimensions are
allowed everywhere: the distribution axis is always the last one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value

VAR_FLOOR = 1e-6
_GUMBEL_CLAMP = 1e-12


@dataclass
class DiagonalGaussian:
    """N(mean, diag(var)); var entries must sit at or above VAR_FLOOR."""

    mean: object
    var: object

    @property
    def dim(self):
        return value(self.mean).shape[-1]


@dataclass
class Categorical:
    """Categorical over {1..k}, parameterized by unnormalized logits."""

    logits: object

    @property
    def k(self):
        return value(self.logits).shape[-1]

    def probs(self):
        return ad.softmax(self.logits, axis=-1)

    @classmethod
    def from_probs(cls, p):
        return cls(logits=np.log(np.clip(np.asarray(p, dtype=np.float64),
                                         1e-300, None)))


def _check_same_dim(a, b, what):
    if value(a).shape[-1] != value(b).shape[-1]:
        raise ValueError(
            f"{what}: dimension mismatch "
            f"({value(a).shape[-1]} vs {value(b).shape[-1]})"
        )


def gaussian_kl(p: DiagonalGaussian, q: DiagonalGaussian):
    """KL(p || q) in nats, summed over the last axis.

    Closed form for diagonal Gaussians:
    1/2 sum_j [ var_p/var_q + (mu_q - mu_p)^2/var_q - 1 + log var_q - log var_p ].
    """
    _check_same_dim(p.mean, q.mean, "gaussian_kl")
    ratio = p.var / q.var
    diff = q.mean - p.mean
    terms = ratio + ad.square(diff) / q.var - 1.0 + ad.log(q.var) - ad.log(p.var)
    return 0.5 * ad.tsum(terms, axis=-1)


def categorical_kl(p: Categorical, q: Categorical):
    """KL(p || q) = sum_t p(t) (log p(t) - log q(t)), in nats."""
    _check_same_dim(p.logits, q.logits, "categorical_kl")
    lp = ad.log_softmax(p.logits, axis=-1)
    lq = ad.log_softmax(q.logits, axis=-1)
    pp = ad.softmax(p.logits, axis=-1)
    return ad.tsum(pp * (lp - lq), axis=-1)


def categorical_entropy(p):
    """-sum p log p in nats; 0 for one-hot, log k for uniform.

    Accepts a Categorical or a probability vector directly.
    Non-differentiable convenience (analysis side); zero-probability entries
    contribute 0 by convention.
    """
    if isinstance(p, Categorical):
        probs = value(ad.softmax(p.logits, axis=-1))
    else:
        probs = np.asarray(value(p), dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    return -plogp.sum(axis=-1)


def sample_gaussian(p: DiagonalGaussian, z):
    """Reparameterized draw mean + sqrt(var) * z for caller-supplied standard
    normal z; differentiable in mean and var with z held fixed."""
    z = np.asarray(z, dtype=np.float64)
    _check_same_dim(p.mean, z, "sample_gaussian")
    return p.mean + ad.sqrt(p.var) * z

def gumbel_from_uniform(u):
    """Gumbel(0,1) variates from uniforms, clamped away from 0 and 1."""
    u = np.clip(np.asarray(u, dtype=np.float64), _GUMBEL_CLAMP,
                1.0 - _GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def sample_gumbel_softmax(p: Categorical, tau: float, g):
    """Concrete relaxation: softmax((logits + g)/tau) for tau > 0; exact
    one-hot at argmax(logits + g) for tau = 0."""
    if tau < 0:
        raise ValueError("temperature must be >= 0")
    g = np.asarray(g, dtype=np.float64)
    _check_same_dim(p.logits, g, "sample_gumbel_softmax")
    if tau == 0.0:
        perturbed = value(p.logits) + g
        idx = np.argmax(perturbed, axis=-1)
        out = np.zeros_like(perturbed)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out
    return ad.softmax((p.logits + g) * (1.0 / tau), axis=-1)
