"""Stochastic encoders and deterministic baseline representations.

The token encoder maps a contextual vector x_i to a posterior over tags (a
diagonal Gaussian in continuous mode, a categorical in discrete mode).  The
type encoder shares the architecture but reads the context-independent type
vector.  The marginal is an input-free posterior.  Baselines: identity, PCA,
MLP (zero-variance continuous encoder), gold POS one-hots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, value
from .dists import VAR_FLOOR, Categorical, DiagonalGaussian
from .errors import ConfigError, VocabularyError

CONTINUOUS = "continuous"
DISCRETE = "discrete"


def default_hidden(mode: str, out_units: int) -> int:
    """Default hidden width: 2d for continuous encoders, 512 for discrete."""
    return out_units if mode == CONTINUOUS else 512


@dataclass
class EncoderParams:
    """One-hidden-layer tanh feedforward net.

    Output layer has 2d linear units (continuous: mean then raw-sigma, the
    latter squared into variances) or k linear units (discrete logits).
    """

    mode: str
    out_dim: int  # d (continuous) or k (discrete)
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, mode, in_dim, out_dim, rng, hidden=None):
        if mode not in (CONTINUOUS, DISCRETE):
            raise ConfigError(f"unknown encoder mode {mode!r}")
        out_units = 2 * out_dim if mode == CONTINUOUS else out_dim
        if hidden is None:
            hidden = default_hidden(mode, out_units)
        return cls(
            mode=mode,
            out_dim=out_dim,
            w1=ad.parameter(None, rng, (in_dim, hidden)),
            b1=ad.parameter(None, rng, (hidden,)),
            w2=ad.parameter(None, rng, (hidden, out_units)),
            b2=ad.parameter(None, rng, (out_units,)),
        )

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def in_dim(self):
        return value(self.w1).shape[0]


@dataclass
class MarginalParams:
    """Input-free posterior: the raw output-layer values themselves."""

    mode: str
    out_dim: int
    raw: Tensor

    @classmethod
    def init(cls, mode, out_dim, rng):
        out_units = 2 * out_dim if mode == CONTINUOUS else out_dim
        return cls(mode=mode, out_dim=out_dim,
                   raw=ad.parameter(None, rng, (out_units,)))

    def params(self):
        return [self.raw]


def _posterior_from_raw(mode, out_dim, raw):
    if mode == CONTINUOUS:
        mean = raw[..., :out_dim]
        var = ad.square(raw[..., out_dim:]) + VAR_FLOOR
        return DiagonalGaussian(mean=mean, var=var)
    return Categorical(logits=raw[..., :])


def encode_token(theta: EncoderParams, x):
    """Posterior p(t_i | x_i); x may carry leading batch axes."""
    x = ad.constant(x) if not isinstance(x, Tensor) else x
    if value(x).shape[-1] != theta.in_dim:
        raise ValueError(
            f"encode_token: input dim {value(x).shape[-1]} != {theta.in_dim}"
        )
    # 1/sqrt(fan-in) scaling keeps pre-activations O(1) under N(0, 1) weights
    w1 = value(theta.w1)
    h = ad.tanh((x @ theta.w1) * (1.0 / np.sqrt(w1.shape[0])) + theta.b1)
    raw = (h @ theta.w2) * (1.0 / np.sqrt(w1.shape[1])) + theta.b2
    return _posterior_from_raw(theta.mode, theta.out_dim, raw)


def encode_type(xi: EncoderParams, xhat):
    """Posterior s(t_i | xhat_i); same architecture as the token encoder."""
    return encode_token(xi, xhat)


def marginal(psi: MarginalParams):
    """The constant variational posterior r(t)."""
    return _posterior_from_raw(psi.mode, psi.out_dim, psi.raw)


# -- PCA ---------------------------------------------------------------------


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Symmetric eigendecomposition by cyclic Jacobi sweeps.

    Returns (eigenvalues descending, eigenvectors as columns).  Intended for
    the moderate dimensionalities of embedding covariance matrices.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-10):
        raise ValueError("jacobi_eigh expects a symmetric square matrix")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(1.0, np.sqrt(np.sum(np.diag(a) ** 2))):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # Givens rotation applied in place to rows/cols p and q
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    eigvals = np.diag(a).copy()
    order = np.argsort(eigvals)[::-1]
    return eigvals[order], v[:, order]


@dataclass
class BaselineSpec:
    """Deterministic token representation: identity, pca(d), mlp(d), or
    gold_pos.  For pca: orthonormal projection rows + data mean; for mlp: an
    EncoderParams whose Gaussian variance is ignored; for gold_pos: a tag
    vocabulary mapped to one-hot indices."""

    kind: str
    projection: np.ndarray | None = None
    mean: np.ndarray | None = None
    eigvals: np.ndarray | None = None
    encoder: EncoderParams | None = None
    tag_vocab: tuple = ()
    _tag_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind == "gold_pos" and not self._tag_index:
            object.__setattr__(
                self, "_tag_index", {t: i for i, t in enumerate(self.tag_vocab)}
            )

    @property
    def out_dim(self):
        if self.kind == "identity":
            return None
        if self.kind == "pca":
            return self.projection.shape[0]
        if self.kind == "mlp":
            return self.encoder.out_dim
        return len(self.tag_vocab)


def pca_fit(dataset, d: int) -> BaselineSpec:
    """Top-d principal directions of the mean-centered token vectors."""
    rows = [dataset.token_vectors(i)[0] for i in range(len(dataset))]
    x = np.concatenate(rows, axis=0)
    if d > x.shape[1]:
        raise ConfigError(f"pca: d={d} exceeds input dim {x.shape[1]}")
    if x.shape[0] < d:
        raise ConfigError(f"pca: need at least d={d} tokens, have {x.shape[0]}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(1, x.shape[0] - 1)
    eigvals, eigvecs = jacobi_eigh(cov)
    return BaselineSpec(
        kind="pca",
        projection=eigvecs[:, :d].T.copy(),
        mean=mean,
        eigvals=eigvals[:d].copy(),
    )


def project(spec: BaselineSpec, x=None, pos=None):
    """Deterministic tag vectors for one sentence.

    identity: x unchanged; pca: centered projection; mlp: encoder mean with
    variance forced to 0; gold_pos: one-hot rows built from `pos`.
    """
    if spec.kind == "identity":
        return np.asarray(x, dtype=np.float64)
    if spec.kind == "pca":
        return (np.asarray(x, dtype=np.float64) - spec.mean) @ spec.projection.T
    if spec.kind == "mlp":
        post = encode_token(spec.encoder, np.asarray(x, dtype=np.float64))
        return value(post.mean)
    if spec.kind == "gold_pos":
        out = np.zeros((len(pos), len(spec.tag_vocab)))
        for i, tag in enumerate(pos):
            j = spec._tag_index.get(tag)
            if j is None:
                raise VocabularyError(f"unknown POS tag {tag!r}")
            out[i, j] = 1.0
        return out
    raise ConfigError(f"unknown baseline kind {spec.kind!r}")


def pca_unproject(spec: BaselineSpec, z):
    """Map projected coordinates back to the input space (for round-trip
    checks; exact only when d equals the input dimension)."""
    return np.asarray(z) @ spec.projection + spec.mean
