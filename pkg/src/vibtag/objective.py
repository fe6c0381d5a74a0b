"""The combined variational bound and the alternating training loop.

Per sentence the loss is

    E_t[-log q(y|t)]  +  beta * sum_i KL(p(t_i|x_i) || r(t_i))
                      +  gamma * sum_i KL(p(t_i|x_i) || s(t_i|xhat_i))

with the reconstruction expectation estimated by averaging over a small
number of reparameterized tag draws and both KL terms computed in closed
form.  Training alternates: the token encoder moves on even epochs, the
variational distributions (decoder, marginal, type encoder) on odd epochs.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, value
from .dists import (
    categorical_kl,
    gaussian_kl,
    gumbel_from_uniform,
    sample_gaussian,
    sample_gumbel_softmax,
)
from .encoders import (
    CONTINUOUS,
    DISCRETE,
    BaselineSpec,
    EncoderParams,
    MarginalParams,
    encode_token,
    encode_type,
    marginal,
    pca_fit,
    project,
)
from .errors import ConfigError, TrainingError
from .parser import (
    DecoderParams,
    ParseTree,
    attachment_scores,
    decode_mst,
    score,
    tree_log_prob,
    tree_log_prob_rows,
)

# nats/token beyond which a batch loss is treated as numeric divergence;
# large beta values make the *initial* rate term big, so the guard is
# per-token and generous
DIVERGENCE_LIMIT = 1e8


@dataclass
class VIBConfig:
    """Hyperparameters for one training run."""

    mode: str = CONTINUOUS        # "continuous" | "discrete"
    tag_dim: int = 16             # d (continuous) or k (discrete)
    beta: float = 1e-3
    gamma: float = None           # defaults to beta
    samples: int = 5              # tag draws per sentence
    epochs: int = 50
    minibatch: int = 20
    learning_rate: float = 0.05
    l2: float = 1e-5
    tau_start: float = 5.0
    tau_floor: float = 0.5
    tau_decay: float = 0.1        # the temperature annealing rate
    seed: int = 0
    token_layer: int = 1
    encoder_hidden: int = None    # None -> mode default
    arc_dim: int = 32
    label_dim: int = 16
    rnn_hidden: int = 0           # 0 disables the recurrent extractor
    baseline: str = None          # None | "mlp" | "identity" | "pca" | "gold_pos"
    init_scale: float = 1.0       # scales the N(0, I) draws
    select: str = "best"          # "best" (dev LAS) | "final" (last epoch)

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = self.beta
        if self.mode not in (CONTINUOUS, DISCRETE):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta and gamma must be >= 0")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if not (0 < self.tau_floor <= self.tau_start):
            raise ConfigError("need 0 < tau_floor <= tau_start")
        if self.baseline not in (None, "mlp", "identity", "pca", "gold_pos"):
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        if self.select not in ("best", "final"):
            raise ConfigError(f"unknown select {self.select!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    """Additive decomposition of the bound, in nats (batch totals)."""

    reconstruction: float
    rate: float
    context: float
    n_tokens: int

    @property
    def total(self):
        return self.reconstruction + self.rate + self.context

    def per_token(self):
        n = max(1, self.n_tokens)
        return {
            "total": self.total / n,
            "reconstruction": self.reconstruction / n,
            "rate": self.rate / n,
            "context": self.context / n,
        }


@dataclass
class ModelParams:
    """The four trainable blocks plus frozen run metadata."""

    cfg: VIBConfig
    theta: EncoderParams | None
    psi: MarginalParams | None
    xi: EncoderParams | None
    phi: DecoderParams
    label_vocab: tuple
    pos_vocab: tuple
    input_dim: int
    baseline_spec: BaselineSpec | None = None

    def blocks(self):
        out = {"phi": list(self.phi.params())}
        if self.theta is not None:
            out["theta"] = list(self.theta.params())
        if self.psi is not None:
            out["psi"] = list(self.psi.params())
        if self.xi is not None:
            out["xi"] = list(self.xi.params())
        return out

    def all_params(self):
        return [p for ps in self.blocks().values() for p in ps]

    @property
    def is_vib(self):
        return self.cfg.baseline is None

    def decoder_input_dim(self):
        if self.cfg.baseline is None or self.cfg.baseline == "mlp":
            return self.cfg.tag_dim
        if self.cfg.baseline == "identity":
            return self.input_dim
        if self.cfg.baseline == "pca":
            return self.cfg.tag_dim
        return len(self.pos_vocab)


def init_params(dataset, cfg: VIBConfig) -> ModelParams:
    """Fresh parameter blocks, N(0, I)-initialized from cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    input_dim = dataset.pairs[0][1].dim
    label_vocab = tuple(dataset.label_vocab())
    pos_vocab = tuple(dataset.pos_vocab())

    theta = psi = xi = None
    spec = None
    if cfg.baseline is None or cfg.baseline == "mlp":
        theta = EncoderParams.init(
            cfg.mode, input_dim, cfg.tag_dim, rng, hidden=cfg.encoder_hidden
        )
        if cfg.baseline == "mlp":
            spec = BaselineSpec(kind="mlp", encoder=theta)
    if cfg.baseline is None:
        psi = MarginalParams.init(cfg.mode, cfg.tag_dim, rng)
        xi = EncoderParams.init(
            cfg.mode, input_dim, cfg.tag_dim, rng, hidden=cfg.encoder_hidden
        )
    if cfg.baseline == "pca":
        spec = pca_fit(dataset, cfg.tag_dim)
    if cfg.baseline == "identity":
        spec = BaselineSpec(kind="identity")
    if cfg.baseline == "gold_pos":
        spec = BaselineSpec(kind="gold_pos", tag_vocab=pos_vocab)

    dec_in = {
        None: cfg.tag_dim,
        "mlp": cfg.tag_dim,
        "pca": cfg.tag_dim,
        "identity": input_dim,
        "gold_pos": len(pos_vocab),
    }[cfg.baseline]
    phi = DecoderParams.init(
        dec_in, label_vocab, rng,
        arc_dim=cfg.arc_dim, label_dim=cfg.label_dim, rnn_hidden=cfg.rnn_hidden,
    )
    params = ModelParams(
        cfg=cfg, theta=theta, psi=psi, xi=xi, phi=phi,
        label_vocab=label_vocab, pos_vocab=pos_vocab,
        input_dim=input_dim, baseline_spec=spec,
    )
    if cfg.init_scale != 1.0:
        for p in params.all_params():
            p.data = p.data * cfg.init_scale
    return params


def temperature(epoch: int, cfg: VIBConfig) -> float:
    """Gumbel-softmax temperature for training epoch i (1-based):
    tau_1 = tau_start, tau_{i+1} = max(tau_floor, exp(-tau_decay) * tau_i)."""
    if epoch < 1:
        raise ConfigError("epochs are 1-based")
    tau = cfg.tau_start * np.exp(-cfg.tau_decay * (epoch - 1))
    return float(max(cfg.tau_floor, tau))


def gold_tree(sentence) -> ParseTree:
    return ParseTree(heads=tuple(sentence.heads), labels=tuple(sentence.labels))


def label_ids(sentence, label_vocab):
    index = {l: i for i, l in enumerate(label_vocab)}
    return tuple(index[l] for l in sentence.labels)


def draw_tags(params: ModelParams, post, n, n_samples, tau, rng):
    """Reparameterized tag draws, shape (n_samples, n, tag_dim_or_k)."""
    cfg = params.cfg
    if cfg.mode == CONTINUOUS:
        z = rng.standard_normal((n_samples, n, cfg.tag_dim))
        return sample_gaussian(post, z)
    u = rng.random((n_samples, n, cfg.tag_dim))
    return sample_gumbel_softmax(post, tau, gumbel_from_uniform(u))


def _deterministic_tags(params: ModelParams, sentence, x):
    """Decoder input for the deterministic baselines (no sampling)."""
    spec = params.baseline_spec
    if spec.kind == "gold_pos":
        return project(spec, pos=sentence.pos)
    return project(spec, x=x)


def sentence_loss(params: ModelParams, sentence, x, xhat, tau, rng,
                  n_samples=None):
    """Loss terms for one sentence.  Returns (total Tensor, recon, rate,
    context) where the last three are floats (nats, sentence totals)."""
    cfg = params.cfg
    n = len(sentence)
    tree = ParseTree(
        heads=tuple(sentence.heads),
        labels=label_ids(sentence, params.label_vocab),
    )
    n_samples = n_samples or cfg.samples

    if params.is_vib or cfg.baseline == "mlp":
        post = encode_token(params.theta, x)
    rate = context = 0.0
    if params.is_vib:
        tags = draw_tags(params, post, n, n_samples, tau, rng)
        rate_t = cfg.beta * ad.tsum(_kl_to_marginal(params, post))
        ctx_t = cfg.gamma * ad.tsum(_kl_to_type(params, post, xhat))
    elif cfg.baseline == "mlp":
        tags = post.mean.reshape(1, n, cfg.tag_dim)
        rate_t = ctx_t = None
    else:
        tags = _deterministic_tags(params, sentence, x)[None, :, :]
        rate_t = ctx_t = None

    arcs = score(params.phi, tags)
    logp = tree_log_prob(arcs, tree)          # (n_samples,)
    recon_t = -ad.tsum(logp) * (1.0 / value(logp).shape[0])
    total = recon_t
    if rate_t is not None:
        total = total + rate_t + ctx_t
        rate = float(value(rate_t))
        context = float(value(ctx_t))
    return total, float(value(recon_t)), rate, context


def _kl_to_marginal(params, post):
    # the (2d,)- or (k,)-shaped marginal broadcasts against per-token posteriors
    marg = marginal(params.psi)
    if params.cfg.mode == CONTINUOUS:
        return gaussian_kl(post, marg)
    return categorical_kl(post, marg)


def _kl_to_type(params, post, xhat):
    tpost = encode_type(params.xi, xhat)
    if params.cfg.mode == CONTINUOUS:
        return gaussian_kl(post, tpost)
    return categorical_kl(post, tpost)


def _group_loss(params: ModelParams, sents, x, xhat, tau, rng):
    """Loss for a group of same-length sentences; x is (B, n, in_dim)."""
    cfg = params.cfg
    b, n = x.shape[:2]
    heads_mat = np.array([s.heads for s in sents], dtype=int)
    labels_mat = np.array(
        [label_ids(s, params.label_vocab) for s in sents], dtype=int
    )
    rate_t = ctx_t = None
    if params.is_vib or cfg.baseline == "mlp":
        post = encode_token(params.theta, x)
    if params.is_vib:
        n_samples = cfg.samples
        rate_t = cfg.beta * ad.tsum(_kl_to_marginal(params, post))
        ctx_t = cfg.gamma * ad.tsum(_kl_to_type(params, post, xhat))
        if cfg.mode == CONTINUOUS:
            z = rng.standard_normal((n_samples, b, n, cfg.tag_dim))
            tags = sample_gaussian(post, z)
        else:
            u = rng.random((n_samples, b, n, cfg.tag_dim))
            tags = sample_gumbel_softmax(post, tau, gumbel_from_uniform(u))
        tags = tags.reshape(n_samples * b, n, cfg.tag_dim)
    elif cfg.baseline == "mlp":
        n_samples = 1
        tags = post.mean
    else:
        n_samples = 1
        tags = ad.constant(
            np.stack([_deterministic_tags(params, s, xi)
                      for s, xi in zip(sents, x)])
        )
    arcs = score(params.phi, tags)
    heads_rep = np.tile(heads_mat, (n_samples, 1))
    labels_rep = np.tile(labels_mat, (n_samples, 1))
    logp = tree_log_prob_rows(arcs, heads_rep, labels_rep)
    recon_t = ad.tsum(logp) * (-1.0 / n_samples)
    total = recon_t
    rate = context = 0.0
    if rate_t is not None:
        total = total + rate_t + ctx_t
        rate = float(value(rate_t))
        context = float(value(ctx_t))
    return total, float(value(recon_t)), rate, context


def vib_loss(batch, params: ModelParams, cfg: VIBConfig, tau, rng):
    """Accumulated loss over a batch of (sentence, x, xhat) triples.

    Sentences of equal length are processed as one vectorized group.
    Returns (scalar Tensor for backward, LossBreakdown)."""
    batch = list(batch)
    groups = {}
    for sentence, x, xhat in batch:
        groups.setdefault(len(sentence), []).append((sentence, x, xhat))
    totals = []
    recon = rate = context = 0.0
    n_tokens = 0
    for n in sorted(groups):
        members = groups[n]
        sents = [m[0] for m in members]
        x = np.stack([m[1] for m in members])
        xhat = np.stack([m[2] for m in members])
        t, r, ra, cx = _group_loss(params, sents, x, xhat, tau, rng)
        if not np.isfinite(float(value(t))):
            raise TrainingError(
                "non-finite loss on sentence ids "
                f"{[s.id for s in sents]}"
            )
        totals.append(t)
        recon += r
        rate += ra
        context += cx
        n_tokens += n * len(members)
    total = totals[0]
    for t in totals[1:]:
        total = total + t
    return total, LossBreakdown(
        reconstruction=recon, rate=rate, context=context, n_tokens=n_tokens
    )


def _batch_triples(dataset, order):
    for i in order:
        sent, _ = dataset.pairs[i]
        x, xhat = dataset.token_vectors(i)
        yield sent, x, xhat


def predict(params: ModelParams, sentence, x, rng) -> ParseTree:
    """Parse from a single tag draw (tau = 0 in discrete mode)."""
    cfg = params.cfg
    n = len(sentence)
    if params.is_vib:
        post = encode_token(params.theta, x)
        tags = draw_tags(params, post, n, 1, 0.0, rng)
        tags = value(tags)
    elif cfg.baseline == "mlp":
        tags = value(encode_token(params.theta, x).mean)[None, :, :]
    else:
        tags = _deterministic_tags(params, sentence, x)[None, :, :]
    arcs = score(params.phi, np.asarray(tags))
    arc_mat = value(arcs.arc)[0]
    single = type(arcs)(
        arc=arc_mat,
        _lhead=value(arcs._lhead)[0],
        _ldep=value(arcs._ldep)[0],
        _u_label=value(arcs._u_label),
    )
    return decode_mst(single)


def evaluate(params: ModelParams, dataset, seed=0):
    """Corpus UAS/LAS plus per-sentence LAS-correct counts."""
    rng = np.random.default_rng(seed)
    label_index = {l: i for i, l in enumerate(params.label_vocab)}
    head_ok = label_ok = total = 0
    per_sentence = []
    for i in range(len(dataset)):
        sent, _ = dataset.pairs[i]
        x, _ = dataset.token_vectors(i)
        pred = predict(params, sent, x, rng)
        # labels unseen in training can never be predicted: index them as -1
        # so they count as label-incorrect instead of crashing
        gold = ParseTree(
            heads=tuple(sent.heads),
            labels=tuple(label_index.get(l, -1) for l in sent.labels),
        )
        uas, las = attachment_scores(pred, gold)
        n = len(sent)
        head_ok += round(uas * n)
        label_ok += round(las * n)
        total += n
        per_sentence.append(las)
    return {
        "uas": head_ok / total,
        "las": label_ok / total,
        "per_sentence_las": per_sentence,
    }


def train(dataset, dev_dataset, cfg: VIBConfig, log=None):
    """Alternating-epochs training; returns (best ModelParams, history).

    Even epochs update the token encoder; odd epochs the decoder, marginal,
    and type encoder.  Deterministic given cfg.seed.  The returned parameters
    are the best-dev-LAS snapshot, or the last epoch with cfg.select="final"
    (at very large beta dev LAS is chance-level noise, so "best" would pin an
    arbitrary, under-compressed epoch).
    """
    if len(dataset) == 0:
        raise ConfigError("empty training dataset")
    params = init_params(dataset, cfg)
    blocks = params.blocks()
    opt = Adam(params.all_params(), lr=cfg.learning_rate,
               weight_decay=cfg.l2)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    best = None
    best_las = -1.0
    for epoch in range(1, cfg.epochs + 1):
        tau = temperature(epoch, cfg)
        if epoch % 2 == 0:
            active = blocks.get("theta", [])
        else:
            active = (
                blocks["phi"] + blocks.get("psi", []) + blocks.get("xi", [])
            )
        if not active:  # baselines without an encoder train phi every epoch
            active = blocks["phi"]
        order = rng.permutation(len(dataset))
        t0 = time.time()
        n_tokens = 0
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.minibatch):
            batch = list(_batch_triples(dataset, order[start:start + cfg.minibatch]))
            total, breakdown = vib_loss(batch, params, cfg, tau, rng)
            per_token = breakdown.total / max(1, breakdown.n_tokens)
            if not np.isfinite(breakdown.total) or per_token > DIVERGENCE_LIMIT:
                raise TrainingError(
                    f"divergence at epoch {epoch}: loss {breakdown.total}"
                )
            opt.zero_grad()
            total.backward()
            opt.step(only=active)
            sums += (breakdown.reconstruction, breakdown.rate, breakdown.context)
            n_tokens += breakdown.n_tokens
        dev = evaluate(params, dev_dataset, seed=cfg.seed + 1000 + epoch)
        record = {
            "epoch": epoch,
            "tau": tau,
            "reconstruction": sums[0] / n_tokens,
            "rate": sums[1] / n_tokens,
            "context": sums[2] / n_tokens,
            "total": float(sums.sum()) / n_tokens,
            "dev_uas": dev["uas"],
            "dev_las": dev["las"],
            "seconds": round(time.time() - t0, 3),
        }
        history.append(record)
        if log is not None:
            log(record)
        if cfg.select == "final" or dev["las"] >= best_las:
            best_las = dev["las"]
            best = snapshot(params)
    return best, history


def snapshot(params: ModelParams) -> ModelParams:
    """Deep copy with detached (requires_grad preserved) tensors."""
    out = copy.deepcopy(params)
    for p in out.all_params():
        p.grad = None
    return out


def history_to_jsonl(history, path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in history:
            f.write(json.dumps(rec) + "\n")
