"""Information-theoretic diagnostics for trained taggers.

Covers variational bounds on I(X;T) and the context divergence, the
beta-sweep tradeoff curve, per-token transfer probes of auxiliary labels,
and a TSV dump of tag posteriors for external visualization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, value
from .dists import categorical_entropy
from .encoders import CONTINUOUS, encode_token
from .errors import ConfigError, VibtagError
from .objective import (
    VIBConfig,
    draw_tags,
    evaluate,
    sentence_loss,
    train,
)

PREDICTIVENESS_NOTE = "-CE (nats/token), = I(Y;T) lower bound up to +H(Y)"


@dataclass
class MIBounds:
    """Variational bounds in nats per token."""

    ixt_upper: float       # E_x sum_i KL(p(t_i|x_i) || r(t_i)) / tokens
    context_upper: float   # E_x sum_i KL(p(t_i|x_i) || s(t_i|xhat_i)) / tokens
    predictiveness: float  # minus reconstruction cross-entropy

    def to_dict(self):
        return asdict(self)


@dataclass
class TradeoffPoint:
    """One beta on the compression-prediction curve."""

    beta: float
    train_bounds: MIBounds
    test_bounds: MIBounds
    train_uas: float
    train_las: float
    test_uas: float
    test_las: float
    error: str = None

    def to_dict(self):
        d = {
            "beta": self.beta,
            "train_uas": self.train_uas,
            "train_las": self.train_las,
            "test_uas": self.test_uas,
            "test_las": self.test_las,
            "error": self.error,
        }
        d["train_bounds"] = self.train_bounds.to_dict() if self.train_bounds else None
        d["test_bounds"] = self.test_bounds.to_dict() if self.test_bounds else None
        return d


@dataclass
class ProbeResult:
    """Transfer-probe entropies (nats/token) for an auxiliary label A."""

    h_label_upper: float   # variational bound on H(A|T), test set
    h_label_prior: float   # unigram-model bound on H(A), test set
    accuracy: float        # argmax accuracy of the probe on test

    @property
    def retention_ratio(self):
        """Reported as I(A;T)/H(A); 0 by convention for constant labels."""
        if self.h_label_prior <= 1e-12:
            return 0.0
        return 1.0 - self.h_label_upper / self.h_label_prior

    def to_dict(self):
        d = asdict(self)
        d["retention_ratio"] = self.retention_ratio
        return d


def estimate_bounds(dataset, params, samples=5, seed=0) -> MIBounds:
    """Dataset-averaged KL bounds (exact, computed without the beta/gamma
    weights) plus sampled reconstruction."""
    rng = np.random.default_rng(seed)
    from .objective import _kl_to_marginal, _kl_to_type
    recon = rate = context = 0.0
    n_tokens = 0
    for i in range(len(dataset)):
        sent, _ = dataset.pairs[i]
        x, xhat = dataset.token_vectors(i)
        if params.is_vib:
            post = encode_token(params.theta, x)
            rate += float(np.sum(value(_kl_to_marginal(params, post))))
            context += float(np.sum(value(_kl_to_type(params, post, xhat))))
        _, r, _, _ = sentence_loss(
            params, sent, x, xhat, tau=0.0, rng=rng, n_samples=samples
        )
        recon += r
        n_tokens += len(sent)
    return MIBounds(
        ixt_upper=rate / n_tokens,
        context_upper=context / n_tokens,
        predictiveness=-recon / n_tokens,
    )


bounds = estimate_bounds


DEFAULT_BETA_GRID = tuple(10.0 ** e for e in range(-6, 2))  # 1e-6 .. 10


def tradeoff_curve(train_set, test_set, base_cfg: VIBConfig,
                   beta_list=DEFAULT_BETA_GRID, log=None):
    """Train one model per beta (gamma tied to beta, shared seed) and
    collect bounds plus attachment scores; per-point failures are recorded
    and the sweep continues."""
    if not beta_list:
        raise ConfigError("beta_list must be non-empty")
    points = []
    for beta in beta_list:
        cfg = VIBConfig(**{**base_cfg.to_dict(),
                           "beta": beta, "gamma": None})
        try:
            params, _ = train(train_set, test_set, cfg)
            tr_b = bounds(train_set, params, samples=cfg.samples,
                          seed=cfg.seed + 11)
            te_b = bounds(test_set, params, samples=cfg.samples,
                          seed=cfg.seed + 13)
            tr_e = evaluate(params, train_set, seed=cfg.seed + 17)
            te_e = evaluate(params, test_set, seed=cfg.seed + 19)
            point = TradeoffPoint(
                beta=beta, train_bounds=tr_b, test_bounds=te_b,
                train_uas=tr_e["uas"], train_las=tr_e["las"],
                test_uas=te_e["uas"], test_las=te_e["las"],
            )
        except VibtagError as exc:
            point = TradeoffPoint(
                beta=beta, train_bounds=None, test_bounds=None,
                train_uas=float("nan"), train_las=float("nan"),
                test_uas=float("nan"), test_las=float("nan"),
                error=str(exc),
            )
        points.append(point)
        if log is not None:
            log(point)
    return points


def spearman_rho(x, y):
    """Spearman rank correlation (average ranks for ties)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        # average equal values' ranks
        for val in np.unique(v):
            m = v == val
            r[m] = r[m].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def write_curve(points, tsv_path, json_path=None):
    """Plot-ready TSV (one row per beta) and an optional JSON mirror."""
    cols = ["beta", "train_ixt", "train_context", "train_pred",
            "test_ixt", "test_context", "test_pred",
            "train_uas", "train_las", "test_uas", "test_las", "error"]
    with open(tsv_path, "w", encoding="utf-8") as f:
        f.write("# predictiveness axis: " + PREDICTIVENESS_NOTE + "\n")
        f.write("\t".join(cols) + "\n")
        for p in points:
            tb, eb = p.train_bounds, p.test_bounds
            row = [
                repr(p.beta),
                *(["nan"] * 3 if tb is None else
                  [repr(tb.ixt_upper), repr(tb.context_upper),
                   repr(tb.predictiveness)]),
                *(["nan"] * 3 if eb is None else
                  [repr(eb.ixt_upper), repr(eb.context_upper),
                   repr(eb.predictiveness)]),
                repr(p.train_uas), repr(p.train_las),
                repr(p.test_uas), repr(p.test_las),
                p.error or "",
            ]
            f.write("\t".join(row) + "\n")
    if json_path:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump({
                "predictiveness_note": PREDICTIVENESS_NOTE,
                "points": [p.to_dict() for p in points],
            }, f, indent=2)


# -- transfer probe ----------------------------------------------------------


@dataclass
class ProbeConfig:
    hidden: int = 64
    epochs: int = 30
    learning_rate: float = 0.05
    minibatch: int = 256
    samples: int = 1       # tag draws per token during probe training
    seed: int = 0


def _collect_tags_labels(dataset, params, label_column, rng, samples):
    """Sampled tag vectors (rows) and label strings, tau = 0."""
    tags_rows = []
    labels = []
    for i in range(len(dataset)):
        sent, _ = dataset.pairs[i]
        x, _ = dataset.token_vectors(i)
        col = _label_values(sent, label_column)
        if params.is_vib:
            post = encode_token(params.theta, x)
            draws = value(draw_tags(params, post, len(sent), samples, 0.0, rng))
            for s in range(samples):
                tags_rows.append(draws[s])
                labels.extend(col)
        elif params.cfg.baseline == "mlp":
            tags_rows.append(value(encode_token(params.theta, x).mean))
            labels.extend(col)
        else:
            from .objective import _deterministic_tags
            tags_rows.append(_deterministic_tags(params, sent, x))
            labels.extend(col)
    return np.concatenate(tags_rows, axis=0), labels


def _label_values(sentence, label_column):
    if label_column == "pos":
        return list(sentence.pos)
    if label_column == "deprel":
        return list(sentence.labels)
    raise ConfigError(f"unknown label column {label_column!r}")


def probe(train_set, test_set, params, label_column="pos",
          probe_cfg: ProbeConfig = None) -> ProbeResult:
    """Freeze the encoder, fit a softmax probe q(a|t), and report the
    variational H(A|T) bound against the unigram H(A) bound on test."""
    cfg = probe_cfg or ProbeConfig()
    rng = np.random.default_rng(cfg.seed)
    x_tr, a_tr = _collect_tags_labels(train_set, params, label_column,
                                      rng, cfg.samples)
    x_te, a_te = _collect_tags_labels(test_set, params, label_column, rng, 1)
    vocab = sorted(set(a_tr))
    index = {a: i for i, a in enumerate(vocab)}

    # unigram prior with add-one smoothing so unseen test labels are finite
    counts = np.ones(len(vocab) + 1)  # final slot: any unseen label
    for a in a_tr:
        counts[index[a]] += 1
    q_prior = counts / counts.sum()
    h_prior = 0.0
    for a in a_te:
        h_prior -= np.log(q_prior[index.get(a, len(vocab))])
    h_prior /= len(a_te)

    # one-hidden-layer softmax probe on the tag vectors
    dim = x_tr.shape[1]
    k = len(vocab)
    w1 = ad.parameter(None, rng, (dim, cfg.hidden))
    b1 = ad.parameter(None, rng, (cfg.hidden,))
    w2 = ad.parameter(None, rng, (cfg.hidden, k))
    b2 = ad.parameter(None, rng, (k,))
    ps = [w1, b1, w2, b2]
    opt = Adam(ps, lr=cfg.learning_rate)
    y_tr = np.array([index[a] for a in a_tr])
    s1 = 1.0 / np.sqrt(dim)
    s2 = 1.0 / np.sqrt(cfg.hidden)

    def logits_of(x):
        h = ad.tanh((ad.constant(x) @ w1) * s1 + b1)
        return (h @ w2) * s2 + b2

    n = len(y_tr)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s0 in range(0, n, cfg.minibatch):
            idx = order[s0:s0 + cfg.minibatch]
            lp = ad.log_softmax(logits_of(x_tr[idx]), axis=-1)
            nll = -ad.tsum(lp[np.arange(len(idx)), y_tr[idx]]) * (1.0 / len(idx))
            opt.zero_grad()
            nll.backward()
            opt.step()

    lp_te = value(ad.log_softmax(logits_of(x_te), axis=-1))
    h_cond = 0.0
    correct = 0
    fallback = -np.log(q_prior[len(vocab)])
    for row, a in zip(lp_te, a_te):
        j = index.get(a)
        if j is None:
            h_cond += fallback     # unseen label: smoothed prior probability
        else:
            h_cond -= row[j]
            if int(np.argmax(row)) == j:
                correct += 1
    h_cond /= len(a_te)
    return ProbeResult(
        h_label_upper=float(h_cond),
        h_label_prior=float(h_prior),
        accuracy=correct / len(a_te),
    )


# -- tag dump ----------------------------------------------------------------


def dump_tags(dataset, params, path, tau=0.0):
    """TSV of per-token posteriors: mean vector (continuous) or the k
    cluster probabilities (discrete); deterministic baselines dump their
    projected vectors."""
    cfg = params.cfg
    if params.is_vib or cfg.baseline == "mlp":
        width = cfg.tag_dim
    else:
        first = dataset.token_vectors(0)[0]
        from .objective import _deterministic_tags
        width = _deterministic_tags(params, dataset.pairs[0][0], first).shape[1]
    header = ["sentence_id", "token_index", "token", "pos"] + [
        f"t{j}" for j in range(width)
    ]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for i in range(len(dataset)):
            sent, _ = dataset.pairs[i]
            x, _ = dataset.token_vectors(i)
            if params.is_vib or cfg.baseline == "mlp":
                post = encode_token(params.theta, x)
                if cfg.mode == CONTINUOUS:
                    rows = value(post.mean)
                else:
                    rows = value(post.probs())
            else:
                from .objective import _deterministic_tags
                rows = _deterministic_tags(params, sent, x)
            for j in range(len(sent)):
                cells = [str(sent.id), str(j), sent.tokens[j], sent.pos[j]]
                cells += [repr(float(v)) for v in rows[j]]
                f.write("\t".join(cells) + "\n")


def read_tags(path):
    """Round-trip reader for dump_tags output: (header, rows of floats)."""
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        meta, mats = [], []
        for line in f:
            cells = line.rstrip("\n").split("\t")
            meta.append(cells[:4])
            mats.append([float(v) for v in cells[4:]])
    return header, meta, np.array(mats)


def entropy_of_labels(dataset, label_column="pos"):
    """Empirical unigram entropy (nats) of a per-token label column."""
    from collections import Counter
    counts = Counter()
    for sent, _ in dataset.pairs:
        counts.update(_label_values(sent, label_column))
    p = np.array(list(counts.values()), dtype=float)
    p /= p.sum()
    return float(categorical_entropy(p))
