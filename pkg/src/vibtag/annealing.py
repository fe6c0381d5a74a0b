"""Deterministic annealing over the rate weight beta.

Starting from a single cluster, each round duplicates every leaf with a
small probability perturbation, divides beta by alpha, re-optimizes the
bound, and re-merges duplicate pairs whose conditional probabilities stayed
indistinguishable.  Splits that survive mark critical values of beta and
yield a hierarchical clustering of word types into discrete tags.

The encoder here is tabular: one categorical distribution per word type,
so the split/merge bookkeeping on p(c|x) is exact.  The parser decoder is
co-trained so surviving clusters are parse-predictive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import value
from .dists import Categorical, categorical_kl
from .errors import ConfigError
from .objective import label_ids
from .parser import DecoderParams, score, tree_log_prob_rows

MASK_VALUE = -1e9


@dataclass
class AnnealConfig:
    """Outer-loop schedule and split/merge tolerances."""

    beta_start: float = 4.0
    beta_min: float = 0.005
    alpha: float = 2.0            # beta division factor, > 1
    eps_scale: float = 0.05       # perturbation magnitude at splits
    merge_threshold: float = 0.01
    max_clusters: int = 8
    inner_epochs: int = 30        # optimization budget per beta step
    decoder_steps: int = 5        # decoder epochs between table updates
    tol: float = 1e-5             # relative-change convergence threshold
    learning_rate: float = 0.05   # decoder
    weight_decay: float = 0.01    # keeps decoder scores bounded
    table_damping: float = 0.3    # fraction of the fixed-point step taken
                                  # per table update
    mass_floor: float = 0.01      # child mass share below which a split
                                  # counts as failed (parent renamed)
    arc_dim: int = 32
    label_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 1:
            raise ConfigError("alpha must be > 1")
        if not (0 < self.merge_threshold <= 1):
            raise ConfigError("need 0 < merge_threshold <= 1")
        if self.beta_min <= 0:
            raise ConfigError("beta_min must be > 0")
        if self.max_clusters < 1:
            raise ConfigError("max_clusters must be >= 1")


@dataclass
class ClusterNode:
    """One node of the annealing hierarchy."""

    node_id: int
    column: int                   # probability-table column while active
    beta_split: float = None      # beta at which this node's split happened
    children: list = field(default_factory=list)
    merged_back: bool = False

    @property
    def is_leaf(self):
        return not self.children


@dataclass
class ClusterTree:
    """Annealing result: hierarchy plus the final tabular posteriors."""

    root: ClusterNode
    type_vocab: tuple             # word types, table row order
    type_counts: np.ndarray       # token count per type
    probs: np.ndarray             # (n_types, max_clusters), inactive cols 0
    active_columns: tuple         # columns that are current leaves
    beta_history: list            # per-step records (beta, leaves, ixt, ...)
    budget_exhausted: bool = False

    def leaves(self):
        out = []

        def walk(node):
            if node.is_leaf:
                out.append(node)
            for c in node.children:
                walk(c)

        walk(self.root)
        return out

    def n_leaves(self):
        return len(self.leaves())

    def assignments(self):
        """Hard argmax cluster column per word type."""
        cols = list(self.active_columns)
        sub = self.probs[:, cols]
        return np.asarray(cols)[np.argmax(sub, axis=1)]

    def mutual_information(self):
        """I(X;T) in nats/token of the tabular encoder (exact, since the
        optimal marginal is the count-weighted mean row)."""
        return _mutual_information(self.probs, self.type_counts)


def _mutual_information(probs, counts):
    w = counts / counts.sum()
    marg = w @ probs
    post = Categorical(logits=np.log(np.maximum(probs, 1e-300)))
    ref = Categorical(logits=np.log(np.maximum(marg, 1e-300)))
    kl = value(categorical_kl(post, ref))
    return float(w @ kl)


def _type_index(dataset):
    vocab = []
    index = {}
    for sent, _ in dataset.pairs:
        for tok in sent.tokens:
            if tok not in index:
                index[tok] = len(vocab)
                vocab.append(tok)
    counts = np.zeros(len(vocab))
    for sent, _ in dataset.pairs:
        for tok in sent.tokens:
            counts[index[tok]] += 1
    return tuple(vocab), index, counts


def split_probs(probs, column, new_column, rng, eps_scale):
    """Duplicate `column` into (column, new_column) with perturbation.

    p_a = p/2 + eps, p_b = p - p_a, so the pair sums to the parent exactly
    (eps_x uniform in [-eps_scale*p_x/2, +eps_scale*p_x/2])."""
    p = probs[:, column].copy()
    eps = rng.uniform(-0.5, 0.5, size=p.shape) * (eps_scale * p)
    a = 0.5 * p + eps
    b = p - a
    probs[:, column] = a
    probs[:, new_column] = b


def _copy_decoder_column(phi, parent, new, rng, noise=0.01):
    """Make decoder input-coordinate `new` behave like `parent` at split
    time.  The small noise seeds a cost difference between the duplicates;
    genuine splits amplify it, dead splits relax back under the rate term."""
    for w in (phi.w_head, phi.w_dep, phi.w_lhead, phi.w_ldep):
        row = value(w)[parent]
        w.data[new] = row + rng.standard_normal(row.shape) * noise


def merge_gap(probs, col_a, col_b):
    return float(np.max(np.abs(probs[:, col_a] - probs[:, col_b])))


def _length_groups(dataset):
    groups = {}
    for i in range(len(dataset)):
        sent, _ = dataset.pairs[i]
        groups.setdefault(len(sent), []).append(i)
    return groups


def _optimize(probs, active, dataset, type_ids_by_sent, heads, labels,
              phi, beta, cfg, rng):
    """Inner loop: co-train the probability table and the decoder at fixed
    beta.

    The decoder takes full-batch momentum-SGD steps on the mean-field
    reconstruction
    (posterior rows fed to the parser directly).  The table takes the
    fixed-point step of the annealing free energy,
        p(c|x) <- m(c) exp(-cost(x, c)/beta) / Z(x),
    where cost(x, c) is the per-token reconstruction gradient and m is the
    count-weighted cluster marginal, refit at each table update.  Refitting
    m keeps the rate penalty on hard splits, so a duplicated pair only
    separates when a genuine cost difference sustains it; dead splits relax
    back toward their shared parent profile.

    Returns (new probs array, converged flag)."""
    n_types, kmax = probs.shape
    cols = list(active)
    table = probs[:, cols].copy()                 # (n_types, k_active)
    counts = np.zeros(n_types)
    for tid in type_ids_by_sent:
        np.add.at(counts, tid, 1.0)
    w = counts / counts.sum()
    groups = {}
    for i in range(len(dataset)):
        groups.setdefault(len(type_ids_by_sent[i]), []).append(i)
    # plain momentum SGD for the decoder: steps stay proportional to the
    # gradient, so exactly-duplicated decoder rows receive near-identical
    # updates and dead splits are not torn apart by optimizer noise
    phi_params = list(phi.params())
    velocity = [np.zeros_like(p.data) for p in phi_params]
    marg = np.maximum(w @ table, 1e-300)

    history = []
    streak = 0
    converged = False
    epoch = 0
    for _ in range(cfg.inner_epochs):
        grad_sum = np.zeros_like(table)
        recon_total = 0.0
        for p in phi_params:
            p.grad = None
        full = np.zeros((n_types, kmax))
        full[:, cols] = table
        for n in sorted(groups):
            members = groups[n]
            tid = np.stack([type_ids_by_sent[i] for i in members])
            tags = ad.Tensor(full[tid], requires_grad=True)
            arcs = score(phi, tags)
            h = np.stack([heads[i] for i in members])
            l = np.stack([labels[i] for i in members])
            recon = -ad.tsum(tree_log_prob_rows(arcs, h, l))
            recon.backward()
            recon_total += float(value(recon))
            for b, i in enumerate(members):
                np.add.at(grad_sum, type_ids_by_sent[i], tags.grad[b][:, cols])
        scale = 1.0 / counts.sum()                # per-token decoder gradient
        for p, vel in zip(phi_params, velocity):
            if p.grad is None:
                continue
            g = p.grad * scale + 2.0 * cfg.weight_decay * p.data
            vel *= 0.9
            vel -= cfg.learning_rate * g
            p.data = p.data + vel
        # the table moves only every decoder_steps epochs, so the decoder
        # has time to absorb the split perturbation before the fixed point
        # is re-evaluated; otherwise the reset wipes the seed immediately
        epoch += 1
        if epoch % cfg.decoder_steps != 0:
            continue
        cost = grad_sum / counts[:, None]         # per-token cost(x, c)
        marg = np.maximum(w @ table, 1e-300)
        log_new = np.log(marg)[None, :] - cost / beta
        # damped update: a full jump to the fixed point of the current cost
        # limit-cycles against the still-moving decoder
        log_new = ((1.0 - cfg.table_damping)
                   * np.log(np.maximum(table, 1e-300))
                   + cfg.table_damping * log_new)
        log_new -= log_new.max(axis=1, keepdims=True)
        new = np.exp(log_new)
        table = new / new.sum(axis=1, keepdims=True)
        kl = np.sum(
            np.where(table > 0, table * (np.log(np.maximum(table, 1e-300))
                                         - np.log(marg)[None, :]), 0.0),
            axis=1,
        )
        objective = recon_total + beta * float(counts @ kl)
        history.append(objective)
        if len(history) >= 2:
            rel = abs(history[-1] - history[-2]) / max(1e-12, abs(history[-2]))
            streak = streak + 1 if rel < cfg.tol else 0
            if streak >= 3:
                converged = True
                break
    out = np.zeros_like(probs)
    out[:, cols] = table
    return out, converged


def anneal(dataset, cfg: AnnealConfig, label_vocab=None) -> ClusterTree:
    """Run the five-step deterministic-annealing loop on `dataset`.

    Steps per round: duplicate every leaf with perturbation; divide beta by
    alpha; optimize the bound to convergence; re-merge pairs whose
    conditionals agree within merge_threshold for every word type; stop when
    beta < beta_min or the leaf count reaches max_clusters.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    vocab, index, counts = _type_index(dataset)
    if label_vocab is None:
        label_vocab = tuple(dataset.label_vocab())
    type_ids_by_sent = [
        np.array([index[t] for t in sent.tokens], dtype=int)
        for sent, _ in dataset.pairs
    ]
    heads = [np.array(sent.heads, dtype=int) for sent, _ in dataset.pairs]
    labels = [np.array(label_ids(sent, label_vocab), dtype=int)
              for sent, _ in dataset.pairs]

    kmax = cfg.max_clusters
    probs = np.zeros((len(vocab), kmax))
    probs[:, 0] = 1.0
    root = ClusterNode(node_id=0, column=0)
    next_id = 1
    leaves = [root]
    beta = cfg.beta_start
    phi = DecoderParams.init(
        kmax, label_vocab, rng,
        arc_dim=cfg.arc_dim, label_dim=cfg.label_dim,
    )
    records = []
    budget_exhausted = False
    while True:
        if 2 * len(leaves) > kmax:
            break
        free = sorted(set(range(kmax)) - {lf.column for lf in leaves})
        pairs = []
        for leaf in list(leaves):
            new_col = free.pop(0)
            split_probs(probs, leaf.column, new_col, rng, cfg.eps_scale)
            _copy_decoder_column(phi, leaf.column, new_col, rng)
            a = ClusterNode(node_id=next_id, column=leaf.column)
            b = ClusterNode(node_id=next_id + 1, column=new_col)
            next_id += 2
            leaf.beta_split = beta
            leaf.children = [a, b]
            pairs.append((leaf, a, b))
        beta = beta / cfg.alpha
        active = [lf.column for lf, a, b in pairs] + [
            b.column for lf, a, b in pairs
        ]
        probs, converged = _optimize(
            probs, active, dataset, type_ids_by_sent, heads, labels,
            phi, beta, cfg, rng,
        )
        if not converged:
            budget_exhausted = True
        gaps = [merge_gap(probs, a.column, b.column) for _, a, b in pairs]
        wts = counts / counts.sum()
        for parent, a, b in pairs:
            # a split also fails when one child drains to (near) zero mass:
            # the parent cluster was merely renamed, not differentiated
            mass_a = float(wts @ probs[:, a.column])
            mass_b = float(wts @ probs[:, b.column])
            drained = min(mass_a, mass_b) <= cfg.mass_floor * (mass_a + mass_b)
            if (drained
                    or merge_gap(probs, a.column, b.column)
                    <= cfg.merge_threshold):
                probs[:, a.column] += probs[:, b.column]
                probs[:, b.column] = 0.0
                parent.children = []
                parent.beta_split = None
                parent.merged_back = True
        leaves = []

        def collect(node):
            if node.is_leaf:
                leaves.append(node)
            for c in node.children:
                collect(c)

        collect(root)
        records.append({
            "beta": beta,
            "n_leaves": len(leaves),
            "ixt": _mutual_information(probs, counts),
            "converged": converged,
            "gaps": [round(g, 4) for g in gaps],
        })
        if beta < cfg.beta_min or len(leaves) >= kmax:
            break
    return ClusterTree(
        root=root,
        type_vocab=vocab,
        type_counts=counts,
        probs=probs,
        active_columns=tuple(lf.column for lf in leaves),
        beta_history=records,
        budget_exhausted=budget_exhausted,
    )


def leaf_purity(tree: ClusterTree, dataset):
    """Count-weighted majority-POS fraction per leaf (types assigned by
    argmax).  Returns {column: purity}."""
    pos_of = {}
    for sent, _ in dataset.pairs:
        for tok, pos in zip(sent.tokens, sent.pos):
            pos_of.setdefault(tok, pos)
    assign = tree.assignments()
    out = {}
    for col in tree.active_columns:
        members = [i for i in range(len(tree.type_vocab)) if assign[i] == col]
        if not members:
            out[col] = 1.0
            continue
        tally = {}
        for i in members:
            pos = pos_of[tree.type_vocab[i]]
            tally[pos] = tally.get(pos, 0.0) + tree.type_counts[i]
        out[col] = max(tally.values()) / sum(tally.values())
    return out


def export_tree(tree: ClusterTree, path, top_m=10):
    """Write the hierarchy as nested JSON with per-leaf top word types."""

    def node_json(node):
        d = {"id": node.node_id, "merged_back": node.merged_back}
        if node.beta_split is not None:
            d["beta_split"] = node.beta_split
        if node.is_leaf:
            p = tree.probs[:, node.column]
            order = np.argsort(-p)[:top_m]
            d["cluster"] = int(node.column)
            d["top_types"] = [
                {"type": tree.type_vocab[i], "prob": float(p[i])}
                for i in order if p[i] > 0
            ]
            d["members"] = [
                tree.type_vocab[i]
                for i in np.nonzero(tree.assignments() == node.column)[0]
            ]
        else:
            d["children"] = [node_json(c) for c in node.children]
        return d

    doc = {
        "n_leaves": tree.n_leaves(),
        "mutual_information": tree.mutual_information(),
        "beta_history": tree.beta_history,
        "tree": node_json(tree.root),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
    return doc


def read_tree(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)
