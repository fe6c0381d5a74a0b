"""Graph-based dependency decoder over tag sequences.

Arc scores come from a biaffine form over projected tag features (optionally
fed through a small bidirectional recurrent layer).  Tree probabilities are
normalized exactly with the single-root matrix-tree determinant; 1-best
decoding is Chu-Liu/Edmonds with the single-root constraint.

Score matrix convention: S has shape (n+1, n); S[h][m] scores the arc from
head h (0 = artificial root) to modifier m+1.  Self-arcs (h == m+1) are
excluded structurally by every consumer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, value
from .errors import NumericError

NEG_INF = -1e18


@dataclass
class DecoderParams:
    """Biaffine arc/label scorer parameters.

    Feature extractor: optional single-layer bidirectional tanh RNN of hidden
    size rnn_hidden (feature dim 2*rnn_hidden), else features are the tags
    themselves.  Arc scores use head/dependent projections of size `arc_dim`
    and an (arc_dim+1, arc_dim) biaffine matrix; labels use per-label
    (label_dim+1, label_dim+1) biaffine forms over `labels`.
    """

    labels: tuple
    arc_dim: int
    label_dim: int
    root: Tensor          # learned root feature vector
    w_head: Tensor
    b_head: Tensor
    w_dep: Tensor
    b_dep: Tensor
    u_arc: Tensor         # (arc_dim+1, arc_dim)
    w_lhead: Tensor
    b_lhead: Tensor
    w_ldep: Tensor
    b_ldep: Tensor
    u_label: Tensor       # (n_labels, label_dim+1, label_dim+1)
    rnn_wf: Tensor | None = None
    rnn_bf: Tensor | None = None
    rnn_wb: Tensor | None = None
    rnn_bb: Tensor | None = None

    @classmethod
    def init(cls, in_dim, labels, rng, arc_dim=32, label_dim=16, rnn_hidden=0):
        feat = 2 * rnn_hidden if rnn_hidden else in_dim
        p = lambda shape: ad.parameter(None, rng, shape)
        rnn = {}
        if rnn_hidden:
            rnn = dict(
                rnn_wf=p((in_dim + rnn_hidden, rnn_hidden)),
                rnn_bf=p((rnn_hidden,)),
                rnn_wb=p((in_dim + rnn_hidden, rnn_hidden)),
                rnn_bb=p((rnn_hidden,)),
            )
        return cls(
            labels=tuple(labels),
            arc_dim=arc_dim,
            label_dim=label_dim,
            root=p((feat,)),
            w_head=p((feat, arc_dim)),
            b_head=p((arc_dim,)),
            w_dep=p((feat, arc_dim)),
            b_dep=p((arc_dim,)),
            u_arc=p((arc_dim + 1, arc_dim)),
            w_lhead=p((feat, label_dim)),
            b_lhead=p((label_dim,)),
            w_ldep=p((feat, label_dim)),
            b_ldep=p((label_dim,)),
            u_label=p((len(labels), label_dim + 1, label_dim + 1)),
            **rnn,
        )

    @property
    def has_rnn(self):
        return self.rnn_wf is not None

    def params(self):
        out = [
            self.root, self.w_head, self.b_head, self.w_dep, self.b_dep,
            self.u_arc, self.w_lhead, self.b_lhead, self.w_ldep, self.b_ldep,
            self.u_label,
        ]
        if self.has_rnn:
            out += [self.rnn_wf, self.rnn_bf, self.rnn_wb, self.rnn_bb]
        return out


@dataclass
class ParseTree:
    heads: tuple   # n ints in [0..n], exactly one 0
    labels: tuple  # n label ids

    def __len__(self):
        return len(self.heads)


@dataclass
class ArcScores:
    """Arc score matrix plus cached label projections.

    `arc` has shape (..., n+1, n) (leading sample axes allowed).  Label
    scores are produced on demand for a given head assignment.
    """

    arc: object
    _lhead: object = None  # (..., n+1, label_dim+1)
    _ldep: object = None   # (..., n, label_dim+1)
    _u_label: object = None

    @property
    def n(self):
        return value(self.arc).shape[-1]

    @property
    def has_labels(self):
        return self._u_label is not None

    def label_scores(self, heads):
        """(..., n, n_labels) label scores conditioned on `heads`.

        `heads` may be (n,) shared across the batch or (B, n) per-item."""
        idx = np.asarray(heads, dtype=int)
        if idx.ndim == 2:
            rows = np.arange(idx.shape[0])[:, None]
            head_feats = self._lhead[rows, idx, :]
        else:
            head_feats = self._lhead[..., idx, :]
        dim = value(self._ldep).shape[-1]
        return ad.einsum(
            "...na,lab,...nb->...nl", head_feats, self._u_label, self._ldep
        ) * (1.0 / np.sqrt(dim))


def _run_birnn(phi: DecoderParams, tags):
    """Single-layer bidirectional tanh RNN; concatenated hidden states."""
    n = value(tags).shape[-2]
    hidden = value(phi.rnn_bf).shape[0]
    batch = value(tags).shape[:-2]

    def scan(w, b, order):
        h = ad.constant(np.zeros(batch + (hidden,)))
        inv = 1.0 / np.sqrt(value(w).shape[0])
        outs = [None] * n
        for i in order:
            inp = ad.concat([tags[..., i, :], h], axis=-1)
            h = ad.tanh((inp @ w) * inv + b)
            outs[i] = h.reshape(*(batch + (1, hidden)))
        return ad.concat(outs, axis=-2)

    fwd = scan(phi.rnn_wf, phi.rnn_bf, range(n))
    bwd = scan(phi.rnn_wb, phi.rnn_bb, range(n - 1, -1, -1))
    return ad.concat([fwd, bwd], axis=-1)


def score(phi: DecoderParams, tags) -> ArcScores:
    """Arc and label scores for one sentence's tag vectors.

    `tags` has shape (..., n, in_dim); leading axes (e.g. the sample axis)
    are carried through.
    """
    tags = ad.constant(tags)
    shape = value(tags).shape
    n = shape[-2]
    if n == 0:
        raise ValueError("cannot score an empty sentence")
    if phi.has_rnn:
        tags = _run_birnn(phi, tags)
    batch = value(tags).shape[:-2]
    feat = value(tags).shape[-1]
    root = phi.root.reshape(*((1,) * len(batch) + (1, feat)))
    if batch:
        root = root + ad.constant(np.zeros(batch + (1, feat)))
    f_all = ad.concat([root, tags], axis=-2)       # (..., n+1, feat)

    # 1/sqrt(fan-in) keeps tanh pre-activations O(1) under N(0, 1) weights
    inv = 1.0 / np.sqrt(feat)
    heads = ad.tanh((f_all @ phi.w_head) * inv + phi.b_head)
    deps = ad.tanh((tags @ phi.w_dep) * inv + phi.b_dep)
    ones_h = ad.constant(np.ones(batch + (n + 1, 1)))
    h1 = ad.concat([heads, ones_h], axis=-1)       # (..., n+1, a+1)
    # 1/sqrt(a) keeps the score range moderate under wide (N(0,1)) init
    arc = ad.einsum("...ha,ab,...mb->...hm", h1, phi.u_arc, deps) * (
        1.0 / np.sqrt(phi.arc_dim)
    )

    lhead = ad.tanh((f_all @ phi.w_lhead) * inv + phi.b_lhead)
    ldep = ad.tanh((tags @ phi.w_ldep) * inv + phi.b_ldep)
    ones_l = ad.constant(np.ones(batch + (n + 1, 1)))
    ones_d = ad.constant(np.ones(batch + (n, 1)))
    return ArcScores(
        arc=arc,
        _lhead=ad.concat([lhead, ones_l], axis=-1),
        _ldep=ad.concat([ldep, ones_d], axis=-1),
        _u_label=phi.u_label,
    )


def _arc_matrix(s):
    return s.arc if isinstance(s, ArcScores) else s


def tree_log_partition(S):
    """log sum over all single-rooted arborescences of exp(total arc score).

    Uses the single-root matrix-tree construction: the Laplacian column sums
    exclude the root row, whose place is taken by the root arc weights.
    Differentiable in S; the pullback is the arc marginal matrix.
    """
    S = _arc_matrix(S)
    arr = value(S)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite arc scores in tree_log_partition")
    n = arr.shape[-1]
    batch = arr.shape[:-2]
    # per-column stability shift: every tree uses exactly one head per
    # modifier, so logZ(S) = sum_m c_m + logZ(S - c) for column shifts c;
    # likewise every tree uses exactly one root arc, so the root row can be
    # re-centered by a scalar r after the column shift
    c = arr.max(axis=-2)
    shifted = arr - c[..., None, :]
    r = shifted[..., 0, :].max(axis=-1)
    shifted = shifted.copy()
    shifted[..., 0, :] -= r[..., None]
    a = np.exp(shifted)
    idx = np.arange(n)
    # Laplacian rows index heads 1..n; column m stands for modifier m+1.
    m = -a[..., 1:, :].copy()
    m[..., idx, idx] = a[..., 1:, :].sum(axis=-2) - a[..., idx + 1, idx]
    # first row replaced by the root arc weights
    m[..., 0, :] = a[..., 0, :]
    sign, logdet = np.linalg.slogdet(m)
    if np.any(sign <= 0) or not np.all(np.isfinite(logdet)):
        raise NumericError("matrix-tree determinant is not positive")
    out = c.sum(axis=-1) + r + logdet
    if not isinstance(S, Tensor) or not S._needs_tape():
        return out if batch else float(out)

    minv = np.linalg.inv(m)

    def vjp(g):
        # d logZ / dS equals the arc marginals; d logdet / dM[r,c] = inv(M)[c,r]
        grad = np.zeros_like(arr)
        grad[..., 0, :] = minv[..., :, 0] * a[..., 0, :]
        diag_term = minv[..., idx, idx].copy()   # (..., n)
        diag_term[..., 0] = 0.0                  # row 0 was replaced
        off = np.swapaxes(minv, -1, -2).copy()   # off[j, m] = inv(M)[m, j]
        off[..., 0, :] = 0.0                     # row 0 was replaced
        off[..., idx, idx] = 0.0                 # self-arcs excluded
        grad[..., 1:, :] = a[..., 1:, :] * (diag_term[..., None, :] - off)
        grad[..., idx + 1, idx] = 0.0            # self-arcs excluded
        return np.asarray(g)[..., None, None] * grad

    return Tensor(out, _parents=((S, vjp),))


def tree_marginals(S):
    """Arc marginal probabilities, shape like S (gradient of logZ)."""
    t = Tensor(value(_arc_matrix(S)), requires_grad=True)
    ad.tsum(tree_log_partition(t)).backward()
    return t.grad


def tree_log_prob(S, tree: ParseTree):
    """log q(y | t) for a given tree: arc scores plus per-arc label
    log-likelihoods minus the matrix-tree log-partition."""
    arc = _arc_matrix(S)
    n = value(arc).shape[-1]
    heads = np.asarray(tree.heads, dtype=int)
    if len(heads) != n:
        raise ValueError(f"tree has {len(heads)} tokens, scores have {n}")
    mods = np.arange(n)
    arc_total = ad.tsum(arc[..., heads, mods], axis=-1)
    out = arc_total - tree_log_partition(S)
    if isinstance(S, ArcScores) and S.has_labels:
        ls = S.label_scores(heads)
        lls = ad.log_softmax(ls, axis=-1)
        lab = np.asarray(tree.labels, dtype=int)
        out = out + ad.tsum(lls[..., mods, lab], axis=-1)
    return out


def tree_log_prob_rows(S: ArcScores, heads_mat, labels_mat=None):
    """Batched tree_log_prob: row b of `heads_mat`/`labels_mat` is the gold
    tree for batch item b.  Returns a (B,) Tensor."""
    arc = _arc_matrix(S)
    b, n = np.asarray(heads_mat).shape
    rows = np.arange(b)[:, None]
    mods = np.arange(n)[None, :]
    heads_mat = np.asarray(heads_mat, dtype=int)
    out = ad.tsum(arc[rows, heads_mat, mods], axis=-1) - tree_log_partition(S)
    if labels_mat is not None and isinstance(S, ArcScores) and S.has_labels:
        lls = ad.log_softmax(S.label_scores(heads_mat), axis=-1)
        out = out + ad.tsum(
            lls[rows, mods, np.asarray(labels_mat, dtype=int)], axis=-1
        )
    return out


# -- 1-best decoding ---------------------------------------------------------


def _greedy_heads(w, root):
    """Best head per node under `w` (NEG_INF marks forbidden arcs)."""
    heads = {}
    for m in w:
        if m == root:
            continue
        best_h, best = None, None
        for h in sorted(w):
            if h == m:
                continue
            s = w[h].get(m, NEG_INF)
            if best is None or s > best:
                best_h, best = h, s
        heads[m] = best_h
    return heads


def _find_cycle(heads):
    color = {}  # 1 = on current walk, 2 = finished
    for start in heads:
        if color.get(start):
            continue
        walk = []
        node = start
        while node in heads and not color.get(node):
            color[node] = 1
            walk.append(node)
            node = heads[node]
        if node in heads and color.get(node) == 1:
            cycle = walk[walk.index(node):]
            return cycle
        for v in walk:
            color[v] = 2
    return None


def _edmonds(w, root):
    """Chu-Liu/Edmonds on a dict-of-dicts score map {h: {m: score}}.

    Returns {m: head}.  Ties resolve toward the lower head index because
    candidate heads are scanned in ascending order with strict improvement.
    """
    heads = _greedy_heads(w, root)
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads
    cyc = set(cycle)
    cyc_score = {m: w[heads[m]][m] for m in cycle}
    new_id = max(w) + 1
    nodes = [h for h in w if h not in cyc]
    neww = {h: {} for h in nodes + [new_id]}
    enter_choice = {}  # (outside head) -> (cycle member it attaches to)
    leave_choice = {}  # (outside modifier) -> (cycle member heading it)
    for h in sorted(nodes):
        # arcs into the contracted node
        best, best_m = None, None
        for m in sorted(cyc):
            if m in w.get(h, {}):
                gain = w[h][m] - cyc_score[m]
                if best is None or gain > best:
                    best, best_m = gain, m
        if best is not None:
            neww[h][new_id] = best
            enter_choice[h] = best_m
        # arcs between outside nodes
        for m in sorted(w.get(h, {})):
            if m not in cyc and m != h:
                neww[h][m] = w[h][m]
    # arcs out of the contracted node
    for m in sorted({m for h in cyc for m in w.get(h, {}) if m not in cyc}):
        best, best_h = None, None
        for h in sorted(cyc):
            if m in w.get(h, {}):
                if best is None or w[h][m] > best:
                    best, best_h = w[h][m], h
        if best is not None:
            neww[new_id][m] = best
            leave_choice[m] = best_h
    sub = _edmonds(neww, root)
    heads_out = {}
    for m, h in sub.items():
        if m == new_id:
            continue
        if h == new_id:
            heads_out[m] = leave_choice[m]
        else:
            heads_out[m] = h
    # break the cycle at the member that the outside head enters
    entering_head = sub[new_id]
    entry = enter_choice[entering_head]
    for m in cycle:
        heads_out[m] = heads[m]
    heads_out[entry] = entering_head
    return heads_out


def decode_mst(S) -> ParseTree:
    """Maximum-score single-rooted arborescence with per-arc argmax labels.

    The single-root constraint is enforced exactly by trying each token as
    the sole root child and keeping the best total score; ties break toward
    the lower head index (and lower root child).
    """
    arc = value(_arc_matrix(S))
    n = arc.shape[-1]
    if arc.ndim != 2:
        raise ValueError("decode_mst expects a single (n+1, n) score matrix")
    if n == 1:
        heads = (0,)
    else:
        best_total, best_heads = None, None
        for root_child in range(1, n + 1):
            w = {h: {} for h in range(n + 1)}
            w[0][root_child] = arc[0, root_child - 1]
            for h in range(1, n + 1):
                for m in range(1, n + 1):
                    if h != m:
                        w[h][m] = arc[h, m - 1]
            assignment = _edmonds(w, root=0)
            total = sum(
                arc[assignment[m], m - 1] for m in range(1, n + 1)
            )
            if best_total is None or total > best_total:
                best_total = total
                best_heads = tuple(assignment[m] for m in range(1, n + 1))
        heads = best_heads
    if isinstance(S, ArcScores) and S.has_labels:
        ls = value(S.label_scores(np.asarray(heads)))
        labels = tuple(int(i) for i in np.argmax(ls, axis=-1))
    else:
        labels = tuple(0 for _ in range(n))
    return ParseTree(heads=heads, labels=labels)


# -- evaluation --------------------------------------------------------------


def attachment_scores(pred: ParseTree, gold: ParseTree):
    """(UAS, LAS): fraction of tokens with the right head (and label)."""
    if len(pred) != len(gold):
        raise ValueError("attachment_scores: length mismatch")
    n = len(gold)
    head_ok = [p == g for p, g in zip(pred.heads, gold.heads)]
    both_ok = [
        ho and pl == gl
        for ho, pl, gl in zip(head_ok, pred.labels, gold.labels)
    ]
    return sum(head_ok) / n, sum(both_ok) / n


def paired_permutation_test(correct_a, correct_b, iterations=100000, seed=0):
    """Two-sided sign-flip permutation p-value for the per-sentence score
    difference.  Enumerates all 2^n flips when that is cheaper than the
    requested iteration count; otherwise Monte-Carlo with the given seed."""
    a = np.asarray(correct_a, dtype=np.float64)
    b = np.asarray(correct_b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("paired_permutation_test: need equal non-empty inputs")
    diff = a - b
    obs = abs(diff.mean())
    n = diff.size
    if 2 ** n <= iterations:
        # exact enumeration, chunked to bound memory
        total = 2 ** n
        hits = 0
        chunk = 1 << 16
        for lo in range(0, total, chunk):
            masks = np.arange(lo, min(lo + chunk, total), dtype=np.uint64)
            bits = (masks[:, None] >> np.arange(n, dtype=np.uint64)) & 1
            signs = bits.astype(np.float64) * 2.0 - 1.0
            stats = np.abs(signs @ diff) / n
            hits += int(np.sum(stats >= obs - 1e-12))
        return hits / total
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < iterations:
        take = min(iterations - done, 1 << 16)
        signs = rng.choice([-1.0, 1.0], size=(take, n))
        stats = np.abs(signs @ diff) / n
        hits += int(np.sum(stats >= obs - 1e-12))
        done += take
    return (hits + 1) / (iterations + 1)
