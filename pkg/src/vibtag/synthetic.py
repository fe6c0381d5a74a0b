"""Bundled synthetic grammar so every command runs with zero external assets.

Each token carries a latent class.  Gold trees are the tie-broken maximum
arborescence under a hidden class-pair score table, and the dependency label
of an arc is a deterministic function of the (head class, modifier class)
pair, so the task is exactly realizable by a biaffine scorer over
class-informative tags.  Embeddings are a class prototype plus Gaussian
noise, padded with pure-noise dimensions; the type layer (layer 0) is a
deterministic per-word-form vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, EmbeddingSequence, Sentence
from .parser import decode_mst


@dataclass
class SyntheticConfig:
    n_classes: int = 8
    proto_dim: int = 8
    noise_dims: int = 24
    signal_noise: float = 0.8
    noise_scale: float = 1.5
    types_per_class: int = 12
    n_labels: int = 6
    min_len: int = 4
    max_len: int = 8
    seed: int = 12345


class SyntheticGrammar:
    """Deterministic head-selection grammar over latent word classes."""

    def __init__(self, cfg: SyntheticConfig = None):
        self.cfg = cfg or SyntheticConfig()
        c = self.cfg
        rng = np.random.default_rng(c.seed)
        self.prototypes = rng.standard_normal((c.n_classes, c.proto_dim)) * 2.0
        # hidden class-pair arc scores; row 0 is the root
        self.arc_table = rng.standard_normal((c.n_classes + 1, c.n_classes)) * 2.0
        # per-word-form type vectors: prototype + a small fixed offset
        self.type_offsets = rng.standard_normal(
            (c.n_classes, c.types_per_class, c.proto_dim)
        ) * 0.3
        self.type_noise_dims = rng.standard_normal(
            (c.n_classes, c.types_per_class, c.noise_dims)
        ) * 0.3

    @property
    def dim(self):
        return self.cfg.proto_dim + self.cfg.noise_dims

    def label_of(self, head_class: int, mod_class: int) -> str:
        # head_class -1 denotes the root
        return f"rel{(3 * (head_class + 1) + mod_class) % self.cfg.n_labels}"

    def tree_for(self, classes):
        """Gold heads/labels: the maximum arborescence of the class-pair
        score table, tie-broken exactly as the decoder breaks ties."""
        n = len(classes)
        S = np.empty((n + 1, n))
        for m, cm in enumerate(classes):
            S[0, m] = self.arc_table[0, cm]
            for h, ch in enumerate(classes):
                S[h + 1, m] = self.arc_table[ch + 1, cm]
        tree = decode_mst(S)
        labels = []
        for m, h in enumerate(tree.heads):
            hc = -1 if h == 0 else classes[h - 1]
            labels.append(self.label_of(hc, classes[m]))
        return tree.heads, tuple(labels)

    def sentence(self, sent_id: int, rng) -> tuple:
        c = self.cfg
        n = int(rng.integers(c.min_len, min(c.max_len, 30) + 1))
        if n <= c.n_classes:
            # distinct classes per sentence: gold head choices never tie,
            # so the task is exactly realizable from per-token classes
            classes = rng.permutation(c.n_classes)[:n]
        else:
            classes = rng.integers(0, c.n_classes, size=n)
        type_ids = rng.integers(0, c.types_per_class, size=n)
        tokens = tuple(f"w{cl}_{t}" for cl, t in zip(classes, type_ids))
        heads, labels = self.tree_for(list(classes))
        pos = tuple(f"C{cl}" for cl in classes)
        sent = Sentence(id=sent_id, tokens=tokens, heads=heads,
                        labels=labels, pos=pos)

        proto = self.prototypes[classes]
        token_layer = np.concatenate(
            [
                proto + rng.standard_normal(proto.shape) * c.signal_noise,
                rng.standard_normal((n, c.noise_dims)) * c.noise_scale,
            ],
            axis=1,
        )
        type_layer = np.concatenate(
            [
                proto + self.type_offsets[classes, type_ids],
                self.type_noise_dims[classes, type_ids],
            ],
            axis=1,
        )
        layers = np.stack([type_layer, token_layer]).astype(np.float32)
        emb = EmbeddingSequence(sentence_id=sent_id, layers=layers)
        return sent, emb

    def dataset(self, n_sentences: int, seed: int, token_layer=1) -> Dataset:
        rng = np.random.default_rng(seed)
        pairs = tuple(self.sentence(i, rng) for i in range(n_sentences))
        return Dataset(pairs=pairs, token_layer=token_layer)


def demo_datasets(n_train=2000, n_test=500, cfg: SyntheticConfig = None,
                  seed=7):
    """The bundled train/test pair used by `--demo` and the gated checks."""
    grammar = SyntheticGrammar(cfg)
    train = grammar.dataset(n_train, seed=seed)
    test = grammar.dataset(n_test, seed=seed + 1)
    return grammar, train, test


def branching_baseline_las(dataset):
    """LAS of the better of the two trivial chain parsers (every token
    attaches to its left/right neighbor, majority label)."""
    from collections import Counter

    label_counts = Counter(
        l for sent, _ in dataset.pairs for l in sent.labels
    )
    top_label = label_counts.most_common(1)[0][0]
    scores = []
    for direction in ("left", "right"):
        head_ok = label_ok = total = 0
        for sent, _ in dataset.pairs:
            n = len(sent)
            if direction == "left":
                pred = [0] + list(range(1, n))        # head = previous token
            else:
                pred = list(range(2, n + 1)) + [0]    # head = next token
            for m in range(n):
                total += 1
                if pred[m] == sent.heads[m]:
                    head_ok += 1
                    if sent.labels[m] == top_label:
                        label_ok += 1
        scores.append((head_ok / total, label_ok / total))
    return max(s[1] for s in scores), max(s[0] for s in scores)
