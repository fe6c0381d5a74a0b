"""Treebank and embedding I/O plus dataset alignment.

Sentences come from CoNLL-U files; per-token contextual vectors come from the
"EMB1" interchange format (see `write_embeddings` for the exact layout).
`align` joins the two into an immutable training-ready Dataset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    ConlluParseError,
    EmbeddingFormatError,
    TruncationError,
)

EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1
DEFAULT_MAX_LEN = 30


@dataclass(frozen=True)
class Sentence:
    """One treebank sentence with its gold tree and POS column.

    heads[i] is the head position (1-based) of token i+1, 0 meaning the
    artificial root.  Exactly one token has head 0.
    """

    id: int
    tokens: tuple
    heads: tuple
    labels: tuple
    pos: tuple

    def __post_init__(self):
        n = len(self.tokens)
        if n < 1:
            raise ConlluParseError("empty sentence")
        if not (len(self.heads) == len(self.labels) == len(self.pos) == n):
            raise ConlluParseError(
                f"sentence {self.id}: column lengths disagree"
            )

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class EmbeddingSequence:
    """Per-token vectors for one sentence: layers[L][n][dim], float32.

    Layer 0 is the context-independent type vector; higher layers are
    contextual token vectors.
    """

    sentence_id: int
    layers: np.ndarray

    @property
    def n_layers(self):
        return self.layers.shape[0]

    @property
    def n_tokens(self):
        return self.layers.shape[1]

    @property
    def dim(self):
        return self.layers.shape[2]


@dataclass(frozen=True)
class Dataset:
    """Aligned (Sentence, EmbeddingSequence) pairs; immutable once built."""

    pairs: tuple
    token_layer: int
    dropped: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def token_vectors(self, i):
        """(token layer, type layer) float64 arrays for pair i."""
        emb = self.pairs[i][1]
        x = emb.layers[self.token_layer].astype(np.float64)
        xhat = emb.layers[0].astype(np.float64)
        return x, xhat

    @property
    def n_tokens(self):
        return sum(len(s) for s, _ in self.pairs)

    def label_vocab(self):
        return sorted({l for s, _ in self.pairs for l in s.labels})

    def pos_vocab(self):
        return sorted({p for s, _ in self.pairs for p in s.pos})


def is_single_root_tree(heads) -> bool:
    """True iff `heads` (1-based, 0=root) is a single-rooted arborescence.

    Checked by DFS from the root: every token must be reachable and exactly
    one token may attach to the root.
    """
    n = len(heads)
    if sum(1 for h in heads if h == 0) != 1:
        return False
    if any(not (0 <= h <= n) for h in heads):
        return False
    children = {i: [] for i in range(n + 1)}
    for m, h in enumerate(heads, start=1):
        children[h].append(m)
    seen = set()
    stack = [0]
    while stack:
        node = stack.pop()
        for c in children[node]:
            if c in seen:
                return False
            seen.add(c)
            stack.append(c)
    return len(seen) == n


def read_conllu(path, collect_dropped=None):
    """Parse a CoNLL-U file into Sentences.

    Multiword-token ranges ("i-j") and empty nodes ("i.j") are skipped;
    comments ignored.  Sentences whose HEAD column does not form a
    single-rooted tree are dropped (count available via `collect_dropped`,
    a dict that receives a "bad_tree" entry).
    """
    sentences = []
    dropped = 0
    cur_tokens, cur_heads, cur_labels, cur_pos = [], [], [], []
    sent_index = 0

    def flush():
        nonlocal dropped, sent_index
        if not cur_tokens:
            return
        if is_single_root_tree(cur_heads):
            sentences.append(
                Sentence(
                    id=sent_index,
                    tokens=tuple(cur_tokens),
                    heads=tuple(cur_heads),
                    labels=tuple(cur_labels),
                    pos=tuple(cur_pos),
                )
            )
        else:
            dropped += 1
        sent_index += 1
        cur_tokens.clear()
        cur_heads.clear()
        cur_labels.clear()
        cur_pos.clear()

    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if line == "":
                flush()
                continue
            if line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) < 8:
                raise ConlluParseError(
                    f"expected >= 8 tab-separated fields, got {len(fields)}",
                    line_number=lineno,
                )
            tok_id = fields[0]
            if "-" in tok_id or "." in tok_id:
                continue  # multiword range / empty node
            try:
                int(tok_id)
            except ValueError:
                raise ConlluParseError(
                    f"non-integer token id {tok_id!r}", line_number=lineno
                ) from None
            try:
                head = int(fields[6])
            except ValueError:
                raise ConlluParseError(
                    f"non-integer head {fields[6]!r}", line_number=lineno
                ) from None
            cur_tokens.append(fields[1])
            cur_pos.append(fields[3])
            cur_heads.append(head)
            cur_labels.append(fields[7])
    flush()
    if collect_dropped is not None:
        collect_dropped["bad_tree"] = dropped
    return sentences


def write_conllu(path, sentences, predicted=None):
    """Emit sentences as CoNLL-U; `predicted` optionally supplies
    (heads, labels) per sentence to fill HEAD/DEPREL."""
    with open(path, "w", encoding="utf-8") as f:
        for i, sent in enumerate(sentences):
            heads, labels = (
                predicted[i] if predicted is not None else (sent.heads, sent.labels)
            )
            f.write(f"# sent_id = {sent.id}\n")
            for j, tok in enumerate(sent.tokens):
                f.write(
                    "\t".join(
                        [
                            str(j + 1),
                            tok,
                            "_",
                            sent.pos[j],
                            "_",
                            "_",
                            str(heads[j]),
                            str(labels[j]),
                            "_",
                            "_",
                        ]
                    )
                    + "\n"
                )
            f.write("\n")


def write_embeddings(path, records):
    """Write EMB1: magic "EMB1", u32 version=1, u32 dim, u32 L,
    u64 n_sentences; then per sentence u64 sentence_id, u32 n_tokens,
    L*n_tokens*dim float32 values (layer-major, then token-major).
    All integers little-endian."""
    records = list(records)
    if not records:
        raise EmbeddingFormatError("refusing to write an empty EMB1 store")
    dim = records[0].dim
    n_layers = records[0].n_layers
    for rec in records:
        if rec.dim != dim or rec.n_layers != n_layers:
            raise EmbeddingFormatError(
                f"sentence {rec.sentence_id}: inconsistent dim/layer count"
            )
    with open(path, "wb") as f:
        f.write(EMB1_MAGIC)
        f.write(struct.pack("<III", EMB1_VERSION, dim, n_layers))
        f.write(struct.pack("<Q", len(records)))
        for rec in records:
            f.write(struct.pack("<QI", rec.sentence_id, rec.n_tokens))
            f.write(np.ascontiguousarray(rec.layers, dtype="<f4").tobytes())


def read_embeddings(path):
    """Read an EMB1 file into {sentence_id: EmbeddingSequence}.

    The byte stream must match the header arithmetic exactly; short reads
    raise TruncationError naming the offending sentence id.
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != EMB1_MAGIC:
        raise EmbeddingFormatError(f"bad magic {data[:4]!r}, expected {EMB1_MAGIC!r}")
    if len(data) < 20:
        raise TruncationError("EMB1 header truncated")
    version, dim, n_layers = struct.unpack_from("<III", data, 4)
    if version != EMB1_VERSION:
        raise EmbeddingFormatError(f"unsupported EMB1 version {version}")
    if dim == 0 or n_layers == 0:
        raise EmbeddingFormatError("EMB1 header: dim and L must be positive")
    (n_sentences,) = struct.unpack_from("<Q", data, 16)
    offset = 24
    out = {}
    for _ in range(n_sentences):
        if offset + 12 > len(data):
            raise TruncationError(
                f"EMB1 truncated in record header after {len(out)} sentences"
            )
        sentence_id, n_tokens = struct.unpack_from("<QI", data, offset)
        offset += 12
        nbytes = 4 * n_layers * n_tokens * dim
        if offset + nbytes > len(data):
            raise TruncationError(
                f"EMB1 truncated mid-record for sentence_id {sentence_id}"
            )
        layers = (
            np.frombuffer(data, dtype="<f4", count=n_layers * n_tokens * dim,
                          offset=offset)
            .reshape(n_layers, n_tokens, dim)
            .copy()
        )
        if not np.all(np.isfinite(layers)):
            raise EmbeddingFormatError(
                f"non-finite values in sentence_id {sentence_id}"
            )
        if sentence_id in out:
            raise EmbeddingFormatError(f"duplicate sentence_id {sentence_id}")
        out[sentence_id] = EmbeddingSequence(sentence_id=int(sentence_id),
                                             layers=layers)
        offset += nbytes
    if offset != len(data):
        raise TruncationError(
            f"{len(data) - offset} trailing bytes beyond header arithmetic"
        )
    return out


def align(sentences, embeddings, token_layer=1, max_len=DEFAULT_MAX_LEN):
    """Join sentences with their embedding records into a Dataset.

    Keeps only sentences that have an embedding record with matching token
    count and length <= max_len.  A shared id with mismatched token counts is
    an error; ids present on one side only are dropped with a count.
    """
    pairs = []
    dropped = {"too_long": 0, "no_embedding": 0}
    for sent in sentences:
        emb = embeddings.get(sent.id)
        if emb is None:
            dropped["no_embedding"] += 1
            continue
        if token_layer >= emb.n_layers:
            raise AlignmentError(
                f"token_layer {token_layer} out of range: sentence {sent.id} "
                f"has {emb.n_layers} layers"
            )
        if emb.n_tokens != len(sent):
            raise AlignmentError(
                f"sentence {sent.id}: {len(sent)} tokens in treebank vs "
                f"{emb.n_tokens} embedding rows"
            )
        if len(sent) > max_len:
            dropped["too_long"] += 1
            continue
        pairs.append((sent, emb))
    return Dataset(pairs=tuple(pairs), token_layer=token_layer, dropped=dropped)
