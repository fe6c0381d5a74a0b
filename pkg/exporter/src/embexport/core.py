"""CoNLL-U reading, embedders, and the EMB1 writer.

EMB1 layout (little-endian): magic "EMB1", u32 version=1, u32 dim, u32 L
(number of layers), u64 n_sentences; then per sentence u64 sentence id,
u32 n_tokens, and L*n_tokens*dim float32 values (layer-major).  Layer 0 is
always a context-independent type vector.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"EMB1"
VERSION = 1


class ExportError(Exception):
    pass


@dataclass
class ExportSpec:
    """One export job: which file, which model, which layers, where to."""

    conllu: str
    model: str = "hash-64"
    layers: tuple = (0, 1)
    out: str = "out.emb"
    batch_size: int = 16

    def __post_init__(self):
        self.layers = tuple(int(l) for l in self.layers)
        if not self.layers:
            raise ExportError("at least one layer required")
        if 0 not in self.layers:
            raise ExportError("layer 0 (the type layer) must be exported")
        if sorted(self.layers) != list(self.layers):
            raise ExportError("layers must be sorted ascending")


def read_tokens(path):
    """Token sequences per sentence from a CoNLL-U file.

    Multiword ranges (i-j) and empty nodes (i.j) are skipped; comments
    ignored.  Returns a list of token lists, in file order."""
    sentences = []
    current = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                if current:
                    sentences.append(current)
                    current = []
                continue
            if line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) < 2:
                raise ExportError(f"malformed CoNLL-U line: {line!r}")
            tid = fields[0]
            if "-" in tid or "." in tid:
                continue
            current.append(fields[1])
    if current:
        sentences.append(current)
    return sentences


# -- embedders ---------------------------------------------------------------


class HashEmbedder:
    """Offline deterministic embedder (model ids "hash-<dim>").

    Layer 0 is a unit-scale type vector seeded from SHA-256 of the token
    string.  Layer l >= 1 mixes each token's type vector with its
    neighbors' over a window of size l, with deterministic position
    weights, so higher layers are increasingly contextual.  Fully
    reproducible with no downloads.
    """

    pooling = "none"

    def __init__(self, model_id):
        try:
            self.dim = int(model_id.split("-", 1)[1])
        except (IndexError, ValueError):
            raise ExportError(f"bad hash model id {model_id!r}") from None
        if self.dim < 1:
            raise ExportError("hash embedder dim must be >= 1")
        self.model_id = model_id
        self.n_layers = 3
        self._cache = {}

    def _type_vector(self, token):
        v = self._cache.get(token)
        if v is None:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            rng = np.random.default_rng(seed)
            v = rng.standard_normal(self.dim).astype(np.float32)
            self._cache[token] = v
        return v

    def embed(self, tokens, layers):
        base = np.stack([self._type_vector(t) for t in tokens])
        n = len(tokens)
        out = []
        for layer in layers:
            if layer >= self.n_layers:
                raise ExportError(
                    f"layer {layer} unavailable: {self.model_id} has "
                    f"layers 0..{self.n_layers - 1}"
                )
            if layer == 0:
                out.append(base)
                continue
            mixed = np.zeros_like(base)
            for offset in range(-layer, layer + 1):
                weight = 1.0 / (1.0 + abs(offset))
                for i in range(n):
                    j = i + offset
                    if 0 <= j < n:
                        mixed[i] += weight * base[j]
            norm = np.linalg.norm(mixed, axis=1, keepdims=True)
            out.append((mixed / np.maximum(norm, 1e-8)
                        * np.sqrt(self.dim)).astype(np.float32))
        return np.stack(out)


class TransformersEmbedder:
    """Hidden states of a pretrained transformer, mean-pooled per token.

    Layer 0 is the (context-independent) input embedding layer; layer l is
    the l-th encoder hidden state.  Subword vectors are mean-pooled onto
    the pre-tokenized CoNLL-U tokens; a token left without any subword is a
    hard error.
    """

    pooling = "mean-subword"

    def __init__(self, model_id):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise ExportError(
                f"model {model_id!r} needs the 'transformers' extra"
            ) from exc
        self._torch = torch
        self.model_id = model_id
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.model = AutoModel.from_pretrained(
            model_id, output_hidden_states=True
        )
        self.model.eval()
        self.dim = self.model.config.hidden_size
        self.n_layers = self.model.config.num_hidden_layers + 1

    def embed(self, tokens, layers):
        torch = self._torch
        enc = self.tokenizer(
            tokens, is_split_into_words=True, return_tensors="pt",
            truncation=False,
        )
        with torch.no_grad():
            states = self.model(**enc).hidden_states  # (L+1) tensors
        word_ids = enc.word_ids(0)
        out = []
        for layer in layers:
            if layer >= len(states):
                raise ExportError(
                    f"layer {layer} unavailable: {self.model_id} has "
                    f"layers 0..{len(states) - 1}"
                )
            mat = states[layer][0].numpy()
            pooled = np.zeros((len(tokens), self.dim), dtype=np.float64)
            counts = np.zeros(len(tokens))
            for pos, wid in enumerate(word_ids):
                if wid is not None:
                    pooled[wid] += mat[pos]
                    counts[wid] += 1
            if np.any(counts == 0):
                missing = [tokens[i] for i in np.nonzero(counts == 0)[0]]
                raise ExportError(
                    f"tokens produced no subwords: {missing!r}"
                )
            out.append((pooled / counts[:, None]).astype(np.float32))
        return np.stack(out)


def make_embedder(model_id):
    if model_id.startswith("hash-"):
        return HashEmbedder(model_id)
    return TransformersEmbedder(model_id)


# -- EMB1 output -------------------------------------------------------------


def write_emb1(path, records, dim, n_layers):
    """records: iterable of (sentence_id, array (L, n, dim) float32)."""
    records = list(records)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIQ", VERSION, dim, n_layers, len(records)))
        for sent_id, arr in records:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            if arr.shape[0] != n_layers or arr.shape[2] != dim:
                raise ExportError(
                    f"sentence {sent_id}: array shape {arr.shape} "
                    f"inconsistent with header ({n_layers} layers, dim {dim})"
                )
            f.write(struct.pack("<QI", sent_id, arr.shape[1]))
            f.write(arr.tobytes())


def file_checksum(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def export(spec: ExportSpec):
    """Run the model over every sentence and write EMB1 + manifest JSON.

    Returns the manifest dict.  The manifest path is `spec.out` + ".json".
    """
    sentences = read_tokens(spec.conllu)
    embedder = make_embedder(spec.model)
    records = []
    for sent_id, tokens in enumerate(sentences):
        if not tokens:
            raise ExportError(f"sentence {sent_id} has no tokens")
        arr = embedder.embed(tokens, spec.layers)
        if arr.shape[1] != len(tokens):
            raise ExportError(
                f"sentence {sent_id}: {arr.shape[1]} vectors for "
                f"{len(tokens)} tokens after pooling"
            )
        records.append((sent_id, arr))
    write_emb1(spec.out, records, embedder.dim, len(spec.layers))
    manifest = {
        "model": spec.model,
        "dim": embedder.dim,
        "layers": list(spec.layers),
        "pooling": embedder.pooling,
        "n_sentences": len(records),
        "n_tokens": int(sum(a.shape[1] for _, a in records)),
        "checksum_sha256": file_checksum(spec.out),
        "source_conllu": spec.conllu,
    }
    with open(spec.out + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return manifest
