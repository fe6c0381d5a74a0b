"""embexport: run a contextual embedder over CoNLL-U token sequences and
write the per-layer vectors as EMB1 interchange files."""

__version__ = "0.1.0"
