"""vibtag: task-specific compression of contextual word embeddings into
stochastic tags, trained jointly with a graph-based dependency parser."""

__version__ = "0.1.0"
