"""Multi-partition retrieval-augmented generation engine.

A text-pair database is split into M partitions, each with its own
approximate nearest-neighbor index. One learned agent picks the partition
to retrieve from, a second iteratively refines stored memories, and both
are trained jointly with deep Q-learning so that a pluggable text
generator produces better outputs.
"""

__version__ = "0.1.0"
