"""conceptshot: few-shot classification driven by a concept hierarchy.

A graph over classes (leaf entities plus coarser concept levels) is embedded
with neighborhood propagation; task classifiers are emitted from the graph,
refined per episode, adapted by a few gradient steps on the support set, and
meta-trained end to end with weakly-labeled episodes at every concept level.
"""

__version__ = "0.1.0"
