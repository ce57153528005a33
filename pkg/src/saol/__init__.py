"""saol: structure-aware output layers for desk-scale NMT.

A small, deterministic numpy toolkit around one idea: the decoder's
output layer is pluggable, ranging from a full softmax classifier
through weight tying and bilinear joint embeddings to a nonlinear
joint input-output embedding whose capacity is set by the joint
dimension, with negative-sampling training for large vocabularies.
"""

__version__ = "0.1.0"
