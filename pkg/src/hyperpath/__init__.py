"""Metapath-specific hyperbolic embedding of heterogeneous graphs.

Each metapath gets its own Poincare ball with a learnable curvature;
instance- and metapath-level attention aggregate embeddings through shared
tangent spaces, a contrastive objective keeps metapath embeddings separable
in a unified ball, and a linear readout feeds node- or link-level losses.
"""

__version__ = "0.1.0"
