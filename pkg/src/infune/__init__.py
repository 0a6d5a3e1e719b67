"""User identity linkage across two social networks.

Heterogeneous user information (structure, screen names, posts) is fused
into node embeddings by reconstructing per-feature similarity matrices;
candidate pairs are then re-ranked with pair-adaptive neighbourhood
embeddings and evaluated with hit-precision@k.
"""
__version__ = "0.1.0"
