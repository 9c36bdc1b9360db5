"""REDA: top-N recommendation via learned inter-item relation embeddings.

Items are decomposed into several aspect vectors; every co-consumed item
pair yields a relation embedding through crossed aspect interactions,
a key-value memory attention, and an MLP-scored weight attention. Users
are represented by aggregating relation embeddings over their history,
and candidates are ranked by how well their relations to the history
align with that aggregate. Training minimizes a relation-wise triplet
ranking loss with hand-derived gradients and Adam.
"""

__version__ = "0.1.0"
