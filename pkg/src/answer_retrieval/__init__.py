"""Self-supervised answer-passage retrieval at desk scale.

Heading-structured corpora are labeled with (entity, aspect) pairs, which
train Bi-, Poly-, Cross-encoder and hierarchical matchers with an in-batch
listwise loss; the retrieval and evaluation harness measures Recall@k and
per-query latency.
"""

__version__ = "0.1.0"
