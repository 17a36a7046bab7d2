"""crossplan: a co-optimization engine for relational + ML inference queries.

Queries are plans in a layered representation (relational operators over
expression trees over ML computation graphs), rewritten by an
equivalence-preserving rule catalog and searched with a reusable
Monte-Carlo tree search whose states are graph-kernel plan embeddings.
"""

__version__ = "0.1.0"
