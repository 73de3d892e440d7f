"""Multi-domain graph pre-training on a glued Riemannian manifold."""

from manifold_glue.data import DomainDataset, GraphBatch, GraphRecord

__version__ = "0.1.0"

__all__ = ["GraphRecord", "DomainDataset", "GraphBatch", "__version__"]
