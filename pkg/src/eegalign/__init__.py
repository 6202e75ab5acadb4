"""Aligning EEG embeddings with a pretrained image-embedding space."""

from .errors import EEGAlignError
from .losses import (
    GeometricTemplate,
    LossMode,
    LossWeights,
    contrastive_loss,
    gaussian_kernel,
    geometric_loss,
    mse_loss,
    semantic_loss,
    total_loss,
)
from .types import (
    EEGEpoch,
    EmbeddingBatch,
    LossBreakdown,
    Modality,
    RetrievalReport,
    SimilarityMatrix,
    cosine_similarity_matrix,
)

__version__ = "0.1.0"
