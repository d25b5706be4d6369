"""Shared latent queries: turning a frozen causal transformer into a cross-modal retriever."""

from .backbone import BackboneConfig, FrozenBackbone, Modality, TokenSequence
from .core import (DEFAULT_N_QUERIES, EmbeddingRecord, PoolingStrategy, QueryBank, Readout, ReadoutVariant,
                   build_sequence, encode, extract_query_states, pool_and_normalize)
from .evaluation import (EmbeddingSet, alignment_metric, modality_gap, pca_project, recall_at_k,
                         uniformity_metric)
from .train import Temperature, Trainer, TrainerConfig, info_nce_i2t, info_nce_t2i, similarity_matrix, symmetric_loss

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "FrozenBackbone", "Modality", "TokenSequence",
    "DEFAULT_N_QUERIES", "EmbeddingRecord", "PoolingStrategy", "QueryBank", "Readout", "ReadoutVariant",
    "build_sequence", "encode", "extract_query_states", "pool_and_normalize",
    "EmbeddingSet", "alignment_metric", "modality_gap", "pca_project", "recall_at_k", "uniformity_metric",
    "Temperature", "Trainer", "TrainerConfig", "info_nce_i2t", "info_nce_t2i", "similarity_matrix", "symmetric_loss",
]
