"""Lexical baselines, exact dense index, candidate selection and re-ranking."""
from .lexical import InvertedIndex, LexicalScorer, bm25_score, lexical_terms, tfidf_score
from .ranking import RankedList
from .rerank import CANDIDATE_MODES, CandidateSet, rerank, select_candidates
from .vectors import (
    INDEX_VERSION,
    METRICS,
    FingerprintMismatch,
    IndexFormatError,
    TokenCache,
    VectorIndex,
    build_token_cache,
    build_vector_index,
    knn,
)

__all__ = [
    "InvertedIndex", "LexicalScorer", "bm25_score", "lexical_terms", "tfidf_score", "RankedList",
    "CANDIDATE_MODES", "CandidateSet", "rerank", "select_candidates", "INDEX_VERSION", "METRICS",
    "FingerprintMismatch", "IndexFormatError", "TokenCache", "VectorIndex", "build_token_cache",
    "build_vector_index", "knn",
]
