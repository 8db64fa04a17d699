"""Term-matching baselines over an inverted index: Okapi BM25 and TF-IDF cosine."""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Sequence

import numpy as np

from ..encoders.tokenizer import split_words
from .ranking import RankedList


def lexical_terms(text: str) -> list[str]:
    """Lowercase word tokens; punctuation and special markers are dropped."""
    return [w for w in split_words(text) if w[0].isalnum() or w[0] == "_"]


class InvertedIndex:
    """term -> postings of (passage index, term frequency), sorted by passage index."""

    def __init__(self, texts: Sequence[str], ids: Sequence[str] | None = None):
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(texts))]
        if len(self.ids) != len(texts):
            raise ValueError("ids and texts differ in length")
        self.position = {pid: i for i, pid in enumerate(self.ids)}
        self.doc_terms: list[Counter] = [Counter(lexical_terms(t)) for t in texts]
        self.doc_len = np.array([sum(c.values()) for c in self.doc_terms], dtype=np.float64)
        self.n_docs = len(texts)
        self.avgdl = float(self.doc_len.mean()) if self.n_docs else 0.0
        postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
        for i, counts in enumerate(self.doc_terms):
            for term, tf in sorted(counts.items()):
                postings[term].append((i, tf))
        self.postings = dict(postings)
        self.df = {t: len(p) for t, p in self.postings.items()}
        self._tfidf_norms: np.ndarray | None = None

    @classmethod
    def from_passages(cls, passages) -> "InvertedIndex":
        return cls([p.text for p in passages], [p.id for p in passages])

    def __len__(self) -> int:
        return self.n_docs

    # -- BM25 ---------------------------------------------------------------
    def bm25_idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def bm25_scores(self, query_terms: Sequence[str], k1: float = 1.2, b: float = 0.75) -> np.ndarray:
        """BM25 score of every passage, accumulated over postings."""
        scores = np.zeros(self.n_docs)
        if not self.n_docs:
            return scores
        norm = k1 * (1.0 - b + b * self.doc_len / self.avgdl) if self.avgdl > 0 else np.full(self.n_docs, k1)
        for term in query_terms:
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.bm25_idf(term)
            idx = np.fromiter((i for i, _ in plist), dtype=np.int64, count=len(plist))
            tf = np.fromiter((f for _, f in plist), dtype=np.float64, count=len(plist))
            scores[idx] += idf * tf * (k1 + 1.0) / (tf + norm[idx])
        return scores

    # -- TF-IDF -------------------------------------------------------------
    def tfidf_idf(self, term: str) -> float:
        # smoothed so that terms occurring everywhere keep a positive weight
        return math.log((1.0 + self.n_docs) / (1.0 + self.df.get(term, 0))) + 1.0

    def _tfidf_vector(self, counts: Counter) -> dict[str, float]:
        return {t: math.log1p(tf) * self.tfidf_idf(t) for t, tf in counts.items()}

    def tfidf_norms(self) -> np.ndarray:
        if self._tfidf_norms is None:
            self._tfidf_norms = np.array([
                math.sqrt(sum(w * w for w in self._tfidf_vector(c).values())) for c in self.doc_terms
            ])
        return self._tfidf_norms

    def tfidf_scores(self, query_terms: Sequence[str]) -> np.ndarray:
        """Cosine between log-tf * idf vectors of the query and every passage."""
        scores = np.zeros(self.n_docs)
        qvec = self._tfidf_vector(Counter(query_terms))
        qnorm = math.sqrt(sum(w * w for w in qvec.values()))
        if qnorm == 0.0 or not self.n_docs:
            return scores
        for term, qw in qvec.items():
            for i, tf in self.postings.get(term, ()):
                scores[i] += qw * math.log1p(tf) * self.tfidf_idf(term)
        norms = self.tfidf_norms()
        nz = norms > 0
        scores[nz] /= norms[nz] * qnorm
        return scores

    def search(self, query_terms: Sequence[str], k: int, method: str = "bm25") -> RankedList:
        scores = self.bm25_scores(query_terms) if method == "bm25" else self.tfidf_scores(query_terms)
        return RankedList.from_scores(self.ids, scores, k)


def bm25_score(query_terms: Sequence[str], passage_index: int, index: InvertedIndex,
               k1: float = 1.2, b: float = 0.75) -> float:
    """Okapi BM25 with idf = ln((N - df + 0.5) / (df + 0.5) + 1)."""
    counts = index.doc_terms[passage_index]
    dl = index.doc_len[passage_index]
    total = 0.0
    for term in query_terms:
        tf = counts.get(term, 0)
        if tf == 0:
            continue
        total += index.bm25_idf(term) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / index.avgdl))
    return total


def tfidf_score(query_terms: Sequence[str], passage_index: int, index: InvertedIndex) -> float:
    qvec = index._tfidf_vector(Counter(query_terms))
    dvec = index._tfidf_vector(index.doc_terms[passage_index])
    qn = math.sqrt(sum(w * w for w in qvec.values()))
    dn = math.sqrt(sum(w * w for w in dvec.values()))
    if qn == 0.0 or dn == 0.0:
        return 0.0
    return sum(w * dvec.get(t, 0.0) for t, w in qvec.items()) / (qn * dn)


class LexicalScorer:
    """Adapts a lexical method to the matcher ``score(query, passages)`` interface."""

    def __init__(self, index: InvertedIndex, method: str = "bm25"):
        if method not in ("bm25", "tfidf"):
            raise ValueError(f"unknown lexical method {method!r}")
        self.index = index
        self.method = method
        self.arch = method

    def score(self, query: tuple[str, str], passages) -> np.ndarray:
        terms = lexical_terms(" ".join(query))
        all_scores = self.index.bm25_scores(terms) if self.method == "bm25" else self.index.tfidf_scores(terms)
        return np.array([all_scores[self.index.position[p.id]] for p in passages])
