"""Candidate selection (BM25 or random sampling) and re-ranking with a trained matcher."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..encoders.matchers import BiEncoder, PolyEncoder
from ..tensor import no_grad
from .lexical import InvertedIndex, lexical_terms
from .ranking import RankedList
from .vectors import FingerprintMismatch, TokenCache, VectorIndex

CANDIDATE_MODES = ("bm25", "random", "all")


@dataclass(frozen=True)
class CandidateSet:
    passages: tuple
    gold_present: bool

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.passages]

    def __len__(self) -> int:
        return len(self.passages)


def select_candidates(query: tuple[str, str], passages: Sequence, mode: str = "random", n: int = 64,
                      seed: int = 0, gold_ids=(), lexical: Optional[InvertedIndex] = None) -> CandidateSet:
    """Pick up to ``n`` passages to re-rank for ``query``.

    ``bm25``: the top ``n`` passages by BM25 over the query words; whether a
    gold passage made it in is reported, never forced.
    ``random``: a uniform sample of ``n`` passages; if no gold passage was
    drawn, one (chosen at random) replaces a random sampled slot.
    ``all``: every passage.  With fewer than ``n`` passages all are returned.
    """
    if mode not in CANDIDATE_MODES:
        raise ValueError(f"unknown candidate mode {mode!r}; choose from {CANDIDATE_MODES}")
    gold = set(gold_ids)
    passages = list(passages)
    if mode == "all" or len(passages) <= n:
        chosen = passages
    elif mode == "bm25":
        index = lexical if lexical is not None else InvertedIndex.from_passages(passages)
        ranked = index.search(lexical_terms(" ".join(query)), n, "bm25")
        by_id = {p.id: p for p in passages}
        chosen = [by_id[pid] for pid in ranked.ids]
    else:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(passages), size=n, replace=False)
        chosen = [passages[int(i)] for i in picks]
        gold_pool = sorted(i for i, p in enumerate(passages) if p.id in gold)
        if gold_pool and not any(p.id in gold for p in chosen):
            slot = int(rng.integers(n))
            chosen[slot] = passages[gold_pool[int(rng.integers(len(gold_pool)))]]
    return CandidateSet(tuple(chosen), any(p.id in gold for p in chosen))


def _check_fingerprint(cache_fp: str, model) -> None:
    if cache_fp and hasattr(model, "fingerprint") and cache_fp != model.fingerprint():
        raise FingerprintMismatch(
            f"cached vectors were built with weights {cache_fp}, model is {model.fingerprint()}; rebuild the index"
        )


def rerank(candidates, query: tuple[str, str], model, index: Optional[VectorIndex] = None,
           token_cache: Optional[TokenCache] = None, check_fingerprint: bool = True) -> RankedList:
    """Score candidates with ``model`` and return them best first.

    Bi-encoders use cached index vectors when ``index`` is given, Poly-encoders
    use ``token_cache`` when given; otherwise (and for every other scorer)
    candidate passages are encoded at query time via ``model.score``.
    """
    passages = list(candidates.passages if isinstance(candidates, CandidateSet) else candidates)
    if not passages:
        raise ValueError("nothing to rerank: empty candidate set")
    ids = [p.id for p in passages]
    if index is not None and isinstance(model, BiEncoder) and not isinstance(model, PolyEncoder):
        if check_fingerprint:
            _check_fingerprint(index.fingerprint, model)
        with no_grad():
            q = model.encode_queries([query]).data[0]
        # a full scan keeps scores bit-identical to knn over the same index
        all_scores = index.scores(q)
        scores = all_scores[[index.row(pid) for pid in ids]]
    elif token_cache is not None and isinstance(model, PolyEncoder):
        if check_fingerprint:
            _check_fingerprint(token_cache.fingerprint, model)
        rows = token_cache.rows(ids)
        scores = model.score_cached(query, token_cache.tokens[rows], token_cache.mask[rows])
    else:
        scores = model.score(query, passages)
    return RankedList.from_scores(ids, scores)
