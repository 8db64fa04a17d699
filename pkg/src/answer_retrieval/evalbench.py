"""Recall@k evaluation under the candidate re-ranking protocol, cross-domain grids, latency benchmark."""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
import platform
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .corpus import Corpus
from .encoders import BiEncoder, Matcher, PolyEncoder, load_checkpoint
from .labeler import PassageLabels
from .retrieval import (
    InvertedIndex,
    LexicalScorer,
    RankedList,
    TokenCache,
    VectorIndex,
    build_token_cache,
    build_vector_index,
    knn,
    rerank,
    select_candidates,
)
from .tensor import default_dtype, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalQuery:
    entity: str
    aspect: str
    gold_ids: frozenset

    def __post_init__(self):
        if not self.gold_ids:
            raise ValueError("an evaluation query needs at least one gold passage")

    @property
    def query(self) -> tuple[str, str]:
        return (self.entity, self.aspect)


def derive_queries(labels: Sequence[PassageLabels]) -> list[EvalQuery]:
    """One query per distinct (entity, aspect); gold = every passage carrying both labels."""
    gold: dict[tuple[str, str], set[str]] = defaultdict(set)
    for lab in labels:
        for entity in lab.entities:
            gold[(entity, lab.aspect)].add(lab.passage_id)
    return [EvalQuery(e, a, frozenset(ids)) for (e, a), ids in sorted(gold.items())]


def recall_at_k(ranked: RankedList, gold_ids, k: int) -> int:
    """1 if any gold id is among the first ``k`` entries, else 0."""
    if k < 1:
        raise ValueError("k must be at least 1")
    gold = set(gold_ids)
    return int(any(pid in gold for pid in ranked.ids[:k]))


@dataclass
class EvalReport:
    architecture: str
    recall_at_1: float
    recall_at_5: float
    n_queries: int
    skipped: int = 0
    gold_in_candidates: float = 1.0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.recall_at_1 <= self.recall_at_5 <= 1.0):
            raise ValueError(f"inconsistent recalls R@1={self.recall_at_1} R@5={self.recall_at_5}")


class RandomScorer:
    """Scores every passage with fresh uniform noise (chance-level baseline)."""

    arch = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def score(self, query, passages) -> np.ndarray:
        return self.rng.random(len(passages))


class OracleScorer:
    """Scores gold passages +inf and everything else 0 (upper bound)."""

    arch = "oracle"

    def __init__(self, queries: Sequence[EvalQuery]):
        self.gold = {q.query: q.gold_ids for q in queries}

    def score(self, query, passages) -> np.ndarray:
        gold = self.gold.get(tuple(query), frozenset())
        return np.array([math.inf if p.id in gold else 0.0 for p in passages])


def evaluate(corpus: Corpus, queries: Sequence[EvalQuery], model, mode: str = "random",
             n_candidates: int = 64, seed: int = 0, index: Optional[VectorIndex] = None,
             token_cache: Optional[TokenCache] = None, lexical: Optional[InvertedIndex] = None,
             ks: tuple[int, int] = (1, 5)) -> EvalReport:
    """Select candidates, re-rank with ``model`` and average Recall@1 and Recall@5.

    Queries whose gold passages are all missing from ``corpus`` are skipped
    and counted.  Candidate sampling for query ``i`` uses seed ``(seed, i)``,
    so the result is a pure function of the inputs.
    """
    passages = corpus.passages
    known = {p.id for p in passages}
    if mode == "bm25" and lexical is None:
        lexical = InvertedIndex.from_passages(passages)
    hits = {k: 0 for k in ks}
    n, skipped, gold_seen = 0, 0, 0
    for i, q in enumerate(queries):
        gold = q.gold_ids & known
        if not gold:
            skipped += 1
            continue
        qseed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        cands = select_candidates(q.query, passages, mode, n_candidates, qseed, gold, lexical)
        gold_seen += cands.gold_present
        ranked = rerank(cands, q.query, model, index=index, token_cache=token_cache)
        for k in ks:
            hits[k] += recall_at_k(ranked, gold, k)
        n += 1
    if skipped:
        logger.warning("skipped %d queries whose gold passages are not in the corpus", skipped)
    arch = getattr(model, "arch", type(model).__name__)
    r1, r5 = (hits[k] / n if n else 0.0 for k in ks)
    config = {"mode": mode, "n_candidates": n_candidates, "seed": seed}
    return EvalReport(arch, r1, r5, n, skipped, gold_seen / n if n else 0.0, config)


def full_corpus_recall(corpus: Corpus, queries: Sequence[EvalQuery], model, k: int = 1) -> float:
    """Recall@k ranking every passage of ``corpus``; Bi-encoders go through the exact index."""
    index = None
    if isinstance(model, BiEncoder) and not isinstance(model, PolyEncoder):
        index = build_vector_index(corpus.passages, model)
    known = {p.id for p in corpus.passages}
    hits, n = 0, 0
    for q in queries:
        gold = q.gold_ids & known
        if not gold:
            continue
        if index is not None:
            with no_grad():
                ranked = knn(index, model.encode_queries([q.query]).data[0], k)
        else:
            ranked = rerank(corpus.passages, q.query, model)
        hits += recall_at_k(ranked, gold, k)
        n += 1
    return hits / n if n else 0.0


# ---------------------------------------------------------------------------
# cross-domain grid
# ---------------------------------------------------------------------------

EVAL_CSV_HEADER = ["train_corpus", "eval_corpus", "architecture", "r_at_1", "r_at_5", "n_queries"]


@dataclass
class GridRow:
    train_corpus: str
    eval_corpus: str
    architecture: str
    report: Optional[EvalReport]


def cross_domain_run(checkpoints: Mapping[tuple[str, str], object],
                     eval_sets: Mapping[str, tuple[Corpus, Sequence[EvalQuery]]],
                     train_tags: Sequence[str], architectures: Sequence[str],
                     mode: str = "random", n_candidates: int = 64, seed: int = 0) -> list[GridRow]:
    """Evaluate every (train tag, architecture) checkpoint on every eval corpus.

    ``checkpoints`` maps ``(train_tag, arch)`` to a checkpoint path or a
    loaded model; ``"bm25"``/``"tfidf"`` need no checkpoint.  A missing
    checkpoint yields a row with ``report=None`` and the run continues.
    """
    rows = []
    lexicals = {tag: InvertedIndex.from_passages(c.passages) for tag, (c, _) in eval_sets.items()}
    for train_tag in train_tags:
        for arch in architectures:
            model = None
            if arch not in ("bm25", "tfidf"):
                entry = checkpoints.get((train_tag, arch))
                if isinstance(entry, (str, Path)):
                    try:
                        model, _ = load_checkpoint(entry)
                    except (FileNotFoundError, ValueError) as exc:
                        logger.warning("checkpoint for (%s, %s) unavailable: %s", train_tag, arch, exc)
                else:
                    model = entry
            for eval_tag, (corpus, queries) in eval_sets.items():
                scorer = LexicalScorer(lexicals[eval_tag], arch) if arch in ("bm25", "tfidf") else model
                if scorer is None:
                    rows.append(GridRow(train_tag, eval_tag, arch, None))
                    continue
                report = evaluate(corpus, queries, scorer, mode, n_candidates, seed, lexical=lexicals[eval_tag])
                report.architecture = arch
                rows.append(GridRow(train_tag, eval_tag, arch, report))
    return rows


def grid_csv(rows: Sequence[GridRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_CSV_HEADER)
    for r in rows:
        if r.report is None:
            w.writerow([r.train_corpus, r.eval_corpus, r.architecture, "absent", "absent", 0])
        else:
            w.writerow([r.train_corpus, r.eval_corpus, r.architecture, repr(r.report.recall_at_1),
                        repr(r.report.recall_at_5), r.report.n_queries])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

LATENCY_CSV_HEADER = ["architecture", "n_passages", "median_s", "p95_s"]


@dataclass
class LatencyRow:
    architecture: str
    n_passages: int
    median_s: float
    p95_s: float


@dataclass
class LatencyReport:
    rows: list[LatencyRow]
    machine: dict = field(default_factory=dict)

    def series(self, arch: str) -> list[LatencyRow]:
        return [r for r in self.rows if r.architecture == arch]

    def median(self, arch: str, n_passages: int) -> float:
        for r in self.rows:
            if r.architecture == arch and r.n_passages == n_passages:
                return r.median_s
        raise KeyError((arch, n_passages))

    def loglog_slope(self, arch: str) -> tuple[float, float]:
        """Least-squares slope of log(median) on log(n_passages) and its R^2."""
        pts = self.series(arch)
        x = np.log([r.n_passages for r in pts])
        y = np.log([r.median_s for r in pts])
        slope, intercept = np.polyfit(x, y, 1)
        resid = y - (slope * x + intercept)
        ss_tot = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
        return float(slope), r2

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for k, v in sorted(self.machine.items()):
            buf.write(f"# {k}: {v}\n")
        w.writerow(LATENCY_CSV_HEADER)
        for r in self.rows:
            w.writerow([r.architecture, r.n_passages, f"{r.median_s:.6g}", f"{r.p95_s:.6g}"])
        return buf.getvalue()


def machine_info() -> dict:
    return {"python": platform.python_version(), "machine": platform.machine(),
            "processor": platform.processor() or "unknown", "numpy": np.__version__}


def _as_float32(model: Matcher) -> Matcher:
    model = copy.deepcopy(model)
    for p in model.parameters():
        p.data = p.data.astype(np.float32)
    return model


def latency_bench(models: Mapping[str, Matcher], passages: Sequence, queries: Sequence[tuple[str, str]],
                  passage_counts: Sequence[int] = (128, 256, 512, 1024, 2048), warmup: int = 5,
                  single_precision: bool = True, clock: Callable[[], float] = time.perf_counter) -> LatencyReport:
    """Per-query wall-clock latency for each architecture at each corpus size.

    Bi: query encoding plus exact kNN over a prebuilt vector index.
    Poly: query encoding plus late interaction over cached token matrices.
    Cross (and anything else): every passage is scored jointly with the query.
    Index/cache construction is excluded; ``warmup`` queries are discarded.
    """
    counts = sorted(set(int(n) for n in passage_counts))
    if counts[-1] > len(passages):
        raise ValueError(f"need {counts[-1]} passages, got {len(passages)}")
    if len(queries) <= warmup:
        raise ValueError("need more queries than warmup rounds")
    dtype = np.float32 if single_precision else np.float64
    rows = []
    with default_dtype(dtype):
        for arch, model in models.items():
            if single_precision:
                model = _as_float32(model)
            for n in counts:
                subset = list(passages[:n])
                if isinstance(model, PolyEncoder):
                    cache = build_token_cache(subset, model)
                    run = lambda q: model.score_cached(q, cache.tokens, cache.mask)  # noqa: E731
                elif isinstance(model, BiEncoder):
                    index = build_vector_index(subset, model, dtype=dtype)
                    def run(q, index=index):
                        with no_grad():
                            return knn(index, model.encode_queries([q]).data[0], 10)
                else:
                    run = lambda q: model.score(q, subset, batch_size=256)  # noqa: E731
                times = []
                for i, q in enumerate(queries):
                    t0 = clock()
                    run(q)
                    dt = clock() - t0
                    if i >= warmup:
                        times.append(dt)
                rows.append(LatencyRow(arch, n, float(np.median(times)), float(np.percentile(times, 95))))
    return LatencyReport(rows, machine_info())
