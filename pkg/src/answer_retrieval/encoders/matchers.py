"""Query-passage matchers: Bi-, Poly-, Cross-encoder and the hierarchical CDV model.

Every matcher exposes ``score_matrix(queries, passages)`` returning a
differentiable ``[n_queries, n_passages]`` grid (used by the in-batch
training loss) and ``score(query, passages)`` for no-grad inference.
Queries are ``(entity, aspect)`` pairs; passages are
:class:`~answer_retrieval.corpus.Passage` objects or plain strings.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..corpus import Passage, segment_sentences
from ..tensor import Tensor, no_grad
from .layers import BiRNN, EncoderConfig, Linear, Module, TransformerEncoder, _param, pool_cls, pool_mean
from .tokenizer import PASSAGE, Vocab, build_query_text, pad_batch, pair_from_ids, sequence_from_ids, word_ids

ARCHITECTURES = ("bi", "bi-shared", "poly", "cross", "cdv")

Query = tuple[str, str]


def _text(p) -> str:
    return p.text if isinstance(p, Passage) else str(p)


def _sentences(p) -> list[str]:
    return p.sentences if isinstance(p, Passage) else segment_sentences(str(p))


# ---------------------------------------------------------------------------
# scoring functions
# ---------------------------------------------------------------------------

def bi_score(q_vec: Tensor, p_vec: Tensor) -> Tensor:
    """Dot product of two equally sized vectors."""
    q_vec, p_vec = T.as_tensor(q_vec), T.as_tensor(p_vec)
    if q_vec.shape != p_vec.shape:
        raise ValueError(f"dimension mismatch: {q_vec.shape} vs {p_vec.shape}")
    return T.sum_(q_vec * p_vec)


def poly_scores(queries: Tensor, tokens: Tensor, mask: np.ndarray, w_attn: Tensor) -> Tensor:
    """Batched late-interaction scores ``[n_q, n_p]``.

    For query vector q and passage token matrix P (masked rows dropped):
    ``y = softmax(P q)``, ``c = P^T y``, ``s = relu(W_attn c) . q``.
    """
    nq, d = queries.shape
    npas, L, _ = tokens.shape
    logits = T.transpose(tokens @ T.transpose(queries), (2, 0, 1))  # [nq, np, L]
    bias = np.where(mask, 0.0, -1e9).astype(tokens.dtype)[None, :, :]
    y = T.softmax(logits + bias, axis=-1)
    attended = T.reshape(T.reshape(y, (nq, npas, 1, L)) @ tokens, (nq, npas, d))
    projected = T.relu(attended @ T.transpose(w_attn))
    return T.sum_(projected * T.reshape(queries, (nq, 1, d)), axis=-1)


def poly_score(q_vec: Tensor, p_tokens: Tensor, w_attn: Tensor) -> Tensor:
    """Single-pair late-interaction score for ``q[d]`` and ``P[n, d]``."""
    q_vec, p_tokens = T.as_tensor(q_vec), T.as_tensor(p_tokens)
    if p_tokens.shape[0] < 1:
        raise ValueError("passage needs at least one token")
    d = q_vec.shape[-1]
    out = poly_scores(T.reshape(q_vec, (1, d)), T.reshape(p_tokens, (1,) + p_tokens.shape),
                      np.ones((1, p_tokens.shape[0]), dtype=bool), w_attn)
    return T.reshape(out, ())


def cdv_scores(entity_preds: Tensor, aspect_preds: Tensor, sent_mask: np.ndarray,
               q_entity: Tensor, q_aspect: Tensor) -> Tensor:
    """Mean over sentences of ``(cos(entity_pred, q_e) + cos(aspect_pred, q_a)) / 2``.

    ``entity_preds``/``aspect_preds`` are ``[n_p, S, d]`` with ``sent_mask``
    marking real sentences; query vectors are ``[n_q, d]``.  Returns ``[n_q, n_p]``.
    """
    e = T.l2_normalize(entity_preds) @ T.transpose(T.l2_normalize(q_entity))
    a = T.l2_normalize(aspect_preds) @ T.transpose(T.l2_normalize(q_aspect))
    mask = np.asarray(sent_mask, dtype=e.dtype)
    weights = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    per_passage = T.sum_(T.scale(e + a, 0.5) * weights[:, :, None], axis=1)  # [n_p, n_q]
    return T.transpose(per_passage)


# ---------------------------------------------------------------------------
# matchers
# ---------------------------------------------------------------------------

class Matcher(Module):
    arch = "base"
    # multiplies scores before the listwise softmax during training
    logit_scale = 1.0

    def __init__(self, vocab: Vocab, config: EncoderConfig):
        config = replace(config, vocab_size=vocab.size)
        config.validate()
        self._vocab = vocab
        self._config = config

    @property
    def vocab(self) -> Vocab:
        return self._vocab

    @property
    def config(self) -> EncoderConfig:
        return self._config

    _CACHE_LIMIT = 200_000

    def _word_ids(self, text: str) -> list[int]:
        cache = self.__dict__.setdefault("_ids_cache", {})
        ids = cache.get(text)
        if ids is None:
            ids = word_ids(text, self._vocab)
            if len(cache) < self._CACHE_LIMIT:
                cache[text] = ids
        return ids

    def _batch(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        max_len = self._config.max_len
        return pad_batch([sequence_from_ids(self._word_ids(t), self._vocab, max_len) for t in texts])

    def score_matrix(self, queries: Sequence[Query], passages: Sequence) -> Tensor:
        raise NotImplementedError

    def score(self, query: Query, passages: Sequence, batch_size: int = 64) -> np.ndarray:
        """No-grad scores of one query against ``passages``."""
        out = []
        with no_grad():
            for i in range(0, len(passages), batch_size):
                out.append(self.score_matrix([query], passages[i:i + batch_size]).data[0])
        return np.concatenate(out) if out else np.zeros(0)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.arch.encode())
        h.update(json.dumps(self._config.to_dict(), sort_keys=True).encode())
        h.update(self._vocab.fingerprint().encode())
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


class BiEncoder(Matcher):
    """Independent query and passage encoders, CLS pooling, dot-product score.

    With ``shared=True`` a single encoder serves both sides and inputs are
    marked with ``[QUERY]``/``[PASSAGE]``, whose embeddings live in
    ``marker_emb`` (the only parameters beyond one encoder).
    """

    arch = "bi"

    def __init__(self, vocab: Vocab, config: EncoderConfig, shared: bool = False):
        super().__init__(vocab, config)
        # dot products of layer-normed vectors grow with d; temper them for the loss
        self.logit_scale = 1.0 / np.sqrt(self.config.d_model)
        rng = np.random.default_rng(self.config.seed)
        self.shared = shared
        if shared:
            self.arch = "bi-shared"
            self.encoder = TransformerEncoder(self.config, rng)
            self.marker_emb = _param(rng.standard_normal((2, self.config.d_model)))
        else:
            self.query_encoder = TransformerEncoder(self.config, rng)
            self.passage_encoder = TransformerEncoder(self.config, rng)

    def _encoder(self, side: str) -> TransformerEncoder:
        if self.shared:
            return self.encoder
        return self.query_encoder if side == "query" else self.passage_encoder

    def query_texts(self, queries: Sequence[Query]) -> list[str]:
        return [build_query_text(e, a, marked=self.shared) for e, a in queries]

    def passage_texts(self, passages: Sequence) -> list[str]:
        return [f"{PASSAGE} {_text(p)}" if self.shared else _text(p) for p in passages]

    def hidden(self, texts: Sequence[str], side: str) -> tuple[Tensor, np.ndarray]:
        ids, mask = self._batch(texts)
        extra = self.marker_emb if self.shared else None
        return self._encoder(side)(ids, mask, extra), mask

    def encode_queries(self, queries: Sequence[Query]) -> Tensor:
        return pool_cls(self.hidden(self.query_texts(queries), "query")[0])

    def encode_passages(self, passages: Sequence) -> Tensor:
        return pool_cls(self.hidden(self.passage_texts(passages), "passage")[0])

    def score_matrix(self, queries, passages) -> Tensor:
        return self.encode_queries(queries) @ T.transpose(self.encode_passages(passages))


class PolyEncoder(BiEncoder):
    """Bi-encoder whose score attends from the query vector over passage tokens."""

    arch = "poly"

    def __init__(self, vocab: Vocab, config: EncoderConfig, shared: bool = False):
        super().__init__(vocab, config, shared)
        self.arch = "poly"
        self.w_attn = _param(np.eye(self.config.d_model))

    def passage_tokens(self, passages: Sequence) -> tuple[Tensor, np.ndarray]:
        return self.hidden(self.passage_texts(passages), "passage")

    def score_matrix(self, queries, passages) -> Tensor:
        tokens, mask = self.passage_tokens(passages)
        return poly_scores(self.encode_queries(queries), tokens, mask, self.w_attn)

    def score_cached(self, query: Query, tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Scores against precomputed passage token matrices ``[n, L, d]``."""
        with no_grad():
            q = self.encode_queries([query])
            return poly_scores(q, Tensor(tokens, dtype=tokens.dtype), mask, self.w_attn).data[0]


class CrossEncoder(Matcher):
    """One encoder over ``[CLS] query [SEP] passage``; linear head on CLS."""

    arch = "cross"

    def __init__(self, vocab: Vocab, config: EncoderConfig):
        super().__init__(vocab, config)
        rng = np.random.default_rng(self.config.seed)
        self.encoder = TransformerEncoder(self.config, rng)
        self.head = Linear(self.config.d_model, 1, rng)
        # row 0 marks [CLS] query [SEP], row 1 the passage
        self.segment_emb = _param(rng.standard_normal((2, self.config.d_model)) * 0.1)
        # row 1 marks word tokens that also occur on the other side of [SEP]
        self.overlap_emb = _param(rng.standard_normal((2, self.config.d_model)) * 0.1)

    def pair_scores(self, query_texts: Sequence[str], passage_texts: Sequence[str]) -> Tensor:
        max_len = self.config.max_len
        q_ids = [self._word_ids(q) for q in query_texts]
        seqs = [pair_from_ids(q, self._word_ids(p), self.vocab, max_len) for q, p in zip(q_ids, passage_texts)]
        ids, mask = pad_batch(seqs)
        # the query is never truncated below max_len - 2, so its part spans len(q) + 2 positions
        first = np.array([min(len(q), max_len - 2) + 2 for q in q_ids])
        segments = (np.arange(ids.shape[1])[None, :] >= first[:, None]).astype(np.int64)
        overlap = token_overlap_flags(ids, segments, self.vocab)
        offsets = T.add(T.embedding(self.segment_emb, segments), T.embedding(self.overlap_emb, overlap))
        cls = pool_cls(self.encoder(ids, mask, offsets=offsets))
        return T.reshape(self.head(cls), (len(seqs),))

    def score_matrix(self, queries, passages) -> Tensor:
        q_texts = [build_query_text(e, a) for e, a in queries]
        p_texts = [_text(p) for p in passages]
        flat = self.pair_scores([q for q in q_texts for _ in p_texts], [p for _ in q_texts for p in p_texts])
        return T.reshape(flat, (len(q_texts), len(p_texts)))


def token_overlap_flags(ids: np.ndarray, segments: np.ndarray, vocab: Vocab) -> np.ndarray:
    """1 where a word token's id also appears in the other segment of its row.

    Special tokens and ``[UNK]`` never count as overlap.
    """
    word = (ids != vocab.pad_id) & (ids != vocab.cls_id) & (ids != vocab.sep_id) & (ids != vocab.unk_id)
    flags = np.zeros(ids.shape, dtype=np.int64)
    for r in range(ids.shape[0]):
        q = set(ids[r][word[r] & (segments[r] == 0)].tolist())
        p = set(ids[r][word[r] & (segments[r] == 1)].tolist())
        shared = np.fromiter(q & p, dtype=ids.dtype)
        flags[r] = word[r] & np.isin(ids[r], shared)
    return flags


def cross_score(query_text: str, passage_text: str, model: CrossEncoder) -> float:
    with no_grad():
        return float(model.pair_scores([query_text], [passage_text]).data[0])


class CdvModel(Matcher):
    """Hierarchical matcher: sentence encoder -> biRNN -> entity/aspect heads.

    ``phase="frozen"`` runs the sentence encoder without gradients and
    mean-pools tokens; ``phase="finetune"`` trains it and uses CLS pooling.
    Query entity and aspect vectors are CLS vectors of the same encoder.
    """

    arch = "cdv"
    logit_scale = 5.0

    def __init__(self, vocab: Vocab, config: EncoderConfig, phase: str = "frozen"):
        super().__init__(vocab, config)
        rng = np.random.default_rng(self.config.seed)
        d = self.config.d_model
        hidden = self.config.rnn_hidden or d
        self.sentence_encoder = TransformerEncoder(self.config, rng)
        self.rnn = BiRNN(d, hidden, self.config.rnn_cell, rng)
        self.entity_head = Linear(2 * hidden, d, rng)
        self.aspect_head = Linear(2 * hidden, d, rng)
        self.phase = phase

    @property
    def phase(self) -> str:
        return self._phase

    @phase.setter
    def phase(self, value: str) -> None:
        if value not in ("frozen", "finetune"):
            raise ValueError(f"unknown phase {value!r}")
        self._phase = value

    def _encode(self, texts: Sequence[str], pooling: str) -> Tensor:
        ids, mask = self._batch(texts)
        if self._phase == "frozen":
            with no_grad():
                h = self.sentence_encoder(ids, mask)
        else:
            h = self.sentence_encoder(ids, mask)
        return pool_cls(h) if pooling == "cls" else pool_mean(h, mask)

    def sentence_vectors(self, passages: Sequence) -> tuple[Tensor, np.ndarray]:
        """Padded ``[n_p, S, d]`` sentence vectors and the sentence mask."""
        per = [_sentences(p) or [""] for p in passages]
        S = max(len(s) for s in per)
        flat = [s for sents in per for s in sents]
        pooling = "mean" if self._phase == "frozen" else "cls"
        vecs = self._encode(flat, pooling)
        d = vecs.shape[-1]
        # gather into [n_p, S, d]; padding slots point at an appended zero row
        table = T.concat([vecs, Tensor(np.zeros((1, d), dtype=vecs.dtype))], axis=0)
        index = np.full((len(per), S), len(flat), dtype=np.int64)
        mask = np.zeros((len(per), S), dtype=bool)
        start = 0
        for i, sents in enumerate(per):
            n = len(sents)
            index[i, :n] = np.arange(start, start + n)
            mask[i, :n] = True
            start += n
        return T.embedding(table, index), mask

    def predictions(self, passages: Sequence) -> tuple[Tensor, Tensor, np.ndarray]:
        vecs, mask = self.sentence_vectors(passages)
        ctx = self.rnn(vecs, mask.sum(axis=1))
        return self.entity_head(ctx), self.aspect_head(ctx), mask

    def query_vectors(self, queries: Sequence[Query]) -> tuple[Tensor, Tensor]:
        return (self._encode([e for e, _ in queries], "cls"), self._encode([a for _, a in queries], "cls"))

    def score_matrix(self, queries, passages) -> Tensor:
        ent, asp, mask = self.predictions(passages)
        q_e, q_a = self.query_vectors(queries)
        return cdv_scores(ent, asp, mask, q_e, q_a)


def cdv_score(query: Query, passage, model: CdvModel) -> float:
    with no_grad():
        return float(model.score_matrix([query], [passage]).data[0, 0])


def build_model(arch: str, vocab: Vocab, config: EncoderConfig, **kwargs) -> Matcher:
    if arch == "bi":
        return BiEncoder(vocab, config, shared=False)
    if arch == "bi-shared":
        return BiEncoder(vocab, config, shared=True)
    if arch == "poly":
        return PolyEncoder(vocab, config, shared=kwargs.get("shared", False))
    if arch == "cross":
        return CrossEncoder(vocab, config)
    if arch == "cdv":
        return CdvModel(vocab, config, phase=kwargs.get("phase", "frozen"))
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
