"""Word-level tokenizer and vocabulary."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
QUERY, PASSAGE = "[QUERY]", "[PASSAGE]"
SPECIALS = (PAD, CLS, SEP, UNK)
MARKERS = (QUERY, PASSAGE)

_TOKEN = re.compile(
    r"\[\*\*(?P<anon>[A-Za-z]*)[^\]]*?\*\*\]"
    r"|(?P<special>\[(?:PAD|CLS|SEP|UNK|QUERY|PASSAGE)\])"
    r"|\w+|[^\w\s]"
)


def split_words(text: str) -> list[str]:
    """Lowercase words and single punctuation marks; special tokens kept verbatim.

    Anonymised spans such as ``[**Name 123**]`` collapse to ``[**name**]``.
    """
    out = []
    for m in _TOKEN.finditer(text):
        if m.group("special"):
            out.append(m.group("special"))
        elif m.group(0).startswith("[**"):
            out.append(f"[**{m.group('anon').lower()}**]")
        else:
            out.append(m.group(0).lower())
    return out


class Vocab:
    """Token ids: ``[PAD]=0, [CLS]=1, [SEP]=2, [UNK]=3``, corpus words, then markers.

    The two marker tokens ``[QUERY]``/``[PASSAGE]`` take the ids right after
    the base table (``size`` and ``size + 1``) so that only a weight-shared
    encoder needs embedding rows for them.
    """

    def __init__(self, words: Sequence[str]):
        words = [w for w in words if w not in SPECIALS and w not in MARKERS]
        if len(set(words)) != len(words):
            raise ValueError("vocabulary words must be unique")
        self.itos: tuple[str, ...] = SPECIALS + tuple(words)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.size = len(self.itos)
        for j, m in enumerate(MARKERS):
            self.stoi[m] = self.size + j

    pad_id, cls_id, sep_id, unk_id = 0, 1, 2, 3

    @property
    def query_id(self) -> int:
        return self.size

    @property
    def passage_id(self) -> int:
        return self.size + 1

    def __len__(self) -> int:
        return self.size

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1) -> "Vocab":
        counts = Counter(w for t in texts for w in split_words(t))
        words = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        return cls(words)

    def lookup(self, word: str) -> int:
        return self.stoi.get(word, self.unk_id)

    def decode(self, ids: Iterable[int]) -> list[str]:
        names = self.itos + MARKERS
        return [names[i] for i in ids]

    def to_list(self) -> list[str]:
        return list(self.itos[len(SPECIALS):])

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    attention_mask: tuple[bool, ...]
    n_truncated: int = 0

    @property
    def truncated(self) -> bool:
        return self.n_truncated > 0

    def __len__(self) -> int:
        return len(self.ids)


def word_ids(text: str, vocab: Vocab) -> list[int]:
    return [vocab.lookup(w) for w in split_words(text)]


def sequence_from_ids(ids: Sequence[int], vocab: Vocab, max_len: int) -> TokenSequence:
    room = max_len - 1
    cut = max(0, len(ids) - room)
    out = [vocab.cls_id] + list(ids[:room])
    return TokenSequence(tuple(out), (True,) * len(out), cut)


def pair_from_ids(q: Sequence[int], p: Sequence[int], vocab: Vocab, max_len: int) -> TokenSequence:
    room = max_len - 2
    q_keep = min(len(q), room)
    p_keep = min(len(p), room - q_keep)
    cut = (len(q) - q_keep) + (len(p) - p_keep)
    out = [vocab.cls_id] + list(q[:q_keep]) + [vocab.sep_id] + list(p[:p_keep])
    return TokenSequence(tuple(out), (True,) * len(out), cut)


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """``[CLS]`` followed by word ids, cut to ``max_len`` positions."""
    return sequence_from_ids(word_ids(text, vocab), vocab, max_len)


def tokenize_pair(query: str, passage: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """``[CLS] query [SEP] passage``; the passage is truncated before the query."""
    return pair_from_ids(word_ids(query, vocab), word_ids(passage, vocab), vocab, max_len)


def pad_batch(seqs: Sequence[TokenSequence], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a common length; returns ``(ids[B, L], mask[B, L])``."""
    L = max(len(s) for s in seqs) if length is None else length
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s.ids
        mask[i, :len(s)] = s.attention_mask
    return ids, mask


def build_query_text(entity: str, aspect: str, marked: bool = False) -> str:
    if not entity or not entity.strip() or not aspect or not aspect.strip():
        raise ValueError("query needs a non-empty entity and aspect")
    body = f"{entity} {SEP} {aspect}"
    return f"{QUERY} {body}" if marked else body
