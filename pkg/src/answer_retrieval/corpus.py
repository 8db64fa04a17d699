"""Heading-structured documents, passages, JSONL I/O and a synthetic generator."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Section:
    heading: str
    sentences: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    sections: tuple[Section, ...]

    def __post_init__(self):
        object.__setattr__(self, "sections", tuple(self.sections))
        if not self.sections:
            raise CorpusError(f"document {self.id!r} has no sections")


@dataclass(frozen=True)
class Passage:
    """One section of a document used as an answer unit."""

    doc_id: str
    section_index: int
    text: str
    sentence_spans: tuple[tuple[int, int], ...]
    heading: str = ""

    @property
    def id(self) -> str:
        return passage_id(self.doc_id, self.section_index)

    @property
    def sentences(self) -> list[str]:
        return [self.text[a:b] for a, b in self.sentence_spans]

    @classmethod
    def from_section(cls, doc_id: str, index: int, section: Section) -> "Passage":
        spans, pos = [], 0
        for sent in section.sentences:
            spans.append((pos, pos + len(sent)))
            pos += len(sent) + 1
        return cls(doc_id, index, " ".join(section.sentences), tuple(spans), section.heading)


def passage_id(doc_id: str, section_index: int) -> str:
    return f"{doc_id}#{section_index}"


class Corpus:
    """Immutable collection of documents with one passage per non-empty section."""

    def __init__(self, documents: Iterable[Document] = ()):
        self.documents: tuple[Document, ...] = tuple(documents)
        seen = set()
        passages = []
        for doc in self.documents:
            if doc.id in seen:
                raise CorpusError(f"duplicate document id {doc.id!r}")
            seen.add(doc.id)
            for i, section in enumerate(doc.sections):
                if section.sentences:
                    passages.append(Passage.from_section(doc.id, i, section))
        self.passages: tuple[Passage, ...] = tuple(passages)
        self._by_id = {p.id: p for p in passages}
        self._docs = {d.id: d for d in self.documents}
        # generator ground truth: passage id -> (entities, aspect); empty for ingested corpora
        self.planted: dict[str, tuple[frozenset, str]] = {}

    def __len__(self) -> int:
        return len(self.documents)

    def __eq__(self, other) -> bool:
        return isinstance(other, Corpus) and self.documents == other.documents

    def passage(self, pid: str) -> Passage:
        return self._by_id[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._by_id

    def document(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    def subset(self, doc_ids: Iterable[str]) -> "Corpus":
        keep = set(doc_ids)
        sub = Corpus(d for d in self.documents if d.id in keep)
        sub.planted = {k: v for k, v in self.planted.items() if k.split("#")[0] in keep}
        return sub

    def split(self, held_out_fraction: float, seed: int = 0) -> tuple["Corpus", "Corpus"]:
        """Split by document into (train, held-out)."""
        ids = [d.id for d in self.documents]
        order = np.random.default_rng(seed).permutation(len(ids))
        n_out = int(round(held_out_fraction * len(ids)))
        out = {ids[i] for i in order[:n_out]}
        return self.subset(i for i in ids if i not in out), self.subset(out)

    @staticmethod
    def concat(corpora: Sequence["Corpus"]) -> "Corpus":
        merged = Corpus(d for c in corpora for d in c.documents)
        for c in corpora:
            merged.planted.update(c.planted)
        return merged


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------

_ABBREVIATIONS = {
    "dr", "mr", "mrs", "ms", "vs", "etc", "e.g", "i.e", "approx", "pt", "hx", "dx",
    "st", "no", "fig", "mg", "ml", "b.i.d", "t.i.d", "q.d", "p.o",
}
_BOUNDARY = re.compile(r"([.!?])\s+(?=[A-Z\[])")


def segment_sentences(text: str) -> list[str]:
    """Split on ``.``/``!``/``?`` followed by whitespace and an uppercase letter.

    A period that ends a known abbreviation (``Dr.``, ``e.g.``) is not a boundary.
    """
    sentences, start = [], 0
    for m in _BOUNDARY.finditer(text):
        end = m.end(1)
        if m.group(1) == ".":
            word = text[start:m.start(1)].rsplit(None, 1)
            if word and word[-1].lower().strip("(") in _ABBREVIATIONS:
                continue
        piece = text[start:end].strip()
        if piece:
            sentences.append(piece)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def document_to_dict(doc: Document) -> dict:
    return {
        "id": doc.id,
        "title": doc.title,
        "sections": [{"heading": s.heading, "sentences": list(s.sentences)} for s in doc.sections],
    }


def _document_from_dict(obj, lineno: int) -> Document:
    if not isinstance(obj, dict):
        raise CorpusError(f"line {lineno}: expected a JSON object")
    try:
        sections = []
        for s in obj["sections"]:
            if "sentences" in s:
                sentences = s["sentences"]
                if not isinstance(sentences, list) or not all(isinstance(x, str) for x in sentences):
                    raise CorpusError(f"line {lineno}: sentences must be a list of strings")
            else:
                sentences = segment_sentences(s["text"])
            sections.append(Section(str(s.get("heading", "")), tuple(sentences)))
        return Document(str(obj["id"]), str(obj.get("title", "")), tuple(sections))
    except KeyError as exc:
        raise CorpusError(f"line {lineno}: missing field {exc.args[0]!r}") from None
    except CorpusError as exc:
        if str(exc).startswith("line "):
            raise
        raise CorpusError(f"line {lineno}: {exc}") from None


def ingest_jsonl(path) -> Corpus:
    """Read one document object per line; blank lines are ignored."""
    docs, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            doc = _document_from_dict(obj, lineno)
            if doc.id in seen:
                raise CorpusError(f"line {lineno}: duplicate document id {doc.id!r}")
            seen.add(doc.id)
            docs.append(doc)
    return Corpus(docs)


def dumps_jsonl(corpus: Corpus) -> str:
    return "".join(
        json.dumps(document_to_dict(d), ensure_ascii=False, separators=(",", ":")) + "\n"
        for d in corpus.documents
    )


def write_jsonl(corpus: Corpus, path) -> None:
    Path(path).write_text(dumps_jsonl(corpus), encoding="utf-8")


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusStats:
    n_docs: int
    n_passages: int
    avg_sents_per_doc: float
    avg_sents_per_passage: float
    avg_tokens_per_passage: float
    avg_tokens_per_sentence: float


def compute_stats(corpus: Corpus) -> CorpusStats:
    """Whole-corpus averages; tokens are whitespace-separated words."""
    n_docs = len(corpus.documents)
    n_passages = len(corpus.passages)
    n_sents = sum(len(s.sentences) for d in corpus.documents for s in d.sections)
    n_tokens = sum(len(sent.split()) for d in corpus.documents for s in d.sections for sent in s.sentences)

    def ratio(a, b):
        return a / b if b else 0.0

    return CorpusStats(
        n_docs=n_docs,
        n_passages=n_passages,
        avg_sents_per_doc=ratio(n_sents, n_docs),
        avg_sents_per_passage=ratio(n_sents, n_passages),
        avg_tokens_per_passage=ratio(n_tokens, n_passages),
        avg_tokens_per_sentence=ratio(n_tokens, n_sents),
    )


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

DEFAULT_ENTITIES = (
    "cardiomyopathy", "nausea", "heart failure", "pneumonia", "diabetes", "hypertension",
    "asthma", "sepsis", "anemia", "migraine", "stroke", "arthritis", "hepatitis",
    "epilepsy", "influenza", "bronchitis",
)

DEFAULT_ASPECTS = (
    "chief complaint", "family history", "medical history", "allergies",
    "medications", "history of present illness", "laboratory results", "social history",
)

DEFAULT_ASPECT_CUES = {
    "chief complaint": ("complaining", "presents", "admitted", "emergency"),
    "family history": ("mother", "father", "sister", "brother"),
    "medical history": ("previously", "chronic", "diagnosed", "years"),
    "allergies": ("allergic", "rash", "reaction", "hives"),
    "medications": ("dose", "daily", "tablet", "prescribed"),
    "history of present illness": ("onset", "worsening", "ago", "gradually"),
    "laboratory results": ("elevated", "count", "level", "serum"),
    "social history": ("smokes", "alcohol", "lives", "works"),
}

DEFAULT_DISTRACTORS = (
    "stable", "noted", "vital", "signs", "normal", "review", "follow", "clinic", "unit",
    "morning", "evening", "night", "course", "plan", "team", "care", "status", "exam",
    "unremarkable", "mild", "moderate", "severe", "left", "right", "upper", "lower", "pain",
    "chest", "abdomen", "fluid", "oxygen", "pressure", "rate", "room", "air", "bed", "walk",
    "sleep", "appetite", "weight", "fever", "cough", "vision", "double", "vomiting", "fatigue",
    "dizzy", "warm", "cool", "dry", "soft", "tender", "clear", "bilateral", "symmetric",
    "intact", "alert", "oriented", "calm", "awake", "responsive", "scan", "film", "study",
    "result", "visit", "call", "note", "report", "change", "trend", "improved", "unchanged",
    "discharge", "transfer", "monitor", "watch", "assess", "repeat", "consult", "service",
    "nurse", "physician", "resident", "attending", "family", "home", "hospital", "ward",
    "floor", "today", "yesterday", "week", "month", "recent", "prior", "current", "initial",
)

_MENTION_TEMPLATES = (
    "patient with {e}",
    "findings consistent with {e}",
    "{e} was documented",
    "notable for {e}",
)
_NEGATION_TEMPLATE = "no {e} or {d}"
_TEMPLATE_WORDS = {"patient", "with", "findings", "consistent", "was", "documented", "notable", "for", "no", "or"}


@dataclass
class GeneratorParams:
    n_docs: int = 100
    sections_per_doc: tuple[int, int] = (3, 6)
    sentences_per_section: tuple[int, int] = (2, 4)
    words_per_sentence: tuple[int, int] = (4, 8)
    entities: Sequence[str] = DEFAULT_ENTITIES
    aspects: Sequence[str] = DEFAULT_ASPECTS
    aspect_cues: Optional[dict] = None
    distractors: Sequence[str] = DEFAULT_DISTRACTORS
    mention_prob: float = 0.9
    entities_per_section: tuple[int, int] = (1, 2)
    heading_style: str = "title"
    unheaded_prob: float = 0.0
    anonymize_prob: float = 0.0
    negation_prob: float = 0.0

    def __post_init__(self):
        self.sections_per_doc = tuple(self.sections_per_doc)
        self.sentences_per_section = tuple(self.sentences_per_section)
        self.words_per_sentence = tuple(self.words_per_sentence)
        self.entities_per_section = tuple(self.entities_per_section)
        self.entities = tuple(self.entities)
        self.aspects = tuple(self.aspects)
        self.distractors = tuple(self.distractors)

    def cues_for(self, aspect: str) -> tuple[str, ...]:
        cues = self.aspect_cues if self.aspect_cues is not None else DEFAULT_ASPECT_CUES
        return tuple(cues.get(aspect, ()))

    def validate(self) -> None:
        if not self.entities or not self.aspects or not self.distractors:
            raise CorpusError("entity, aspect and distractor vocabularies must be non-empty")
        if any(not e.strip() for e in self.entities) or any(not a.strip() for a in self.aspects):
            raise CorpusError("vocabulary entries must not be blank")
        for name, (lo, hi) in [
            ("sections_per_doc", self.sections_per_doc),
            ("sentences_per_section", self.sentences_per_section),
            ("words_per_sentence", self.words_per_sentence),
            ("entities_per_section", self.entities_per_section),
        ]:
            if lo < 1 or hi < lo:
                raise CorpusError(f"{name} must be a range (lo, hi) with 1 <= lo <= hi")
        if self.heading_style not in ("title", "upper_colon", "mixed"):
            raise CorpusError(f"unknown heading_style {self.heading_style!r}")
        for p in ("mention_prob", "unheaded_prob", "anonymize_prob", "negation_prob"):
            if not 0.0 <= getattr(self, p) <= 1.0:
                raise CorpusError(f"{p} must lie in [0, 1]")
        entity_words = {w for e in self.entities for w in e.lower().split()}
        filler = set(self.distractors) | _TEMPLATE_WORDS | {c for a in self.aspects for c in self.cues_for(a)}
        clash = sorted(entity_words & filler)
        if clash:
            raise CorpusError(f"filler words collide with entity words: {clash}")


def format_heading(aspect: str, style: str) -> str:
    if style == "upper_colon":
        return aspect.upper() + ":"
    return aspect.title()


def _anonymized_span(rng: np.random.Generator) -> str:
    kind = ("Name", "Date", "Location", "Hospital")[rng.integers(4)]
    return f"[**{kind} {int(rng.integers(100, 999))}**]"


def generate_synthetic(params: GeneratorParams, seed: int) -> Corpus:
    """Deterministic synthetic note corpus.

    Each section's heading is drawn from the aspect list; the body mentions
    entities with probability ``mention_prob`` and always carries one aspect
    cue word per sentence plus distractor filler.  Ground-truth labels are
    kept on ``corpus.planted``.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    docs, planted = [], {}
    n_aspects = len(params.aspects)
    for d in range(params.n_docs):
        doc_id = f"doc{d:05d}"
        n_sec = int(rng.integers(params.sections_per_doc[0], params.sections_per_doc[1] + 1))
        if n_sec <= n_aspects:
            aspect_idx = rng.choice(n_aspects, size=n_sec, replace=False)
        else:
            aspect_idx = rng.integers(0, n_aspects, size=n_sec)
        sections = []
        for s, ai in enumerate(aspect_idx):
            aspect = params.aspects[int(ai)]
            style = params.heading_style
            if style == "mixed":
                style = ("title", "upper_colon")[int(rng.integers(2))]
            heading = format_heading(aspect, style)
            if params.unheaded_prob and rng.random() < params.unheaded_prob:
                heading = ""
            n_sent = int(rng.integers(params.sentences_per_section[0], params.sentences_per_section[1] + 1))
            chosen: list[str] = []
            if rng.random() < params.mention_prob:
                lo, hi = params.entities_per_section
                k = min(int(rng.integers(lo, hi + 1)), len(params.entities))
                chosen = [params.entities[int(i)] for i in rng.choice(len(params.entities), size=k, replace=False)]
            slots = rng.integers(0, n_sent, size=len(chosen))
            cues = params.cues_for(aspect)
            sentences = []
            for j in range(n_sent):
                n_words = int(rng.integers(params.words_per_sentence[0], params.words_per_sentence[1] + 1))
                words = [params.distractors[int(i)] for i in rng.integers(0, len(params.distractors), size=n_words)]
                if cues:
                    words.insert(int(rng.integers(0, len(words) + 1)), cues[int(rng.integers(len(cues)))])
                if params.anonymize_prob and rng.random() < params.anonymize_prob:
                    words[int(rng.integers(len(words)))] = _anonymized_span(rng)
                for e, slot in zip(chosen, slots):
                    if slot != j:
                        continue
                    if params.negation_prob and rng.random() < params.negation_prob:
                        filler = params.distractors[int(rng.integers(len(params.distractors)))]
                        phrase = _NEGATION_TEMPLATE.format(e=e, d=filler)
                    else:
                        phrase = _MENTION_TEMPLATES[int(rng.integers(len(_MENTION_TEMPLATES)))].format(e=e)
                    words.insert(int(rng.integers(0, len(words) + 1)), phrase)
                text = " ".join(words)
                sentences.append(text[0].upper() + text[1:] + ".")
            sections.append(Section(heading, tuple(sentences)))
            planted[passage_id(doc_id, s)] = (frozenset(chosen), aspect if heading else "")
        docs.append(Document(doc_id, f"Synthetic note {d}", tuple(sections)))
    corpus = Corpus(docs)
    corpus.planted = planted
    return corpus


def planted_entity_rate(corpus: Corpus) -> float:
    """Fraction of generated sections that received at least one entity."""
    if not corpus.planted:
        return 0.0
    return sum(1 for ents, _ in corpus.planted.values() if ents) / len(corpus.planted)
