"""Rule-based label generation: gazetteer entities and heading aspects.

Entities come from dictionary matching (longest match first, token
boundaries, case-insensitive).  Aspects come from section headings matched
against an ordered list of regular expressions.  Matching is deliberately
blind to negation: ``"no nausea or vomiting"`` still yields ``nausea``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .corpus import Corpus, Passage, Section

_WORD = re.compile(r"\w+")


def _words(text: str) -> list[tuple[str, int, int]]:
    return [(m.group().lower(), m.start(), m.end()) for m in _WORD.finditer(text)]


class Gazetteer:
    """Entity surface forms, with optional alias -> canonical mapping."""

    def __init__(self, entries: Iterable[str], aliases: Optional[dict] = None):
        canon = {" ".join(e.lower().split()) for e in entries}
        if "" in canon:
            raise ValueError("gazetteer entries must not be blank")
        if not canon:
            raise ValueError("gazetteer is empty")
        self.entries = frozenset(canon)
        self.aliases = {" ".join(k.lower().split()): " ".join(v.lower().split()) for k, v in (aliases or {}).items()}
        for canonical in self.aliases.values():
            if canonical not in self.entries:
                raise ValueError(f"alias target {canonical!r} is not a gazetteer entry")
        # surface form (as a tuple of word tokens) -> canonical entity
        self._forms: dict[tuple[str, ...], str] = {}
        for surface, canonical in [(e, e) for e in self.entries] + list(self.aliases.items()):
            key = tuple(w for w, _, _ in _words(surface))
            if key:
                self._forms[key] = canonical
        self.max_len = max(len(k) for k in self._forms)

    def __contains__(self, entity: str) -> bool:
        return entity.lower() in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def canonical(self, surface: str) -> Optional[str]:
        return self._forms.get(tuple(w for w, _, _ in _words(surface)))

    @classmethod
    def load(cls, path) -> "Gazetteer":
        """One entry per line; ``alias<TAB>canonical`` lines define aliases."""
        entries, aliases = [], {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" in line:
                alias, canonical = line.split("\t", 1)
                aliases[alias.strip()] = canonical.strip()
                entries.append(canonical.strip())
            else:
                entries.append(line.strip())
        return cls(entries, aliases)

    def dump(self, path) -> None:
        lines = sorted(self.entries) + [f"{a}\t{c}" for a, c in sorted(self.aliases.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def extract_entities(passage, gaz: Gazetteer) -> set[str]:
    """Canonical entities mentioned in a passage (or plain string).

    Scans word tokens left to right and takes the longest gazetteer form
    starting at each position; words covered by a match cannot start or be
    part of another match.
    """
    text = passage.text if isinstance(passage, Passage) else passage
    tokens = [w for w, _, _ in _words(text)]
    found, i = set(), 0
    while i < len(tokens):
        for n in range(min(gaz.max_len, len(tokens) - i), 0, -1):
            hit = gaz._forms.get(tuple(tokens[i:i + n]))
            if hit is not None:
                found.add(hit)
                i += n
                break
        else:
            i += 1
    return found


# ---------------------------------------------------------------------------
# aspects
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]")


def normalize_aspect(raw: str) -> str:
    """Lowercase, drop trailing colons, strip punctuation, collapse whitespace."""
    text = raw.strip().rstrip(":").strip().lower()
    text = _PUNCT.sub(" ", text)
    return " ".join(text.split())


@dataclass
class AspectPatternSet:
    """Ordered (pattern, normaliser) pairs; the first matching pattern wins.

    A pattern's named group ``aspect`` (or else its first group, or else the
    whole match) is passed to the normaliser.
    """

    rules: list[tuple[re.Pattern, Callable[[str], str]]] = field(default_factory=list)

    @classmethod
    def from_patterns(cls, patterns: Sequence[str], normalizer: Callable[[str], str] = normalize_aspect):
        return cls([(re.compile(p), normalizer) for p in patterns])

    @classmethod
    def default(cls) -> "AspectPatternSet":
        return cls.from_patterns(DEFAULT_HEADING_PATTERNS)

    @classmethod
    def load(cls, path) -> "AspectPatternSet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_patterns([ln for ln in lines if ln.strip() and not ln.startswith("#")])

    def dump(self, path) -> None:
        Path(path).write_text("".join(p.pattern + "\n" for p, _ in self.rules), encoding="utf-8")

    def match(self, heading: str) -> Optional[str]:
        for pattern, normalizer in self.rules:
            m = pattern.search(heading)
            if m is None:
                continue
            if "aspect" in pattern.groupindex:
                raw = m.group("aspect")
            elif pattern.groups:
                raw = m.group(1)
            else:
                raw = m.group(0)
            aspect = normalizer(raw or "")
            return aspect or None
        return None


# upper-case note style ("CHIEF COMPLAINT:") and title style ("Family History")
DEFAULT_HEADING_PATTERNS = (
    r"^\s*(?P<aspect>[A-Z][A-Z0-9 /&,()'-]*[A-Z0-9)])\s*:\s*$",
    r"^\s*(?P<aspect>[A-Za-z][A-Za-z0-9 /&,()'-]*?)\s*:?\s*$",
)


def extract_aspect(section: Section, patterns: AspectPatternSet) -> Optional[str]:
    if not section.heading.strip():
        return None
    return patterns.match(section.heading)


# ---------------------------------------------------------------------------
# corpus annotation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PassageLabels:
    doc_id: str
    section_index: int
    entities: frozenset
    aspect: str

    @property
    def passage_id(self) -> str:
        return f"{self.doc_id}#{self.section_index}"

    def to_json(self) -> str:
        return json.dumps(
            {"doc_id": self.doc_id, "section_index": self.section_index,
             "entities": sorted(self.entities), "aspect": self.aspect},
            ensure_ascii=False, separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "PassageLabels":
        obj = json.loads(line)
        return cls(obj["doc_id"], int(obj["section_index"]), frozenset(obj["entities"]), obj["aspect"])


@dataclass
class SkipReport:
    total: int = 0
    kept: int = 0
    no_entity: int = 0
    no_aspect: int = 0
    neither: int = 0

    @property
    def skipped(self) -> int:
        return self.total - self.kept


def annotate_corpus(corpus: Corpus, gaz: Gazetteer, patterns: AspectPatternSet,
                    report: Optional[SkipReport] = None) -> list[PassageLabels]:
    """Label every passage that has at least one entity and an aspect."""
    report = report if report is not None else SkipReport()
    labels = []
    for p in corpus.passages:
        section = corpus.document(p.doc_id).sections[p.section_index]
        entities = extract_entities(p, gaz)
        aspect = extract_aspect(section, patterns)
        report.total += 1
        if entities and aspect:
            report.kept += 1
            labels.append(PassageLabels(p.doc_id, p.section_index, frozenset(entities), aspect))
        elif not entities and not aspect:
            report.neither += 1
        elif not entities:
            report.no_entity += 1
        else:
            report.no_aspect += 1
    return labels


def write_labels(labels: Iterable[PassageLabels], path) -> None:
    Path(path).write_text("".join(l.to_json() + "\n" for l in labels), encoding="utf-8")


def read_labels(path) -> list[PassageLabels]:
    return [PassageLabels.from_json(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
