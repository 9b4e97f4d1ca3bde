"""Knowledge base, document, and gold annotation storage.

File formats (all UTF-8 line-delimited JSON):
  KB          {"id": str, "title": str, "description": str}
  documents   {"id": str, "text": str, "gold": [{"start": int, "end": int, "entity": str}]}
              where start/end are character offsets, end exclusive
  predictions {"doc": str, "mentions": [{"start": int, "end": int, "entity": str, "score": float}]}
              where start/end are 1-based document token indices, end inclusive
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from . import textcore
from .textcore import Passage, tokenize

logger = logging.getLogger(__name__)

DEFAULT_T_MAX = 4096


class CorpusFormatError(ValueError):
    """A KB or documents file failed validation; message carries the line."""


@dataclass(frozen=True)
class Entity:
    id: str
    title: str
    description: str


@dataclass(frozen=True)
class CharMention:
    """Gold annotation in character coordinates; char_end is exclusive."""

    char_start: int
    char_end: int
    entity_id: str


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    gold: tuple[CharMention, ...]


@dataclass(frozen=True)
class TokenMention:
    """Gold annotation snapped to 1-based document token coordinates
    (doc_end inclusive)."""

    doc_start: int
    doc_end: int
    entity_id: str


@dataclass(frozen=True)
class LabeledMention:
    """A predicted mention: document token span, entity, and its score."""

    doc_start: int
    doc_end: int
    entity_id: str
    score: float


class KB:
    """Immutable entity inventory with unique ids, preserving file order."""

    def __init__(self, entities: Sequence[Entity]):
        self.entities: tuple[Entity, ...] = tuple(entities)
        self.by_id: dict[str, Entity] = {}
        for e in self.entities:
            if e.id in self.by_id:
                raise CorpusFormatError(f"duplicate entity id {e.id!r}")
            if not e.title.strip():
                raise CorpusFormatError(f"entity {e.id!r} has an empty title")
            self.by_id[e.id] = e

    def __len__(self) -> int:
        return len(self.entities)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.by_id

    def __getitem__(self, entity_id: str) -> Entity:
        return self.by_id[entity_id]

    def ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.entities)


def _read_jsonl(path: str) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise CorpusFormatError(f"{path}:{lineno}: expected an object")
            yield lineno, record


def _require(record: dict, key: str, path: str, lineno: int):
    if key not in record:
        raise CorpusFormatError(f"{path}:{lineno}: missing field {key!r}")
    return record[key]


def load_kb(path: str) -> KB:
    entities = []
    seen: set[str] = set()
    for lineno, rec in _read_jsonl(path):
        eid = _require(rec, "id", path, lineno)
        title = _require(rec, "title", path, lineno)
        desc = _require(rec, "description", path, lineno)
        if not isinstance(eid, str) or not isinstance(title, str) or not isinstance(desc, str):
            raise CorpusFormatError(f"{path}:{lineno}: id/title/description must be strings")
        if eid in seen:
            raise CorpusFormatError(f"{path}:{lineno}: duplicate entity id {eid!r}")
        if not title.strip():
            raise CorpusFormatError(f"{path}:{lineno}: entity {eid!r} has an empty title")
        seen.add(eid)
        entities.append(Entity(id=eid, title=title, description=desc))
    return KB(entities)


def load_documents(
    path: str, kb: KB | None, t_max: int = DEFAULT_T_MAX
) -> list[Document]:
    """Load documents; gold entity ids are checked against kb when given."""
    docs: list[Document] = []
    seen: set[str] = set()
    for lineno, rec in _read_jsonl(path):
        did = _require(rec, "id", path, lineno)
        text = _require(rec, "text", path, lineno)
        raw_gold = rec.get("gold", [])
        if did in seen:
            raise CorpusFormatError(f"{path}:{lineno}: duplicate document id {did!r}")
        seen.add(did)
        toks, _ = tokenize(text)
        if len(toks) > t_max:
            raise CorpusFormatError(
                f"{path}:{lineno}: document {did!r} has {len(toks)} tokens, exceeding T_max={t_max}"
            )
        gold = []
        for g in raw_gold:
            start = _require(g, "start", path, lineno)
            end = _require(g, "end", path, lineno)
            entity_id = _require(g, "entity", path, lineno)
            if kb is not None and entity_id not in kb:
                raise CorpusFormatError(
                    f"{path}:{lineno}: gold mention references unknown entity {entity_id!r}"
                )
            if not (0 <= start < end <= len(text)):
                raise CorpusFormatError(
                    f"{path}:{lineno}: gold span ({start}, {end}) outside text of length {len(text)}"
                )
            gold.append(CharMention(char_start=start, char_end=end, entity_id=entity_id))
        docs.append(Document(id=did, text=text, gold=tuple(gold)))
    return docs


def load_corpus(
    kb_path: str, docs_path: str, t_max: int = DEFAULT_T_MAX
) -> tuple[KB, list[Document]]:
    """Load and cross-validate the KB and documents files."""
    kb = load_kb(kb_path)
    docs = load_documents(docs_path, kb, t_max=t_max)
    return kb, docs


def gold_token_mentions(doc: Document) -> list[TokenMention]:
    """Snap gold character spans to covering token spans (1-based, inclusive).

    Spans that do not align with token boundaries are snapped outward with a
    logged warning; spans covering no token at all are dropped with a warning.
    """
    _, offsets = tokenize(doc.text)
    mentions: list[TokenMention] = []
    for g in doc.gold:
        covering = [
            i
            for i, (lo, hi) in enumerate(offsets)
            if hi >= g.char_start and lo <= g.char_end - 1
        ]
        if not covering:
            logger.warning(
                "doc %s: gold span (%d, %d) for %s covers no token; dropped",
                doc.id,
                g.char_start,
                g.char_end,
                g.entity_id,
            )
            continue
        first, last = covering[0], covering[-1]
        if offsets[first][0] != g.char_start or offsets[last][1] != g.char_end - 1:
            logger.warning(
                "doc %s: gold span (%d, %d) for %s does not align with token "
                "boundaries; snapped to tokens (%d, %d)",
                doc.id,
                g.char_start,
                g.char_end,
                g.entity_id,
                first + 1,
                last + 1,
            )
        mentions.append(
            TokenMention(doc_start=first + 1, doc_end=last + 1, entity_id=g.entity_id)
        )
    return mentions


@dataclass(frozen=True)
class PassageGold:
    """Gold view of one passage.

    entities lists (sorted) the entity ids with at least one gold mention fully
    inside the window.  spans maps those ids to their encoder-position spans;
    for any other entity the span set is the CLS sentinel {(1, 1)}.
    """

    entities: tuple[str, ...]
    spans: Mapping[str, tuple[tuple[int, int], ...]]

    CLS_SPAN = ((1, 1),)

    def spans_for(self, entity_id: str) -> tuple[tuple[int, int], ...]:
        return self.spans.get(entity_id, self.CLS_SPAN)


def gold_view(
    token_mentions: Sequence[TokenMention], passages: Sequence[Passage]
) -> list[PassageGold]:
    """Per-passage gold entities and encoder-coordinate mention spans.

    A gold mention belongs to every passage whose window fully contains it.
    Mentions contained in no window (straddling every boundary, or longer than
    the window) are dropped with a warning.
    """
    views: list[PassageGold] = []
    covered = [False] * len(token_mentions)
    for p in passages:
        spans: dict[str, set[tuple[int, int]]] = {}
        for i, m in enumerate(token_mentions):
            if m.doc_start >= p.window_start and m.doc_end <= p.window_end:
                covered[i] = True
                s = m.doc_start - p.window_start + 2
                t = m.doc_end - p.window_start + 2
                spans.setdefault(m.entity_id, set()).add((s, t))
        views.append(
            PassageGold(
                entities=tuple(sorted(spans)),
                spans={e: tuple(sorted(v)) for e, v in sorted(spans.items())},
            )
        )
    for i, m in enumerate(token_mentions):
        if not covered[i]:
            doc_id = passages[0].doc_id if passages else "?"
            logger.warning(
                "doc %s: gold mention (%d, %d) for %s fits in no passage window; dropped",
                doc_id,
                m.doc_start,
                m.doc_end,
                m.entity_id,
            )
    return views


def write_predictions(
    path: str, items: Iterable[tuple[str, Sequence[LabeledMention]]]
) -> None:
    """Write one record per document; scores round-trip losslessly."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, mentions in items:
            rec = {
                "doc": doc_id,
                "mentions": [
                    {
                        "start": m.doc_start,
                        "end": m.doc_end,
                        "entity": m.entity_id,
                        "score": m.score,
                    }
                    for m in mentions
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_predictions(path: str) -> list[tuple[str, list[LabeledMention]]]:
    out: list[tuple[str, list[LabeledMention]]] = []
    for lineno, rec in _read_jsonl(path):
        doc_id = _require(rec, "doc", path, lineno)
        mentions = [
            LabeledMention(
                doc_start=m["start"],
                doc_end=m["end"],
                entity_id=m["entity"],
                score=m["score"],
            )
            for m in _require(rec, "mentions", path, lineno)
        ]
        out.append((doc_id, mentions))
    return out
