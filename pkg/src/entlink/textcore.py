"""Deterministic tokenization, vocabulary, passage chunking, and encoder input
composition.

Document token coordinates are 1-based everywhere.  Encoder input positions are
also 1-based: position 1 is the leading CLS token, and passage tokens always
start at position 2.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

# Reserved vocabulary ids.  TYP is the separator inserted between two texts
# being concatenated inside one segment (a plain token, never a boundary).
CLS = 0
SEP = 1
UNK = 2
PAD = 3
TYP = 4
NUM_RESERVED = 5
RESERVED_TOKENS = ("[CLS]", "[SEP]", "[UNK]", "[PAD]", "[TYP]")

DEFAULT_MAX_INPUT_LEN = 192
TOPIC_MODES = ("none", "first_token", "first_sentence")
FIRST_SENTENCE_CAP = 16

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class InputTooLongError(ValueError):
    """Raised when a composed sequence cannot fit the encoder maximum."""


def tokenize(text: str) -> tuple[list[str], list[tuple[int, int]]]:
    """Lowercase word/punctuation tokenization with character offsets.

    Words are maximal runs of word characters; every punctuation mark is its
    own token.  Offsets are inclusive (start, end) character positions into the
    original text, so gold character annotations can be snapped to tokens.

    Returns:
        (tokens, offsets), both empty for empty input.
    """
    tokens: list[str] = []
    offsets: list[tuple[int, int]] = []
    for m in _TOKEN_RE.finditer(text):
        tokens.append(m.group().lower())
        offsets.append((m.start(), m.end() - 1))
    return tokens, offsets


@dataclass(frozen=True)
class Vocab:
    """Immutable token-to-id table with reserved ids 0..4.

    Corpus tokens get contiguous ids starting at NUM_RESERVED, in first
    occurrence order.  Lookup is total: unknown tokens map to UNK.
    """

    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]
    min_freq: int = 1

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        t2i = self.token_to_id
        return [t2i.get(t, UNK) for t in tokens]

    def decode(self, idx: int) -> str:
        return self.id_to_token[idx]


def build_vocab(
    documents: Iterable[str],
    entity_texts: Iterable[str],
    min_freq: int = 1,
) -> Vocab:
    """Build a vocabulary over document and entity texts.

    Tokens with corpus frequency >= min_freq are assigned ids in first
    occurrence order, after the reserved ids.  Deterministic given identical
    input order.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    order: list[str] = []
    seen: set[str] = set()
    n_texts = 0
    for text in documents:
        n_texts += 1
        toks, _ = tokenize(text)
        counts.update(toks)
        for t in toks:
            if t not in seen:
                seen.add(t)
                order.append(t)
    for text in entity_texts:
        n_texts += 1
        toks, _ = tokenize(text)
        counts.update(toks)
        for t in toks:
            if t not in seen:
                seen.add(t)
                order.append(t)
    if n_texts == 0 or not counts:
        raise ValueError("empty corpus: no tokens to build a vocabulary from")

    token_to_id = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
    id_to_token = list(RESERVED_TOKENS)
    for tok in order:
        if counts[tok] >= min_freq:
            token_to_id[tok] = len(id_to_token)
            id_to_token.append(tok)
    return Vocab(token_to_id=token_to_id, id_to_token=tuple(id_to_token), min_freq=min_freq)


@dataclass(frozen=True)
class Passage:
    """One length-<=L window of a document.

    window_start is the 1-based document token index of the first passage
    token.  topic_tokens carry document-level context shared by all passages
    of the document (possibly empty).
    """

    doc_id: str
    window_start: int
    tokens: tuple[int, ...]
    topic_tokens: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def window_end(self) -> int:
        return self.window_start + len(self.tokens) - 1


def chunk_document(
    doc_id: str,
    token_ids: Sequence[int],
    window_len: int,
    stride: int,
    topic_mode: str = "first_token",
    sentence_end_id: int | None = None,
) -> list[Passage]:
    """Split a document into overlapping windows of window_len with the given
    stride.

    Window starts are 1, 1+stride, 1+2*stride, ...; emission stops with the
    first window whose end reaches the final token (that window is truncated
    to the document end).  The union of windows always covers the document.

    topic_mode selects the document-level topic carried by every passage:
    "none", "first_token" (the document's first token), or "first_sentence"
    (tokens before the first sentence_end_id, capped at FIRST_SENTENCE_CAP).
    """
    n = len(token_ids)
    if n < 1:
        raise ValueError("cannot chunk an empty document")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if stride > window_len:
        raise ValueError(
            f"stride {stride} > window length {window_len} would leave coverage gaps"
        )
    if topic_mode not in TOPIC_MODES:
        raise ValueError(f"unknown topic_mode {topic_mode!r}; expected one of {TOPIC_MODES}")

    if topic_mode == "none":
        topic: tuple[int, ...] = ()
    elif topic_mode == "first_token":
        topic = (token_ids[0],)
    else:
        head = list(token_ids[:FIRST_SENTENCE_CAP])
        if sentence_end_id is not None:
            for i, t in enumerate(token_ids[: FIRST_SENTENCE_CAP + 1]):
                if t == sentence_end_id:
                    head = list(token_ids[:i])
                    break
        topic = tuple(head)

    passages: list[Passage] = []
    start = 1
    while True:
        end = start + window_len - 1
        window = tuple(token_ids[start - 1 : min(end, n)])
        passages.append(
            Passage(doc_id=doc_id, window_start=start, tokens=window, topic_tokens=topic)
        )
        if end >= n:
            break
        start += stride
    return passages


@dataclass(frozen=True)
class ComposedInput:
    """A token-id sequence ready for an encoder.

    span_lo/span_hi are the inclusive 1-based positions of the passage tokens
    within the sequence (span_lo is always 2; span_hi < span_lo means the
    input carries no passage segment, as for entity-only inputs).
    """

    ids: tuple[int, ...]
    span_lo: int = 2
    span_hi: int = 1

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def passage_len(self) -> int:
        return self.span_hi - self.span_lo + 1


def compose_retriever_passage(
    p: Passage, max_len: int = DEFAULT_MAX_INPUT_LEN
) -> ComposedInput:
    """Passage-side retriever input: CLS p SEP topic."""
    ids = (CLS, *p.tokens, SEP, *p.topic_tokens)
    if len(ids) > max_len:
        raise InputTooLongError(
            f"passage input of length {len(ids)} exceeds encoder maximum {max_len} "
            f"(doc {p.doc_id}, window {p.window_start}); the passage cannot be truncated"
        )
    return ComposedInput(ids=ids, span_lo=2, span_hi=1 + len(p.tokens))


def compose_entity(
    title_ids: Sequence[int],
    desc_ids: Sequence[int],
    max_len: int = DEFAULT_MAX_INPUT_LEN,
) -> ComposedInput:
    """Entity-side retriever input: CLS title TYP desc SEP.

    The description is truncated (possibly to nothing, dropping its TYP
    separator too) so the whole sequence fits max_len; the title never is.
    """
    if not title_ids:
        raise ValueError("entity title must be nonempty")
    fixed = 2 + len(title_ids)  # CLS title SEP
    if fixed > max_len:
        raise InputTooLongError(
            f"entity title of {len(title_ids)} tokens cannot fit encoder maximum {max_len}"
        )
    budget = max_len - fixed - 1  # room for desc after its TYP separator
    kept = tuple(desc_ids[: max(0, budget)])
    if kept:
        ids = (CLS, *title_ids, TYP, *kept, SEP)
    else:
        ids = (CLS, *title_ids, SEP)
    return ComposedInput(ids=ids)


def compose_reader_input(
    p: Passage,
    title_ids: Sequence[int],
    desc_ids: Sequence[int],
    max_len: int = DEFAULT_MAX_INPUT_LEN,
) -> ComposedInput:
    """Joint reader input: CLS p TYP topic SEP title TYP desc SEP.

    The TYP separators appear only when the segment they introduce is
    nonempty.  Only the entity description may be truncated.
    """
    if not title_ids:
        raise ValueError("entity title must be nonempty")
    head: tuple[int, ...] = (CLS, *p.tokens)
    if p.topic_tokens:
        head = (*head, TYP, *p.topic_tokens)
    fixed = len(head) + 1 + len(title_ids) + 1  # SEP title ... SEP
    if fixed > max_len:
        raise InputTooLongError(
            f"reader input frame of {fixed} tokens exceeds encoder maximum {max_len} "
            f"(doc {p.doc_id}, window {p.window_start}); the passage cannot be truncated"
        )
    budget = max_len - fixed - 1
    kept = tuple(desc_ids[: max(0, budget)])
    if kept:
        ids = (*head, SEP, *title_ids, TYP, *kept, SEP)
    else:
        ids = (*head, SEP, *title_ids, SEP)
    return ComposedInput(ids=ids, span_lo=2, span_hi=1 + len(p.tokens))


def map_span_to_document(p: Passage, s: int, t: int) -> tuple[int, int]:
    """Map an encoder-position span (s, t) inside passage p to 1-based document
    token coordinates.

    Position 1 (CLS) and anything outside the passage token range are
    rejected.
    """
    span_lo, span_hi = 2, 1 + len(p.tokens)
    if not (span_lo <= s <= t <= span_hi):
        raise ValueError(
            f"span ({s}, {t}) outside passage positions [{span_lo}, {span_hi}]"
        )
    return (p.window_start + s - span_lo, p.window_start + t - span_lo)
