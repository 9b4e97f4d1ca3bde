"""Corpus preparation: vocabulary, tokenized documents, passages, composed
encoder inputs, and per-passage gold views, assembled once and shared by
training, inference, and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

from . import kbstore, textcore
from .kbstore import KB, Document, PassageGold, TokenMention
from .textcore import ComposedInput, Passage, Vocab


@dataclass(frozen=True)
class PipelineConfig:
    window_len: int = 32
    stride: int = 16
    topic_mode: str = "first_token"
    max_input_len: int = textcore.DEFAULT_MAX_INPUT_LEN
    t_max: int = kbstore.DEFAULT_T_MAX
    min_freq: int = 1


@dataclass
class DocView:
    """One document with its tokenization, passages, and gold views."""

    doc: Document
    token_ids: list[int]
    gold_mentions: list[TokenMention]
    passages: list[Passage]
    retriever_inputs: list[ComposedInput]
    gold_views: list[PassageGold]


class CorpusBundle:
    """Prepared corpus: everything the trainers and the linker consume."""

    def __init__(self, kb: KB, docs: list[Document], pcfg: PipelineConfig, vocab: Vocab):
        self.kb = kb
        self.pcfg = pcfg
        self.vocab = vocab
        self._entity_parts: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {}
        self.entity_inputs: list[tuple[str, ComposedInput]] = []
        for e in kb.entities:
            title_ids = tuple(vocab.encode(textcore.tokenize(e.title)[0]))
            desc_ids = tuple(vocab.encode(textcore.tokenize(e.description)[0]))
            self._entity_parts[e.id] = (title_ids, desc_ids)
            self.entity_inputs.append(
                (e.id, textcore.compose_entity(title_ids, desc_ids, pcfg.max_input_len))
            )
        self._entity_input_of = dict(self.entity_inputs)
        sentence_end = vocab.lookup(".") if "." in vocab else None
        self.docs: list[DocView] = []
        for doc in docs:
            toks, _ = textcore.tokenize(doc.text)
            token_ids = vocab.encode(toks)
            passages = textcore.chunk_document(
                doc.id,
                token_ids,
                pcfg.window_len,
                pcfg.stride,
                topic_mode=pcfg.topic_mode,
                sentence_end_id=sentence_end,
            )
            gold_mentions = kbstore.gold_token_mentions(doc)
            views = kbstore.gold_view(gold_mentions, passages)
            self.docs.append(
                DocView(
                    doc=doc,
                    token_ids=token_ids,
                    gold_mentions=gold_mentions,
                    passages=passages,
                    retriever_inputs=[
                        textcore.compose_retriever_passage(p, pcfg.max_input_len)
                        for p in passages
                    ],
                    gold_views=views,
                )
            )

    def entity_input(self, entity_id: str) -> ComposedInput:
        return self._entity_input_of[entity_id]

    def reader_input(self, passage: Passage, entity_id: str) -> ComposedInput:
        title_ids, desc_ids = self._entity_parts[entity_id]
        return textcore.compose_reader_input(
            passage, title_ids, desc_ids, self.pcfg.max_input_len
        )

    def iter_passages(self) -> Iterator[tuple[DocView, Passage, ComposedInput, PassageGold]]:
        for dv in self.docs:
            for p, pinp, pg in zip(dv.passages, dv.retriever_inputs, dv.gold_views):
                yield dv, p, pinp, pg

    def n_passages(self) -> int:
        return sum(len(dv.passages) for dv in self.docs)

    def gold_triples(self) -> dict[str, set[tuple[int, int, str]]]:
        """Document-level gold mention triples in token coordinates."""
        return {
            dv.doc.id: {
                (m.doc_start, m.doc_end, m.entity_id) for m in dv.gold_mentions
            }
            for dv in self.docs
        }


def build_vocab_for(kb: KB, docs: list[Document], min_freq: int = 1) -> Vocab:
    return textcore.build_vocab(
        (d.text for d in docs),
        (e.title + " " + e.description for e in kb.entities),
        min_freq=min_freq,
    )


def prepare_corpus(
    kb: KB,
    docs: list[Document],
    pcfg: PipelineConfig,
    vocab: Vocab | None = None,
) -> CorpusBundle:
    """Assemble a CorpusBundle; builds the vocabulary unless one is supplied
    (evaluation and validation splits must reuse the training vocabulary)."""
    if vocab is None:
        vocab = build_vocab_for(kb, docs, pcfg.min_freq)
    return CorpusBundle(kb, docs, pcfg, vocab)
