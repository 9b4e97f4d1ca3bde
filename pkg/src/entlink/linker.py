"""End-to-end inference: retrieve candidates, extract spans per candidate,
threshold by rerank x span probability, and merge across overlapping passages.

A labeled mention survives iff p_rerank(e) * p_span(s, t) > gamma (strict).
Identical (doc_start, doc_end, entity) triples from overlapping passages are
merged keeping the maximum score; optionally only the best entity per exact
span is kept.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import reader as reader_mod
from . import retriever as retriever_mod
from .kbstore import LabeledMention
from .neural import ParamSet
from .reader import DEFAULT_MAX_MENTION_LEN
from .retriever import EntityIndex
from .textcore import Passage, map_span_to_document

logger = logging.getLogger(__name__)

DEFAULT_K = 100
DEFAULT_P = 3
DEFAULT_GAMMA = 0.05


class StaleIndexError(ValueError):
    """The index was built from different entity-encoder parameters."""


@dataclass
class InferenceConfig:
    k: int = DEFAULT_K
    p: int = DEFAULT_P
    gamma: float = DEFAULT_GAMMA
    max_mention_len: int = DEFAULT_MAX_MENTION_LEN
    one_entity_per_span: bool = True


@dataclass
class PassageLinkRecord:
    """Per-passage diagnostics retained for entity-decision evaluation."""

    passage: Passage
    slate_ids: tuple[str, ...]
    accepted_ids: tuple[str, ...]
    mentions: tuple[LabeledMention, ...]


def check_index(params_retriever: ParamSet, index: EntityIndex) -> None:
    fp = retriever_mod.params_fingerprint(params_retriever)
    if fp != index.fingerprint:
        raise StaleIndexError(
            "index fingerprint does not match the retriever parameters; rebuild the index"
        )


def link_passage(
    params_retriever: ParamSet,
    params_reader: ParamSet,
    index: EntityIndex,
    passage: Passage,
    retriever_input,
    reader_input_for: Callable[[Passage, str], object],
    cfg: InferenceConfig,
    candidate_ids: Sequence[str] | None = None,
) -> PassageLinkRecord:
    """Link one passage.

    Step 1 retrieves the top-k candidates (or uses candidate_ids when given,
    e.g. for the gold-candidates oracle).  Step 2 extracts up to p spans per
    candidate, discarding those not beating the CLS rejection span.  Step 3
    keeps labeled spans with p_rerank * p_span > gamma and maps them to
    document coordinates.
    """
    if candidate_ids is None:
        qv = retriever_mod.passage_vec(params_retriever, retriever_input)
        slate = [e for e, _ in retriever_mod.top_k(index, qv, min(cfg.k, len(index)))]
    else:
        slate = list(candidate_ids)
    if not slate:
        return PassageLinkRecord(passage, (), (), ())
    span_scores = []
    spans_per_candidate = []
    for eid in slate:
        scores = reader_mod.reader_forward(params_reader, reader_input_for(passage, eid))
        span_scores.append(scores)
        spans_per_candidate.append(
            reader_mod.top_spans(scores, cfg.p, cfg.max_mention_len)
        )
    rerank = reader_mod.rerank_distribution([s.rerank_logit for s in span_scores])
    mentions: list[LabeledMention] = []
    accepted: list[str] = []
    for eid, p_rr, spans in zip(slate, rerank, spans_per_candidate):
        kept_any = False
        for s, t, p_span in spans:
            score = float(p_rr) * p_span
            if score > cfg.gamma:
                ds, de = map_span_to_document(passage, s, t)
                mentions.append(
                    LabeledMention(doc_start=ds, doc_end=de, entity_id=eid, score=score)
                )
                kept_any = True
        if kept_any:
            accepted.append(eid)
    return PassageLinkRecord(
        passage=passage,
        slate_ids=tuple(slate),
        accepted_ids=tuple(accepted),
        mentions=tuple(mentions),
    )


def merge_mentions(
    passage_mentions: Sequence[Sequence[LabeledMention]],
    one_entity_per_span: bool = True,
) -> list[LabeledMention]:
    """Merge passage-level mentions into a document-level prediction set.

    Identical (start, end, entity) triples keep their maximum score.  With
    one_entity_per_span, only the highest-scoring entity survives per exact
    span (ties broken toward the lexicographically smaller id).  Output is
    sorted by (start, end, entity).
    """
    best: dict[tuple[int, int, str], float] = {}
    for mentions in passage_mentions:
        for m in mentions:
            key = (m.doc_start, m.doc_end, m.entity_id)
            if key not in best or m.score > best[key]:
                best[key] = m.score
    if one_entity_per_span:
        by_span: dict[tuple[int, int], tuple[str, float]] = {}
        for (ds, de, eid), score in sorted(best.items()):
            cur = by_span.get((ds, de))
            if cur is None or score > cur[1]:
                by_span[(ds, de)] = (eid, score)
        best = {(ds, de, eid): score for (ds, de), (eid, score) in by_span.items()}
    return [
        LabeledMention(doc_start=ds, doc_end=de, entity_id=eid, score=score)
        for (ds, de, eid), score in sorted(best.items())
    ]


def link_document(
    params_retriever: ParamSet,
    params_reader: ParamSet,
    index: EntityIndex,
    doc_view,
    cfg: InferenceConfig,
    reader_input_for: Callable,
    oracle_candidates: bool = False,
) -> tuple[list[LabeledMention], list[PassageLinkRecord]]:
    """Link every passage of a document independently, then merge."""
    records = []
    for passage, pinp, pg in zip(
        doc_view.passages, doc_view.retriever_inputs, doc_view.gold_views
    ):
        candidate_ids = tuple(pg.entities) if oracle_candidates else None
        records.append(
            link_passage(
                params_retriever,
                params_reader,
                index,
                passage,
                pinp,
                reader_input_for,
                cfg,
                candidate_ids=candidate_ids,
            )
        )
    merged = merge_mentions([r.mentions for r in records], cfg.one_entity_per_span)
    return merged, records


def link_corpus(
    params_retriever: ParamSet,
    params_reader: ParamSet,
    index: EntityIndex,
    bundle,
    cfg: InferenceConfig,
    oracle_candidates: bool = False,
    threads: int = 1,
) -> tuple[list[tuple[str, list[LabeledMention]]], list[PassageLinkRecord]]:
    """Link all documents of a corpus bundle; order follows the corpus."""
    check_index(params_retriever, index)

    def one(dv):
        return link_document(
            params_retriever,
            params_reader,
            index,
            dv,
            cfg,
            reader_input_for=bundle.reader_input,
            oracle_candidates=oracle_candidates,
        )

    if threads > 1 and len(bundle.docs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, bundle.docs))
    else:
        results = [one(dv) for dv in bundle.docs]
    predictions = [(dv.doc.id, merged) for dv, (merged, _) in zip(bundle.docs, results)]
    records = [rec for _, recs in results for rec in recs]
    return predictions, records


def calibrate_threshold(
    predictions_at_zero: Sequence[tuple[str, Sequence[LabeledMention]]],
    gold: Mapping[str, set[tuple[int, int, str]]],
) -> tuple[float, list[tuple[float, float]]]:
    """Pick the strict threshold maximizing micro F1 on a validation split.

    predictions_at_zero must come from inference with gamma=0 so every
    candidate labeled mention is present with its score.  Every effective
    threshold (0 plus each distinct observed score) is evaluated; ties in F1
    are broken toward the larger threshold.
    """
    from .evalkit import micro_f1

    scores = sorted({m.score for _, mentions in predictions_at_zero for m in mentions})
    if not scores:
        raise ValueError("no labeled mentions produced at gamma=0; cannot calibrate")
    curve: list[tuple[float, float]] = []
    best_gamma, best_f1 = 0.0, -1.0
    for gamma in [0.0] + scores:
        filtered = {
            doc_id: {
                (m.doc_start, m.doc_end, m.entity_id)
                for m in mentions
                if m.score > gamma
            }
            for doc_id, mentions in predictions_at_zero
        }
        f1 = micro_f1(filtered, gold, mode="full")["f1"]
        curve.append((gamma, f1))
        if f1 >= best_f1:
            best_gamma, best_f1 = gamma, f1
    return best_gamma, curve
