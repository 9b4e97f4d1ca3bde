"""Metrics and error analysis.

Micro F1 with strong matching (exact span + entity), the span-only relaxation,
entity-decision F1, and the over/under/neither error triage of per-passage
prediction sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

Triple = tuple[int, int, str]


def _as_triples(mentions: Iterable) -> set[Triple]:
    out: set[Triple] = set()
    for m in mentions:
        if isinstance(m, tuple):
            out.add((m[0], m[1], m[2]))
        else:
            out.add((m.doc_start, m.doc_end, m.entity_id))
    return out


def _prf(tp: int, n_pred: int, n_gold: int) -> dict:
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tp": tp,
        "n_pred": n_pred,
        "n_gold": n_gold,
    }


def micro_f1(
    predictions: Mapping[str, Iterable],
    gold: Mapping[str, Iterable],
    mode: str = "full",
) -> dict:
    """Micro-aggregated precision/recall/F1 over a whole split.

    Both sides map document id to mentions in document token coordinates.  In
    "full" mode a true positive requires the exact (start, end, entity)
    triple; in "md_only" mode matching is on (start, end) alone.  Mentions are
    compared as sets per document.
    """
    if mode not in ("full", "md_only"):
        raise ValueError(f"unknown mode {mode!r}")
    tp = n_pred = n_gold = 0
    for doc_id in sorted(set(predictions) | set(gold)):
        pred = _as_triples(predictions.get(doc_id, ()))
        gld = _as_triples(gold.get(doc_id, ()))
        if mode == "md_only":
            pred = {(s, e) for s, e, _ in pred}
            gld = {(s, e) for s, e, _ in gld}
        tp += len(pred & gld)
        n_pred += len(pred)
        n_gold += len(gld)
    return _prf(tp, n_pred, n_gold)


def ed_f1(pairs: Sequence[tuple[Iterable[str], Iterable[str]]]) -> dict:
    """Micro F1 of accepted-entity sets against gold entity sets.

    Each pair is (accepted ids, gold ids) for one unit: a passage, or a whole
    document when the caller aggregates per document.
    """
    tp = n_pred = n_gold = 0
    for accepted, gold_ids in pairs:
        a, g = set(accepted), set(gold_ids)
        tp += len(a & g)
        n_pred += len(a)
        n_gold += len(g)
    return _prf(tp, n_pred, n_gold)


@dataclass(frozen=True)
class ErrorCounts:
    over: int = 0
    under: int = 0
    neither: int = 0
    correct: int = 0

    @property
    def total(self) -> int:
        return self.over + self.under + self.neither + self.correct


def categorize_errors(pairs: Sequence[tuple[Iterable, Iterable]]) -> ErrorCounts:
    """Triage passage-aligned prediction/gold mention sets.

    over: gold is a strict subset of the predictions.  under: predictions are
    a strict subset of gold.  correct: equal.  neither: anything else.  The
    four categories partition the passages.
    """
    over = under = neither = correct = 0
    for pred, gld in pairs:
        p, g = _as_triples(pred), _as_triples(gld)
        if p == g:
            correct += 1
        elif g < p:
            over += 1
        elif p < g:
            under += 1
        else:
            neither += 1
    return ErrorCounts(over=over, under=under, neither=neither, correct=correct)


def write_report(path: str, records: Sequence[dict]) -> None:
    """One JSON record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def render_table(records: Sequence[dict]) -> str:
    """Human-readable metric table; one row per record."""
    if not records:
        return "(no metrics)"
    keys: list[str] = []
    for rec in records:
        for k in rec:
            if k not in keys:
                keys.append(k)
    rows = [[_fmt(rec.get(k, "")) for k in keys] for rec in records]
    widths = [max(len(k), *(len(r[i]) for r in rows)) for i, k in enumerate(keys)]
    lines = [
        "  ".join(k.ljust(w) for k, w in zip(keys, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
