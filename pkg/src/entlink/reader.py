"""Joint passage-entity reader: span and rerank distributions, training, and
per-candidate span extraction.

The span distributions are supported on exactly the CLS position plus the
passage positions (1..|p|+1); entity- and topic-side positions are excluded
from the softmax, so normalization over the support is exact by construction.
Predicting the CLS span (1, 1) rejects a candidate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import neural
from .kbstore import PassageGold
from .neural import AdamState, ParamSet
from .textcore import ComposedInput, Passage

logger = logging.getLogger(__name__)

READER_VARIANTS = ("sumlog", "marginal")
DEFAULT_MAX_MENTION_LEN = 10
CLS_SPAN = (1, 1)


@dataclass(frozen=True)
class SlateEntry:
    entity_id: str
    retrieval_score: float
    is_gold: bool = False


@dataclass(frozen=True)
class CandidateSlate:
    """Ordered candidate entities for one passage (retrieval-score order)."""

    passage: Passage
    entries: tuple[SlateEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(e.entity_id for e in self.entries)


def build_training_slate(
    passage: Passage,
    ranking: Sequence[tuple[str, float]],
    gold_ids: Sequence[str],
    k: int,
) -> CandidateSlate:
    """Top-k candidates with every gold entity forced in.

    Missing gold entities displace the lowest-ranked non-gold candidates; the
    result keeps retrieval-score order (descending, ties by id).  The ranking
    must cover all gold entities so their scores are known.
    """
    gold = set(gold_ids)
    if len(gold) > k:
        raise ValueError(f"{len(gold)} gold entities do not fit a slate of size {k}")
    top = list(ranking[:k])
    have = {e for e, _ in top}
    missing = [e for e in sorted(gold) if e not in have]
    if missing:
        score_of = dict(ranking)
        unknown = [e for e in missing if e not in score_of]
        if unknown:
            raise ValueError(f"ranking does not cover gold entities {unknown}")
        drop = len(missing)
        kept: list[tuple[str, float]] = []
        for e, s in reversed(top):
            if drop > 0 and e not in gold:
                drop -= 1
                continue
            kept.append((e, s))
        kept.reverse()
        top = kept + [(e, score_of[e]) for e in missing]
        top.sort(key=lambda es: (-es[1], es[0]))
    entries = tuple(
        SlateEntry(entity_id=e, retrieval_score=s, is_gold=e in gold) for e, s in top
    )
    return CandidateSlate(passage=passage, entries=entries)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpanScores:
    """Start/end distributions over positions 1..|p|+1 and the rerank logit.

    start_probs[i] is the probability of position i+1; index 0 is CLS.
    """

    start_probs: np.ndarray
    end_probs: np.ndarray
    rerank_logit: float
    passage_len: int

    def p_span(self, s: int, t: int) -> float:
        return float(self.start_probs[s - 1] * self.end_probs[t - 1])


def reader_forward(
    params: ParamSet, composed: ComposedInput, passage_len: int | None = None
) -> SpanScores:
    """Encode one (passage, entity) pair and read off the span distributions.

    The softmax support is position 1 (CLS) plus the passage positions; all
    other positions carry zero probability mass by construction.
    """
    enc = neural.encode(params, "H", composed)
    n_p = composed.passage_len if passage_len is None else passage_len
    support = enc.matrix[:, : n_p + 1]  # columns for positions 1..|p|+1
    start_logits = params["w_start"] @ support
    end_logits = params["w_end"] @ support
    return SpanScores(
        start_probs=neural.stable_softmax(start_logits),
        end_probs=neural.stable_softmax(end_logits),
        rerank_logit=float(np.dot(params["w_rerank"], enc.col(1))),
        passage_len=n_p,
    )


def rerank_distribution(rerank_logits: Sequence[float]) -> np.ndarray:
    """Softmax over the K candidates' rerank logits."""
    logits = np.asarray(rerank_logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("rerank distribution needs at least one candidate")
    return neural.stable_softmax(logits)


def top_spans(
    scores: SpanScores,
    p: int,
    max_mention_len: int = DEFAULT_MAX_MENTION_LEN,
) -> list[tuple[int, int, float]]:
    """Up to p most probable mention spans, excluding anything no more
    probable than the CLS rejection span (1, 1).

    Candidate spans satisfy 2 <= s <= t <= |p|+1 and t - s + 1 <=
    max_mention_len; the CLS span itself is never emitted.  Returned spans are
    sorted by descending probability (ties by position).
    """
    if p < 1:
        raise ValueError(f"span count must be >= 1, got {p}")
    reject_p = scores.p_span(1, 1)
    n = scores.passage_len + 1
    candidates: list[tuple[float, int, int]] = []
    for s in range(2, n + 1):
        for t in range(s, min(s + max_mention_len - 1, n) + 1):
            candidates.append((scores.p_span(s, t), s, t))
    candidates.sort(key=lambda x: (-x[0], x[1], x[2]))
    out = []
    for prob, s, t in candidates[:p]:
        if prob > reject_p:
            out.append((s, t, prob))
    return out


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def reader_loss_from_logits(
    rerank_logits: np.ndarray,
    start_logits: list[np.ndarray],
    end_logits: list[np.ndarray],
    spans_per_candidate: Sequence[Sequence[tuple[int, int]]],
    gold_flags: Sequence[bool],
    variant: str = "sumlog",
    gate_span_terms: bool = False,
) -> float:
    """Loss for one slate, from raw logits.

    Rerank term: -log p_rerank for each gold candidate.  Span term, applied to
    every candidate (non-gold candidates carry the CLS span): "sumlog" sums
    -log p_span over the candidate's spans; "marginal" takes -log of the
    summed span probabilities.  gate_span_terms restricts the span term to
    gold candidates.
    """
    if variant not in READER_VARIANTS:
        raise ValueError(f"unknown reader loss variant {variant!r}")
    log_rerank = neural.log_softmax(rerank_logits)
    total = 0.0
    for k, spans in enumerate(spans_per_candidate):
        if gold_flags[k]:
            total -= float(log_rerank[k])
        if gate_span_terms and not gold_flags[k]:
            continue
        ls = neural.log_softmax(start_logits[k])
        le = neural.log_softmax(end_logits[k])
        if variant == "sumlog":
            for s, t in spans:
                total -= float(ls[s - 1] + le[t - 1])
        else:
            logps = [float(ls[s - 1] + le[t - 1]) for s, t in spans]
            total -= neural.logsumexp(np.array(logps))
    return total


def reader_loss(
    params: ParamSet,
    slate: CandidateSlate,
    gold_view: PassageGold,
    reader_inputs: Mapping[str, ComposedInput],
    variant: str = "sumlog",
    gate_span_terms: bool = False,
) -> float:
    """Per-passage reader loss from fresh forwards (training uses the
    gradient-carrying ReaderObjective instead)."""
    spans = [gold_view.spans_for(e.entity_id) for e in slate.entries]
    _validate_spans(spans, slate.passage)
    ex = ReaderExample(
        inputs=[reader_inputs[e.entity_id] for e in slate.entries],
        spans=spans,
        gold_flags=[e.entity_id in gold_view.entities for e in slate.entries],
        passage_len=len(slate.passage.tokens),
    )
    return ReaderObjective([ex], variant, gate_span_terms).loss(params)


def _validate_spans(spans_per_candidate, passage: Passage) -> None:
    hi = len(passage.tokens) + 1
    for spans in spans_per_candidate:
        for s, t in spans:
            if (s, t) != CLS_SPAN and not (2 <= s <= t <= hi):
                raise ValueError(f"gold span ({s}, {t}) outside softmax support [2, {hi}]")


@dataclass
class ReaderExample:
    """One passage's slate, fully composed for the joint encoder."""

    inputs: list[ComposedInput]  # one per candidate, slate order
    spans: list[tuple[tuple[int, int], ...]]  # gold spans or the CLS span
    gold_flags: list[bool]
    passage_len: int


class ReaderObjective:
    """Reader loss over a batch of passages; mean of per-passage losses."""

    def __init__(
        self,
        examples: Sequence[ReaderExample],
        variant: str = "sumlog",
        gate_span_terms: bool = False,
    ):
        if variant not in READER_VARIANTS:
            raise ValueError(f"unknown reader loss variant {variant!r}")
        self.examples = list(examples)
        self.variant = variant
        self.gate_span_terms = gate_span_terms

    def _example_forward(self, params: ParamSet, ex: ReaderExample):
        fwd = [neural.encode_with_cache(params, "H", inp) for inp in ex.inputs]
        sup = ex.passage_len + 1
        rerank_logits = np.array([float(np.dot(params["w_rerank"], y[0])) for y, _ in fwd])
        start_logits = [y[:sup] @ params["w_start"] for y, _ in fwd]
        end_logits = [y[:sup] @ params["w_end"] for y, _ in fwd]
        return fwd, rerank_logits, start_logits, end_logits

    def _example_loss(self, params: ParamSet, ex: ReaderExample) -> float:
        _, rerank_logits, start_logits, end_logits = self._example_forward(params, ex)
        return reader_loss_from_logits(
            rerank_logits,
            start_logits,
            end_logits,
            ex.spans,
            ex.gold_flags,
            self.variant,
            self.gate_span_terms,
        )

    def loss(self, params: ParamSet) -> float:
        if not self.examples:
            return 0.0
        return sum(self._example_loss(params, ex) for ex in self.examples) / len(
            self.examples
        )

    def loss_and_grad(self, params: ParamSet) -> tuple[float, dict[str, np.ndarray]]:
        grads = params.zero_grads()
        if not self.examples:
            return 0.0, grads
        total = 0.0
        inv = 1.0 / len(self.examples)
        w_start, w_end, w_rerank = params["w_start"], params["w_end"], params["w_rerank"]
        for ex in self.examples:
            fwd, rerank_logits, start_logits, end_logits = self._example_forward(params, ex)
            total += reader_loss_from_logits(
                rerank_logits,
                start_logits,
                end_logits,
                ex.spans,
                ex.gold_flags,
                self.variant,
                self.gate_span_terms,
            )
            sup = ex.passage_len + 1
            n_gold = sum(ex.gold_flags)
            # Rerank term: d/dlogit_j = (#gold) * p_j - 1(j gold)
            d_rerank = np.zeros(len(ex.inputs))
            if n_gold:
                p_rr = neural.stable_softmax(rerank_logits)
                d_rerank = n_gold * p_rr - np.array(ex.gold_flags, dtype=np.float64)
            for k, (y, cache) in enumerate(fwd):
                dy = np.zeros_like(y)
                skip_span = self.gate_span_terms and not ex.gold_flags[k]
                if not skip_span:
                    ps = neural.stable_softmax(start_logits[k])
                    pe = neural.stable_softmax(end_logits[k])
                    d_ls = np.zeros(sup)
                    d_le = np.zeros(sup)
                    spans = ex.spans[k]
                    if self.variant == "sumlog":
                        m = len(spans)
                        d_ls += m * ps
                        d_le += m * pe
                        for s, t in spans:
                            d_ls[s - 1] -= 1.0
                            d_le[t - 1] -= 1.0
                    else:
                        # L = -log sum_{(s,t)} ps[s] pe[t]
                        q = np.array([ps[s - 1] * pe[t - 1] for s, t in spans])
                        z = float(np.sum(q))
                        d_ls += ps
                        d_le += pe
                        for (s, t), qi in zip(spans, q):
                            d_ls[s - 1] -= qi / z
                            d_le[t - 1] -= qi / z
                    dy[:sup] += np.outer(d_ls, w_start) + np.outer(d_le, w_end)
                    grads["w_start"] += inv * (y[:sup].T @ d_ls)
                    grads["w_end"] += inv * (y[:sup].T @ d_le)
                if d_rerank[k] != 0.0:
                    dy[0] += d_rerank[k] * w_rerank
                    grads["w_rerank"] += inv * d_rerank[k] * y[0]
                dy *= inv
                neural.encode_backward(params, "H", cache, dy, grads)
        return total * inv, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _mix_random_candidates(rng, ranking, gold_ids, k, hard_fraction, all_ids):
    """Replace a fraction of the retrieved non-gold top-k with uniformly
    drawn entities, keeping the rank-score structure build_training_slate
    expects."""
    gold = set(gold_ids)
    top = [e for e, _ in ranking[:k]]
    non_gold = [e for e in top if e not in gold]
    n_keep_hard = int(round(hard_fraction * len(non_gold)))
    drop = set(non_gold[n_keep_hard:])
    kept = [(e, s) for e, s in ranking[:k] if e not in drop]
    exclude = {e for e, _ in kept} | gold
    pool = [e for e in all_ids if e not in exclude]
    n_random = min(len(drop), len(pool))
    picks = rng.choice(len(pool), size=n_random, replace=False) if n_random else []
    floor = min(s for _, s in kept) if kept else 0.0
    randoms = [(pool[int(i)], floor - 1.0 - j) for j, i in enumerate(picks)]
    score_of = dict(ranking)
    tail = [(e, s) for e, s in ranking[k:]]
    return kept + randoms + tail


@dataclass
class ReaderTrainConfig:
    epochs: int = 4
    lr: float = 2e-3
    batch_size: int = 2
    k_train: int = 64
    variant: str = "sumlog"
    gate_span_terms: bool = False
    warmup_prop: float = 0.06
    seed: int = 0
    # Freeze the embedding tables so reader training only shapes the joint
    # block and readout vectors (useful when starting from trained weights).
    freeze_embeddings: bool = False
    # Start the joint block from the passage-encoder block of the same
    # ParamSet instead of its random initialization.
    warm_start_from_passage_encoder: bool = False
    # Skip passages without gold mentions (their slates carry only
    # CLS-rejection supervision, which the gold-bearing passages already
    # provide in quantity).
    gold_passages_only: bool = True
    # Fraction of non-gold training candidates taken from the retriever's
    # top ranks; the rest are drawn uniformly from the KB.  Mixing eases the
    # rejection task early in training, mirroring the retriever's own
    # random/hard negative mix.
    hard_fraction: float = 1.0


def locate_accuracy(params: ParamSet, bundle, max_golds: int = 400) -> float:
    """Fraction of gold (passage, entity) pairs whose argmax span equals the
    gold span and beats the CLS rejection span.  Cheap epoch-selection metric."""
    hits = 0
    total = 0
    for _, passage, _, pg in bundle.iter_passages():
        for eid in pg.entities:
            scores = reader_forward(params, bundle.reader_input(passage, eid))
            s, t = pg.spans_for(eid)[0]
            best_s = int(np.argmax(scores.start_probs[1:])) + 2
            best_t = int(np.argmax(scores.end_probs[1:])) + 2
            hit = (best_s, best_t) == (s, t) and scores.p_span(s, t) > scores.p_span(1, 1)
            hits += hit
            total += 1
            if total >= max_golds:
                return hits / total
    return hits / total if total else 0.0


def train_reader(
    params: ParamSet,
    bundle,
    cfg: ReaderTrainConfig,
    index,
    retriever_params: ParamSet | None = None,
    val_bundle=None,
    diverged_path: str | None = None,
) -> tuple[ParamSet, list[dict]]:
    """Train the joint encoder and readout vectors on frozen-retriever slates.

    Candidate slates are built once, from the supplied index and the retriever
    parameters it was computed from (gold entities forced in), and reused
    across epochs.  The reader ParamSet itself is independent of the
    retriever's; pass a freshly initialized one.  With a validation bundle,
    the epoch-end parameters with the best held-out span-locate accuracy are
    kept.
    """
    from . import retriever  # local import to avoid a module cycle

    rng = np.random.default_rng(cfg.seed)
    slate_params = retriever_params if retriever_params is not None else params
    if cfg.warm_start_from_passage_encoder:
        for b in range(params.config.n_blocks):
            for p_name, h_name in zip(
                neural.block_param_names("P", b), neural.block_param_names("H", b)
            ):
                params.arrays[h_name][:] = params.arrays[p_name]
    k = min(cfg.k_train, len(bundle.kb))
    all_ids = bundle.kb.ids()
    examples: list[ReaderExample] = []
    for _, passage, pinp, pg in bundle.iter_passages():
        if cfg.gold_passages_only and not pg.entities:
            continue
        # A passage with more gold entities than k gets a gold-only slate.
        k_eff = min(max(k, len(pg.entities)), len(bundle.kb))
        qv = retriever.passage_vec(slate_params, pinp)
        ranking = retriever.top_k(index, qv, len(index))
        if cfg.hard_fraction < 1.0:
            ranking = _mix_random_candidates(
                rng, ranking, pg.entities, k_eff, cfg.hard_fraction, all_ids
            )
        slate = build_training_slate(passage, ranking, pg.entities, k_eff)
        inputs = [bundle.reader_input(passage, e.entity_id) for e in slate.entries]
        spans = [pg.spans_for(e.entity_id) for e in slate.entries]
        _validate_spans(spans, passage)
        examples.append(
            ReaderExample(
                inputs=inputs,
                spans=spans,
                gold_flags=[e.is_gold for e in slate.entries],
                passage_len=len(passage.tokens),
            )
        )
    if not examples:
        raise ValueError("no passages to train the reader on")
    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    state = AdamState.zeros(params)
    log: list[dict] = []
    step = 0
    last_good = params.copy()
    best: tuple | None = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        epoch_losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[b : b + cfg.batch_size]]
            objective = ReaderObjective(batch, cfg.variant, cfg.gate_span_terms)
            try:
                loss, grads = neural.loss_and_grad(params, objective)
                if cfg.freeze_embeddings:
                    grads["tok_emb"][:] = 0.0
                    grads["pos_emb"][:] = 0.0
                last_good = params.copy()
                lr = neural.lr_at(step, total_steps, cfg.lr, cfg.warmup_prop)
                neural.optimizer_step(state, params, grads, lr)
            except neural.NonFiniteError as exc:
                if diverged_path:
                    neural.checkpoint_save(diverged_path, last_good)
                raise retriever.TrainingDiverged(
                    f"non-finite reader loss at epoch {epoch} step {step}: {exc}"
                ) from exc
            epoch_losses.append(loss)
            step += 1
        entry = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses))}
        if val_bundle is not None:
            entry["val_locate"] = locate_accuracy(params, val_bundle)
            if best is None or entry["val_locate"] >= best[0]:
                best = (entry["val_locate"], params.copy(), epoch)
        log.append(entry)
        logger.info("reader epoch %d: %s", epoch, entry)
    if val_bundle is not None and best is not None:
        _, best_params, best_epoch = best
        for name in params.names():
            params.arrays[name][:] = best_params[name]
        log.append({"selected_epoch": best_epoch})
    return params, log
