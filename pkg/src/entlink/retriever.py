"""Dual-encoder entity retrieval.

Scoring, multi-label NCE training with mixed random/hard negatives, an exact
top-K inner-product index, recall evaluation, and an Okapi BM25 lexical
baseline.

Score consistency contract: every retrieval score in this module is produced
by the single helper ip(entity_vec, passage_vec), so a score read from the
index equals the score recomputed from the encoders bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import neural, textcore
from .kbstore import KB
from .neural import AdamState, ParamSet, logsumexp
from .textcore import ComposedInput, tokenize

logger = logging.getLogger(__name__)

NCE_VARIANTS = ("multilabel", "naive", "marginal")


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; the last finite state was checkpointed."""


def ip(a: np.ndarray, b: np.ndarray) -> float:
    """The one inner-product code path used for all retrieval scores."""
    return float(np.dot(a, b))


def passage_vec(params: ParamSet, composed: ComposedInput) -> np.ndarray:
    return neural.cls_vector(params, "P", composed)


def entity_vec(params: ParamSet, composed: ComposedInput) -> np.ndarray:
    return neural.cls_vector(params, "E", composed)


def score_retr(params: ParamSet, passage_inp: ComposedInput, entity_inp: ComposedInput) -> float:
    """Retrieval affinity: dot product of the two CLS embeddings."""
    return ip(entity_vec(params, entity_inp), passage_vec(params, passage_inp))


# ---------------------------------------------------------------------------
# Exact top-K index
# ---------------------------------------------------------------------------

INDEX_MAGIC = b"ENTQAIX1"


@dataclass
class EntityIndex:
    """Dense entity embeddings with exact exhaustive top-K search.

    rows[i] is the CLS embedding of entity ids[i]; fingerprint identifies the
    parameters the rows were computed from, so staleness is detectable.
    """

    ids: tuple[str, ...]
    rows: np.ndarray  # (n, d) float64
    fingerprint: str
    _row_of: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._row_of:
            self._row_of = {e: i for i, e in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, entity_id: str) -> np.ndarray:
        return self.rows[self._row_of[entity_id]]

    def score(self, entity_id: str, query_vec: np.ndarray) -> float:
        return ip(self.rows[self._row_of[entity_id]], query_vec)

    def all_scores(self, query_vec: np.ndarray) -> np.ndarray:
        out = np.empty(len(self.ids))
        for i in range(len(self.ids)):
            out[i] = ip(self.rows[i], query_vec)
        return out


def params_fingerprint(params: ParamSet) -> str:
    """Checksum of the arrays the entity embeddings depend on."""
    h = hashlib.sha256()
    h.update(json.dumps(params.config.to_dict(), sort_keys=True).encode())
    for name in sorted(params.names()):
        if name in ("tok_emb", "pos_emb") or name.startswith("E."):
            h.update(name.encode())
            h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


def build_index(
    params: ParamSet,
    entity_inputs: Sequence[tuple[str, ComposedInput]],
    threads: int = 1,
) -> EntityIndex:
    """Precompute one embedding row per entity, in the given order."""
    ids = tuple(eid for eid, _ in entity_inputs)
    d = params.config.d
    rows = np.empty((len(ids), d))

    def fill(span: range) -> None:
        for i in span:
            rows[i] = entity_vec(params, entity_inputs[i][1])

    if threads > 1 and len(ids) > 64:
        chunk = math.ceil(len(ids) / threads)
        spans = [range(s, min(s + chunk, len(ids))) for s in range(0, len(ids), chunk)]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, spans))
    else:
        fill(range(len(ids)))
    return EntityIndex(ids=ids, rows=rows, fingerprint=params_fingerprint(params))


def top_k(index: EntityIndex, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by inner product, descending; ties broken by entity id."""
    n = len(index)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of indexed entities ({n})")
    scores = index.all_scores(query_vec)
    order = sorted(range(n), key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], float(scores[i])) for i in order[:k]]


def save_index(path: str, index: EntityIndex) -> None:
    manifest = {
        "d": int(index.rows.shape[1]),
        "ids": list(index.ids),
        "fingerprint": index.fingerprint,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(index.rows, dtype="<f4").tobytes())


def load_index(path: str) -> EntityIndex:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != INDEX_MAGIC:
            raise ValueError(f"{path}: bad index magic {magic!r}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        n, d = len(manifest["ids"]), manifest["d"]
        raw = fh.read(4 * n * d)
        if len(raw) != 4 * n * d:
            raise ValueError(f"{path}: truncated index payload")
        rows = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    return EntityIndex(ids=tuple(manifest["ids"]), rows=rows, fingerprint=manifest["fingerprint"])


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NegativeSet:
    """Sampled negatives for one passage, tagged by provenance."""

    ids: tuple[str, ...]
    provenance: tuple[str, ...]  # each "random" or "hard"

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_hard(self) -> int:
        return sum(1 for p in self.provenance if p == "hard")


def sample_negatives(
    rng: np.random.Generator,
    entity_ids: Sequence[str],
    gold_ids: Iterable[str],
    n_neg: int,
    index: EntityIndex | None = None,
    query_vec: np.ndarray | None = None,
    hard_fraction: float = 0.1,
) -> NegativeSet:
    """Draw n_neg negatives from entity_ids excluding every gold entity.

    When an index and query vector are supplied, ceil(hard_fraction * n_neg)
    negatives are the top-scoring non-gold entities under the current model;
    the rest are drawn uniformly without replacement.  No duplicates.
    """
    gold = set(gold_ids)
    pool = [e for e in entity_ids if e not in gold]
    if n_neg > len(pool):
        raise ValueError(
            f"cannot draw {n_neg} negatives from {len(pool)} non-gold entities"
        )
    hard: list[str] = []
    if index is not None and query_vec is not None and hard_fraction > 0:
        n_hard = min(n_neg, math.ceil(hard_fraction * n_neg))
        for eid, _ in top_k(index, query_vec, len(index)):
            if eid in gold:
                continue
            hard.append(eid)
            if len(hard) == n_hard:
                break
    taken = set(hard)
    rest = [e for e in pool if e not in taken]
    n_random = n_neg - len(hard)
    picks = rng.choice(len(rest), size=n_random, replace=False) if n_random else []
    randoms = [rest[i] for i in picks]
    ids = tuple(hard + randoms)
    assert not (set(ids) & gold), "gold entity leaked into negatives"
    return NegativeSet(ids=ids, provenance=("hard",) * len(hard) + ("random",) * len(randoms))


# ---------------------------------------------------------------------------
# NCE objective
# ---------------------------------------------------------------------------


def nce_from_scores(
    gold_scores: Sequence[float], neg_scores: Sequence[float], variant: str = "multilabel"
) -> float:
    """Contrastive loss given raw scores (max-subtraction stabilized).

    multilabel: one independent softmax instance per gold entity, with the
    other golds excluded from the denominator.  naive: the other golds are
    included in every denominator.  marginal: negative log of the summed gold
    probabilities under one joint softmax.  Empty gold set contributes 0.
    """
    if variant not in NCE_VARIANTS:
        raise ValueError(f"unknown NCE variant {variant!r}")
    gold = np.asarray(gold_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if gold.size == 0:
        return 0.0
    if variant == "multilabel":
        total = 0.0
        for s in gold:
            total += logsumexp(np.concatenate(([s], neg))) - s
        return total
    allscores = np.concatenate((gold, neg))
    if variant == "naive":
        denom = logsumexp(allscores)
        return float(np.sum(denom - gold))
    # marginal
    return logsumexp(allscores) - logsumexp(gold)


def _nce_score_grads(
    gold: np.ndarray, neg: np.ndarray, variant: str
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and its derivative with respect to each gold/negative score."""
    d_gold = np.zeros_like(gold)
    d_neg = np.zeros_like(neg)
    if gold.size == 0:
        return 0.0, d_gold, d_neg
    if variant == "multilabel":
        total = 0.0
        for i, s in enumerate(gold):
            inst = np.concatenate(([s], neg))
            p = neural.stable_softmax(inst)
            total += logsumexp(inst) - s
            d_gold[i] += p[0] - 1.0
            d_neg += p[1:]
        return total, d_gold, d_neg
    allscores = np.concatenate((gold, neg))
    p = neural.stable_softmax(allscores)
    if variant == "naive":
        g = gold.size
        loss = float(np.sum(logsumexp(allscores) - gold))
        d_gold = g * p[: gold.size] - 1.0
        d_neg = g * p[gold.size :]
        return loss, d_gold, d_neg
    # marginal
    loss = logsumexp(allscores) - logsumexp(gold)
    p_gold_only = neural.stable_softmax(gold)
    d_gold = p[: gold.size] - p_gold_only
    d_neg = p[gold.size :].copy()
    return loss, d_gold, d_neg


def nce_loss(
    params: ParamSet,
    passage_inp: ComposedInput,
    gold_inps: Sequence[ComposedInput],
    neg_inps: Sequence[ComposedInput],
    variant: str = "multilabel",
) -> float:
    """Per-passage NCE loss computed from fresh encoder forwards."""
    p_vec = passage_vec(params, passage_inp)
    gold = [ip(entity_vec(params, e), p_vec) for e in gold_inps]
    neg = [ip(entity_vec(params, e), p_vec) for e in neg_inps]
    return nce_from_scores(gold, neg, variant)


@dataclass
class RetrieverExample:
    passage: ComposedInput
    gold: list[ComposedInput]
    negatives: list[ComposedInput]


class RetrieverNCEObjective:
    """NCE over a batch of passages; loss is the mean of per-passage losses."""

    def __init__(self, examples: Sequence[RetrieverExample], variant: str = "multilabel"):
        if variant not in NCE_VARIANTS:
            raise ValueError(f"unknown NCE variant {variant!r}")
        self.examples = list(examples)
        self.variant = variant

    def loss(self, params: ParamSet) -> float:
        if not self.examples:
            return 0.0
        total = 0.0
        for ex in self.examples:
            total += nce_loss(params, ex.passage, ex.gold, ex.negatives, self.variant)
        return total / len(self.examples)

    def loss_and_grad(self, params: ParamSet) -> tuple[float, dict[str, np.ndarray]]:
        grads = params.zero_grads()
        if not self.examples:
            return 0.0, grads
        total = 0.0
        inv = 1.0 / len(self.examples)
        for ex in self.examples:
            py, pcache = neural.encode_with_cache(params, "P", ex.passage)
            p_vec = py[0]
            e_fwd = [neural.encode_with_cache(params, "E", e) for e in ex.gold + ex.negatives]
            vecs = [y[0] for y, _ in e_fwd]
            gold = np.array([ip(v, p_vec) for v in vecs[: len(ex.gold)]])
            neg = np.array([ip(v, p_vec) for v in vecs[len(ex.gold) :]])
            loss, d_gold, d_neg = _nce_score_grads(gold, neg, self.variant)
            total += loss
            d_scores = np.concatenate((d_gold, d_neg)) * inv
            d_pvec = np.zeros_like(p_vec)
            for ds, v, (y, cache) in zip(d_scores, vecs, e_fwd):
                d_pvec += ds * v
                dy = np.zeros_like(y)
                dy[0] = ds * p_vec
                neural.encode_backward(params, "E", cache, dy, grads)
            dpy = np.zeros_like(py)
            dpy[0] = d_pvec
            neural.encode_backward(params, "P", pcache, dpy, grads)
        return total * inv, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RetrieverTrainConfig:
    epochs: int = 4
    lr: float = 1e-2
    batch_size: int = 4
    n_neg: int = 64
    hard_negatives: bool = True
    hard_fraction: float = 0.1
    variant: str = "multilabel"
    eval_k: int = 64
    warmup_prop: float = 0.06
    seed: int = 0
    # When a validation bundle is supplied, keep the epoch-end parameters
    # with the best validation recall instead of the last ones.
    keep_best: bool = True


def train_retriever(
    params: ParamSet,
    bundle,
    cfg: RetrieverTrainConfig,
    val_bundle=None,
    diverged_path: str | None = None,
) -> tuple[ParamSet, list[dict]]:
    """Epochs of passage-level NCE with negatives resampled each epoch.

    Hard negatives are mined from an index rebuilt at the start of every
    epoch.  Returns the trained parameters and a per-epoch log of mean loss
    and validation recall.  On a non-finite loss the last finite parameters
    are checkpointed to diverged_path (when given) and TrainingDiverged is
    raised.
    """
    rng = np.random.default_rng(cfg.seed)
    train_items = [
        (passage_inp, pg)
        for _, _, passage_inp, pg in bundle.iter_passages()
        if pg.entities
    ]
    if not train_items:
        raise ValueError("no training passages with gold entities")
    n_neg = min(cfg.n_neg, len(bundle.kb) - max(len(pg.entities) for _, pg in train_items))
    if n_neg < 1:
        raise ValueError("knowledge base too small for any negatives")
    steps_per_epoch = math.ceil(len(train_items) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    state = AdamState.zeros(params)
    log: list[dict] = []
    entity_ids = bundle.kb.ids()
    step = 0
    last_good = params.copy()
    best: tuple | None = None
    for epoch in range(cfg.epochs):
        index = build_index(params, bundle.entity_inputs) if cfg.hard_negatives else None
        examples = []
        for pinp, pg in train_items:
            qv = passage_vec(params, pinp) if index is not None else None
            negs = sample_negatives(
                rng,
                entity_ids,
                pg.entities,
                n_neg,
                index=index,
                query_vec=qv,
                hard_fraction=cfg.hard_fraction if cfg.hard_negatives else 0.0,
            )
            assert not (set(negs.ids) & set(pg.entities))
            examples.append(
                RetrieverExample(
                    passage=pinp,
                    gold=[bundle.entity_input(e) for e in pg.entities],
                    negatives=[bundle.entity_input(e) for e in negs.ids],
                )
            )
        order = rng.permutation(len(examples))
        epoch_losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[b : b + cfg.batch_size]]
            objective = RetrieverNCEObjective(batch, cfg.variant)
            try:
                loss, grads = neural.loss_and_grad(params, objective)
                last_good = params.copy()
                lr = neural.lr_at(step, total_steps, cfg.lr, cfg.warmup_prop)
                neural.optimizer_step(state, params, grads, lr)
            except neural.NonFiniteError as exc:
                if diverged_path:
                    neural.checkpoint_save(diverged_path, last_good)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: {exc}"
                ) from exc
            epoch_losses.append(loss)
            step += 1
        entry = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses))}
        if val_bundle is not None:
            val_index = build_index(params, bundle.entity_inputs)
            entry["val_recall"] = recall_at_k(
                model_rank_fn(params, val_index),
                val_bundle,
                min(cfg.eval_k, len(bundle.kb)),
            )
            if cfg.keep_best and (best is None or entry["val_recall"] >= best[0]):
                best = (entry["val_recall"], params.copy(), epoch)
        log.append(entry)
        logger.info("retriever epoch %d: %s", epoch, entry)
    if val_bundle is not None and cfg.keep_best and best is not None:
        _, best_params, best_epoch = best
        for name in params.names():
            params.arrays[name][:] = best_params[name]
        log.append({"selected_epoch": best_epoch})
    return params, log


# ---------------------------------------------------------------------------
# Recall evaluation
# ---------------------------------------------------------------------------


def model_rank_fn(params: ParamSet, index: EntityIndex) -> Callable:
    """Ranker closure: passage input -> top-k entity ids under the model."""

    def rank(passage_inp: ComposedInput, k: int) -> list[str]:
        return [e for e, _ in top_k(index, passage_vec(params, passage_inp), k)]

    return rank


def recall_at_k(rank_fn: Callable, bundle, k: int, level: str = "passage") -> float:
    """Micro recall over (passage, gold entity) pairs, or the document-level
    variant where a hit means the entity appears in the union of the
    document's per-passage top-k lists."""
    if level not in ("passage", "document"):
        raise ValueError(f"unknown recall level {level!r}")
    hits = 0
    total = 0
    if level == "passage":
        for _, _, pinp, pg in bundle.iter_passages():
            if not pg.entities:
                continue
            top = set(rank_fn(pinp, k))
            for e in pg.entities:
                total += 1
                hits += e in top
    else:
        for dv in bundle.docs:
            gold_union: set[str] = set()
            top_union: set[str] = set()
            for pinp, pg in zip(dv.retriever_inputs, dv.gold_views):
                top_union |= set(rank_fn(pinp, k))
                gold_union |= set(pg.entities)
            for e in sorted(gold_union):
                total += 1
                hits += e in top_union
    if total == 0:
        raise ValueError("empty evaluation set: no (passage, gold entity) pairs")
    return hits / total


# ---------------------------------------------------------------------------
# BM25 baseline
# ---------------------------------------------------------------------------


class BM25Index:
    """Okapi BM25 over title+description as the entity document.

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)), which is always positive.
    """

    def __init__(self, kb: KB, k1: float = 1.2, b: float = 0.75):
        if len(kb) == 0:
            raise ValueError("BM25 needs a nonempty knowledge base")
        self.k1 = k1
        self.b = b
        self.ids = kb.ids()
        self.term_freqs: list[Counter[str]] = []
        self.doc_lens: list[int] = []
        df: Counter[str] = Counter()
        for e in kb.entities:
            toks, _ = tokenize(e.title + " " + e.description)
            tf = Counter(toks)
            self.term_freqs.append(tf)
            self.doc_lens.append(len(toks))
            df.update(tf.keys())
        n = len(kb)
        self.avgdl = sum(self.doc_lens) / n if n else 0.0
        self.idf = {t: math.log(1.0 + (n - c + 0.5) / (c + 0.5)) for t, c in df.items()}

    def scores(self, query_tokens: Sequence[str]) -> np.ndarray:
        out = np.zeros(len(self.ids))
        if self.avgdl == 0:
            return out
        for i, tf in enumerate(self.term_freqs):
            norm = self.k1 * (1.0 - self.b + self.b * self.doc_lens[i] / self.avgdl)
            s = 0.0
            for t in query_tokens:
                f = tf.get(t)
                if not f:
                    continue
                s += self.idf[t] * f * (self.k1 + 1.0) / (f + norm)
            out[i] = s
        return out

    def rank(self, query_tokens: Sequence[str]) -> list[tuple[str, float]]:
        scores = self.scores(query_tokens)
        order = sorted(range(len(self.ids)), key=lambda i: (-scores[i], self.ids[i]))
        return [(self.ids[i], float(scores[i])) for i in order]


def bm25_rank(
    query_tokens: Sequence[str], kb: KB, k1: float = 1.2, b: float = 0.75
) -> list[tuple[str, float]]:
    """Rank all entities for one query; build a BM25Index directly for bulk use."""
    return BM25Index(kb, k1=k1, b=b).rank(query_tokens)


def bm25_rank_fn(bm25: BM25Index, vocab: textcore.Vocab) -> Callable:
    """Ranker closure matching model_rank_fn, backed by BM25 over the KB."""

    def rank(passage_inp: ComposedInput, k: int) -> list[str]:
        lo, hi = passage_inp.span_lo, passage_inp.span_hi
        toks = [vocab.decode(i) for i in passage_inp.ids[lo - 1 : hi]]
        return [e for e, _ in bm25.rank(toks)[:k]]

    return rank
