"""Seeded generator of synthetic knowledge bases and annotated corpora.

Every entity owns a unique title token, a unique primary signature token, a
set of category-pool signature tokens, and one or more alias surface forms.
Documents plant alias mentions surrounded by signature tokens of the owning
entity (the contextual disambiguation signal) and start with a topic token
correlated with the document's dominant entity category.  Alias forms never
appear in entity descriptions, so lexical matching alone cannot resolve a
mention; descriptions carry the title and signature tokens only.

Ambiguity is controlled by sharing alias forms between entity pairs: with
ambiguity_rate a, a fraction a of all alias forms is owned by two entities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .kbstore import KB, CharMention, Document, Entity

SIGS_PER_ENTITY = 8  # category-pool signature tokens per entity (plus primary)
MIN_BACKGROUND = 50


@dataclass(frozen=True)
class GenConfig:
    n_entities: int
    vocab_size: int
    aliases_per_entity: int = 2
    ambiguity_rate: float = 0.1
    mentions_per_doc: int = 5
    n_docs: int = 50
    doc_len_min: int = 40
    doc_len_max: int = 80
    seed: int = 0
    n_categories: int = 10
    surround_lo: int = 2  # signature tokens planted around each mention
    surround_hi: int = 4  # set both to 0 to switch the signal off
    desc_sig_lo: int = 5
    desc_sig_hi: int = 15
    # Signature-strength knob: tokens per category pool.  Large pools give
    # each entity a near-unique signature set (strong contextual signal);
    # small pools force heavy sharing (weak signal).  0 picks a pool three
    # times the per-category entity count, making signatures distinctive.
    sig_pool_size: int = 0
    # Whether descriptions mention the entity's own surface forms (as real
    # encyclopedia entries do).  Off, surface forms appear only in documents,
    # so lexical rankers cannot exploit them.
    alias_in_desc: bool = True

    def effective_pool_size(self) -> int:
        if self.sig_pool_size > 0:
            return max(self.sig_pool_size, SIGS_PER_ENTITY)
        per_cat = -(-self.n_entities // self.n_categories)  # ceil
        return max(SIGS_PER_ENTITY, 3 * per_cat)

    def validate(self) -> None:
        if self.n_entities < 1 or self.n_docs < 1 or self.mentions_per_doc < 1:
            raise ValueError("all counts must be >= 1")
        if not (1 <= self.aliases_per_entity <= 3):
            raise ValueError("aliases_per_entity must be between 1 and 3")
        if not (0.0 <= self.ambiguity_rate <= 1.0):
            raise ValueError("ambiguity_rate must lie in [0, 1]")
        if not (1 <= self.doc_len_min <= self.doc_len_max):
            raise ValueError("document length range is invalid")
        if self.surround_lo > self.surround_hi or self.surround_lo < 0:
            raise ValueError("surround range is invalid")
        if not (1 <= self.desc_sig_lo <= self.desc_sig_hi):
            raise ValueError("description signature range is invalid")
        if self.n_categories < 1:
            raise ValueError("n_categories must be >= 1")


@dataclass
class _Plan:
    """Deterministic generation plan shared by KB and document generation."""

    entities: list[Entity]
    aliases: dict[str, list[str]]  # entity id -> alias tokens
    signatures: dict[str, list[str]]  # entity id -> pool signature tokens
    primary: dict[str, str]  # entity id -> unique signature token
    category: dict[str, int]
    by_category: list[list[str]]
    topic_tokens: list[str]
    background: list[str]


def _required_vocab(cfg: GenConfig) -> tuple[int, int]:
    n_alias_shared = int(
        round(
            cfg.ambiguity_rate
            * cfg.n_entities
            * cfg.aliases_per_entity
            / (1.0 + cfg.ambiguity_rate)
        )
    )
    n_alias_forms = cfg.n_entities * cfg.aliases_per_entity - n_alias_shared
    needed = (
        cfg.n_categories
        + cfg.n_entities  # primary signature tokens
        + cfg.n_categories * cfg.effective_pool_size()
        + n_alias_forms
        + MIN_BACKGROUND
    )
    return needed, n_alias_shared


def _plan(cfg: GenConfig) -> _Plan:
    cfg.validate()
    needed, n_shared = _required_vocab(cfg)
    if cfg.vocab_size < needed:
        raise ValueError(
            f"vocab_size={cfg.vocab_size} too small to give unique signatures and "
            f"aliases: need at least {needed}"
        )
    rng = np.random.default_rng(cfg.seed)

    pool_size = cfg.effective_pool_size()
    topic_tokens = [f"topic{c}" for c in range(cfg.n_categories)]
    pools = [
        [f"cat{c}sig{j}" for j in range(pool_size)]
        for c in range(cfg.n_categories)
    ]
    n_background = cfg.vocab_size - needed + MIN_BACKGROUND
    background = [f"w{j}" for j in range(n_background)]

    entities: list[Entity] = []
    category: dict[str, int] = {}
    primary: dict[str, str] = {}
    signatures: dict[str, list[str]] = {}
    by_category: list[list[str]] = [[] for _ in range(cfg.n_categories)]
    ids = [f"E{i:05d}" for i in range(cfg.n_entities)]
    for i, eid in enumerate(ids):
        c = i % cfg.n_categories
        category[eid] = c
        by_category[c].append(eid)
        primary[eid] = f"sig{i:05d}"
        picks = rng.choice(pool_size, size=SIGS_PER_ENTITY, replace=False)
        signatures[eid] = [pools[c][j] for j in sorted(picks)]

    # Alias plan: n_shared forms owned by two entities each, the rest unique.
    slots = [(eid, j) for eid in ids for j in range(cfg.aliases_per_entity)]
    aliases: dict[str, list[str]] = {eid: [None] * cfg.aliases_per_entity for eid in ids}
    n_shared = min(n_shared, len(slots) // 2)
    order = rng.permutation(len(slots))
    form = 0
    for s in range(n_shared):
        a, b = slots[order[2 * s]], slots[order[2 * s + 1]]
        tok = f"name{form}"
        form += 1
        aliases[a[0]][a[1]] = tok
        aliases[b[0]][b[1]] = tok
    for idx in order[2 * n_shared :]:
        eid, j = slots[idx]
        aliases[eid][j] = f"name{form}"
        form += 1

    for i, eid in enumerate(ids):
        n_sig = int(rng.integers(cfg.desc_sig_lo, cfg.desc_sig_hi + 1))
        extra = rng.integers(0, len(signatures[eid]), size=max(0, n_sig - 1))
        desc_sigs = [primary[eid]] + [signatures[eid][int(j)] for j in extra]
        desc_parts = (aliases[eid] if cfg.alias_in_desc else []) + desc_sigs
        entities.append(
            Entity(
                id=eid,
                title=f"ent{i:05d}",
                description=" ".join(desc_parts),
            )
        )
    return _Plan(
        entities=entities,
        aliases=aliases,
        signatures=signatures,
        primary=primary,
        category=category,
        by_category=by_category,
        topic_tokens=topic_tokens,
        background=background,
    )


def generate_kb(cfg: GenConfig) -> KB:
    """Deterministic synthetic KB; identical configs give identical KBs."""
    return KB(_plan(cfg).entities)


def alias_ownership(cfg: GenConfig) -> dict[str, list[str]]:
    """Map alias form -> owning entity ids (diagnostic, used by tests)."""
    plan = _plan(cfg)
    owners: dict[str, list[str]] = {}
    for eid, forms in plan.aliases.items():
        for tok in forms:
            owners.setdefault(tok, []).append(eid)
    return owners


def generate_documents(kb: KB, cfg: GenConfig, n_docs: int | None = None) -> list[Document]:
    """Generate annotated documents over the KB produced by the same config.

    Each document starts with the topic token of its dominant category, mixes
    background tokens with exactly mentions_per_doc planted mentions, and
    records gold character offsets aligned to token boundaries.
    """
    plan = _plan(cfg)
    n_docs = cfg.n_docs if n_docs is None else n_docs
    rng = np.random.default_rng(cfg.seed + 1)
    docs: list[Document] = []
    for di in range(n_docs):
        cat = int(rng.integers(cfg.n_categories))
        blocks = []
        total_block = 0
        for _ in range(cfg.mentions_per_doc):
            if rng.random() < 0.8 and plan.by_category[cat]:
                pool = plan.by_category[cat]
            else:
                pool = [e.id for e in plan.entities]
            eid = pool[int(rng.integers(len(pool)))]
            alias = plan.aliases[eid][int(rng.integers(len(plan.aliases[eid])))]
            if cfg.surround_hi > 0:
                n_sur = int(rng.integers(cfg.surround_lo, cfg.surround_hi + 1))
            else:
                n_sur = 0
            # Pool signatures only: the unique primary signature lives in the
            # description alone, so the alias is the one entity-unique token
            # in the passage.
            sig_pool = plan.signatures[eid]
            picks = rng.integers(0, len(sig_pool), size=n_sur)
            sur = [sig_pool[int(j)] for j in picks]
            n_before = int(rng.integers(0, n_sur + 1))
            blocks.append((sur[:n_before], alias, sur[n_before:], eid))
            total_block += n_sur + 1
        target_len = int(rng.integers(cfg.doc_len_min, cfg.doc_len_max + 1))
        n_fill = max(0, target_len - 1 - total_block)
        fill_ids = rng.integers(0, len(plan.background), size=n_fill)
        filler = [plan.background[int(j)] for j in fill_ids]
        gaps = sorted(int(g) for g in rng.integers(0, n_fill + 1, size=len(blocks)))

        tokens: list[str] = [plan.topic_tokens[cat]]
        mention_sites: list[tuple[int, str]] = []  # (token index of alias, entity)
        fi = 0
        for gap, (before, alias, after, eid) in zip(gaps, blocks):
            tokens.extend(filler[fi:gap])
            fi = gap
            tokens.extend(before)
            mention_sites.append((len(tokens), eid))
            tokens.append(alias)
            tokens.extend(after)
        tokens.extend(filler[fi:])

        text_parts: list[str] = []
        char_pos = 0
        starts: list[int] = []
        for tok in tokens:
            if text_parts:
                char_pos += 1  # joining space
            starts.append(char_pos)
            text_parts.append(tok)
            char_pos += len(tok)
        text = " ".join(text_parts)
        gold = []
        for tok_idx, eid in mention_sites:
            start = starts[tok_idx]
            end = start + len(tokens[tok_idx])
            gold.append(CharMention(char_start=start, char_end=end, entity_id=eid))
        docs.append(Document(id=f"D{di:05d}", text=text, gold=tuple(gold)))
    return docs


def generate_validation_documents(
    kb: KB, cfg: GenConfig, n_docs: int | None = None
) -> list[Document]:
    """A held-out split: same plan, independent document stream."""
    n = n_docs if n_docs is not None else max(2, cfg.n_docs // 4)
    val_cfg = replace(cfg, seed=cfg.seed + 7919)
    docs = generate_documents(kb, val_cfg, n_docs=n)
    return [replace(d, id="V" + d.id[1:]) for d in docs]


def write_kb(path: str, kb: KB) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in kb.entities:
            fh.write(
                json.dumps(
                    {"id": e.id, "title": e.title, "description": e.description},
                    sort_keys=True,
                )
                + "\n"
            )


def write_documents(path: str, docs: Sequence[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(
                json.dumps(
                    {
                        "id": d.id,
                        "text": d.text,
                        "gold": [
                            {"start": g.char_start, "end": g.char_end, "entity": g.entity_id}
                            for g in d.gold
                        ],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
