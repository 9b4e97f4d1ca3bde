"""Finite-difference verification harness for every objective in the repo.

Builds a small deterministic model and synthetic batch, then checks the
analytic gradient of each retriever and reader objective variant against
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neural, reader, retriever, textcore
from .neural import FiniteDiffReport, ModelConfig, ParamSet
from .textcore import Passage


@dataclass
class GradCheckCase:
    name: str
    objective: object  # LossSpec


def build_cases(
    d: int = 8,
    vocab_size: int = 50,
    seed: int = 0,
    k: int = 3,
    passage_len: int = 4,
    max_len: int = 48,
    n_blocks: int = 1,
) -> tuple[ParamSet, list[GradCheckCase]]:
    """A d-dimensional model plus one synthetic batch per objective variant."""
    cfg = ModelConfig(d=d, max_len=max_len, vocab_size=vocab_size, seed=seed, n_blocks=n_blocks)
    params = neural.init_params(cfg)
    rng = np.random.default_rng(seed + 1)

    def ids(n: int) -> tuple[int, ...]:
        return tuple(int(x) for x in rng.integers(textcore.NUM_RESERVED, vocab_size, size=n))

    passage = Passage(doc_id="g0", window_start=1, tokens=ids(passage_len), topic_tokens=ids(1))
    pinp = textcore.compose_retriever_passage(passage, max_len)
    entity_parts = [(ids(2), ids(5)) for _ in range(k + 2)]
    entity_inputs = [textcore.compose_entity(t, dsc, max_len) for t, dsc in entity_parts]

    cases: list[GradCheckCase] = []
    n_gold = 2 if k >= 2 else 1
    for variant in retriever.NCE_VARIANTS:
        ex = retriever.RetrieverExample(
            passage=pinp,
            gold=entity_inputs[:n_gold],
            negatives=entity_inputs[n_gold:],
        )
        cases.append(
            GradCheckCase(
                name=f"retriever-nce-{variant}",
                objective=retriever.RetrieverNCEObjective([ex], variant),
            )
        )

    reader_inputs = [
        textcore.compose_reader_input(passage, t, dsc, max_len) for t, dsc in entity_parts[:k]
    ]
    hi = passage_len + 1
    spans = [((2, min(3, hi)), (hi, hi))]  # two gold spans for the first candidate
    spans += [((1, 1),)] * (k - 1)  # non-gold candidates carry the CLS span
    gold_flags = [True] + [False] * (k - 1)
    for variant in reader.READER_VARIANTS:
        ex = reader.ReaderExample(
            inputs=list(reader_inputs),
            spans=[tuple(s) for s in spans],
            gold_flags=list(gold_flags),
            passage_len=passage_len,
        )
        cases.append(
            GradCheckCase(
                name=f"reader-{variant}",
                objective=reader.ReaderObjective([ex], variant),
            )
        )
    ex_gated = reader.ReaderExample(
        inputs=list(reader_inputs),
        spans=[tuple(s) for s in spans],
        gold_flags=list(gold_flags),
        passage_len=passage_len,
    )
    cases.append(
        GradCheckCase(
            name="reader-sumlog-gated",
            objective=reader.ReaderObjective([ex_gated], "sumlog", gate_span_terms=True),
        )
    )
    return params, cases


def run_all(
    d: int = 8,
    vocab_size: int = 50,
    seed: int = 0,
    step: float = 1e-4,
    tolerance: float = 1e-3,
    sample_fraction: float = 0.01,
    k: int = 3,
    passage_len: int = 4,
    n_blocks: int = 1,
) -> list[tuple[str, FiniteDiffReport]]:
    params, cases = build_cases(
        d=d, vocab_size=vocab_size, seed=seed, k=k, passage_len=passage_len, n_blocks=n_blocks
    )
    out = []
    for case in cases:
        report = neural.finite_diff_check(
            params, case.objective, step=step, tolerance=tolerance, sample_fraction=sample_fraction
        )
        out.append((case.name, report))
    return out
