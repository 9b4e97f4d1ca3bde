"""Shared fixtures: a small handcrafted corpus and model."""

import pytest

from entlink import pipeline
from entlink.kbstore import KB, CharMention, Document, Entity
from entlink.neural import ModelConfig, init_params
from entlink.pipeline import PipelineConfig


def make_tiny_corpus():
    """Five entities, three documents, all mentions aligned to tokens."""
    kb = KB(
        [
            Entity("e1", "alpha", "first greek letter aleph"),
            Entity("e2", "beta", "second greek letter bet"),
            Entity("e3", "gamma", "third greek letter gimel"),
            Entity("e4", "delta", "fourth greek letter dalet"),
            Entity("e5", "omega", "last greek letter"),
        ]
    )

    def doc(did, text, *gold):
        mentions = []
        for word, eid in gold:
            start = text.index(word)
            mentions.append(CharMention(start, start + len(word), eid))
        return Document(did, text, tuple(mentions))

    docs = [
        doc("d1", "today alpha met beta near the aleph river", ("alpha", "e1"), ("beta", "e2")),
        doc("d2", "gamma writes gimel while delta rests", ("gamma", "e3"), ("delta", "e4")),
        doc("d3", "omega ends it all after alpha begins", ("omega", "e5"), ("alpha", "e1")),
    ]
    return kb, docs


@pytest.fixture(scope="session")
def tiny_bundle():
    kb, docs = make_tiny_corpus()
    pcfg = PipelineConfig(window_len=8, stride=4, max_input_len=48)
    return pipeline.prepare_corpus(kb, docs, pcfg)


@pytest.fixture()
def tiny_params(tiny_bundle):
    cfg = ModelConfig(d=16, max_len=48, vocab_size=len(tiny_bundle.vocab), seed=0)
    return init_params(cfg)
