"""Tokenizer, vocabulary, chunking, and input composition tests."""

import pytest

from entlink import textcore
from entlink.textcore import (
    CLS,
    SEP,
    TYP,
    UNK,
    ComposedInput,
    InputTooLongError,
    Passage,
    build_vocab,
    chunk_document,
    compose_entity,
    compose_reader_input,
    compose_retriever_passage,
    map_span_to_document,
    tokenize,
)


class TestTokenize:
    def test_words_and_punctuation(self):
        tokens, offsets = tokenize("Grace Road,")
        assert tokens == ["grace", "road", ","]
        assert offsets == [(0, 4), (6, 9), (10, 10)]

    def test_empty(self):
        assert tokenize("") == ([], [])

    def test_punctuation_split(self):
        tokens, _ = tokenize("A.B")
        assert tokens == ["a", ".", "b"]

    def test_each_mark_is_its_own_token(self):
        tokens, _ = tokenize("wait?!")
        assert tokens == ["wait", "?", "!"]

    def test_idempotent_on_detokenized_output(self):
        for text in ("Grace Road,", "A.B", "it's 1996-08-30.", "  spaced\tout  "):
            tokens, _ = tokenize(text)
            again, _ = tokenize(" ".join(tokens))
            assert again == tokens


class TestVocab:
    def test_frequency_threshold(self):
        vocab = build_vocab(["a a b"], [], min_freq=2)
        assert "a" in vocab
        assert "b" not in vocab
        assert vocab.lookup("b") == UNK

    def test_reserved_layout(self):
        vocab = build_vocab(["x"], [], min_freq=1)
        assert vocab.lookup("x") == 5
        assert len(vocab) == 6

    def test_deterministic(self):
        docs = ["the cat sat", "the dog ran"]
        ents = ["cat animal", "dog animal"]
        v1 = build_vocab(docs, ents)
        v2 = build_vocab(docs, ents)
        assert v1.token_to_id == v2.token_to_id

    def test_ids_contiguous(self):
        vocab = build_vocab(["a b c d"], ["e f"])
        assert sorted(vocab.token_to_id.values()) == list(range(len(vocab)))

    def test_empty_corpus_errors(self):
        with pytest.raises(ValueError, match="empty corpus"):
            build_vocab([], [])

    def test_lookup_total(self):
        vocab = build_vocab(["a"], [])
        assert vocab.encode(["a", "zzz"]) == [5, UNK]


class TestChunkDocument:
    def test_single_window(self):
        ps = chunk_document("d", list(range(100, 110)), 32, 16)
        assert len(ps) == 1
        assert (ps[0].window_start, ps[0].window_end) == (1, 10)

    def test_two_windows(self):
        ps = chunk_document("d", list(range(40)), 32, 16)
        spans = [(p.window_start, p.window_end) for p in ps]
        assert spans == [(1, 32), (17, 40)]

    def test_last_window_truncated(self):
        ps = chunk_document("d", list(range(33)), 32, 16)
        spans = [(p.window_start, p.window_end) for p in ps]
        assert spans == [(1, 32), (17, 33)]

    def test_stride_exceeding_window_rejected(self):
        with pytest.raises(ValueError, match="coverage"):
            chunk_document("d", list(range(10)), 4, 5)

    def test_coverage_exhaustive(self):
        """Union of windows is exactly [1, T] for many (T, L, S) combos."""
        for L in (4, 8, 32):
            for S in range(1, L + 1):
                for T in range(1, 201):
                    ps = chunk_document("d", list(range(T)), L, S, topic_mode="none")
                    covered = set()
                    for p in ps:
                        covered.update(range(p.window_start, p.window_end + 1))
                        assert 1 <= len(p) <= L
                    assert covered == set(range(1, T + 1)), (T, L, S)
                    starts = [p.window_start for p in ps]
                    assert starts == [1 + i * S for i in range(len(ps))]

    def test_overlap_between_consecutive_windows(self):
        for L, S in ((8, 4), (32, 16), (8, 7)):
            ps = chunk_document("d", list(range(100)), L, S, topic_mode="none")
            for a, b in zip(ps, ps[1:]):
                shared = range(
                    max(a.window_start, b.window_start),
                    min(a.window_end, b.window_end) + 1,
                )
                if b is not ps[-1]:
                    assert len(shared) == L - S

    def test_topic_modes(self):
        ids = [9, 8, 7, 6]
        assert chunk_document("d", ids, 8, 4, "none")[0].topic_tokens == ()
        assert chunk_document("d", ids, 8, 4, "first_token")[0].topic_tokens == (9,)

    def test_first_sentence_topic(self):
        ids = [9, 8, 77, 7, 6]
        ps = chunk_document("d", ids, 8, 4, "first_sentence", sentence_end_id=77)
        assert ps[0].topic_tokens == (9, 8)

    def test_first_sentence_cap(self):
        ids = list(range(100, 140))
        ps = chunk_document("d", ids, 64, 32, "first_sentence", sentence_end_id=None)
        assert ps[0].topic_tokens == tuple(ids[: textcore.FIRST_SENTENCE_CAP])


class TestCompose:
    def test_retriever_layout(self):
        p = Passage("d", 1, (7, 8), (9,))
        inp = compose_retriever_passage(p)
        assert inp.ids == (CLS, 7, 8, SEP, 9)
        assert (inp.span_lo, inp.span_hi) == (2, 3)

    def test_retriever_layout_no_topic(self):
        p = Passage("d", 1, (7, 8), ())
        assert compose_retriever_passage(p).ids == (CLS, 7, 8, SEP)

    def test_entity_layout(self):
        inp = compose_entity([11], [12, 13])
        assert inp.ids == (CLS, 11, TYP, 12, 13, SEP)

    def test_reader_layout(self):
        p = Passage("d", 1, (7, 8), (9,))
        inp = compose_reader_input(p, [11], [12, 13])
        assert inp.ids == (CLS, 7, 8, TYP, 9, SEP, 11, TYP, 12, 13, SEP)
        assert (inp.span_lo, inp.span_hi) == (2, 3)

    def test_description_truncated_first(self):
        p = Passage("d", 1, tuple(range(100, 105)), (9,))
        inp = compose_reader_input(p, [11], list(range(200, 300)), max_len=20)
        assert len(inp) == 20
        assert inp.ids[-1] == SEP

    def test_description_dropped_entirely(self):
        inp = compose_entity([11], [12, 13], max_len=3)
        assert inp.ids == (CLS, 11, SEP)

    def test_passage_never_truncated(self):
        p = Passage("d", 1, tuple(range(100, 140)), ())
        with pytest.raises(InputTooLongError):
            compose_retriever_passage(p, max_len=20)
        with pytest.raises(InputTooLongError):
            compose_reader_input(p, [11], [], max_len=20)


class TestMapSpanToDocument:
    def test_offset_arithmetic(self):
        p = Passage("d", 17, tuple(range(100, 132)), ())
        assert map_span_to_document(p, 2, 3) == (17, 18)

    def test_first_token(self):
        p = Passage("d", 1, (5, 6), ())
        assert map_span_to_document(p, 2, 2) == (1, 1)

    def test_cls_rejected(self):
        p = Passage("d", 1, (5, 6), ())
        with pytest.raises(ValueError):
            map_span_to_document(p, 1, 1)

    def test_out_of_range_rejected(self):
        p = Passage("d", 1, (5, 6), ())
        with pytest.raises(ValueError):
            map_span_to_document(p, 2, 4)

    def test_round_trip_between_overlapping_passages(self):
        """Two windows that both contain a surface span agree on its document
        coordinates."""
        ids = list(range(100, 140))
        ps = chunk_document("d", ids, 32, 16, topic_mode="none")
        a, b = ps[0], ps[1]
        # document tokens 20..21 sit in both windows
        sa = 20 - a.window_start + 2
        sb = 20 - b.window_start + 2
        assert map_span_to_document(a, sa, sa + 1) == map_span_to_document(b, sb, sb + 1)
        assert a.tokens[sa - 2] == b.tokens[sb - 2]
