import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlgen.text import (
    BOS,
    EOS,
    PAD,
    RESERVED,
    UNDECIDABLE,
    UNK,
    Batch,
    GrammarSpec,
    Vocabulary,
    build_vocabulary,
    content_tokens,
    decode,
    default_grammar,
    encode,
    encode_labeled,
    generate_synthetic_corpus,
    make_batches,
    oracle_classify,
    read_corpus,
    read_labeled,
    write_corpus,
    write_labeled,
)


@pytest.fixture(scope="module")
def grammar():
    return default_grammar()


def test_reserved_ids():
    v = Vocabulary()
    assert [v.lookup(t) for t in RESERVED] == [PAD, BOS, EOS, UNK]
    assert v.lookup("never-seen") == UNK


def test_default_grammar_vocabulary_size(grammar):
    corp = generate_synthetic_corpus(grammar, 3000, 0, 0)
    assert len(grammar.terminals()) == 60
    assert len(build_vocabulary(corp.unlabeled)) == 64


def test_build_vocabulary_min_freq_and_empty():
    v = build_vocabulary(["a b", "a c"], min_freq=2)
    assert "a" in v and "b" not in v
    with pytest.raises(ValueError):
        build_vocabulary([])


def test_encode_decode_round_trip(grammar):
    corp = generate_synthetic_corpus(grammar, 50, 0, 1)
    v = build_vocabulary(corp.unlabeled)
    for s in corp.unlabeled:
        assert decode(encode(s, v, 15), v) == s


def test_decode_stops_at_eos_and_skips_padding():
    v = Vocabulary(["x", "y"])
    x, y = v.lookup("x"), v.lookup("y")
    assert decode([BOS, x, PAD, y, EOS, x], v) == "x y"


def test_encode_rejects_long_sentence():
    v = Vocabulary(["w"])
    with pytest.raises(ValueError, match="16"):
        encode(" ".join(["w"] * 16), v, 15)


def test_vocabulary_text_round_trip(tmp_path):
    v = Vocabulary(["b", "a", "c"])
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == v


def test_batch_layout():
    b = Batch.from_sequences([[5, 6, 7], [8]], labels=[1, 0])
    np.testing.assert_array_equal(b.ids, [[BOS, 5, 6, 7, EOS], [BOS, 8, EOS, PAD, PAD]])
    np.testing.assert_array_equal(b.lengths, [5, 3])
    np.testing.assert_array_equal(b.mask[1], [1, 1, 1, 0, 0])


def test_make_batches_keeps_tail_and_is_seeded():
    data = [[i + 4] for i in range(10)]
    a = make_batches(data, 4, seed=3)
    assert [x.size for x in a] == [4, 4, 2]
    b = make_batches(data, 4, seed=3)
    assert all(np.array_equal(x.ids, y.ids) for x, y in zip(a, b))
    seen = sorted(int(i) for x in a for i in x.ids[:, 1])
    assert seen == [i + 4 for i in range(10)]


def test_grammar_text_round_trip(tmp_path, grammar):
    grammar.save(tmp_path / "g.txt")
    g2 = GrammarSpec.load(tmp_path / "g.txt")
    assert g2.to_text() == grammar.to_text()
    assert g2.categories("tense") == ["past", "present", "future"]


def test_grammar_rejects_overlapping_word_sets():
    g = default_grammar()
    g.attributes["sentiment"]["positive"] = g.attributes["sentiment"]["positive"] + ["bad"]
    with pytest.raises(ValueError):
        g.validate()


def test_grammar_rejects_template_without_attribute():
    g = default_grammar()
    g.templates.append(["det", "subject", "sentiment"])
    with pytest.raises(ValueError, match="tense"):
        g.validate()


def test_oracle_classify_cases(grammar):
    assert oracle_classify("the film was great".split(), "sentiment", grammar) == 1
    assert oracle_classify("the film was awful".split(), "sentiment", grammar) == 0
    assert oracle_classify("the film will_be awful".split(), "tense", grammar) == 2
    assert oracle_classify("the film was".split(), "sentiment", grammar) == UNDECIDABLE
    assert oracle_classify("good bad".split(), "sentiment", grammar) == UNDECIDABLE
    with pytest.raises(ValueError):
        oracle_classify(["good"], "color", grammar)


def test_content_tokens(grammar):
    toks = "this cast seems so fun with a crowd".split()
    assert content_tokens(toks, grammar) == ["cast", "crowd"]


def test_corpus_is_deterministic_and_grammatical(grammar):
    a = generate_synthetic_corpus(grammar, 100, 20, 5)
    b = generate_synthetic_corpus(grammar, 100, 20, 5)
    assert a == b
    for s in a.unlabeled:
        toks = s.split()
        assert 4 <= len(toks) <= 7
        for attr in grammar.attributes:
            assert oracle_classify(toks, attr, grammar) != UNDECIDABLE


def test_labeled_sets_are_stratified_and_correct(grammar):
    corp = generate_synthetic_corpus(grammar, 0, 30, 2)
    for attr, pairs in corp.labeled.items():
        cats = grammar.categories(attr)
        counts = {c: 0 for c in cats}
        for label, sent in pairs:
            counts[label] += 1
            assert cats[oracle_classify(sent.split(), attr, grammar)] == label
        assert max(counts.values()) - min(counts.values()) <= 1


def test_labeled_streams_are_isolated(grammar):
    # the sentiment set must not depend on how many unlabeled sentences were drawn
    a = generate_synthetic_corpus(grammar, 10, 20, 4)
    b = generate_synthetic_corpus(grammar, 500, 20, 4)
    assert a.labeled == b.labeled


def test_word_level_examples(grammar):
    corp = generate_synthetic_corpus(grammar, 0, 0, 0)
    words = corp.word_labeled["sentiment"]
    assert len(words) == 16
    assert all(len(w.split()) == 1 for _, w in words)


def test_corpus_files_round_trip(tmp_path):
    write_corpus(tmp_path / "c.txt", ["a b", "c"])
    assert read_corpus(tmp_path / "c.txt") == ["a b", "c"]
    write_labeled(tmp_path / "l.tsv", [("pos", "a b")])
    assert read_labeled(tmp_path / "l.tsv") == [("pos", "a b")]
    (tmp_path / "bad.tsv").write_text("no tab here\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        read_labeled(tmp_path / "bad.tsv")


def test_encode_labeled_rejects_unknown_label():
    v = Vocabulary(["a"])
    with pytest.raises(ValueError, match="neutral"):
        encode_labeled([("neutral", "a")], ["neg", "pos"], v, 15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_every_generated_sentence_has_one_category_per_attribute(seed):
    g = default_grammar()
    corp = generate_synthetic_corpus(g, 5, 2, seed)
    for s in corp.unlabeled + [x for _, x in corp.labeled["tense"]]:
        assert oracle_classify(s.split(), "tense", g) in (0, 1, 2)
