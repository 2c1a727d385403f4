import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krsvqg.tokenizer import (BOS, EOS, PAD, SPECIAL_TOKENS, UNK, TokenSequence, Vocabulary,
                              build_vocab, decode, encode, tokenize)


@pytest.fixture
def ab_vocab():
    return build_vocab(["a a b"], min_freq=1)


def test_build_vocab_counts(ab_vocab):
    assert len(ab_vocab) == 6
    assert ab_vocab.id_to_token[4:] == ("a", "b")
    assert len(build_vocab(["a a b"], min_freq=2)) == 5


def test_specials_fixed(ab_vocab):
    assert ab_vocab.id_to_token[:4] == SPECIAL_TOKENS
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    assert all(ab_vocab.token_to_id[t] == i for i, t in enumerate(ab_vocab.id_to_token))


def test_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab([])


def test_ordering_frequency_then_lexicographic():
    v = build_vocab(["b c c a", "a c"])
    assert v.id_to_token[4:] == ("c", "a", "b")


def test_caption_fixture_vocab_size(data_dir):
    # frozen from an independent character-scanning word count
    lines = (data_dir / "captions_20.txt").read_text().splitlines()
    assert len(build_vocab(lines, 1)) == 93
    assert len(build_vocab(lines, 2)) == 44


def test_tokenize_splits_punctuation():
    assert tokenize("Trees, and a Road.") == ["trees", ",", "and", "a", "road", "."]


def test_encode(ab_vocab):
    a, b = ab_vocab.token_to_id["a"], ab_vocab.token_to_id["b"]
    assert encode("a b", ab_vocab, 5).ids == (BOS, a, b, EOS, PAD)
    assert encode("z", ab_vocab, 4).ids == (BOS, UNK, EOS, PAD)


def test_encode_truncation_keeps_eos(ab_vocab):
    seq = encode("a b a b a", ab_vocab, 4)
    assert seq.ids[0] == BOS and seq.ids[-1] == EOS and len(seq) == 4


def test_encode_short_max_len(ab_vocab):
    with pytest.raises(ValueError):
        encode("a", ab_vocab, 2)


def test_decode(ab_vocab):
    a, b = ab_vocab.token_to_id["a"], ab_vocab.token_to_id["b"]
    assert decode([BOS, a, EOS, PAD], ab_vocab) == "a"
    assert decode([BOS, EOS], ab_vocab) == ""
    assert decode([BOS, a, EOS, b], ab_vocab) == "a"
    with pytest.raises(ValueError, match="id out of range"):
        decode([BOS, 99], ab_vocab)


def test_token_sequence_pad_suffix():
    assert TokenSequence((1, 5, 2, 0, 0)).length == 3
    with pytest.raises(ValueError):
        TokenSequence((1, 0, 5, 2))


def test_vocab_file_roundtrip(tmp_path, ab_vocab):
    path = tmp_path / "vocab.txt"
    ab_vocab.save(path)
    assert path.read_text().splitlines()[:4] == list(SPECIAL_TOKENS)
    assert Vocabulary.load(path) == ab_vocab


def test_deterministic_bytes(tmp_path):
    corpus = ["the river", "a bridge over the river", "trees"]
    build_vocab(corpus).save(tmp_path / "a.txt")
    build_vocab(list(corpus)).save(tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


WORDS = ["river", "bridge", "court", "trees", "a", "the", "storage", "tank"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=0, max_size=8))
def test_roundtrip(words):
    vocab = build_vocab([" ".join(WORDS)])
    s = " ".join(words)
    assert decode(encode(s, vocab, max(len(words) + 2, 3)), vocab) == s
