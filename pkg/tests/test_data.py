from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wideattn.data import (
    BYTE_OFFSET,
    Dataset,
    Example,
    ListopsSpec,
    TokenMode,
    batch_iter,
    build_vocab,
    detokenize_bytes,
    encode,
    eval_listops,
    gen_listops,
    read_tsv,
    split,
    token_strings,
    tokenize,
    write_tsv,
)
from wideattn.errors import GenerationError, ParseError
from wideattn.model import BYTE_VOCAB_SIZE, CLS_ID, PAD_ID, UNK_ID

from oracles import listops_recursive


@pytest.fixture(scope="module")
def ten_k():
    return gen_listops(ListopsSpec(count=10_000, seed=0))


# -- evaluation --------------------------------------------------------------------

@pytest.mark.parametrize("text,label", [
    ("[MIN 3 1 ]", 1),
    ("[MAX 2 9 [MIN 4 7 ] 0 ]", 9),
    ("[SM 5 7 ]", 2),
    ("[MED 1 2 3 4 ]", 2),
    ("[MED 4 1 3 ]", 3),
    ("4", 4),
    ("  [MAX [SM 9 9 ] 1 ]  ", 8),
])
def test_eval_examples(text, label):
    assert eval_listops(text) == label


@given(st.lists(st.integers(0, 9), min_size=1, max_size=8))
def test_median_matches_sort_oracle(xs):
    text = "[MED " + " ".join(map(str, xs)) + " ]"
    assert eval_listops(text) == sorted(xs)[(len(xs) - 1) // 2]


@pytest.mark.parametrize("text,pos", [
    ("[MAX 1 2", 0),
    ("[MAX 1 ] ]", 9),
    ("[FOO 1 ]", 0),
    ("[MAX ]", 0),
    ("[MAX 12 ]", 5),
    ("", 0),
    ("3 4", 2),
])
def test_parse_errors_carry_position(text, pos):
    with pytest.raises(ParseError) as info:
        eval_listops(text)
    assert info.value.position == pos


# -- generation --------------------------------------------------------------------

def test_generated_labels_match_recursive_oracle(ten_k):
    assert len(ten_k) == 10_000
    for ex in ten_k:
        assert 0 <= ex.label <= 9
        assert ex.label == listops_recursive(ex.text)


def test_generated_shape_constraints(ten_k):
    assert max(len(ex.text) for ex in ten_k) <= 127
    depths = []
    for ex in ten_k[:2000]:
        d = best = 0
        for ch in ex.text:
            d += ch == "["
            d -= ch == "]"
            best = max(best, d)
        depths.append(best)
    assert max(depths) <= 3 and min(depths) >= 1


def test_all_ten_classes_present():
    labels = Counter(ex.label for ex in gen_listops(ListopsSpec(count=1000, seed=5)))
    assert set(labels) == set(range(10))


def test_generation_is_seeded():
    a = gen_listops(ListopsSpec(count=50, seed=3))
    assert a == gen_listops(ListopsSpec(count=50, seed=3))
    assert a != gen_listops(ListopsSpec(count=50, seed=4))
    assert gen_listops(ListopsSpec(count=50, seed=0), seed=3) == a


def test_unreachable_length():
    with pytest.raises(GenerationError):
        gen_listops(ListopsSpec(count=5, max_length=5))
    with pytest.raises(GenerationError):
        gen_listops(ListopsSpec(count=50, max_length=12, max_args=9, sub_expr_prob=1.0))


# -- TSV ---------------------------------------------------------------------------

def test_tsv_round_trip(tmp_path):
    exs = [Example(3, "[MAX 3 1 ]"), Example(0, "héllo wörld")]
    write_tsv(exs, tmp_path / "d.tsv")
    assert read_tsv(tmp_path / "d.tsv") == exs
    with pytest.raises(ValueError):
        write_tsv([Example(1, "a\tb")], tmp_path / "bad.tsv")


def test_tsv_rejects_malformed(tmp_path):
    (tmp_path / "bad.tsv").write_text("no tab here\n")
    with pytest.raises(ValueError):
        read_tsv(tmp_path / "bad.tsv")


# -- tokenization ------------------------------------------------------------------

def test_tokenize_examples():
    assert tokenize("", seq_len=4).tolist() == [CLS_ID, PAD_ID, PAD_ID, PAD_ID]
    assert tokenize("AB", seq_len=4).tolist() == [CLS_ID, 65 + BYTE_OFFSET, 66 + BYTE_OFFSET, PAD_ID]
    assert tokenize("ABCDEF", seq_len=4).tolist() == [CLS_ID, 65 + BYTE_OFFSET, 66 + BYTE_OFFSET, 67 + BYTE_OFFSET]


@given(st.text(max_size=40), st.integers(1, 50))
def test_byte_round_trip_and_bounds(text, S):
    ids = tokenize(text, seq_len=S)
    assert ids.shape == (S,) and ids[0] == CLS_ID
    assert ids.max() < BYTE_VOCAB_SIZE and ids.min() >= 0
    assert detokenize_bytes(ids[1:]) == text.encode("utf-8")[: S - 1]


def test_word_mode():
    vocab = build_vocab(["a a b", "c b a"], max_size=5)
    assert vocab.words == ("a", "b")
    ids = tokenize("a z b", TokenMode.WORD, vocab, seq_len=6)
    assert ids.tolist() == [CLS_ID, 3, UNK_ID, 4, PAD_ID, PAD_ID]
    assert token_strings(ids, "word", vocab) == ["[CLS]", "a", "[UNK]", "b"]
    with pytest.raises(ValueError):
        tokenize("a", TokenMode.WORD, None, seq_len=4)


def test_vocab_ranking_and_determinism():
    lines = ["x y y z z z", "w"]
    v = build_vocab(lines, max_size=10)
    assert v.words == ("z", "y", "w", "x")
    assert build_vocab(lines, max_size=10) == v
    assert build_vocab(lines, max_size=5).words == ("z", "y")
    with pytest.raises(ValueError):
        build_vocab([], max_size=10)
    with pytest.raises(ValueError):
        build_vocab(lines, max_size=3)


# -- batching ----------------------------------------------------------------------

def make_data(n=23, S=5):
    ids = np.arange(n * S).reshape(n, S)
    return Dataset(ids, np.arange(n))


def test_full_batch_is_a_permutation():
    data = make_data()
    batches = list(batch_iter(data, len(data), seed=0, epoch=0))
    assert len(batches) == 1
    assert sorted(batches[0][1].tolist()) == list(range(len(data)))


@given(st.integers(1, 30), st.integers(0, 5), st.integers(0, 3))
def test_batches_cover_dataset_once(bs, seed, epoch):
    data = make_data()
    seen = [int(l) for _, labels in batch_iter(data, bs, seed, epoch) for l in labels]
    assert Counter(seen) == Counter(range(len(data)))
    again = [int(l) for _, labels in batch_iter(data, bs, seed, epoch) for l in labels]
    assert seen == again


def test_epochs_reshuffle_and_last_batch_kept():
    data = make_data()
    a = [b[1].tolist() for b in batch_iter(data, 5, 0, 0)]
    b = [b[1].tolist() for b in batch_iter(data, 5, 0, 1)]
    assert a != b and len(a[-1]) == 3


def test_batching_errors():
    with pytest.raises(ValueError):
        list(batch_iter(make_data(), 0, 0, 0))
    with pytest.raises(ValueError):
        list(batch_iter(Dataset(np.zeros((0, 3), int), np.zeros(0, int)), 2, 0, 0))


def test_split_and_encode(ten_k):
    data = encode(ten_k[:1000], 128)
    assert data.ids.shape == (1000, 128)
    tr, va = split(data, 0.1, seed=0)
    assert len(tr) == 900 and len(va) == 100
    rows = {tuple(r) for r in tr.ids} | {tuple(r) for r in va.ids}
    assert len(rows) <= 1000
    tr2, va2 = split(data, 0.1, seed=0)
    assert np.array_equal(va.ids, va2.ids)
