import json

import pytest
from hypothesis import given, strategies as st

from s2g.lexvocab import (NUM, PAD, UNK, LexError, NumberSlots, SourceVocab, TargetVocab,
                          TooManyNumbers, UnmappableNumber, build_source_vocab, dump_vocab,
                          encode_target, extract_numbers, number_value, tokenize)
from s2g.optree import OPERATORS, default_registry

VOCAB = TargetVocab(default_registry())


@pytest.mark.parametrize("text,tokens", [
    ("300 m", ["300", "m"]),
    ("周长 300", ["周", "长", "300"]),
    ("", []),
    ("radius 5m.", ["radius", "5", "m", "."]),
    ("a 3.5 b 1/2 c 50%", ["a", "3.5", "b", "1/2", "c", "50%"]),
    ("半径是3厘米", ["半", "径", "是", "3", "厘", "米"]),
])
def test_tokenize(text, tokens):
    assert tokenize(text) == tokens


@pytest.mark.parametrize("token,value", [
    ("300", 300.0), ("3.5", 3.5), ("50%", 0.5), ("1/4", 0.25), (".5", 0.5),
    ("m", None), ("1/0", None),
])
def test_number_value(token, value):
    assert number_value(token) == value


def test_extract_numbers_masks_in_order():
    masked, slots = extract_numbers(["300", "m", "10", "m"])
    assert masked == ["<N0>", "m", "<N1>", "m"]
    assert slots.values == (300.0, 10.0)
    assert slots.positions == (0, 2)


def test_percent_slot_value():
    _, slots = extract_numbers(["50%"])
    assert slots.values == (0.5,)


def test_repeated_values_get_distinct_slots():
    masked, slots = extract_numbers(["4", "and", "4"])
    assert masked == ["<N0>", "and", "<N1>"]
    assert slots.values == (4.0, 4.0)


def test_too_many_numbers():
    with pytest.raises(TooManyNumbers):
        extract_numbers([str(i) for i in range(11)], max_slots=10)
    masked, _ = extract_numbers([str(i) for i in range(10)], max_slots=10)
    assert masked[-1] == "<N9>"


@given(st.lists(st.one_of(st.sampled_from(["m", "cm", "的", "area", "?"]),
                          st.integers(0, 999).map(str)), max_size=30))
def test_extract_preserves_words_and_order(tokens):
    if sum(t.isdigit() for t in tokens) > 10:
        return
    masked, slots = extract_numbers(tokens)
    assert len(masked) == len(tokens)
    assert [t for t in masked if not t.startswith("<N")] == [t for t in tokens if not t.isdigit()]
    assert [tokens[p] for p in slots.positions] == [t for t in tokens if t.isdigit()]


def test_slot_positions_validated():
    with pytest.raises(ValueError):
        NumberSlots((1.0, 2.0), (3, 1))


# ---------------------------------------------------------------- target vocabulary

def test_target_vocab_layout():
    itos = VOCAB.itos
    assert itos[:len(OPERATORS)] == list(OPERATORS)
    assert itos[len(OPERATORS):len(OPERATORS) + 3] == ["1", "2", "3.14"]
    assert itos[-10:] == [f"<N{i}>" for i in range(10)]
    assert VOCAB.num_static == len(OPERATORS) + 3 + 11
    assert len(VOCAB) == VOCAB.num_static + 10


def test_target_arities():
    assert VOCAB.arities[VOCAB.stoi["+"]] == 2
    assert VOCAB.arities[VOCAB.stoi["cuboid_volume"]] == 3
    assert VOCAB.arities[VOCAB.stoi["3.14"]] == 0
    assert VOCAB.arities[VOCAB.stoi["<N4>"]] == 0


def test_encode_target_pool_equation():
    slots = NumberSlots((300.0, 10.0), (0, 2))
    assert encode_target(["/", "300", "10"], slots, VOCAB) == [
        VOCAB.stoi["/"], VOCAB.stoi["<N0>"], VOCAB.stoi["<N1>"]]


def test_encode_target_constant_without_slot():
    assert encode_target(["3.14"], NumberSlots((), ()), VOCAB) == [VOCAB.stoi["3.14"]]


def test_encode_target_prefers_slot_over_constant():
    slots = NumberSlots((5.0, 2.0), (0, 1))
    assert encode_target(["*", "2", "<N0>"], slots, VOCAB) == [
        VOCAB.stoi["*"], VOCAB.stoi["<N1>"], VOCAB.stoi["<N0>"]]


def test_encode_target_first_equal_slot_wins():
    slots = NumberSlots((4.0, 4.0), (0, 2))
    assert encode_target(["4"], slots, VOCAB) == [VOCAB.stoi["<N0>"]]


def test_unmappable_number():
    with pytest.raises(UnmappableNumber) as info:
        encode_target(["7"], NumberSlots((), ()), VOCAB)
    assert info.value.value == 7


def test_slot_token_out_of_range():
    with pytest.raises(LexError):
        encode_target(["<N3>"], NumberSlots((1.0,), (0,)), VOCAB)


@given(st.lists(st.integers(1, 60), min_size=1, max_size=6, unique=True))
def test_decode_inverts_encode(values):
    slots = NumberSlots(tuple(float(v) for v in values), tuple(range(len(values))))
    prefix = ["+"] * (len(values) - 1) + [str(v) for v in values]
    decoded = VOCAB.decode(encode_target(prefix, slots, VOCAB))
    assert decoded == ["+"] * (len(values) - 1) + [f"<N{i}>" for i in range(len(values))]


# ---------------------------------------------------------------- source vocabulary

def test_min_freq_filters_rare_tokens():
    vocab = build_source_vocab(["a a b"], min_freq=2)
    assert "a" in vocab and "b" not in vocab
    assert vocab.index("b") == vocab.index(UNK)


def test_min_freq_one_indexes_everything():
    vocab = build_source_vocab(["a a b", ["c"]], min_freq=1)
    assert all(t in vocab for t in "abc")


def test_reserved_indices_and_slot_mapping():
    vocab = build_source_vocab([["x", "<N0>"]])
    assert (vocab.index(PAD), vocab.index(UNK), vocab.index(NUM)) == (0, 1, 2)
    assert vocab.index("<N7>") == 2
    assert "<N0>" not in vocab


def test_source_vocab_ordering_is_by_count_then_token():
    vocab = build_source_vocab([["b", "a", "c", "c"]])
    assert vocab.itos[3:] == ["c", "a", "b"]


def test_source_vocab_json_round_trip(tmp_path):
    vocab = build_source_vocab(["周 长 是 多 少 周"])
    path = tmp_path / "vocab.json"
    dump_vocab(vocab.to_json(), path)
    again = SourceVocab.from_json(json.loads(path.read_text(encoding="utf-8")))
    assert again.itos == vocab.itos


def test_source_vocab_rejects_sparse_indices():
    with pytest.raises(ValueError):
        SourceVocab.from_json({PAD: 0, UNK: 1, NUM: 2, "a": 5})
