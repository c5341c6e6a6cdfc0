from __future__ import annotations

from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbit_control.errors import IllegalWordError, NotMixingError, SftError
from orbit_control.sft import (
    MAX_WINDOW_CODES,
    Potential,
    Sft,
    average_range,
    birkhoff_sum,
    bridge,
    build_potential,
    build_sft,
    decode_window,
    full_shift,
    is_legal,
    legal_words,
    missing_words,
    sft_from_forbidden,
    shift_potential,
    universal_word,
    window_code,
    window_codes,
    word_from_text,
    word_text,
)

from .oracles import cycle_means, factors_of

GOLDEN = sft_from_forbidden(2, ["11"])


def test_word_text_helpers() -> None:
    assert word_from_text("0101") == b"\x00\x01\x00\x01"
    assert word_from_text("10,2") == bytes([10, 2])
    assert word_text(b"\x01\x00") == "10"
    assert word_text(bytes([10, 2])) == "10,2"


def test_full_shift_is_mixing_with_empty_connectors() -> None:
    sft = full_shift(2)
    assert sft.mixing_power == 1
    assert all(c == b"" for c in sft.connectors.values())


def test_golden_mean_shift() -> None:
    assert GOLDEN.mixing_power == 2
    assert GOLDEN.connector(1, 1) == b"\x00"
    assert not GOLDEN.allowed(1, 1)
    assert not is_legal(GOLDEN, word_from_text("0110"))
    assert is_legal(GOLDEN, word_from_text("0100"))
    assert GOLDEN.walks(1, 1, 2)
    assert not GOLDEN.walks(1, 1, 1)
    assert np.array_equal(GOLDEN.matrix(), np.array([[1, 1], [1, 0]]))


def test_non_mixing_and_bad_declarations() -> None:
    with pytest.raises(NotMixingError):
        build_sft(2, [[False, True], [True, False]])
    with pytest.raises(SftError):
        build_sft(1, [[True]])
    with pytest.raises(SftError):
        sft_from_forbidden(2, ["2,0"])


def test_legal_words_are_lexicographic() -> None:
    assert legal_words(GOLDEN, 2) == (b"\x00\x00", b"\x00\x01", b"\x01\x00")
    assert len(legal_words(full_shift(3), 3)) == 27
    assert legal_words(GOLDEN, 0) == (b"",)


def test_bridge() -> None:
    word = bridge(GOLDEN, 1, 1, 3)
    assert len(word) == 3
    assert is_legal(GOLDEN, b"\x01" + word + b"\x01")
    assert bridge(full_shift(2), None, None, 4) == b"\x00\x00\x00\x00"
    assert bridge(GOLDEN, 1, None, 2) == b"\x00\x00"
    with pytest.raises(SftError):
        bridge(GOLDEN, 1, 1, 0)


def test_birkhoff_sums() -> None:
    sft = full_shift(2)
    phi = build_potential(sft, 1, {"0": 1, "1": -1})
    assert birkhoff_sum(word_from_text("000"), phi) == 3
    assert birkhoff_sum(word_from_text("0101"), phi) == 0

    pairs = build_potential(sft, 2, {"00": 1}, default=0)
    assert birkhoff_sum(word_from_text("000"), pairs, word_from_text("0")) == 3
    with pytest.raises(SftError):
        birkhoff_sum(word_from_text("000"), pairs)

    golden_phi = build_potential(GOLDEN, 1, {"0": 1, "1": -2})
    with pytest.raises(IllegalWordError):
        birkhoff_sum(word_from_text("011"), golden_phi, sft=GOLDEN)


def test_potential_tables() -> None:
    phi = build_potential(GOLDEN, 2, {"00": "1/2", "01": "-1/3"}, default=0)
    assert phi.values[b"\x01\x00"] == 0
    assert phi.max_abs == Fraction(1, 2)
    table, d = phi.scaled_table()
    assert d == 6
    assert table[window_code(b"\x00\x01", 2)] == -2
    with pytest.raises(IllegalWordError):
        phi.value(b"\x01\x01")
    with pytest.raises(SftError):
        build_potential(GOLDEN, 2, {"00": 1})
    with pytest.raises(IllegalWordError):
        build_potential(GOLDEN, 2, {"11": 1}, default=0)

    shifted = shift_potential(build_potential(GOLDEN, 1, {"0": 1, "1": -2}), Fraction(1, 4))
    assert shifted.values[b"\x01"] == Fraction(-9, 4)
    assert shifted.max_abs == Fraction(9, 4)


def test_window_codes() -> None:
    word = word_from_text("01101")
    codes = window_codes(word, 2, 2)
    assert codes.tolist() == [1, 3, 2, 1]
    assert decode_window(3, 2, 2) == b"\x01\x01"
    assert window_codes(word, 6, 2).size == 0


def test_average_range_examples() -> None:
    sft = full_shift(2)
    assert average_range(sft, build_potential(sft, 1, {"0": 1, "1": -1})) == (-1, 1)
    golden = build_potential(GOLDEN, 1, {"0": 1, "1": -2})
    assert average_range(GOLDEN, golden) == (Fraction(-1, 2), 1)
    constant = build_potential(GOLDEN, 2, {}, default="3/7")
    assert average_range(GOLDEN, constant) == (Fraction(3, 7), Fraction(3, 7))


def test_average_range_matches_cycle_enumeration() -> None:
    golden = build_potential(GOLDEN, 1, {"0": 1, "1": -2})
    assert average_range(GOLDEN, golden) == cycle_means([[True, True], [True, False]], dict(golden.values), 1)
    three = sft_from_forbidden(3, ["00", "12", "21"])
    phi = build_potential(three, 2, {"01": 2, "10": -1, "22": "-5/2", "11": "1/3"}, default=0)
    assert average_range(three, phi) == cycle_means([list(r) for r in three.transition], dict(phi.values), 2)


def test_universal_word_examples() -> None:
    word = universal_word(full_shift(2), 2)
    assert factors_of(word, 2) == {b"\x00\x00", b"\x00\x01", b"\x01\x00", b"\x01\x01"}
    assert len(word) == 5

    golden = universal_word(GOLDEN, 2)
    assert is_legal(GOLDEN, golden)
    assert factors_of(golden, 2) == set(legal_words(GOLDEN, 2))
    assert len(golden) == 4

    assert factors_of(universal_word(full_shift(2), 1), 1) == {b"\x00", b"\x01"}
    assert len(universal_word(full_shift(2), 3)) == 10
    with pytest.raises(SftError):
        universal_word(GOLDEN, 0)


def test_missing_words() -> None:
    assert missing_words(GOLDEN, word_from_text("0001"), 2) == (b"\x01\x00",)
    assert missing_words(GOLDEN, b"", 0) == ()


@settings(max_examples=40, deadline=None)
@given(
    size=st.integers(min_value=2, max_value=3),
    m=st.integers(min_value=1, max_value=4),
    forbid=st.sets(st.tuples(st.integers(0, 2), st.integers(0, 2)), max_size=2),
)
def test_universal_word_covers_every_legal_word(size: int, m: int, forbid: set[tuple[int, int]]) -> None:
    pairs = [bytes(p) for p in forbid if max(p) < size and p != (0, 0)]
    try:
        sft = sft_from_forbidden(size, pairs)
    except NotMixingError:
        return
    word = universal_word(sft, m)
    assert is_legal(sft, word)
    assert factors_of(word, m) == set(legal_words(sft, m))


THREE = sft_from_forbidden(3, ["00", "12", "21"])
THREE_PHI = build_potential(THREE, 2, {"01": 2, "10": -1, "22": "-5/2", "11": "1/3"}, default=0)


@settings(max_examples=60, deadline=None)
@given(
    u=st.lists(st.integers(0, 2), min_size=1, max_size=12),
    v=st.lists(st.integers(0, 2), min_size=1, max_size=12),
    last=st.integers(0, 2),
)
def test_birkhoff_sums_add_over_concatenation(u: list[int], v: list[int], last: int) -> None:
    sft = full_shift(3)
    phi = build_potential(sft, 2, {"01": "3/2", "12": -1, "20": "1/7", "22": 4}, default="-1/3")
    left, right, cont = bytes(u), bytes(v), bytes([last])
    whole = birkhoff_sum(left + right, phi, cont)
    assert whole == birkhoff_sum(left, phi, right[:1]) + birkhoff_sum(right, phi, cont)


@pytest.mark.parametrize("sft", [GOLDEN, THREE, full_shift(3)], ids=["golden", "three", "full"])
def test_connectors_join_every_pair(sft: Sft) -> None:
    for a, b in product(range(sft.alphabet_size), repeat=2):
        link = sft.connector(a, b)
        assert is_legal(sft, bytes([a]) + link + bytes([b])), (a, b)
        assert len(link) <= sft.mixing_power - 1


@settings(max_examples=40, deadline=None)
@given(forbid=st.sets(st.tuples(st.integers(0, 2), st.integers(0, 2)), max_size=3))
def test_connectors_on_random_mixing_shifts(forbid: set[tuple[int, int]]) -> None:
    try:
        sft = sft_from_forbidden(3, [bytes(p) for p in forbid])
    except NotMixingError:
        return
    for a, b in product(range(3), repeat=2):
        assert is_legal(sft, bytes([a]) + sft.connector(a, b) + bytes([b]))


def _cyclic_averages(sft: Sft, phi: Potential, longest: int) -> list[Fraction]:
    k = phi.depth
    out: list[Fraction] = []
    for length in range(1, longest + 1):
        for letters in product(range(sft.alphabet_size), repeat=length):
            word = bytes(letters)
            if not is_legal(sft, word + word):
                continue
            wrap = (word * k)[: k - 1]
            out.append(birkhoff_sum(word, phi, wrap) / length)
    return out


@pytest.mark.parametrize(
    ("sft", "phi"),
    [(GOLDEN, build_potential(GOLDEN, 1, {"0": 1, "1": -2})), (THREE, THREE_PHI)],
    ids=["golden", "three"],
)
def test_average_range_bounds_every_short_periodic_orbit(sft: Sft, phi: Potential) -> None:
    low, high = average_range(sft, phi)
    averages = _cyclic_averages(sft, phi, 8)
    assert all(low <= avg <= high for avg in averages)
    assert min(averages) == low
    assert max(averages) == high


def test_potential_table_size_is_capped() -> None:
    wide = full_shift(255)
    assert 255**3 > MAX_WINDOW_CODES
    with pytest.raises(SftError):
        build_potential(wide, 3, {}, default=0)
    assert len(build_potential(wide, 2, {}, default=0).values) == 255**2
