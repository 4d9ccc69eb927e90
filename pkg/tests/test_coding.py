import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmprune.coding import (FormatError, decode_dense_masks, decode_masks, decode_symbols, encode_dense_masks,
                            encode_masks, encode_symbols, entropy_bits_per_param, payload_bits, read_mask_file)
from nmprune.masks import LayerMask, PatternError


def random_masks(seed, shapes, n=2, m=4):
    from math import comb

    rng = np.random.default_rng(seed)
    return [LayerMask(f"layer{i}.w", r, c, rng.integers(0, comb(m, n), (r, c // m)), n, m)
            for i, (r, c) in enumerate(shapes)]


def test_empty_archive_is_header_only():
    data = encode_masks([])
    assert len(data) == 12
    assert data[:4] == b"NMMK"
    assert decode_masks(data) == []


def test_header_layout():
    lm = random_masks(0, [(2, 8)])[0]
    data = encode_masks([lm])
    magic, version, n, m, count = struct.unpack_from("<4sHBBI", data, 0)
    assert (magic, version, n, m, count) == (b"NMMK", 1, 2, 4, 1)
    (nl,) = struct.unpack_from("<H", data, 12)
    assert data[14:14 + nl] == b"layer0.w"
    rows, cols, plen = struct.unpack_from("<III", data, 14 + nl)
    assert (rows, cols) == (2, 8) and len(data) == 14 + nl + 12 + plen


def test_million_parameter_archive_size():
    masks = random_masks(1, [(1000, 1000)])
    data = encode_masks(masks)
    bits, params = payload_bits(data)
    assert params == 1_000_000
    assert bits == pytest.approx(646_240, rel=0.01)
    assert len(data) == pytest.approx(80_780, rel=0.01)
    assert decode_masks(data) == masks


def test_entropy_constant():
    assert entropy_bits_per_param() == pytest.approx(0.64624, abs=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 12))
def test_round_trip(seed, rows, blocks_per_row):
    masks = random_masks(seed, [(rows, 4 * blocks_per_row), (3, 8)])
    assert decode_masks(encode_masks(masks)) == masks


def test_round_trip_thousands_of_blocks_and_other_patterns():
    masks = random_masks(7, [(64, 64), (32, 128)])
    assert sum(lm.num_blocks for lm in masks) >= 1000
    assert decode_masks(encode_masks(masks)) == masks
    for n, m in [(1, 4), (4, 8), (3, 16)]:
        ms = random_masks(3, [(5, 2 * m)], n, m)
        assert decode_masks(encode_masks(ms, n, m)) == ms


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 70), st.lists(st.integers(0, 10**6), min_size=0, max_size=300))
def test_symbol_coder_round_trip(alphabet, raw):
    syms = [s % alphabet for s in raw]
    assert decode_symbols(encode_symbols(syms, alphabet), len(syms), alphabet).tolist() == syms


def test_extreme_symbol_runs():
    for syms in ([0] * 5000, [5] * 5000, [0, 5] * 2500):
        assert decode_symbols(encode_symbols(syms, 6), len(syms), 6).tolist() == syms


def test_truncated_payload_names_tensor():
    data = encode_masks(random_masks(2, [(4, 8), (16, 16)]))
    with pytest.raises(FormatError, match="layer1.w"):
        decode_masks(data[:-3])


def test_bad_magic_version_and_trailing():
    data = encode_masks(random_masks(2, [(4, 8)]))
    with pytest.raises(FormatError, match="magic"):
        decode_masks(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="version"):
        decode_masks(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(FormatError, match="trailing"):
        decode_masks(data + b"\x00")
    with pytest.raises(FormatError):
        decode_masks(data[:5])


def test_mixed_patterns_rejected():
    with pytest.raises(PatternError):
        encode_masks(random_masks(0, [(2, 8)], 1, 4), 2, 4)


def test_dense_bit_file_round_trip_and_dispatch():
    masks = random_masks(5, [(3, 12), (7, 4)])
    dense = encode_dense_masks(masks)
    assert dense[:4] == b"NMMB"
    assert decode_dense_masks(dense) == masks
    assert read_mask_file(dense) == masks
    assert read_mask_file(encode_masks(masks)) == masks
    assert read_mask_file(b"") == []
