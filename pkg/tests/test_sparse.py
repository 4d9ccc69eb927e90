import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmprune.coding import FormatError
from nmprune.masks import LayerMask, PatternError
from nmprune.pruners import magnitude_prune
from nmprune.sparse import (BenchReport, CorruptMetadata, Sparse24Matrix, benchmark, compress, decompress,
                            dense_matmul, footprint, spmm, to_layer_mask)


def random_case(seed, rows, cols, dtype=np.float64):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((rows, cols)).astype(dtype)
    lm = LayerMask("w", rows, cols, rng.integers(0, 6, (rows, cols // 4)))
    return w, lm


def test_single_block_example():
    s = compress(np.array([[9.0, 8.0, 0.0, 0.0]]), LayerMask("w", 1, 4, np.array([[0]])))
    assert s.values.tolist() == [[9.0, 8.0]]
    assert s.meta.tolist() == [0 | (1 << 2)]


def test_round_trip_is_exact_including_f32_bits():
    for dtype in (np.float32, np.float64):
        w, lm = random_case(0, 16, 32, dtype)
        w.reshape(-1)[:3] = [np.nan, -0.0, np.inf]
        d = decompress(compress(w, lm))
        expect = np.where(lm.to_dense(bool), w, np.zeros_like(w))
        assert d.dtype == dtype
        assert d.tobytes() == expect.tobytes()
        assert to_layer_mask(compress(w, lm), "w") == lm


def test_candidate_zero_meta_is_left_half_dense():
    w = np.arange(1.0, 17.0).reshape(2, 8)
    s = compress(w, LayerMask("w", 2, 8, np.zeros((2, 2), int)))
    d = decompress(s)
    assert (d.reshape(2, 2, 4)[..., :2] != 0).all() and not d.reshape(2, 2, 4)[..., 2:].any()


def test_empty_matrix():
    s = Sparse24Matrix(0, 0, np.zeros((0, 0)), np.zeros(0, np.uint8))
    assert decompress(s).shape == (0, 0)


def test_corrupted_duplicate_index():
    w, lm = random_case(1, 2, 8)
    s = compress(w, lm)
    s.meta[0] = (s.meta[0] & 0xF0) | (1 | (1 << 2))
    with pytest.raises(CorruptMetadata, match="block 0"):
        decompress(s)
    with pytest.raises(CorruptMetadata):
        spmm(s, np.ones((8, 1)))


def test_compress_errors():
    w, lm = random_case(2, 4, 8)
    with pytest.raises(PatternError):
        compress(w[:, :4], lm)
    with pytest.raises(PatternError):
        compress(w, LayerMask("w", 4, 8, np.zeros((4, 2), int), 1, 4))
    with pytest.raises(PatternError):
        spmm(compress(w, lm), np.ones((4, 2)))


def test_identity_like_selection():
    w = np.eye(8)
    lm = magnitude_prune(w)
    s = compress(w, lm)
    x = np.random.default_rng(0).standard_normal((8, 3))
    assert np.array_equal(spmm(s, x), decompress(s) @ x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 24), st.integers(1, 12), st.integers(1, 9))
def test_spmm_matches_dense_property(seed, rows, blocks, n):
    w, lm = random_case(seed, rows, 4 * blocks)
    x = np.random.default_rng(seed + 1).standard_normal((4 * blocks, n))
    s = compress(w, lm)
    ref = decompress(s) @ x
    assert np.abs(spmm(s, x) - ref).max() <= 1e-12
    assert np.abs(dense_matmul(decompress(s), x) - ref).max() <= 1e-12


def test_spmm_256_f64():
    w, lm = random_case(3, 256, 256)
    x = np.random.default_rng(4).standard_normal((256, 64))
    s = compress(w, lm)
    assert np.abs(spmm(s, x) - decompress(s) @ x).max() <= 1e-12


def test_metadata_density_and_file_round_trip():
    w, lm = random_case(5, 12, 20, np.float32)
    s = compress(w, lm)
    assert s.meta_bytes() * 8 == (12 * 20 + 4) // 8 * 8  # 1 bit per parameter, padded to a byte
    assert s.value_bytes() * 2 == w.nbytes
    data = s.to_bytes()
    assert data[:4] == b"NMS2"
    s2 = Sparse24Matrix.from_bytes(data)
    assert decompress(s2).tobytes() == decompress(s).tobytes()
    with pytest.raises(FormatError):
        Sparse24Matrix.from_bytes(data[:-1])
    with pytest.raises(FormatError):
        Sparse24Matrix.from_bytes(b"NMS3" + data[4:])


def test_footprint_ratio_1024_f32():
    dense, sparse = footprint(1024, 1024, np.float32)
    assert sparse / dense == pytest.approx(0.53125, abs=1e-12)
    w, lm = random_case(6, 1024, 1024, np.float32)
    assert compress(w, lm).nbytes() == sparse


def test_threads_env(monkeypatch):
    import numba

    monkeypatch.setenv("NMS_THREADS", "1")
    w, lm = random_case(7, 8, 8)
    spmm(compress(w, lm), np.ones((8, 2)))
    assert numba.get_num_threads() == 1


def test_benchmark_report_round_trip():
    (r,) = benchmark([64], repeats=3, batch=8)
    assert r.dense_time > 0 and r.sparse_time > 0
    assert r.footprint_ratio == footprint(64, 64, np.float32)[1] / footprint(64, 64, np.float32)[0]
    assert BenchReport.from_text(r.to_text()) == r
    with pytest.raises(PatternError):
        benchmark([30])


def test_sparse_faster_than_dense_at_1024():
    (r,) = benchmark([1024], repeats=5, batch=256)
    assert r.sparse_time < r.dense_time
