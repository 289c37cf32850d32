"""Distance, search, sampling, grouping, and serialization checks against
naive full-matrix oracles."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqkit import (
    Codebook,
    ContractViolation,
    DegenerateInput,
    gather_quantized,
    group_concat,
    group_split,
    nearest_code,
    normalize_rows,
    pairwise_distances_chunked,
    sample_code_stochastic,
)


def naive_half_sq(queries, codes, kind):
    if kind != "euclidean":
        queries = queries / np.linalg.norm(queries, axis=1, keepdims=True)
        codes = codes / np.linalg.norm(codes, axis=1, keepdims=True)
    diff = queries[:, None, :] - codes[None, :, :]
    return 0.5 * (diff ** 2).sum(axis=2)


@pytest.mark.parametrize("chunk", [1, 7, 64, 4096])
@pytest.mark.parametrize("kind", ["euclidean", "cosine_unit_norm", "cosine_renorm"])
def test_chunked_matches_naive(chunk, kind):
    rng = np.random.default_rng(chunk)
    for _ in range(5):
        n, m, d = rng.integers(1, 40, size=3)
        q = rng.standard_normal((n, d)) + 0.1  # keep away from zero norm
        c = rng.standard_normal((m, d)) + 0.1
        got = pairwise_distances_chunked(q, c, kind, chunk_size=chunk)
        assert np.abs(got - naive_half_sq(q, c, kind)).max() <= 1e-9


@pytest.mark.parametrize("kind", ["euclidean", "cosine_unit_norm", "cosine_renorm"])
def test_nearest_matches_exhaustive_scan(kind):
    rng = np.random.default_rng(hash(kind) % 2 ** 31)
    for _ in range(50):
        n, m, d = rng.integers(1, 20, size=3)
        q = rng.standard_normal((n, d)) + 0.05
        c = rng.standard_normal((m, d)) + 0.05
        idx, z_q, dist = nearest_code(q, c, kind)
        ref = naive_half_sq(q, c, kind)
        assert np.array_equal(idx, ref.argmin(axis=1))
        assert np.allclose(dist, ref.min(axis=1))


def test_ties_break_to_lowest_index():
    q = np.array([[0.0, 0.0]])
    c = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])  # all equidistant
    idx, _, _ = nearest_code(q, c, "euclidean")
    assert idx[0] == 0


def test_cosine_invariant_under_query_scaling():
    rng = np.random.default_rng(9)
    q = rng.standard_normal((20, 5)) + 0.1
    c = rng.standard_normal((12, 5)) + 0.1
    for kind in ("cosine_unit_norm", "cosine_renorm"):
        base = nearest_code(q, c, kind)[0]
        scaled = nearest_code(q * 37.5, c, kind)[0]
        assert np.array_equal(base, scaled)


def test_quantized_norm_conventions():
    rng = np.random.default_rng(10)
    q = rng.standard_normal((15, 4)) + 0.2
    c = rng.standard_normal((6, 4)) + 0.2
    _, z_unit, _ = nearest_code(q, c, "cosine_unit_norm")
    assert np.allclose(np.linalg.norm(z_unit, axis=1), 1.0)
    _, z_renorm, _ = nearest_code(q, c, "cosine_renorm")
    assert np.allclose(np.linalg.norm(z_renorm, axis=1), np.linalg.norm(q, axis=1))


def test_zero_norm_is_degenerate_under_cosine():
    q = np.array([[0.0, 0.0], [1.0, 0.0]])
    c = np.ones((3, 2))
    with pytest.raises(DegenerateInput):
        nearest_code(q, c, "cosine_unit_norm")
    assert nearest_code(q, c, "euclidean")[0].shape == (2,)


def test_normalize_rows_returns_norms():
    x = np.array([[3.0, 4.0], [0.0, 2.0]])
    unit, norms = normalize_rows(x)
    assert np.allclose(norms, [5.0, 2.0])
    assert np.allclose(np.linalg.norm(unit, axis=1), 1.0)


def test_stochastic_low_temperature_matches_argmin():
    rng = np.random.default_rng(12)
    sampler = np.random.default_rng(0)
    for _ in range(20):
        q = rng.standard_normal((50, 3))
        c = rng.standard_normal((8, 3))
        det = pairwise_distances_chunked(q, c, "euclidean").argmin(axis=1)
        got = sample_code_stochastic(q, c, "euclidean", 1e-6, sampler)
        assert np.array_equal(got, det)


def test_stochastic_symmetric_two_codes_is_fair():
    q = np.zeros((10000, 2))
    c = np.array([[1.0, 0.0], [-1.0, 0.0]])
    idx = sample_code_stochastic(q, c, "euclidean", 1.0, np.random.default_rng(42))
    freq = (idx == 0).mean()
    assert abs(freq - 0.5) <= 0.05


def test_stochastic_requires_positive_tau():
    with pytest.raises(ContractViolation):
        sample_code_stochastic(np.zeros((1, 2)), np.ones((2, 2)), "euclidean", 0.0,
                               np.random.default_rng(0))


@given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=6))
@settings(max_examples=30, deadline=None)
def test_group_split_concat_roundtrip(n_group, rows):
    rng = np.random.default_rng(rows * 10 + n_group)
    z = rng.standard_normal((rows, 6 * n_group))
    rows_split = group_split(z, n_group)
    assert rows_split.shape == (rows * n_group, 6)
    back = group_concat(rows_split, n_group)
    assert np.allclose(back * np.sqrt(n_group), z)


def test_group_split_rejects_bad_divisor():
    with pytest.raises(ContractViolation):
        group_split(np.zeros((2, 5)), 2)


def test_effective_codes_identity_and_modes():
    rng = np.random.default_rng(1)
    cb = Codebook(rng.standard_normal((4, 3)))
    assert np.array_equal(cb.effective_codes("off"), cb.codes)
    # raw affine params start at zero -> learnable mode is the identity
    assert np.array_equal(cb.effective_codes("learnable"), cb.codes)
    # fresh ema stats are mean 0 / var 1 on both sides -> identity
    assert np.allclose(cb.effective_codes("ema"), cb.codes)
    cb.affine_scale = np.array([1.0, 0.0, -0.5])
    cb.affine_bias = np.array([0.0, 2.0, 0.0])
    expected = (1.0 + 0.5 * cb.affine_scale) * cb.codes + 0.5 * cb.affine_bias
    assert np.allclose(cb.effective_codes("learnable", lr_scale=0.5), expected)


def test_ema_transform_floors_sigma():
    cb = Codebook(np.zeros((2, 2)))
    cb.ema_var_q = np.zeros(2)
    a, b = cb.ema_transform()
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(b))


def test_mark_used_updates_counters():
    cb = Codebook(np.zeros((5, 2)))
    cb.mark_used([1, 1, 3], step=7)
    assert cb.counts[1] == 2 and cb.counts[3] == 1
    assert cb.last_used[1] == 7 and cb.last_used[3] == 7
    assert cb.last_used[0] == 0


def test_serialization_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(33)
    cb = Codebook(rng.standard_normal((7, 5)))
    cb.affine_scale = rng.standard_normal(5)
    cb.affine_bias = rng.standard_normal(5)
    cb.mark_used([0, 3, 3], 12)
    cb.ema_mean_e = rng.standard_normal(5)
    cb.ema_var_q = rng.random(5) + 0.5
    path = tmp_path / "cb.v1.bin"
    cb.save(path)
    back = Codebook.load(path)
    assert np.array_equal(back.codes, cb.codes)
    assert np.array_equal(back.affine_scale, cb.affine_scale)
    assert np.array_equal(back.affine_bias, cb.affine_bias)
    assert np.array_equal(back.last_used, cb.last_used)
    assert np.array_equal(back.counts, cb.counts)
    assert np.array_equal(back.ema_mean_e, cb.ema_mean_e)
    assert np.array_equal(back.ema_var_q, cb.ema_var_q)


def test_serialization_header(tmp_path):
    cb = Codebook(np.arange(6.0).reshape(3, 2))
    path = tmp_path / "cb.bin"
    cb.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"VQKB"
    m = int.from_bytes(raw[8:16], "little")
    d = int.from_bytes(raw[16:24], "little")
    assert (m, d) == (3, 2)
    with pytest.raises(ContractViolation):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXX" + raw[4:])
        Codebook.load(bad)


def test_quantized_gather_matches_nearest():
    rng = np.random.default_rng(8)
    q = rng.standard_normal((9, 3)) + 0.1
    c = rng.standard_normal((5, 3)) + 0.1
    for kind in ("euclidean", "cosine_unit_norm", "cosine_renorm"):
        idx, z_q, _ = nearest_code(q, c, kind)
        assert np.allclose(z_q, gather_quantized(q, c, idx, kind))
