import numpy as np
import pytest

from btr.errors import InvalidArgumentError
from btr.ops.bitvec import BitMatrix, BitVector, hamming, pack, sign_mean, unpack, words_for
from btr.services.selftest import injected_fault, naive_hamming, naive_pack_words, pack_suite


@pytest.mark.parametrize("dim", [1, 16, 63, 64, 65, 768])
def test_pack_matches_per_bit_layout(rng, dim):
    for _ in range(200):
        values = rng.standard_normal(dim)
        assert [int(w) for w in pack(values, dim).words] == naive_pack_words(values, dim)


def test_first_bit_is_least_significant():
    values = -np.ones(130)
    values[0] = 1.0
    values[64] = 1.0
    v = pack(values, 130)
    assert v.words.tolist() == [1, 1, 0]
    assert v.bit(0) and v.bit(64) and not v.bit(1)


def test_zero_maps_to_minus_one():
    v = pack([0.0, 0.5, -0.5, 0.0], 4)
    assert v.to_bit_string() == "0100"
    assert unpack(v).tolist() == [-1.0, 1.0, -1.0, -1.0]


@pytest.mark.parametrize("dim", [16, 64, 768])
def test_unpack_is_sign_of_input(rng, dim):
    values = rng.standard_normal((100, dim))
    for row in values:
        assert np.array_equal(unpack(pack(row, dim)), np.where(row > 0, 1.0, -1.0))


def test_pack_rejects_wrong_length():
    with pytest.raises(InvalidArgumentError):
        pack([1.0, 2.0], 3)


def test_padding_bits_must_be_zero():
    with pytest.raises(InvalidArgumentError):
        BitVector(3, np.array([8], dtype=np.uint64))
    assert BitVector(3, np.array([7], dtype=np.uint64)).to_bit_string() == "111"


def test_words_for():
    assert [words_for(d) for d in (0, 1, 64, 65, 768)] == [0, 1, 1, 2, 12]


@pytest.mark.parametrize("dim", [16, 64, 768])
def test_hamming_matches_naive(rng, dim):
    for _ in range(200):
        a, b = rng.standard_normal(dim), rng.standard_normal(dim)
        assert hamming(pack(a, dim), pack(b, dim)) == naive_hamming(a, b)


def test_hamming_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        hamming(pack([1.0] * 4, 4), pack([1.0] * 5, 5))


def test_hamming_matrix_matches_pairs(rng):
    a, b = rng.standard_normal((7, 100)), rng.standard_normal((5, 100))
    got = BitMatrix.from_values(a).hamming_matrix(BitMatrix.from_values(b))
    expected = [[naive_hamming(x, y) for y in b] for x in a]
    assert got.tolist() == expected


def test_sign_mean_majority_and_ties():
    a = BitVector.from_bit_string("1100")
    b = BitVector.from_bit_string("1010")
    c = BitVector.from_bit_string("0011")
    assert sign_mean([a, b, c]).to_bit_string() == "1010"
    # one +1 against one -1 is a tie and maps to -1
    assert sign_mean([a, b]).to_bit_string() == "1000"


def test_sign_mean_weights():
    a = BitVector.from_bit_string("10")
    b = BitVector.from_bit_string("01")
    assert sign_mean([a, b], weights=[3, 1]).to_bit_string() == "10"
    assert sign_mean([a, b], weights=[1, 3]).to_bit_string() == "01"


def test_sign_mean_of_empty_set():
    with pytest.raises(InvalidArgumentError):
        sign_mean([])


def test_bit_matrix_rows_and_take(rng):
    values = rng.standard_normal((6, 70))
    m = BitMatrix.from_values(values)
    assert len(m) == 6
    assert m.row(2) == pack(values[2], 70)
    assert m.take([4, 0]) == BitMatrix.from_vectors([m.row(4), m.row(0)])
    assert np.array_equal(m.unpack(), np.where(values > 0, 1.0, -1.0))


def test_bit_matrix_empty():
    m = BitMatrix.empty(10)
    assert len(m) == 0
    assert m.unpack().shape == (0, 10)
    with pytest.raises(InvalidArgumentError):
        BitMatrix.from_vectors([])


def test_hamming_triangle_inequality(rng):
    for _ in range(500):
        dim = int(rng.choice([7, 64, 130]))
        a, b, c = (pack(rng.standard_normal(dim), dim) for _ in range(3))
        assert hamming(a, c) <= hamming(a, b) + hamming(b, c)
    values = rng.standard_normal((40, 96))
    d = BitMatrix.from_values(values).hamming_matrix(BitMatrix.from_values(values))
    assert (d[:, None, :] <= d[:, :, None] + d[None, :, :]).all()


def test_sign_mean_ignores_row_order(rng):
    for _ in range(100):
        n = int(rng.integers(1, 12))
        m = BitMatrix.from_values(rng.standard_normal((n, 70)))
        weights = rng.integers(1, 5, n).astype(np.float64)
        order = rng.permutation(n)
        assert sign_mean(m.take(order)) == sign_mean(m)
        assert sign_mean(m.take(order), weights[order]) == sign_mean(m, weights)
        assert sign_mean([m.row(i) for i in order]) == sign_mean(m)


def test_pack_unpack_round_trip_on_random_vectors(rng):
    dims = rng.choice([1, 16, 63, 64, 65, 768], size=10_000)
    for dim in dims:
        signs = np.where(rng.random(dim) < 0.5, 1.0, -1.0)
        v = pack(signs, int(dim))
        assert np.array_equal(unpack(v), signs)
    signs = np.where(rng.random((10_000, 130)) < 0.5, 1.0, -1.0)
    assert np.array_equal(BitMatrix.from_values(signs).unpack(), signs)


def test_pack_suite_reads_bits_back_one_at_a_time(rng):
    result = pack_suite(rng, trials=20)
    assert result.ok
    assert result.total == 3 * 20 + 1
    values = rng.standard_normal(128)
    with injected_fault("bit-order"):
        v = pack(values, 128)
        # a mirrored byte layout still round-trips through unpack
        assert np.array_equal(unpack(v), np.where(values > 0, 1.0, -1.0))
    assert [v.bit(i) for i in range(128)] != (values > 0).tolist()
