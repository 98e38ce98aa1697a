"""Bit-packed +/-1 vectors.

Layout is fixed by the token store file format: 64-bit words, least
significant bit first within a word, words little-endian. Bit 1 encodes +1,
bit 0 encodes -1, and padding bits past ``dim`` are always 0.
"""

from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from btr.errors import InvalidArgumentError

WORD_BITS = 64
WORD_DTYPE = np.dtype("<u8")

# packbits/unpackbits order inside each byte; "little" puts element 0 in bit 0
_BIT_ORDER = "little"

# Keeps the pairwise XOR buffer of hamming_matrix around 32 MB
_HAMMING_CHUNK_WORDS = 1 << 22


def words_for(dim: int) -> int:
    return (dim + WORD_BITS - 1) // WORD_BITS


def _pack_mask(mask: np.ndarray) -> np.ndarray:
    n, dim = mask.shape
    n_words = words_for(dim)
    if n == 0 or n_words == 0:
        return np.zeros((n, n_words), dtype=WORD_DTYPE)
    packed = np.packbits(mask, axis=-1, bitorder=_BIT_ORDER)
    buf = np.zeros((n, n_words * 8), dtype=np.uint8)
    buf[:, : packed.shape[1]] = packed
    return buf.view(WORD_DTYPE).reshape(n, n_words)


def _unpack_mask(words: np.ndarray, dim: int) -> np.ndarray:
    n = words.shape[0]
    if n == 0 or dim == 0:
        return np.zeros((n, dim), dtype=bool)
    raw = np.ascontiguousarray(words, dtype=WORD_DTYPE).view(np.uint8)
    raw = raw.reshape(n, -1)
    return np.unpackbits(raw, axis=-1, count=dim, bitorder=_BIT_ORDER).astype(bool)


def _check_padding(words: np.ndarray, dim: int) -> None:
    tail = dim % WORD_BITS
    if tail and words.size:
        keep = np.uint64((1 << tail) - 1)
        if np.any(words[..., -1] & ~keep):
            raise InvalidArgumentError("padding bits past dim must be zero")


def _frozen(words: np.ndarray) -> np.ndarray:
    words = np.array(words, dtype=WORD_DTYPE, copy=True)
    words.flags.writeable = False
    return words


@dataclass(frozen=True, eq=False)
class BitVector:
    dim: int
    words: np.ndarray

    def __post_init__(self):
        if self.dim < 0:
            raise InvalidArgumentError(f"dim must be >= 0, got {self.dim}")
        words = np.asarray(self.words)
        if words.shape != (words_for(self.dim),):
            raise InvalidArgumentError(
                f"expected {words_for(self.dim)} words for dim {self.dim}, got shape {words.shape}"
            )
        _check_padding(words, self.dim)
        object.__setattr__(self, "words", _frozen(words))

    def __len__(self) -> int:
        return self.dim

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitVector):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(self.words, other.words)

    def __hash__(self) -> int:
        return hash((self.dim, self.words.tobytes()))

    def __repr__(self) -> str:
        shown = self.to_bit_string() if self.dim <= 64 else f"{self.to_bit_string()[:64]}..."
        return f"BitVector(dim={self.dim}, bits={shown})"

    def bit(self, i: int) -> bool:
        if not 0 <= i < self.dim:
            raise IndexError(i)
        return bool((int(self.words[i // WORD_BITS]) >> (i % WORD_BITS)) & 1)

    def to_mask(self) -> np.ndarray:
        return _unpack_mask(self.words[None, :], self.dim)[0]

    def to_bit_string(self) -> str:
        return "".join("1" if b else "0" for b in self.to_mask())

    @classmethod
    def from_bit_string(cls, text: str) -> "BitVector":
        if any(c not in "01" for c in text):
            raise InvalidArgumentError(f"not a bit string: {text!r}")
        mask = np.array([c == "1" for c in text], dtype=bool)
        return cls(len(text), _pack_mask(mask[None, :])[0])


@dataclass(frozen=True, eq=False)
class BitMatrix:
    """n packed rows sharing one ``dim``; the batched form of BitVector."""

    dim: int
    words: np.ndarray

    def __post_init__(self):
        words = np.asarray(self.words)
        if words.ndim != 2 or words.shape[1] != words_for(self.dim):
            raise InvalidArgumentError(
                f"expected (n, {words_for(self.dim)}) words for dim {self.dim}, got shape {words.shape}"
            )
        _check_padding(words, self.dim)
        object.__setattr__(self, "words", _frozen(words))

    @classmethod
    def empty(cls, dim: int) -> "BitMatrix":
        return cls(dim, np.zeros((0, words_for(dim)), dtype=WORD_DTYPE))

    @classmethod
    def from_values(cls, values, dim: Optional[int] = None) -> "BitMatrix":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidArgumentError(f"expected a 2-D array, got shape {values.shape}")
        if dim is not None and values.shape[1] != dim:
            raise InvalidArgumentError(f"rows have {values.shape[1]} values, expected {dim}")
        return cls(values.shape[1], _pack_mask(values > 0))

    @classmethod
    def from_vectors(cls, vectors: Sequence[BitVector], dim: Optional[int] = None) -> "BitMatrix":
        vectors = list(vectors)
        if not vectors:
            if dim is None:
                raise InvalidArgumentError("dim is required for an empty set of vectors")
            return cls.empty(dim)
        dims = {v.dim for v in vectors}
        if len(dims) != 1 or (dim is not None and dims != {dim}):
            raise InvalidArgumentError(f"vectors have mixed dims {sorted(dims)}")
        return cls(vectors[0].dim, np.stack([v.words for v in vectors]))

    @classmethod
    def concat(cls, parts: Iterable["BitMatrix"], dim: int) -> "BitMatrix":
        parts = list(parts)
        if any(p.dim != dim for p in parts):
            raise InvalidArgumentError("cannot concatenate matrices of different dims")
        if not parts:
            return cls.empty(dim)
        return cls(dim, np.concatenate([p.words for p in parts], axis=0))

    def __len__(self) -> int:
        return self.words.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitMatrix):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(self.words, other.words)

    def __iter__(self) -> Iterator[BitVector]:
        for i in range(len(self)):
            yield self.row(i)

    def row(self, i: int) -> BitVector:
        return BitVector(self.dim, self.words[i])

    def take(self, indices) -> "BitMatrix":
        return BitMatrix(self.dim, self.words[np.asarray(indices, dtype=np.int64)])

    def to_mask(self) -> np.ndarray:
        return _unpack_mask(self.words, self.dim)

    def unpack(self) -> np.ndarray:
        return np.where(self.to_mask(), 1.0, -1.0)

    def hamming_matrix(self, other: "BitMatrix") -> np.ndarray:
        if self.dim != other.dim:
            raise InvalidArgumentError(f"dimension mismatch: {self.dim} vs {other.dim}")
        n, m = len(self), len(other)
        out = np.empty((n, m), dtype=np.int64)
        if n == 0 or m == 0:
            return out
        n_words = self.words.shape[1]
        step = max(1, _HAMMING_CHUNK_WORDS // max(1, m * n_words))
        for start in range(0, n, step):
            block = self.words[start : start + step, None, :] ^ other.words[None, :, :]
            out[start : start + step] = np.bitwise_count(block).sum(axis=-1, dtype=np.int64)
        return out


def pack(values, dim: int) -> BitVector:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] != dim:
        raise InvalidArgumentError(f"expected {dim} values, got shape {values.shape}")
    return BitVector(dim, _pack_mask(values[None, :] > 0)[0])


def unpack(v: BitVector) -> np.ndarray:
    return np.where(v.to_mask(), 1.0, -1.0)


def hamming(a: BitVector, b: BitVector) -> int:
    if a.dim != b.dim:
        raise InvalidArgumentError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


def sign_mean(reps, weights=None) -> BitVector:
    """Sign of the (optionally weighted) mean of +/-1 vectors; ties map to -1."""
    if isinstance(reps, BitMatrix):
        bits = reps
    else:
        reps = list(reps)
        if not reps:
            raise InvalidArgumentError("sign_mean of an empty set")
        bits = BitMatrix.from_vectors(reps)
    if len(bits) == 0:
        raise InvalidArgumentError("sign_mean of an empty set")
    signs = bits.unpack()
    if weights is None:
        total = signs.sum(axis=0)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(bits),):
            raise InvalidArgumentError("one weight per vector is required")
        total = weights @ signs
    return pack(total, bits.dim)
