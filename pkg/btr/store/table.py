"""In-memory form of a token store: per-token representatives plus passage index."""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

import numpy as np

from btr.errors import InvalidArgumentError, InvariantViolation, NotFoundError
from btr.ops.binarizer import BinaryTokenRep
from btr.ops.bitvec import BitMatrix

# (token_id: u32, rep_index: u32)
INDEX_ENTRY_BYTES = 8
SCALE_BYTES = 4


@dataclass
class TokenReps:
    bits: BitMatrix
    scales: np.ndarray

    def __post_init__(self):
        self.scales = np.array(self.scales, dtype=np.float32)
        if self.scales.shape != (len(self.bits),):
            raise InvalidArgumentError(
                f"{len(self.bits)} representatives but {self.scales.shape} scales"
            )

    def __len__(self) -> int:
        return len(self.bits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenReps):
            return NotImplemented
        return self.bits == other.bits and np.array_equal(self.scales, other.scales)


@dataclass
class PassageRecord:
    passage_id: int
    token_ids: np.ndarray
    rep_index: np.ndarray

    def __post_init__(self):
        if not 0 <= self.passage_id < 1 << 64:
            raise InvalidArgumentError(f"passage id {self.passage_id} is not a 64-bit unsigned value")
        self.token_ids = np.asarray(self.token_ids, dtype=np.uint32)
        self.rep_index = np.asarray(self.rep_index, dtype=np.uint32)
        if self.token_ids.shape != self.rep_index.shape or self.token_ids.ndim != 1:
            raise InvalidArgumentError("token ids and rep indices must be equal-length 1-D arrays")

    @property
    def token_count(self) -> int:
        return int(self.token_ids.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PassageRecord):
            return NotImplemented
        return (
            self.passage_id == other.passage_id
            and np.array_equal(self.token_ids, other.token_ids)
            and np.array_equal(self.rep_index, other.rep_index)
        )


@dataclass
class RepresentativeTable:
    d: int
    vocab_size: int
    reps: Dict[int, TokenReps] = field(default_factory=dict)
    passages: Dict[int, PassageRecord] = field(default_factory=dict)
    compressed: bool = False

    @classmethod
    def from_passages(
        cls,
        d: int,
        vocab_size: int,
        items: Iterable[Tuple[int, np.ndarray, BitMatrix, np.ndarray]],
    ) -> "RepresentativeTable":
        """Uncompressed table: every occurrence owns its representative."""
        per_token_bits: Dict[int, List[np.ndarray]] = {}
        per_token_scales: Dict[int, List[np.ndarray]] = {}
        counts = np.zeros(vocab_size, dtype=np.int64)
        passages: Dict[int, PassageRecord] = {}
        for passage_id, token_ids, bits, scales in items:
            token_ids = np.asarray(token_ids, dtype=np.int64)
            if passage_id in passages:
                raise InvalidArgumentError(f"duplicate passage id {passage_id}")
            if bits.dim != d or len(bits) != token_ids.shape[0] or len(scales) != token_ids.shape[0]:
                raise InvalidArgumentError(f"passage {passage_id}: tokens, bits and scales disagree")
            if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= vocab_size):
                raise InvalidArgumentError(f"passage {passage_id}: token id outside vocabulary")
            rep_index = np.empty(token_ids.shape[0], dtype=np.int64)
            for pos, token in enumerate(token_ids.tolist()):
                rep_index[pos] = counts[token]
                counts[token] += 1
                per_token_bits.setdefault(token, []).append(bits.words[pos])
                per_token_scales.setdefault(token, []).append(scales[pos])
            passages[int(passage_id)] = PassageRecord(int(passage_id), token_ids, rep_index)
        reps = {
            token: TokenReps(BitMatrix(d, np.stack(per_token_bits[token])), np.array(per_token_scales[token]))
            for token in sorted(per_token_bits)
        }
        return cls(d=d, vocab_size=vocab_size, reps=reps, passages=passages, compressed=False)

    @property
    def occurrences(self) -> int:
        return sum(p.token_count for p in self.passages.values())

    @property
    def vectors_stored(self) -> int:
        return sum(len(r) for r in self.reps.values())

    def rep_count(self, token_id: int) -> int:
        reps = self.reps.get(token_id)
        return 0 if reps is None else len(reps)

    def validate(self) -> None:
        for token_id, reps in self.reps.items():
            if not 0 <= token_id < self.vocab_size:
                raise InvariantViolation(f"token id {token_id} outside vocabulary of {self.vocab_size}")
            if reps.bits.dim != self.d:
                raise InvariantViolation(f"token {token_id} representatives have dim {reps.bits.dim}")
        for record in self.passages.values():
            for token, rep in zip(record.token_ids.tolist(), record.rep_index.tolist()):
                if rep >= self.rep_count(token):
                    raise InvariantViolation(
                        f"passage {record.passage_id}: rep index {rep} out of range for token {token}"
                    )

    def lookup_arrays(self, passage_id: int) -> Tuple[np.ndarray, BitMatrix, np.ndarray]:
        record = self.passages.get(passage_id)
        if record is None:
            raise NotFoundError(f"unknown passage id {passage_id}")
        if record.token_count == 0:
            return record.token_ids.astype(np.int64), BitMatrix.empty(self.d), np.zeros(0, np.float32)
        rows, scales = [], []
        for token, rep in zip(record.token_ids.tolist(), record.rep_index.tolist()):
            rows.append(self.reps[token].bits.words[rep])
            scales.append(self.reps[token].scales[rep])
        return record.token_ids.astype(np.int64), BitMatrix(self.d, np.stack(rows)), np.array(scales, np.float32)

    def lookup(self, passage_id: int) -> List[BinaryTokenRep]:
        _, bits, scales = self.lookup_arrays(passage_id)
        return [BinaryTokenRep(bits.row(i), float(scales[i])) for i in range(len(bits))]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RepresentativeTable):
            return NotImplemented
        return (
            self.d == other.d
            and self.vocab_size == other.vocab_size
            and self.compressed == other.compressed
            and self.reps == other.reps
            and self.passages == other.passages
        )
