"""Single-file, bit-exact store of binary token representations.

Layout (all integers little-endian)::

    header      magic "BTR1" | version u16 | d u32 | vocab_size u32
                | passage_count u64 | flags u32            (26 bytes)
    vocabulary  for token_id in 0..vocab_size-1:
                    count u32, then count x (bits: ceil(d/64) x u64 LSB-first,
                                             scale: f32)
    index       for passage in ascending passage_id:
                    passage_id u64 | token_count u32
                    | token_count x (token_id u32, rep_index u32)
    footer      vocab_offset u64 | index_offset u64
                | checksum u64 (8-byte BLAKE2b of every preceding byte)

Flag bit 0 marks a compressed store. Writers go through a temporary file in
the target directory and an atomic rename.
"""

import hashlib
import logging
import mmap
import os
import struct
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from btr.errors import (
    CorruptStoreError,
    InvalidArgumentError,
    NotFoundError,
    StoreExistsError,
    StoreWriteError,
)
from btr.ops.binarizer import BinaryTokenRep
from btr.ops.bitvec import BitMatrix, words_for
from btr.store.table import PassageRecord, RepresentativeTable, TokenReps
from btr.structures.store_structure import (
    FLAG_COMPRESSED,
    STORE_MAGIC,
    STORE_VERSION,
    StoreHeader,
)

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<4sHIIQI")
COUNT = struct.Struct("<I")
PASSAGE_HEAD = struct.Struct("<QI")
FOOTER = struct.Struct("<QQQ")
CHECKSUM_BYTES = 8
ENTRY_DTYPE = np.dtype([("token_id", "<u4"), ("rep_index", "<u4")])


def record_dtype(d: int) -> np.dtype:
    return np.dtype([("bits", "<u8", (words_for(d),)), ("scale", "<f4")])


def _checksum() -> "hashlib.blake2b":
    return hashlib.blake2b(digest_size=CHECKSUM_BYTES)


class _ChecksumWriter:
    def __init__(self, fh):
        self.fh = fh
        self.digest = _checksum()
        self.offset = 0

    def write(self, data: bytes) -> None:
        self.fh.write(data)
        self.digest.update(data)
        self.offset += len(data)


def atomic_output(path: Union[str, Path], overwrite: bool) -> Tuple[Path, Path]:
    path = Path(path)
    if path.exists() and not overwrite:
        raise StoreExistsError(f"{path} already exists; pass overwrite to replace it")
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    return path, tmp


def write_store(table: RepresentativeTable, path: Union[str, Path], overwrite: bool = False) -> Path:
    table.validate()
    path, tmp = atomic_output(path, overwrite)
    rec = record_dtype(table.d)
    try:
        with open(tmp, "wb") as fh:
            out = _ChecksumWriter(fh)
            out.write(
                HEADER.pack(
                    STORE_MAGIC,
                    STORE_VERSION,
                    table.d,
                    table.vocab_size,
                    len(table.passages),
                    FLAG_COMPRESSED if table.compressed else 0,
                )
            )
            vocab_offset = out.offset
            for token_id in range(table.vocab_size):
                reps = table.reps.get(token_id)
                if reps is None or len(reps) == 0:
                    out.write(COUNT.pack(0))
                    continue
                block = np.empty(len(reps), dtype=rec)
                block["bits"] = reps.bits.words
                block["scale"] = reps.scales
                out.write(COUNT.pack(len(reps)))
                out.write(block.tobytes())
            index_offset = out.offset
            for passage_id in sorted(table.passages):
                record = table.passages[passage_id]
                entries = np.empty(record.token_count, dtype=ENTRY_DTYPE)
                entries["token_id"] = record.token_ids
                entries["rep_index"] = record.rep_index
                out.write(PASSAGE_HEAD.pack(passage_id, record.token_count))
                out.write(entries.tobytes())
            out.write(FOOTER.pack(vocab_offset, index_offset, 0)[: -CHECKSUM_BYTES])
            fh.write(out.digest.digest())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise StoreWriteError(f"Failed to write store {path}: {e}") from e
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    logger.debug("wrote store %s (%d passages, %d vectors)", path, len(table.passages), table.vectors_stored)
    return path


class TokenStore:
    """Read-only, memory-mapped view of a store file.

    Opening verifies magic, version and checksum and indexes section offsets;
    passage lookups then touch only the entries and representatives they need.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._mm: Optional[mmap.mmap] = None
        self._buf: Optional[np.ndarray] = None
        try:
            with open(self.path, "rb") as fh:
                size = os.fstat(fh.fileno()).st_size
                if size < HEADER.size + FOOTER.size:
                    raise CorruptStoreError(f"{self.path}: truncated store ({size} bytes)")
                self._mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        except FileNotFoundError as e:
            raise NotFoundError(f"no store at {self.path}") from e
        except OSError as e:
            raise CorruptStoreError(f"{self.path}: cannot open store: {e}") from e
        try:
            self._parse(size)
        except CorruptStoreError:
            self.close()
            raise
        except (struct.error, ValueError, IndexError, OverflowError) as e:
            self.close()
            raise CorruptStoreError(f"{self.path}: malformed store: {e}") from e

    def _parse(self, size: int) -> None:
        mm = self._mm
        magic, version, d, vocab_size, passage_count, flags = HEADER.unpack_from(mm, 0)
        if magic != STORE_MAGIC:
            raise CorruptStoreError(f"{self.path}: bad magic {magic!r}")
        if version != STORE_VERSION:
            raise CorruptStoreError(f"{self.path}: unsupported store version {version}")

        body_end = size - CHECKSUM_BYTES
        digest = _checksum()
        with memoryview(mm) as view, view[:body_end] as body:
            digest.update(body)
        (stored,) = struct.unpack_from("<Q", mm, body_end)
        if digest.digest() != struct.pack("<Q", stored):
            raise CorruptStoreError(f"{self.path}: checksum mismatch")
        if d < 1:
            raise CorruptStoreError(f"{self.path}: invalid dimension {d}")

        self.header = StoreHeader(
            magic=magic, version=version, d=d, vocab_size=vocab_size, passage_count=passage_count, flags=flags
        )
        vocab_offset, index_offset, _ = FOOTER.unpack_from(mm, size - FOOTER.size)
        index_end = size - FOOTER.size
        if vocab_offset != HEADER.size or not vocab_offset <= index_offset <= index_end:
            raise CorruptStoreError(f"{self.path}: section offsets out of range")

        self._rec = record_dtype(d)
        rec_size = self._rec.itemsize
        self._token_offsets = np.zeros(vocab_size, dtype=np.int64)
        self._rep_counts = np.zeros(vocab_size, dtype=np.int64)
        pos = vocab_offset
        for token_id in range(vocab_size):
            if pos + COUNT.size > index_offset:
                raise CorruptStoreError(f"{self.path}: vocabulary section overruns the index")
            (count,) = COUNT.unpack_from(mm, pos)
            self._token_offsets[token_id] = pos + COUNT.size
            self._rep_counts[token_id] = count
            pos += COUNT.size + count * rec_size
        if pos != index_offset:
            raise CorruptStoreError(f"{self.path}: vocabulary section size mismatch")

        self._passages: Dict[int, Tuple[int, int]] = {}
        for _ in range(passage_count):
            if pos + PASSAGE_HEAD.size > index_end:
                raise CorruptStoreError(f"{self.path}: passage index overruns the footer")
            passage_id, count = PASSAGE_HEAD.unpack_from(mm, pos)
            if passage_id in self._passages:
                raise CorruptStoreError(f"{self.path}: duplicate passage id {passage_id}")
            self._passages[passage_id] = (pos + PASSAGE_HEAD.size, count)
            pos += PASSAGE_HEAD.size + count * ENTRY_DTYPE.itemsize
        if pos != index_end:
            raise CorruptStoreError(f"{self.path}: passage index size mismatch")

        self._buf = np.frombuffer(mm, dtype=np.uint8)

    # lifecycle

    def close(self) -> None:
        self._buf = None
        if self._mm is not None:
            self._mm.close()
            self._mm = None

    def __enter__(self) -> "TokenStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # queries

    @property
    def d(self) -> int:
        return self.header.d

    @property
    def compressed(self) -> bool:
        return self.header.compressed

    def passage_ids(self) -> List[int]:
        return sorted(self._passages)

    def __contains__(self, passage_id: int) -> bool:
        return passage_id in self._passages

    def __len__(self) -> int:
        return len(self._passages)

    def rep_count(self, token_id: int) -> int:
        return int(self._rep_counts[token_id])

    def _entries(self, passage_id: int) -> Tuple[np.ndarray, np.ndarray]:
        if self._buf is None:
            raise InvalidArgumentError(f"{self.path}: store is closed")
        located = self._passages.get(passage_id)
        if located is None:
            raise NotFoundError(f"unknown passage id {passage_id}")
        offset, count = located
        entries = np.frombuffer(self._buf, dtype=ENTRY_DTYPE, count=count, offset=offset)
        token_ids = entries["token_id"].astype(np.int64)
        rep_index = entries["rep_index"].astype(np.int64)
        if count and (
            token_ids.max() >= self.header.vocab_size
            or np.any(rep_index >= self._rep_counts[np.minimum(token_ids, self.header.vocab_size - 1)])
        ):
            raise CorruptStoreError(f"{self.path}: passage {passage_id} references a missing representative")
        return token_ids, rep_index

    def lookup_arrays(self, passage_id: int) -> Tuple[np.ndarray, BitMatrix, np.ndarray]:
        token_ids, rep_index = self._entries(passage_id)
        d, rec = self.header.d, self._rec
        if token_ids.size == 0:
            return token_ids, BitMatrix.empty(d), np.zeros(0, dtype=np.float32)
        starts = self._token_offsets[token_ids] + rep_index * rec.itemsize
        raw = self._buf[starts[:, None] + np.arange(rec.itemsize)]
        records = np.ascontiguousarray(raw).view(rec).reshape(-1)
        try:
            bits = BitMatrix(d, records["bits"])
        except InvalidArgumentError as e:
            raise CorruptStoreError(f"{self.path}: passage {passage_id}: {e}") from e
        return token_ids, bits, records["scale"].astype(np.float32)

    def lookup(self, passage_id: int) -> List[BinaryTokenRep]:
        _, bits, scales = self.lookup_arrays(passage_id)
        return [BinaryTokenRep(bits.row(i), float(scales[i])) for i in range(len(bits))]

    def token_ids(self, passage_id: int) -> np.ndarray:
        return self._entries(passage_id)[0]

    def iter_passages(self) -> Iterator[PassageRecord]:
        for passage_id in self.passage_ids():
            token_ids, rep_index = self._entries(passage_id)
            yield PassageRecord(passage_id, token_ids, rep_index)

    def to_table(self) -> RepresentativeTable:
        d = self.header.d
        reps: Dict[int, TokenReps] = {}
        for token_id in range(self.header.vocab_size):
            count = int(self._rep_counts[token_id])
            if count == 0:
                continue
            block = np.frombuffer(
                self._buf, dtype=self._rec, count=count, offset=int(self._token_offsets[token_id])
            )
            try:
                reps[token_id] = TokenReps(BitMatrix(d, block["bits"]), block["scale"])
            except InvalidArgumentError as e:
                raise CorruptStoreError(f"{self.path}: token {token_id}: {e}") from e
        passages = {record.passage_id: record for record in self.iter_passages()}
        return RepresentativeTable(
            d=d,
            vocab_size=self.header.vocab_size,
            reps=reps,
            passages=passages,
            compressed=self.header.compressed,
        )


def read_store(path: Union[str, Path]) -> TokenStore:
    return TokenStore(path)


def lookup(store: Union[TokenStore, RepresentativeTable], passage_id: int) -> List[BinaryTokenRep]:
    return store.lookup(passage_id)
