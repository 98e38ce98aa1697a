"""Flat tensor file for a trained reader.

Layout (little-endian)::

    header    magic "BTRM" | version u16 | meta_len u32 | tensor_count u32
    metadata  meta_len bytes of UTF-8 JSON: reader config, vocabulary,
              binarization mode
    toc       tensor_count x (name_len u16 | name | ndim u8 | ndim x u32 shape
                              | data offset u64 | nbytes u64)
    data      float32 tensors, offsets relative to the start of this section
    footer    checksum u64 (8-byte BLAKE2b of every preceding byte)
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
from pydantic import ValidationError

from btr.errors import CorruptStoreError, NotFoundError, StoreWriteError
from btr.services.reader import MiniReader
from btr.services.tokenizer import Vocabulary
from btr.store.token_store import CHECKSUM_BYTES, _checksum, _ChecksumWriter, atomic_output
from btr.structures.reader_structure import ReaderConfig

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"BTRM"
MODEL_VERSION = 1
MODEL_HEADER = struct.Struct("<4sHII")
NAME_LEN = struct.Struct("<H")
NDIM = struct.Struct("<B")
DIM = struct.Struct("<I")
SPAN = struct.Struct("<QQ")
TENSOR_DTYPE = np.dtype("<f4")


def save_model(
    model: MiniReader, vocab: Vocabulary, path: Union[str, Path], overwrite: bool = False
) -> Path:
    meta = json.dumps(
        {
            "config": model.config.model_dump(),
            "vocabulary": vocab.tokens,
            "binarize_mode": model.binarize_mode,
        },
        sort_keys=True,
    ).encode("utf-8")
    tensors = [
        (name, np.ascontiguousarray(t.detach().cpu().numpy(), dtype=TENSOR_DTYPE))
        for name, t in sorted(model.state_dict().items())
    ]
    path, tmp = atomic_output(path, overwrite)
    try:
        with open(tmp, "wb") as fh:
            out = _ChecksumWriter(fh)
            out.write(MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(meta), len(tensors)))
            out.write(meta)
            offset = 0
            for name, array in tensors:
                encoded = name.encode("utf-8")
                out.write(NAME_LEN.pack(len(encoded)) + encoded + NDIM.pack(array.ndim))
                out.write(b"".join(DIM.pack(n) for n in array.shape))
                out.write(SPAN.pack(offset, array.nbytes))
                offset += array.nbytes
            for _, array in tensors:
                out.write(array.tobytes())
            fh.write(out.digest.digest())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise StoreWriteError(f"Failed to write model {path}: {e}") from e
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    logger.debug("wrote model %s (%d tensors)", path, len(tensors))
    return path


class _Cursor:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptStoreError(f"{self.path}: model file is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def load_model(path: Union[str, Path]) -> Tuple[MiniReader, Vocabulary]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise NotFoundError(f"model file {path} does not exist") from e
    except OSError as e:
        raise CorruptStoreError(f"{path}: cannot read model file: {e}") from e
    if len(raw) < MODEL_HEADER.size + CHECKSUM_BYTES:
        raise CorruptStoreError(f"{path}: model file is truncated")
    body, stored = raw[:-CHECKSUM_BYTES], raw[-CHECKSUM_BYTES:]
    digest = _checksum()
    digest.update(body)
    cur = _Cursor(body, path)
    magic, version, meta_len, count = cur.unpack(MODEL_HEADER)
    if magic != MODEL_MAGIC:
        raise CorruptStoreError(f"{path}: not a model file (magic {magic!r})")
    if version != MODEL_VERSION:
        raise CorruptStoreError(f"{path}: unsupported model version {version}")
    if digest.digest() != stored:
        raise CorruptStoreError(f"{path}: checksum mismatch")

    try:
        meta = json.loads(cur.take(meta_len).decode("utf-8"))
        config = ReaderConfig.model_validate(meta["config"])
        vocab = Vocabulary(meta["vocabulary"])
        mode = meta.get("binarize_mode", "off")
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise CorruptStoreError(f"{path}: bad model metadata: {e}") from e
    if len(vocab) != config.vocab_size:
        raise CorruptStoreError(f"{path}: vocabulary has {len(vocab)} tokens, config says {config.vocab_size}")
    if mode not in ("off", "ste", "tanh"):
        raise CorruptStoreError(f"{path}: unknown binarization mode {mode!r}")

    toc = []
    for _ in range(count):
        (name_len,) = cur.unpack(NAME_LEN)
        name = cur.take(name_len).decode("utf-8", errors="replace")
        (ndim,) = cur.unpack(NDIM)
        shape = tuple(cur.unpack(DIM)[0] for _ in range(ndim))
        offset, nbytes = cur.unpack(SPAN)
        toc.append((name, shape, offset, nbytes))
    data_start = cur.pos

    model = MiniReader(config)
    expected = model.state_dict()
    state = {}
    for name, shape, offset, nbytes in toc:
        if name not in expected:
            raise CorruptStoreError(f"{path}: unexpected tensor {name!r}")
        if tuple(expected[name].shape) != shape or nbytes != int(np.prod(shape, dtype=np.int64)) * TENSOR_DTYPE.itemsize:
            raise CorruptStoreError(f"{path}: tensor {name!r} has a bad shape {shape} or size {nbytes}")
        if data_start + offset + nbytes > len(body):
            raise CorruptStoreError(f"{path}: tensor {name!r} lies outside the file")
        array = np.frombuffer(body, dtype=TENSOR_DTYPE, count=nbytes // TENSOR_DTYPE.itemsize, offset=data_start + offset)
        state[name] = torch.from_numpy(array.reshape(shape).copy())
    missing = sorted(set(expected) - set(state))
    if missing:
        raise CorruptStoreError(f"{path}: missing tensors {missing[:5]}")
    model.load_state_dict(state)
    model.binarize_mode = mode

    w = model.norm_weights()
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise CorruptStoreError(f"{path}: binarization-point norm weights must be strictly positive")
    model.eval()
    logger.debug("loaded model %s (d=%d, k=%d)", path, config.d, config.k)
    return model, vocab
