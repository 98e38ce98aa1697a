"""Desk-scale pre-norm encoder-decoder reader, decomposed at encoder layer k.

Every (query, passage) pair is encoded separately and all pair outputs are
fused in the decoder's cross-attention. Below layer k the query and the
passage are encoded independently, so passage states can be computed once,
binarized and cached; layers k+1..n_enc see the concatenation
``query ⊕ passage``.
"""

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pad_sequence

from btr.errors import InvalidArgumentError
from btr.ops.binarizer import (
    DEFAULT_EPS,
    BinaryTokenRep,
    RecoveryHead,
    binarize_rows,
    check_norm_weights,
    recover_rows,
    rms_normalize,
    ste_sign,
)
from btr.ops.bitvec import BitMatrix
from btr.ops.token_merge import batched_merge
from btr.services.tokenizer import BOS_ID, EOS_ID, PAD_ID
from btr.structures.reader_structure import MergeSchedule, ReaderConfig

logger = logging.getLogger(__name__)

BinarizeMode = Literal["off", "ste", "tanh"]
QUERY_SOURCE = -1
PAD_SOURCE = -2


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = DEFAULT_EPS):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.eps = eps

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return rms_normalize(h, self.weight, self.eps)[0]


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_head = d // heads
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d_head).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        memory: Optional[torch.Tensor] = None,
        key_mask: Optional[torch.Tensor] = None,
        causal: bool = False,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns the attended values and the attention probabilities (B, H, Lq, Lk)."""
        src = x if memory is None else memory
        q, k, v = self._split(self.q_proj(x)), self._split(self.k_proj(src)), self._split(self.v_proj(src))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        allowed = None
        if key_mask is not None:
            allowed = key_mask[:, None, None, :]
        if causal:
            tri = torch.ones(x.shape[1], src.shape[1], dtype=torch.bool, device=x.device).tril()
            allowed = tri if allowed is None else allowed & tri
        if allowed is not None:
            scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
        probs = scores.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.o_proj(out), probs


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.w_in = nn.Linear(d, d_ff)
        self.w_out = nn.Linear(d_ff, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_out(F.gelu(self.w_in(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, d_ff: int):
        super().__init__()
        # the norm in front of the first joint layer is the binarization point
        self.attn_norm = RMSNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.ff_norm = RMSNorm(d)
        self.ff = FeedForward(d, d_ff)

    def forward(self, h: torch.Tensor, mask: Optional[torch.Tensor] = None):
        attended, probs = self.attn(self.attn_norm(h), key_mask=mask)
        h = h + attended
        h = h + self.ff(self.ff_norm(h))
        return h, probs


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, d_ff: int):
        super().__init__()
        self.self_norm = RMSNorm(d)
        self.self_attn = MultiHeadAttention(d, heads)
        self.cross_norm = RMSNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads)
        self.ff_norm = RMSNorm(d)
        self.ff = FeedForward(d, d_ff)

    def forward(self, y: torch.Tensor, memory: torch.Tensor, memory_mask: Optional[torch.Tensor] = None):
        y = y + self.self_attn(self.self_norm(y), causal=True)[0]
        y = y + self.cross_attn(self.cross_norm(y), memory=memory, key_mask=memory_mask)[0]
        return y + self.ff(self.ff_norm(y))


@dataclass
class ReaderBatch:
    query: torch.Tensor  # (B, Lq)
    query_mask: torch.Tensor
    passages: torch.Tensor  # (B, P, Lp)
    passage_mask: torch.Tensor
    dec_in: Optional[torch.Tensor] = None  # (B, T), BOS-shifted answers
    labels: Optional[torch.Tensor] = None  # (B, T), answers + EOS, PAD elsewhere

    @property
    def n_passages(self) -> int:
        return int(self.passages.shape[1])


@dataclass
class EncoderOutput:
    memory: torch.Tensor  # (B, P * (Lq + Lp), d)
    memory_mask: torch.Tensor
    passage_states: torch.Tensor  # (B * P, Lp, d), layer-k passage states
    passage_mask: torch.Tensor  # (B * P, Lp)
    query_len: int
    joint_attention: Optional[torch.Tensor] = None  # (B * P, H, L, L) at layer k + 1
    codes: Optional[torch.Tensor] = None  # binarization-point codes of the passage tokens


def _pad(rows: Sequence[Sequence[int]], length: int) -> torch.Tensor:
    out = torch.full((len(rows), length), PAD_ID, dtype=torch.long)
    for i, row in enumerate(rows):
        if row:
            out[i, : len(row)] = torch.as_tensor(list(row), dtype=torch.long)
    return out


def make_batch(
    queries: Sequence[Sequence[int]],
    passages: Sequence[Sequence[Sequence[int]]],
    answers: Optional[Sequence[Sequence[int]]] = None,
) -> ReaderBatch:
    """Pads a batch; every example must carry the same number of passages."""
    if len(queries) != len(passages):
        raise InvalidArgumentError(f"{len(queries)} queries but {len(passages)} passage lists")
    counts = {len(p) for p in passages}
    if len(counts) > 1:
        raise InvalidArgumentError(f"examples carry different passage counts: {sorted(counts)}")
    n_p = counts.pop() if counts else 0
    lq = max((len(q) for q in queries), default=0)
    lp = max((len(p) for ps in passages for p in ps), default=0)
    query = _pad(queries, lq)
    flat = [p for ps in passages for p in ps]
    passage = _pad(flat, lp).view(len(queries), n_p, lp)
    batch = ReaderBatch(query=query, query_mask=query != PAD_ID, passages=passage, passage_mask=passage != PAD_ID)
    if answers is not None:
        t = max(len(a) for a in answers) + 1
        batch.dec_in = _pad([[BOS_ID, *a] for a in answers], t)
        batch.labels = _pad([[*a, EOS_ID] for a in answers], t)
    return batch


class MiniReader(nn.Module):
    def __init__(self, config: ReaderConfig):
        super().__init__()
        self.config = config
        c = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(c.seed)
            self.embed = nn.Embedding(c.vocab_size, c.d)
            self.query_pos = nn.Embedding(c.max_query_len, c.d)
            self.passage_pos = nn.Embedding(c.max_passage_len, c.d)
            self.answer_pos = nn.Embedding(c.max_answer_len + 1, c.d)
            self.encoder = nn.ModuleList(EncoderLayer(c.d, c.heads, c.d_ff) for _ in range(c.n_enc))
            self.enc_norm = RMSNorm(c.d)
            self.decoder = nn.ModuleList(DecoderLayer(c.d, c.heads, c.d_ff) for _ in range(c.n_dec))
            self.dec_norm = RMSNorm(c.d)
            self.lm_head = nn.Linear(c.d, c.vocab_size, bias=False)
            self.recovery = RecoveryHead(c.d)
        self.binarize_mode: BinarizeMode = "off"

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def binarization_norm(self) -> RMSNorm:
        return self.encoder[self.config.k].attn_norm

    def norm_weights(self) -> np.ndarray:
        return self.binarization_norm.weight.detach().cpu().numpy().astype(np.float64)

    def clamp_norm_weights(self, floor: float = 1e-3) -> None:
        with torch.no_grad():
            self.binarization_norm.weight.clamp_(min=floor)

    def _positions(self, table: nn.Embedding, length: int, limit: int, what: str) -> torch.Tensor:
        if length > limit:
            raise InvalidArgumentError(f"{what} of length {length} exceeds the maximum {limit}")
        return table(torch.arange(length, device=table.weight.device))

    def embed_query(self, tokens: torch.Tensor) -> torch.Tensor:
        length = tokens.shape[-1]
        return self.embed(tokens) + self._positions(self.query_pos, length, self.config.max_query_len, "query")

    def embed_passage(self, tokens: torch.Tensor) -> torch.Tensor:
        length = tokens.shape[-1]
        return self.embed(tokens) + self._positions(self.passage_pos, length, self.config.max_passage_len, "passage")

    def embed_answer(self, tokens: torch.Tensor) -> torch.Tensor:
        length = tokens.shape[-1]
        return self.embed(tokens) + self._positions(self.answer_pos, length, self.config.max_answer_len + 1, "answer")

    def run_encoder(
        self,
        h: torch.Tensor,
        mask: Optional[torch.Tensor],
        start: int,
        stop: int,
        capture_at: Optional[int] = None,
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Encoder layers [start, stop), 0-based; optionally keeps one layer's attention."""
        captured = None
        for i in range(start, stop):
            h, probs = self.encoder[i](h, mask)
            if i == capture_at:
                captured = probs
        return h, captured

    def binarization_point(self, h_k: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Replaces layer-k states by what the cache would restore; returns (states, codes)."""
        if self.binarize_mode == "off":
            return h_k, None
        norm = self.binarization_norm
        x, scale = rms_normalize(h_k, norm.weight, norm.eps)
        codes = ste_sign(x) if self.binarize_mode == "ste" else torch.tanh(x)
        return codes * scale / norm.weight, codes

    def _joint(self, q_k, p_in, query_mask, passage_mask, n_passages, capture):
        """Layers k+1..n_enc on every pair; q_k is (B, Lq, d), p_in (B * P, Lp, d)."""
        b, lq, d = q_k.shape
        h = torch.cat([q_k.repeat_interleave(n_passages, dim=0), p_in], dim=1)
        mask = torch.cat([query_mask.repeat_interleave(n_passages, dim=0), passage_mask], dim=1)
        h, probs = self.run_encoder(h, mask, self.k, self.config.n_enc, capture_at=self.k if capture else None)
        h = self.enc_norm(h)
        return h.reshape(b, -1, d), mask.reshape(b, -1), probs

    def forward_reference(self, batch: ReaderBatch, capture_attention: bool = False) -> EncoderOutput:
        """Undecomposed encoder: every pair runs all layers jointly."""
        b, n_p, lp = batch.passages.shape
        lq = batch.query.shape[1]
        q = self.embed_query(batch.query).repeat_interleave(n_p, dim=0)
        p = self.embed_passage(batch.passages.reshape(b * n_p, lp))
        passage_mask = batch.passage_mask.reshape(b * n_p, lp)
        h = torch.cat([q, p], dim=1)
        mask = torch.cat([batch.query_mask.repeat_interleave(n_p, dim=0), passage_mask], dim=1)
        h, _ = self.run_encoder(h, mask, 0, self.k)
        passage_states = h[:, lq:]
        h, probs = self.run_encoder(
            h, mask, self.k, self.config.n_enc, capture_at=self.k if capture_attention else None
        )
        h = self.enc_norm(h)
        return EncoderOutput(
            memory=h.reshape(b, n_p * (lq + lp), -1),
            memory_mask=mask.reshape(b, -1),
            passage_states=passage_states,
            passage_mask=passage_mask,
            query_len=lq,
            joint_attention=probs,
        )

    def forward_decomposed(self, batch: ReaderBatch, capture_attention: bool = False) -> EncoderOutput:
        """Query and passages run layers 1..k separately, then the binarization point, then joint layers."""
        b, n_p, lp = batch.passages.shape
        lq = batch.query.shape[1]
        q_k, _ = self.run_encoder(self.embed_query(batch.query), batch.query_mask, 0, self.k)
        passage_mask = batch.passage_mask.reshape(b * n_p, lp)
        p_k, _ = self.run_encoder(self.embed_passage(batch.passages.reshape(b * n_p, lp)), passage_mask, 0, self.k)
        p_in, codes = self.binarization_point(p_k)
        memory, memory_mask, probs = self._joint(q_k, p_in, batch.query_mask, passage_mask, n_p, capture_attention)
        return EncoderOutput(
            memory=memory,
            memory_mask=memory_mask,
            passage_states=p_k,
            passage_mask=passage_mask,
            query_len=lq,
            joint_attention=probs,
            codes=codes,
        )

    def decode(
        self,
        dec_in: torch.Tensor,
        memory: Union[torch.Tensor, Sequence[torch.Tensor]],
        memory_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Teacher-forced logits. ``memory`` may be one tensor or one per decoder layer."""
        if isinstance(memory, torch.Tensor):
            memories = [memory] * len(self.decoder)
            masks = [memory_mask] * len(self.decoder)
        else:
            memories = list(memory)
            masks = [None] * len(self.decoder)
        if len(memories) != len(self.decoder):
            raise InvalidArgumentError(f"expected {len(self.decoder)} decoder memories, got {len(memories)}")
        y = self.embed_answer(dec_in)
        for layer, mem, mask in zip(self.decoder, memories, masks):
            y = layer(y, mem, mask)
        return self.lm_head(self.dec_norm(y))

    def forward(self, batch: ReaderBatch, decomposed: bool = False, capture_attention: bool = False):
        if batch.dec_in is None:
            raise InvalidArgumentError("batch has no decoder inputs")
        enc = (self.forward_decomposed if decomposed else self.forward_reference)(batch, capture_attention)
        return self.decode(batch.dec_in, enc.memory, enc.memory_mask), enc

    @torch.no_grad()
    def generate(
        self,
        memory: Union[torch.Tensor, Sequence[torch.Tensor]],
        memory_mask: Optional[torch.Tensor] = None,
        max_len: Optional[int] = None,
    ) -> List[List[int]]:
        """Greedy decoding to EOS or ``max_len``; returned sequences exclude BOS and EOS."""
        max_len = self.config.max_answer_len if max_len is None else min(max_len, self.config.max_answer_len)
        first = memory if isinstance(memory, torch.Tensor) else memory[0]
        b = first.shape[0]
        dec = torch.full((b, 1), BOS_ID, dtype=torch.long, device=first.device)
        finished = torch.zeros(b, dtype=torch.bool, device=first.device)
        for _ in range(max_len):
            nxt = self.decode(dec, memory, memory_mask)[:, -1].argmax(dim=-1)
            nxt = torch.where(finished, torch.full_like(nxt, PAD_ID), nxt)
            dec = torch.cat([dec, nxt[:, None]], dim=1)
            finished |= nxt == EOS_ID
            if bool(finished.all()):
                break
        answers = []
        for row in dec[:, 1:].tolist():
            out = []
            for token in row:
                if token in (EOS_ID, PAD_ID):
                    break
                out.append(token)
            answers.append(out)
        return answers


@dataclass
class PassageCache:
    """Cached binary representation of one passage."""

    bits: BitMatrix
    scales: np.ndarray

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def from_reps(cls, reps: Sequence[BinaryTokenRep], dim: int) -> "PassageCache":
        if not reps:
            return cls(BitMatrix.empty(dim), np.zeros(0, dtype=np.float32))
        return cls(BitMatrix.from_vectors([r.bits for r in reps]), np.array([r.scale for r in reps]))

    def to_reps(self) -> List[BinaryTokenRep]:
        return [BinaryTokenRep(self.bits.row(i), float(s)) for i, s in enumerate(self.scales)]


CachedPassage = Union[PassageCache, Sequence[BinaryTokenRep], torch.Tensor]


@dataclass
class EncoderState:
    """Query-passage pairs between upper encoder layers, padded to one width.

    Row p holds ``lengths[p]`` tokens as a prefix. source is -1 for query
    tokens, the passage's slot otherwise and -2 on padding; position is the
    token's index in its pair at layer k+1 input; sizes count the original
    tokens absorbed into each row.
    """

    hidden: torch.Tensor  # (P, N, d)
    source: torch.Tensor  # (P, N)
    position: torch.Tensor  # (P, N)
    sizes: torch.Tensor  # (P, N)
    lengths: torch.Tensor  # (P,)

    @classmethod
    def pairs(cls, query_states: torch.Tensor, passages: Sequence[torch.Tensor]) -> "EncoderState":
        """One row per passage, each prefixed with the shared query states."""
        if not passages:
            raise InvalidArgumentError("at least one passage slot is needed")
        lq, d = query_states.shape
        padded = pad_sequence([p.to(query_states.dtype) for p in passages], batch_first=True)
        rows, width = padded.shape[0], lq + padded.shape[1]
        hidden = torch.cat([query_states.expand(rows, lq, d), padded], dim=1)
        lengths = torch.as_tensor([lq + p.shape[0] for p in passages], dtype=torch.long)
        position = torch.arange(width).expand(rows, width)
        valid = position < lengths[:, None]
        slot = torch.arange(rows)[:, None].expand(rows, width)
        source = torch.where(position < lq, QUERY_SOURCE, slot).masked_fill(~valid, PAD_SOURCE)
        return cls(
            hidden=hidden,
            source=source,
            position=position.masked_fill(~valid, -1),
            sizes=valid.to(torch.float64),
            lengths=lengths,
        )

    def __len__(self) -> int:
        """Tokens across all rows."""
        return int(self.lengths.sum())

    @property
    def mask(self) -> torch.Tensor:
        return torch.arange(self.hidden.shape[1])[None] < self.lengths[:, None]

    def with_hidden(self, hidden: torch.Tensor) -> "EncoderState":
        return replace(self, hidden=hidden)

    def merge(self, r: float, protected: Optional[torch.Tensor] = None) -> "EncoderState":
        if r == 0 or self.hidden.shape[1] < 2:
            return self
        out = batched_merge(self.hidden, self.sizes, self.lengths, r, protected)
        if torch.equal(out.lengths, self.lengths):
            return self
        valid = torch.arange(out.owner.shape[1])[None] < out.lengths[:, None]
        return EncoderState(
            hidden=out.hidden,
            source=self.source.gather(1, out.owner).masked_fill(~valid, PAD_SOURCE),
            position=self.position.gather(1, out.owner).masked_fill(~valid, -1),
            sizes=out.sizes,
            lengths=out.lengths,
        )

    def protected_mask(self, schedule: MergeSchedule) -> Optional[torch.Tensor]:
        if not (schedule.protect_query or schedule.protected_positions):
            return None
        mask = torch.zeros_like(self.source, dtype=torch.bool)
        if schedule.protect_query:
            mask |= self.source == QUERY_SOURCE
        if schedule.protected_positions:
            mask |= torch.isin(self.position, torch.as_tensor(schedule.protected_positions))
        return mask

    def flatten(self) -> "EncoderState":
        """All rows' tokens, in row order, as a single row."""
        keep = self.mask
        return EncoderState(
            hidden=self.hidden[keep][None],
            source=self.source[keep][None],
            position=self.position[keep][None],
            sizes=self.sizes[keep][None],
            lengths=self.lengths.sum().reshape(1),
        )


class StageTimer:
    """Accumulates wall-clock seconds per named stage into ``totals``."""

    def __init__(self, totals: Optional[Dict[str, float]] = None):
        self.totals = totals

    @contextmanager
    def __call__(self, stage: str):
        if self.totals is None:
            yield
            return
        start = time.perf_counter()
        try:
            yield
        finally:
            self.totals[stage] = self.totals.get(stage, 0.0) + time.perf_counter() - start


def _param_dtype(model: MiniReader) -> torch.dtype:
    return model.embed.weight.dtype


@torch.no_grad()
def passage_states(model: MiniReader, tokens: Sequence[int]) -> torch.Tensor:
    """Layer-k states of a passage encoded alone, shape (L, d)."""
    tokens = list(tokens)
    if len(tokens) > model.config.max_passage_len:
        raise InvalidArgumentError(
            f"passage of length {len(tokens)} exceeds the maximum {model.config.max_passage_len}"
        )
    if not tokens:
        return torch.zeros(0, model.config.d, dtype=_param_dtype(model))
    ids = torch.as_tensor(tokens, dtype=torch.long)[None]
    h, _ = model.run_encoder(model.embed_passage(ids), None, 0, model.k)
    return h[0]


def precompute_passage_arrays(model: MiniReader, tokens: Sequence[int]) -> Tuple[BitMatrix, np.ndarray]:
    states = passage_states(model, tokens)
    if states.shape[0] == 0:
        return BitMatrix.empty(model.config.d), np.zeros(0, dtype=np.float32)
    bits, scales = binarize_rows(states.double().cpu().numpy(), model.norm_weights(), model.binarization_norm.eps)
    return bits, scales.astype(np.float32)


def precompute_passage(model: MiniReader, tokens: Sequence[int]) -> List[BinaryTokenRep]:
    bits, scales = precompute_passage_arrays(model, tokens)
    return PassageCache(bits, scales).to_reps()


def _restore(model: MiniReader, cache: CachedPassage, w: np.ndarray) -> torch.Tensor:
    d = model.config.d
    dtype = _param_dtype(model)
    if isinstance(cache, torch.Tensor):
        if cache.ndim != 2 or cache.shape[1] != d:
            raise InvalidArgumentError(f"cached states must be (L, {d}), got {tuple(cache.shape)}")
        return cache.to(dtype)
    if not isinstance(cache, PassageCache):
        reps = list(cache)
        if any(r.bits.dim != d for r in reps):
            raise InvalidArgumentError(f"cached representation dimension does not match the model's d={d}")
        cache = PassageCache.from_reps(reps, d)
    if cache.bits.dim != d:
        raise InvalidArgumentError(f"cached representation has d={cache.bits.dim}, model has d={d}")
    if len(cache) == 0:
        return torch.zeros(0, d, dtype=dtype)
    return torch.as_tensor(recover_rows(cache.bits, cache.scales, w), dtype=dtype)


@torch.no_grad()
def encode_pairs(model: MiniReader, pairs: EncoderState, schedule: MergeSchedule) -> EncoderState:
    """Layers k+1..n_enc on every pair at once, merging within each pair after every layer."""
    for layer in model.encoder[model.k :]:
        hidden, _ = layer(pairs.hidden, pairs.mask)
        pairs = pairs.with_hidden(hidden)
        pairs = pairs.merge(schedule.r_p, pairs.protected_mask(schedule))
    return pairs.with_hidden(model.enc_norm(pairs.hidden))


@torch.no_grad()
def infer_from_states(
    model: MiniReader,
    query_states: torch.Tensor,
    passages: Sequence[torch.Tensor],
    schedule: MergeSchedule,
    max_len: Optional[int] = None,
    timer: Optional[StageTimer] = None,
    return_memory: bool = False,
):
    """Upper encoder, decoder-memory merging and greedy decoding from layer-k states."""
    timer = timer or StageTimer()
    slots = list(passages) or [torch.zeros(0, model.config.d, dtype=query_states.dtype)]
    with timer("upper_encoder"):
        memory = encode_pairs(model, EncoderState.pairs(query_states, slots), schedule).flatten()
    memories = []
    with timer("memory_merge"):
        for d_idx in range(1, model.config.n_dec + 1):
            if schedule.merges_before_decoder_layer(d_idx):
                protected = memory.source == QUERY_SOURCE if schedule.protect_query else None
                memory = memory.merge(schedule.r_p, protected)
            memories.append(memory.hidden)
    with timer("decode"):
        answer = model.generate(memories, max_len=max_len)[0]
    if return_memory:
        return answer, memories
    return answer


@torch.no_grad()
def infer(
    model: MiniReader,
    query: Sequence[int],
    passages: Sequence[CachedPassage],
    schedule: Optional[MergeSchedule] = None,
    max_len: Optional[int] = None,
    timings: Optional[Dict[str, float]] = None,
) -> List[int]:
    """Answer a query from cached passage representations.

    The query runs layers 1..k on the fly, cached passages are restored to
    continuous states, and every pair runs the upper encoder with intra-pair
    merging. An empty passage list answers from the query alone.
    """
    if schedule is None:
        schedule = MergeSchedule(r_p=model.config.r_p, g=model.config.g)
    timer = StageTimer(timings)
    was_training = model.training
    model.eval()
    try:
        with timer("query_encode"):
            ids = torch.as_tensor(list(query), dtype=torch.long)[None]
            q_k, _ = model.run_encoder(model.embed_query(ids), None, 0, model.k)
        with timer("restore"):
            w = check_norm_weights(model.norm_weights(), model.config.d)
            states = [_restore(model, cache, w) for cache in passages]
        return infer_from_states(model, q_k[0], states, schedule, max_len, timer)
    finally:
        model.train(was_training)


@torch.no_grad()
def reference_forward(
    model: MiniReader,
    query: Sequence[int],
    passages: Sequence[Sequence[int]],
    max_len: Optional[int] = None,
    timings: Optional[Dict[str, float]] = None,
) -> List[int]:
    """Uncached reader: each (query, passage) pair runs every encoder layer jointly."""
    timer = StageTimer(timings)
    was_training = model.training
    model.eval()
    try:
        passages = [list(p) for p in passages] or [[]]
        batch = make_batch([list(query)], [passages])
        with timer("encode"):
            enc = model.forward_reference(batch)
        with timer("decode"):
            return model.generate(enc.memory, enc.memory_mask, max_len=max_len)[0]
    finally:
        model.train(was_training)
