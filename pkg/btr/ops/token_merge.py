"""Bipartite soft-matching token merge.

Even positions propose, odd positions receive. Each proposer draws one edge to
its most similar receiver, the strongest ``floor(r * n)`` edges are kept and
every receiver is averaged (size-weighted) with the proposers pointing at it.
Output order: receivers in original order, then the unmerged even positions in
original order.
"""

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Literal, Optional, Sequence, Union

import numpy as np
import torch

from btr.errors import InvalidArgumentError
from btr.ops.bitvec import BitMatrix, BitVector, sign_mean

Metric = Literal["hamming", "cosine"]
Tokens = Union[BitMatrix, Sequence[BitVector], np.ndarray]

MAX_RATIO = 0.5


def merge_budget(r: float, n: int) -> int:
    """floor(r * n), robust to binary rounding of r (0.3 * 10 is 3, not 2)."""
    return int(math.floor(r * n + 1e-9))


def check_ratio(r: float) -> float:
    if not (0.0 <= r <= MAX_RATIO):
        raise InvalidArgumentError(f"merge ratio must be in [0, {MAX_RATIO}], got {r}")
    return float(r)


@dataclass
class MergePlan:
    """Where every input token goes.

    dest[i] is the output slot of input i. source[j] is the input that owns
    slot j (its receiver, or the unmerged proposer). anchor[j] is the input
    whose vector output j keeps verbatim (a protected receiver), or -1 when
    output j is the size-weighted mean of its members.
    """

    dest: np.ndarray
    anchor: np.ndarray
    source: np.ndarray
    n_edges: int

    @property
    def n_in(self) -> int:
        return int(self.dest.shape[0])

    @property
    def n_out(self) -> int:
        return int(self.anchor.shape[0])

    def groups(self) -> List[List[int]]:
        members: List[List[int]] = [[] for _ in range(self.n_out)]
        for i, j in enumerate(self.dest.tolist()):
            members[j].append(i)
        return members

    @classmethod
    def identity(cls, n: int) -> "MergePlan":
        ids = np.arange(n, dtype=np.int64)
        return cls(ids, np.full(n, -1, dtype=np.int64), ids.copy(), 0)


@dataclass
class MergeResult:
    merged_tokens: Union[BitMatrix, np.ndarray]
    merge_map: List[List[int]]
    sizes: np.ndarray
    plan: MergePlan = field(repr=False)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    def unit(x):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)

    return unit(np.asarray(a, dtype=np.float64)) @ unit(np.asarray(b, dtype=np.float64)).T


def _similarity(tokens, metric: Metric, a_idx: np.ndarray, b_idx: np.ndarray) -> np.ndarray:
    """Higher is more similar."""
    if metric == "hamming":
        return -tokens.take(a_idx).hamming_matrix(tokens.take(b_idx)).astype(np.float64)
    return cosine_matrix(tokens[a_idx], tokens[b_idx])


def _as_domain(tokens: Tokens, metric: Metric):
    if metric not in ("hamming", "cosine"):
        raise InvalidArgumentError(f"unknown metric {metric!r}")
    if isinstance(tokens, torch.Tensor):
        tokens = tokens.detach().cpu().numpy()
    if isinstance(tokens, BitMatrix) or (
        isinstance(tokens, (list, tuple)) and tokens and isinstance(tokens[0], BitVector)
    ):
        if metric != "hamming":
            raise InvalidArgumentError("cosine similarity is undefined on bit vectors; use hamming")
        return tokens if isinstance(tokens, BitMatrix) else BitMatrix.from_vectors(tokens)
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise InvalidArgumentError(f"expected an (n, d) token array, got shape {tokens.shape}")
    if metric != "cosine":
        raise InvalidArgumentError("hamming distance needs bit vectors; use cosine for continuous tokens")
    return tokens


def plan_merge(
    tokens: Tokens,
    r: float,
    metric: Metric,
    protected: Optional[Iterable[int]] = None,
) -> MergePlan:
    r = check_ratio(r)
    tokens = _as_domain(tokens, metric)
    n = len(tokens)
    protected_set = set(int(i) for i in (protected or ()))
    if any(i < 0 or i >= n for i in protected_set):
        raise InvalidArgumentError(f"protected indices must lie in [0, {n})")

    budget = merge_budget(r, n)
    proposers = np.array([i for i in range(0, n, 2) if i not in protected_set], dtype=np.int64)
    receivers = np.arange(1, n, 2, dtype=np.int64)
    if budget == 0 or proposers.size == 0 or receivers.size == 0:
        return MergePlan.identity(n)

    sim = _similarity(tokens, metric, proposers, receivers)
    # argmax takes the first maximum: ties go to the lowest receiver index
    best = sim.argmax(axis=1)
    score = sim[np.arange(proposers.size), best]
    order = np.lexsort((receivers[best], proposers, -score))
    n_edges = min(budget, proposers.size)
    accepted = order[:n_edges]

    target_of = {int(proposers[i]): int(receivers[best[i]]) for i in accepted}
    dest = np.empty(n, dtype=np.int64)
    anchor, source = [], []
    for slot, b in enumerate(receivers.tolist()):
        dest[b] = slot
        anchor.append(b if b in protected_set else -1)
        source.append(b)
    slot = receivers.size
    for i in range(0, n, 2):
        if i in target_of:
            continue
        dest[i] = slot
        anchor.append(i if i in protected_set else -1)
        source.append(i)
        slot += 1
    for a, b in target_of.items():
        dest[a] = dest[b]
    return MergePlan(
        dest=dest,
        anchor=np.array(anchor, dtype=np.int64),
        source=np.array(source, dtype=np.int64),
        n_edges=n_edges,
    )


def merged_sizes(plan: MergePlan, sizes: Optional[np.ndarray] = None) -> np.ndarray:
    sizes = np.ones(plan.n_in) if sizes is None else np.asarray(sizes, dtype=np.float64)
    return np.bincount(plan.dest, weights=sizes, minlength=plan.n_out)


def apply_plan(tokens, plan: MergePlan, sizes: Optional[np.ndarray] = None):
    """Size-weighted mean per output slot; bit inputs are re-signed."""
    sizes = np.ones(plan.n_in) if sizes is None else np.asarray(sizes, dtype=np.float64)
    if sizes.shape != (plan.n_in,):
        raise InvalidArgumentError(f"expected {plan.n_in} sizes, got shape {sizes.shape}")
    if isinstance(tokens, BitMatrix):
        rows = []
        for j, members in enumerate(plan.groups()):
            if plan.anchor[j] >= 0:
                rows.append(tokens.row(int(plan.anchor[j])))
            elif len(members) == 1:
                rows.append(tokens.row(members[0]))
            else:
                rows.append(sign_mean(tokens.take(members), weights=sizes[members]))
        return BitMatrix.from_vectors(rows, dim=tokens.dim)

    tokens = np.asarray(tokens, dtype=np.float64)
    out = np.zeros((plan.n_out, tokens.shape[1]))
    np.add.at(out, plan.dest, tokens * sizes[:, None])
    out /= merged_sizes(plan, sizes)[:, None]
    # singletons pass through bit-exactly
    counts = np.bincount(plan.dest, minlength=plan.n_out)
    first = np.empty(plan.n_out, dtype=np.int64)
    first[plan.dest[::-1]] = np.arange(plan.n_in)[::-1]
    single = counts == 1
    out[single] = tokens[first[single]]
    kept = plan.anchor >= 0
    out[kept] = tokens[plan.anchor[kept]]
    return out


def bipartite_merge(
    tokens: Tokens,
    r: float,
    metric: Metric,
    protected: Optional[Iterable[int]] = None,
    sizes: Optional[np.ndarray] = None,
) -> MergeResult:
    domain = _as_domain(tokens, metric)
    if len(domain) == 0:
        raise InvalidArgumentError("cannot merge an empty token set")
    plan = plan_merge(domain, r, metric, protected)
    return MergeResult(
        merged_tokens=apply_plan(domain, plan, sizes),
        merge_map=plan.groups(),
        sizes=merged_sizes(plan, sizes),
        plan=plan,
    )


@dataclass
class BatchMerge:
    """Output of ``batched_merge``; row p keeps ``lengths[p]`` tokens as a prefix.

    owner[p, j] is the input index whose identity output j keeps (its
    receiver or the unmerged proposer); slots past the prefix are padding.
    """

    hidden: torch.Tensor
    sizes: torch.Tensor
    lengths: torch.Tensor
    owner: torch.Tensor


def batched_merge(
    hidden: torch.Tensor,
    sizes: torch.Tensor,
    lengths: torch.Tensor,
    r: float,
    protected: Optional[torch.Tensor] = None,
) -> BatchMerge:
    """Cosine ``bipartite_merge`` of every row of a padded (P, N, d) batch at once.

    Row p holds ``lengths[p]`` valid tokens as a prefix and gets its own
    budget ``floor(r * lengths[p])``. Same edges, tie-breaks and output order
    as ``plan_merge``.
    """
    r = check_ratio(r)
    rows, n, d = hidden.shape
    device = hidden.device
    idx = torch.arange(n, device=device)
    lengths = lengths.to(device=device, dtype=torch.long)
    budget = torch.floor(r * lengths.double() + 1e-9).long()
    if rows == 0 or n < 2 or int(budget.max()) == 0:
        return BatchMerge(hidden, sizes, lengths, idx.expand(rows, n).clone())

    valid = idx[None] < lengths[:, None]
    if protected is None:
        protected = torch.zeros_like(valid)
    protected = protected & valid
    a_ok = valid[:, ::2] & ~protected[:, ::2]
    b_ok = valid[:, 1::2]
    n_a, n_b = a_ok.shape[1], b_ok.shape[1]

    unit = hidden / hidden.norm(dim=-1, keepdim=True).clamp_min(torch.finfo(hidden.dtype).tiny)
    scores = unit[:, ::2] @ unit[:, 1::2].transpose(1, 2)
    scores = scores.masked_fill(~b_ok[:, None, :], float("-inf"))
    # argmax takes the first maximum: ties go to the lowest receiver index
    best = scores.argmax(dim=-1)
    best_score = scores.gather(-1, best[..., None]).squeeze(-1).masked_fill(~a_ok, float("-inf"))
    # stable: equal scores keep proposer order
    order = torch.sort(best_score, dim=1, descending=True, stable=True).indices
    a_idx = torch.arange(n_a, device=device).expand(rows, n_a)
    rank = torch.empty_like(order).scatter_(1, order, a_idx)
    n_edges = torch.minimum(budget, a_ok.sum(dim=1))
    merged_a = (rank < n_edges[:, None]) & a_ok

    keep_a = valid[:, ::2] & ~merged_a
    new_lengths = lengths - n_edges
    width = int(new_lengths.max())
    # padding lands in one extra column that is dropped at the end
    a_dest = torch.where(merged_a, best, (lengths // 2)[:, None] + keep_a.long().cumsum(dim=1) - 1)
    a_dest = a_dest.masked_fill(~valid[:, ::2], width)
    b_dest = torch.arange(n_b, device=device).expand(rows, n_b).masked_fill(~b_ok, width)
    dest = torch.empty(rows, n, dtype=torch.long, device=device)
    dest[:, ::2] = a_dest
    dest[:, 1::2] = b_dest
    owns = torch.empty(rows, n, dtype=torch.bool, device=device)
    owns[:, ::2] = keep_a
    owns[:, 1::2] = b_ok

    weights = sizes.to(hidden.dtype)
    total = hidden.new_zeros(rows, width + 1, d).scatter_add_(1, dest[..., None].expand(-1, -1, d), hidden * weights[..., None])
    new_sizes = sizes.new_zeros(rows, width + 1).scatter_add_(1, dest, sizes)
    merged = total / new_sizes.to(hidden.dtype).clamp_min(torch.finfo(hidden.dtype).tiny)[..., None]
    owner = torch.zeros(rows, width + 1, dtype=torch.long, device=device)
    owner.scatter_(1, dest.masked_fill(~owns, width), idx.expand(rows, n))
    owner = owner[:, :width]
    merged = merged[:, :width]

    slot_valid = torch.arange(width, device=device)[None] < new_lengths[:, None]
    anchored = protected.gather(1, owner) & slot_valid
    if bool(anchored.any()):
        kept = hidden.gather(1, owner[..., None].expand(-1, -1, d))
        merged = torch.where(anchored[..., None], kept, merged)
    return BatchMerge(merged, new_sizes[:, :width], new_lengths, owner)
