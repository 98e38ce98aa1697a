import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from tqdm import tqdm

from btr.config import settings
from btr.errors import InvalidArgumentError
from btr.ops.bitvec import BitMatrix, sign_mean
from btr.ops.token_merge import apply_plan, check_ratio, merged_sizes, plan_merge
from btr.services.reader import MiniReader, precompute_passage_arrays
from btr.store.table import (
    INDEX_ENTRY_BYTES,
    SCALE_BYTES,
    PassageRecord,
    RepresentativeTable,
    TokenReps,
)
from btr.structures.store_structure import StorageReport

logger = logging.getLogger(__name__)


def occurrence_counts(table: RepresentativeTable) -> Dict[int, np.ndarray]:
    """How many corpus occurrences reference each representative."""
    counts = {token: np.zeros(len(reps), dtype=np.int64) for token, reps in table.reps.items()}
    for record in table.passages.values():
        for token in np.unique(record.token_ids).tolist():
            reps = record.rep_index[record.token_ids == token].astype(np.int64)
            counts[token] += np.bincount(reps, minlength=len(counts[token]))
    return counts


def _compress_group(
    reps: TokenReps, weights: np.ndarray, stopword: bool, r_o: float
) -> Tuple[TokenReps, np.ndarray]:
    """Returns the new representatives and old-index -> new-index map."""
    n = len(reps)
    weights = weights.astype(np.float64)
    if n <= 1:
        return reps, np.arange(n, dtype=np.int64)
    if stopword:
        bits = BitMatrix.from_vectors([sign_mean(reps.bits, weights=weights)])
        scale = np.average(reps.scales.astype(np.float64), weights=weights) if weights.sum() else reps.scales.mean()
        return TokenReps(bits, np.array([scale])), np.zeros(n, dtype=np.int64)
    plan = plan_merge(reps.bits, r_o, "hamming")
    if plan.n_edges == 0:
        return reps, np.arange(n, dtype=np.int64)
    bits = apply_plan(reps.bits, plan, weights)
    scale_sums = np.bincount(plan.dest, weights=weights * reps.scales, minlength=plan.n_out)
    totals = merged_sizes(plan, weights)
    scales = np.divide(scale_sums, totals, out=np.zeros(plan.n_out), where=totals > 0)
    # unreferenced representatives keep their scale
    for slot in np.flatnonzero(totals == 0).tolist():
        scales[slot] = reps.scales[plan.dest == slot].mean()
    return TokenReps(bits, scales), plan.dest


def compress_corpus(
    table: RepresentativeTable,
    stopwords: Iterable[int],
    r_o: float = 0.2,
    workers: Optional[int] = None,
) -> RepresentativeTable:
    """Stopword collapse plus per-token bipartite Hamming merging.

    Groups are independent and run on a thread pool; results are assembled in
    token-id order so the output does not depend on the worker count.
    """
    r_o = check_ratio(r_o)
    stop_set: Set[int] = set(int(t) for t in stopwords)
    unknown = sorted(t for t in stop_set if not 0 <= t < table.vocab_size)
    if unknown:
        raise InvalidArgumentError(f"stopword token ids outside the vocabulary: {unknown[:10]}")

    counts = occurrence_counts(table)
    tokens = sorted(table.reps)
    workers = workers or settings.THREADS

    def run(token: int):
        return _compress_group(table.reps[token], counts[token], token in stop_set, r_o)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, tokens))

    new_reps = {token: reps for token, (reps, _) in zip(tokens, results)}
    remaps = {token: remap for token, (_, remap) in zip(tokens, results)}
    passages = {}
    for passage_id, record in table.passages.items():
        new_index = np.empty(record.token_count, dtype=np.int64)
        for pos, (token, rep) in enumerate(zip(record.token_ids.tolist(), record.rep_index.tolist())):
            new_index[pos] = remaps[token][rep]
        passages[passage_id] = PassageRecord(passage_id, record.token_ids, new_index)

    compressed = RepresentativeTable(
        d=table.d, vocab_size=table.vocab_size, reps=new_reps, passages=passages, compressed=True
    )
    logger.info(
        "compressed %d -> %d vectors (%d occurrences, r_o=%.2f, %d stopwords, %d workers)",
        table.vectors_stored,
        compressed.vectors_stored,
        compressed.occurrences,
        r_o,
        len(stop_set),
        workers,
    )
    return compressed


def storage_stats(table: RepresentativeTable, d: Optional[int] = None) -> StorageReport:
    d = table.d if d is None else d
    vectors = table.vectors_stored
    occurrences = table.occurrences
    bytes_bits = vectors * ((d + 7) // 8)
    bytes_scales = vectors * SCALE_BYTES
    bytes_index = occurrences * INDEX_ENTRY_BYTES
    total = bytes_bits + bytes_scales + bytes_index
    float32_bytes = occurrences * d * 4
    return StorageReport(
        vectors_stored=vectors,
        occurrences=occurrences,
        bytes_bits=bytes_bits,
        bytes_scales=bytes_scales,
        bytes_index=bytes_index,
        total=total,
        float32_bytes=float32_bytes,
        ratio_vs_float32=float32_bytes / total if total else 0.0,
    )


def precompute_corpus(model: MiniReader, passages: Sequence[Tuple[int, List[int]]]) -> RepresentativeTable:
    """Binarized layer-k states of every passage, one representative per occurrence."""
    model.eval()
    items = []
    for passage_id, tokens in tqdm(passages, desc="precompute", disable=not settings.SHOW_PROGRESS, leave=False):
        bits, scales = precompute_passage_arrays(model, tokens)
        items.append((passage_id, np.asarray(tokens, dtype=np.int64), bits, scales))
    table = RepresentativeTable.from_passages(model.config.d, model.config.vocab_size, items)
    logger.info("precomputed %d passages, %d token occurrences", len(table.passages), table.occurrences)
    return table
