"""Throughput measurements and compression sweeps.

Every report is a pandas DataFrame with a fixed column set so the CSV files
stay comparable between runs.
"""

import logging
import resource
import statistics
import sys
import time
from typing import Dict, Iterable, List, Optional, Sequence, Set

import numpy as np
import pandas as pd

from btr.services.corpus import QueryRecord
from btr.services.offline_compressor import compress_corpus, storage_stats
from btr.services.reader import MiniReader, PassageCache, infer, reference_forward
from btr.store.table import RepresentativeTable
from btr.store.token_store import TokenStore
from btr.structures.reader_structure import MergeSchedule

logger = logging.getLogger(__name__)

STAGES = ("lookup", "query_encode", "restore", "upper_encoder", "memory_merge", "decode", "encode")
BENCH_COLUMNS = [
    "variant",
    "r_p",
    "queries",
    "repeats",
    "qps_median",
    "qps_min",
    "qps_max",
    "tokens_per_sec",
    "accuracy",
    "peak_rss_mb",
    *(f"{stage}_ms" for stage in STAGES),
]
OFFLINE_SWEEP_COLUMNS = [
    "label",
    "r_o",
    "stopwords",
    "vectors_stored",
    "occurrences",
    "bytes_bits",
    "bytes_scales",
    "bytes_index",
    "total",
    "float32_bytes",
    "ratio_vs_float32",
]
RUNTIME_SWEEP_COLUMNS = ["r_p", "accuracy", "qps_median", "speedup_vs_uncached"]
DEFAULT_OFFLINE_RATIOS = tuple(round(0.05 * i, 2) for i in range(1, 11))
DEFAULT_RUNTIME_RATIOS = (0.0, 0.1, 0.2, 0.3)


def peak_rss_mb() -> float:
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # bytes on macOS, kilobytes elsewhere
    return rss / (1 << 20) if sys.platform == "darwin" else rss / 1024


def _run_variant(
    variant: str,
    answer_one,
    queries: Sequence[QueryRecord],
    token_counts: Sequence[int],
    repeats: int,
    warmup: int,
    r_p: float,
) -> Dict[str, object]:
    for _ in range(warmup):
        for q in queries[: max(1, len(queries) // 4)]:
            answer_one(q, None)
    rates: List[float] = []
    totals: Dict[str, float] = {}
    correct = 0
    elapsed_all = 0.0
    for _ in range(repeats):
        start = time.perf_counter()
        for q in queries:
            answer = answer_one(q, totals)
            correct += int(q.answer is not None and answer == q.answer)
        elapsed = time.perf_counter() - start
        elapsed_all += elapsed
        rates.append(len(queries) / elapsed if elapsed > 0 else float("inf"))
    n_calls = max(1, repeats * len(queries))
    labelled = sum(q.answer is not None for q in queries)
    row = {
        "variant": variant,
        "r_p": r_p,
        "queries": len(queries),
        "repeats": repeats,
        "qps_median": statistics.median(rates),
        "qps_min": min(rates),
        "qps_max": max(rates),
        "tokens_per_sec": repeats * sum(token_counts) / elapsed_all if elapsed_all > 0 else float("inf"),
        "accuracy": correct / (repeats * labelled) if labelled else float("nan"),
        "peak_rss_mb": peak_rss_mb(),
    }
    for stage in STAGES:
        row[f"{stage}_ms"] = 1000.0 * totals.get(stage, 0.0) / n_calls
    logger.info(
        "%s (r_p=%.2f): %.1f qps median [%.1f, %.1f]",
        variant,
        r_p,
        row["qps_median"],
        row["qps_min"],
        row["qps_max"],
    )
    return row


def bench(
    model: MiniReader,
    store: TokenStore,
    queries: Sequence[QueryRecord],
    runtime_ratios: Iterable[float] = (0.0, 0.2),
    schedule: Optional[MergeSchedule] = None,
    repeats: int = 5,
    warmup: int = 1,
    include_uncached: bool = True,
) -> pd.DataFrame:
    """Cached inference at each r_p against the uncached reference path."""
    schedule = schedule or MergeSchedule()
    model.eval()
    token_counts = [len(q.tokens) + sum(len(store.token_ids(p)) for p in q.passage_ids) for q in queries]
    rows = []

    if include_uncached:
        raw = {p: store.token_ids(p).tolist() for q in queries for p in q.passage_ids}

        def uncached(q: QueryRecord, totals):
            return reference_forward(model, q.tokens, [raw[p] for p in q.passage_ids], timings=totals)

        rows.append(_run_variant("uncached", uncached, queries, token_counts, repeats, warmup, 0.0))

    for r_p in runtime_ratios:
        variant_schedule = schedule.model_copy(update={"r_p": float(r_p)})

        def cached(q: QueryRecord, totals, s=variant_schedule):
            start = time.perf_counter()
            caches = []
            for p in q.passage_ids:
                _, bits, scales = store.lookup_arrays(p)
                caches.append(PassageCache(bits, scales))
            if totals is not None:
                totals["lookup"] = totals.get("lookup", 0.0) + time.perf_counter() - start
            return infer(model, q.tokens, caches, s, timings=totals)

        rows.append(_run_variant("cached", cached, queries, token_counts, repeats, warmup, float(r_p)))
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)


def offline_sweep(
    table: RepresentativeTable,
    stopwords: Set[int],
    ratios: Iterable[float] = DEFAULT_OFFLINE_RATIOS,
    workers: Optional[int] = None,
) -> pd.DataFrame:
    """Storage per offline ratio, plus the uncompressed baseline row."""
    rows = [{"label": "uncompressed", "r_o": 0.0, "stopwords": False, **storage_stats(table).model_dump()}]
    for r_o in ratios:
        compressed = compress_corpus(table, stopwords, r_o, workers=workers)
        rows.append({"label": "compressed", "r_o": float(r_o), "stopwords": True, **storage_stats(compressed).model_dump()})
    return pd.DataFrame(rows, columns=OFFLINE_SWEEP_COLUMNS)


def runtime_sweep(
    model: MiniReader,
    store: TokenStore,
    queries: Sequence[QueryRecord],
    ratios: Iterable[float] = DEFAULT_RUNTIME_RATIOS,
    schedule: Optional[MergeSchedule] = None,
    repeats: int = 3,
    warmup: int = 1,
) -> pd.DataFrame:
    report = bench(model, store, queries, ratios, schedule, repeats, warmup, include_uncached=True)
    baseline = float(report.loc[report["variant"] == "uncached", "qps_median"].iloc[0])
    cached = report[report["variant"] == "cached"].copy()
    cached["speedup_vs_uncached"] = cached["qps_median"] / baseline if baseline > 0 else np.nan
    return cached[RUNTIME_SWEEP_COLUMNS].reset_index(drop=True)
