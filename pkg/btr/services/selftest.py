"""Oracle suites run by ``btr selftest``.

Each suite compares a production path against a naive, independent oracle
and reports how many of its cases agreed. The oracles here are also imported
by the test modules.
"""

import logging
import math
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch

from btr.errors import BTRError, CorruptStoreError
from btr.ops import bitvec
from btr.ops.binarizer import binarize_rows, recover_rows, recovery_loss, ste_binarize_backward
from btr.ops.bitvec import BitMatrix, BitVector, hamming, pack, unpack
from btr.ops.token_merge import bipartite_merge, merge_budget
from btr.services.gradcheck import check_gradient, check_parameter_gradients
from btr.store.table import RepresentativeTable
from btr.store.token_store import read_store, write_store
from btr.structures.reader_structure import ReaderConfig
from btr.structures.run_structure import SuiteResult

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-3
LOSS_GRADIENT_TOLERANCE = 1e-4
FAULTS = ("bit-order",)


def naive_pack_words(values: Sequence[float], dim: int) -> List[int]:
    """Bit i of the vector is bit i % 64 of word i // 64, set when values[i] > 0."""
    words = [0] * ((dim + 63) // 64)
    for i in range(dim):
        if values[i] > 0:
            words[i // 64] |= 1 << (i % 64)
    return words


def naive_hamming(a: Sequence[float], b: Sequence[float]) -> int:
    return sum(1 for x, y in zip(a, b) if (x > 0) != (y > 0))


def _naive_similarity(u, v, metric: str) -> float:
    if metric == "hamming":
        return -float(sum(1 for x, y in zip(u.to_bit_string(), v.to_bit_string()) if x != y))
    dot = sum(float(x) * float(y) for x, y in zip(u, v))
    nu = math.sqrt(sum(float(x) ** 2 for x in u))
    nv = math.sqrt(sum(float(y) ** 2 for y in v))
    return 0.0 if nu == 0 or nv == 0 else dot / (nu * nv)


def brute_force_merge(tokens: Sequence, r: float, metric: str, protected=()) -> List[List[int]]:
    """Enumerate every proposer -> receiver edge and keep the best floor(r * n)."""
    n = len(tokens)
    protected = set(protected)
    proposers = [i for i in range(0, n, 2) if i not in protected]
    receivers = list(range(1, n, 2))
    kept = []
    if receivers:
        edges = []
        for a in proposers:
            best, best_score = None, -math.inf
            for b in receivers:
                score = _naive_similarity(tokens[a], tokens[b], metric)
                if score > best_score:
                    best, best_score = b, score
            edges.append((-best_score, a, best))
        edges.sort()
        kept = edges[: min(merge_budget(r, n), len(proposers))]
    if not kept:
        return [[i] for i in range(n)]
    absorbed: Dict[int, List[int]] = {b: [b] for b in receivers}
    merged = set()
    for _, a, b in kept:
        absorbed[b].append(a)
        merged.add(a)
    groups = [sorted(absorbed[b]) for b in receivers]
    groups += [[i] for i in range(0, n, 2) if i not in merged]
    return groups


@contextmanager
def injected_fault(fault: Optional[str]) -> Iterator[None]:
    """Debug-only mutation hooks used to prove the suites catch real bugs."""
    if fault is None:
        yield
        return
    if fault != "bit-order":
        raise ValueError(f"unknown fault {fault!r}")
    saved = bitvec._BIT_ORDER
    bitvec._BIT_ORDER = "big"
    try:
        yield
    finally:
        bitvec._BIT_ORDER = saved


class _Suite:
    def __init__(self, name: str):
        self.name = name
        self.passed = 0
        self.total = 0
        self.failures: List[str] = []
        self.started = time.perf_counter()

    def check(self, ok: bool, what: str) -> None:
        self.total += 1
        if ok:
            self.passed += 1
        elif len(self.failures) < 5:
            self.failures.append(what)

    def result(self) -> SuiteResult:
        return SuiteResult(
            name=self.name,
            passed=self.passed,
            total=self.total,
            seconds=time.perf_counter() - self.started,
            failures=self.failures,
        )


def pack_suite(rng: np.random.Generator, trials: int = 1000) -> SuiteResult:
    suite = _Suite("pack")
    for t in range(trials):
        dim = int(rng.choice([1, 16, 63, 64, 65, 768]))
        values = rng.standard_normal(dim)
        values[rng.random(dim) < 0.05] = 0.0
        v = pack(values, dim)
        suite.check([int(w) for w in v.words] == naive_pack_words(values, dim), f"trial {t}: layout, dim={dim}")
        suite.check(np.array_equal(unpack(v), np.where(values > 0, 1.0, -1.0)), f"trial {t}: unpack, dim={dim}")
        suite.check([v.bit(i) for i in range(dim)] == (values > 0).tolist(), f"trial {t}: bit i, dim={dim}")
    values = rng.standard_normal((64, 768))
    matrix = BitMatrix.from_values(values)
    suite.check(all(matrix.row(i) == pack(values[i], 768) for i in range(64)), "batched pack")
    return suite.result()


def hamming_suite(rng: np.random.Generator, trials: int = 1000) -> SuiteResult:
    suite = _Suite("hamming")
    for t in range(trials):
        dim = int(rng.choice([16, 64, 768]))
        a, b = rng.standard_normal(dim), rng.standard_normal(dim)
        suite.check(hamming(pack(a, dim), pack(b, dim)) == naive_hamming(a, b), f"trial {t}: dim={dim}")
    a, b = rng.standard_normal((20, 130)), rng.standard_normal((30, 130))
    expected = np.array([[naive_hamming(x, y) for y in b] for x in a])
    suite.check(
        np.array_equal(BitMatrix.from_values(a).hamming_matrix(BitMatrix.from_values(b)), expected),
        "pairwise matrix",
    )
    return suite.result()


def merge_suite(rng: np.random.Generator, instances: int = 500) -> SuiteResult:
    suite = _Suite("merge")
    for t in range(instances):
        n = int(rng.integers(1, 9))
        r = float(rng.choice([0.0, 0.25, 0.5]))
        metric = "hamming" if t % 2 else "cosine"
        if metric == "hamming":
            # few bits so that ties are common
            tokens = [pack(rng.standard_normal(4), 4) for _ in range(n)]
        else:
            tokens = list(rng.standard_normal((n, 6)))
        protected = [i for i in range(n) if rng.random() < 0.2]
        got = bipartite_merge(tokens if metric == "hamming" else np.array(tokens), r, metric, protected)
        want = brute_force_merge(tokens, r, metric, protected)
        suite.check(got.merge_map == want, f"instance {t}: n={n} r={r} {metric}")
        suite.check(
            np.array_equal(got.sizes, [len(g) for g in want]),
            f"instance {t}: sizes",
        )
    for t in range(50):
        n = int(rng.integers(1, 4097))
        r = float(rng.uniform(0, 0.5))
        protected = rng.choice(n, size=int(rng.integers(0, n // 4 + 1)), replace=False).tolist()
        got = bipartite_merge(rng.standard_normal((n, 4)), r, "cosine", protected)
        unprotected_a = len([i for i in range(0, n, 2) if i not in set(protected)])
        limit = unprotected_a if n > 1 else 0
        suite.check(
            len(got.merged_tokens) == n - min(merge_budget(r, n), limit),
            f"count law: n={n} r={r:.3f}",
        )
    return suite.result()


def binarizer_suite(rng: np.random.Generator, trials: int = 10_000) -> SuiteResult:
    suite = _Suite("binarizer")
    d = 32
    h = rng.standard_normal((trials, d)) * rng.uniform(0.1, 10.0, size=(trials, 1))
    w = rng.uniform(0.2, 2.0, size=d)
    bits, scales = binarize_rows(h, w)
    again, _ = binarize_rows(recover_rows(bits, scales, w), w)
    suite.check(again == bits, "re-binarize after recover")
    scaled, _ = binarize_rows(h * rng.uniform(0.5, 5.0, size=(trials, 1)), w)
    suite.check(scaled == bits, "positive rescale")
    suite.check(bool(np.all(scales > 0)), "positive scales")
    return suite.result()


def _tiny_reader(d: int = 16) -> "torch.nn.Module":
    from btr.services.reader import MiniReader

    config = ReaderConfig(
        d=d, heads=2, d_ff=2 * d, n_enc=2, n_dec=2, k=1, vocab_size=12, max_query_len=4, max_passage_len=6, max_answer_len=3
    )
    return MiniReader(config).double()


def gradient_suite(seed: int = 0) -> SuiteResult:
    from btr.services.reader import make_batch
    from btr.services.training import distill_loss, task_loss

    suite = _Suite("gradients")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(3, 5, generator=gen, dtype=torch.float64)
    upstream = torch.randn(3, 5, generator=gen, dtype=torch.float64)
    surrogate = check_gradient(lambda t: (torch.tanh(t) * upstream).sum(), x)
    ste = ste_binarize_backward(x, upstream)
    numeric_tanh = (1 - torch.tanh(x) ** 2) * upstream
    suite.check(surrogate <= LOSS_GRADIENT_TOLERANCE, f"tanh surrogate: {surrogate:.2e}")
    suite.check(torch.allclose(ste, numeric_tanh), "ste backward equals tanh derivative")

    target = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    err = check_gradient(lambda p: recovery_loss(p, target), torch.randn(4, 6, generator=gen, dtype=torch.float64))
    suite.check(err <= LOSS_GRADIENT_TOLERANCE, f"recovery loss: {err:.2e}")
    teacher = torch.randn(5, 6, generator=gen, dtype=torch.float64)
    err = check_gradient(lambda s: distill_loss(teacher, s, [0, 2, 3]), torch.randn(5, 6, generator=gen, dtype=torch.float64))
    suite.check(err <= LOSS_GRADIENT_TOLERANCE, f"distill loss: {err:.2e}")
    labels = torch.tensor([[4, 5, 2]])
    err = check_gradient(lambda z: task_loss(z, labels), torch.randn(1, 3, 8, generator=gen, dtype=torch.float64))
    suite.check(err <= LOSS_GRADIENT_TOLERANCE, f"task loss: {err:.2e}")

    model = _tiny_reader()
    model.binarize_mode = "tanh"
    batch = make_batch([[4, 5, 6]], [[[7, 8, 9, 10], [4, 11]]], [[5, 6]])

    def loss():
        logits, enc = model(batch, decomposed=True)
        keep = enc.passage_mask
        return task_loss(logits, batch.labels) + recovery_loss(model.recovery(enc.codes[keep]), enc.passage_states[keep])

    err, checked = check_parameter_gradients(model, loss, seed=seed)
    suite.check(err <= GRADIENT_TOLERANCE, f"full reader ({checked} entries): {err:.2e}")
    return suite.result()


def store_suite(rng: np.random.Generator) -> SuiteResult:
    suite = _Suite("store")
    d = 24
    items = []
    for pid in range(5):
        n = int(rng.integers(0, 6))
        tokens = rng.integers(0, 10, size=n)
        items.append((pid * 7 + 1, tokens, BitMatrix.from_values(rng.standard_normal((n, d)), d), rng.uniform(0.5, 2, n)))
    table = RepresentativeTable.from_passages(d, 10, items)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "s.btr"
        write_store(table, path)
        with read_store(path) as store:
            suite.check(store.to_table() == table, "round trip")
        raw = path.read_bytes()
        copy = Path(tmp) / "c.btr"
        write_store(table, copy)
        suite.check(copy.read_bytes() == raw, "byte determinism")
        for t in range(50):
            mutated = bytearray(raw)
            pos = int(rng.integers(0, len(raw)))
            mutated[pos] ^= 1 << int(rng.integers(0, 8))
            suite.check(_rejects(Path(tmp) / "m.btr", bytes(mutated)), f"flip at byte {pos}")
        for t in range(50):
            cut = int(rng.integers(0, len(raw)))
            suite.check(_rejects(Path(tmp) / "m.btr", raw[:cut]), f"truncate to {cut}")
    return suite.result()


def _rejects(path: Path, data: bytes) -> bool:
    path.write_bytes(data)
    try:
        with read_store(path):
            return False
    except CorruptStoreError:
        return True
    except BTRError:
        return False


SUITES: Dict[str, Callable[[int], SuiteResult]] = {
    "pack": lambda seed: pack_suite(np.random.default_rng(seed)),
    "hamming": lambda seed: hamming_suite(np.random.default_rng(seed)),
    "merge": lambda seed: merge_suite(np.random.default_rng(seed)),
    "binarizer": lambda seed: binarizer_suite(np.random.default_rng(seed)),
    "gradients": gradient_suite,
    "store": lambda seed: store_suite(np.random.default_rng(seed)),
}


def run_selftest(seed: int = 0, fault: Optional[str] = None, only: Optional[Sequence[str]] = None) -> List[SuiteResult]:
    results = []
    with injected_fault(fault):
        for name, suite in SUITES.items():
            if only and name not in only:
                continue
            try:
                result = suite(seed)
            except Exception as e:  # a crashing suite is a failing suite
                logger.exception("suite %s crashed", name)
                result = SuiteResult(name=name, passed=0, total=1, seconds=0.0, failures=[f"crashed: {e}"])
            logger.info("%-10s %d/%d passed in %.2fs", result.name, result.passed, result.total, result.seconds)
            for failure in result.failures:
                logger.warning("%s: %s", result.name, failure)
            results.append(result)
    return results
