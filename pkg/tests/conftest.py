import numpy as np
import pytest
import torch

from btr.ops.bitvec import BitMatrix
from btr.services.reader import MiniReader
from btr.services.synthetic_task import build_vocabulary
from btr.store.table import RepresentativeTable
from btr.structures.reader_structure import ReaderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ReaderConfig(
        d=16,
        heads=2,
        d_ff=32,
        n_enc=2,
        n_dec=2,
        k=1,
        vocab_size=64,
        max_query_len=8,
        max_passage_len=24,
        max_answer_len=4,
        seed=0,
    )


@pytest.fixture
def tiny_model(tiny_config):
    torch.set_num_threads(1)
    return MiniReader(tiny_config).eval()


@pytest.fixture
def vocab():
    return build_vocabulary(64)[0]


def random_table(rng, d=24, vocab_size=10, n_passages=5, max_len=6, first_id=1):
    items = []
    for i in range(n_passages):
        n = int(rng.integers(0, max_len + 1))
        tokens = rng.integers(0, vocab_size, size=n)
        bits = BitMatrix.from_values(rng.standard_normal((n, d)), d)
        items.append((first_id + 7 * i, tokens, bits, rng.uniform(0.5, 2.0, size=n)))
    return RepresentativeTable.from_passages(d, vocab_size, items)


@pytest.fixture
def small_table(rng):
    return random_table(rng)
