"""Synthetic key-value lookup task.

Each fact is a passage ``the value of key K1 K2 is V1 V2``; its query is
``what is the value of key K1 K2`` and the answer is ``V1 V2``. A query comes
with its gold passage plus distractor passages of other facts, shuffled.
Splits are disjoint by key.
"""

import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from btr.errors import InvalidArgumentError
from btr.services.tokenizer import SPECIAL_TOKENS, Vocabulary
from btr.structures.training_structure import TaskConfig

FILLERS = ("the", "value", "of", "key", "is", "what")
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class Fact:
    fact_id: int
    key: Tuple[int, int]
    value: Tuple[int, int]

    @property
    def passage_id(self) -> int:
        return self.fact_id


@dataclass
class Example:
    query: List[int]
    passage_ids: List[int]
    passages: List[List[int]]
    answer: List[int]


def build_vocabulary(vocab_size: int) -> Tuple[Vocabulary, List[int], List[int]]:
    n_each = (vocab_size - len(SPECIAL_TOKENS) - len(FILLERS)) // 2
    if n_each < 2:
        raise InvalidArgumentError(f"vocab_size {vocab_size} is too small for the lookup task")
    keys = [f"k{i:02d}" for i in range(n_each)]
    values = [f"v{i:02d}" for i in range(n_each)]
    tokens = list(SPECIAL_TOKENS) + list(FILLERS) + keys + values
    tokens += [f"x{i:02d}" for i in range(vocab_size - len(tokens))]
    vocab = Vocabulary(tokens)
    return vocab, [vocab.id_of(k) for k in keys], [vocab.id_of(v) for v in values]


class SyntheticTask:
    def __init__(self, config: TaskConfig, vocab_size: int):
        self.config = config
        self.vocab, key_ids, value_ids = build_vocabulary(vocab_size)
        rng = np.random.default_rng(config.seed)
        n_keys = len(key_ids)
        if n_keys * n_keys < config.n_facts:
            raise InvalidArgumentError(
                f"{config.n_facts} facts need more than {n_keys}x{n_keys} distinct keys"
            )
        combos = rng.choice(n_keys * n_keys, size=config.n_facts, replace=False)
        values = rng.integers(0, len(value_ids), size=(config.n_facts, 2))
        self.facts = [
            Fact(
                fact_id=i,
                key=(key_ids[int(c) // n_keys], key_ids[int(c) % n_keys]),
                value=(value_ids[int(v[0])], value_ids[int(v[1])]),
            )
            for i, (c, v) in enumerate(zip(combos, values))
        ]
        order = rng.permutation(config.n_facts)
        n_dev, n_test = config.dev_facts, config.test_facts
        self.splits: Dict[str, List[int]] = {
            "dev": sorted(order[:n_dev].tolist()),
            "test": sorted(order[n_dev : n_dev + n_test].tolist()),
            "train": sorted(order[n_dev + n_test :].tolist()),
        }

    def passage_tokens(self, passage_id: int) -> List[int]:
        fact = self.facts[passage_id]
        v = self.vocab.id_of
        return [v("the"), v("value"), v("of"), v("key"), *fact.key, v("is"), *fact.value]

    def query_tokens(self, fact: Fact) -> List[int]:
        v = self.vocab.id_of
        return [v("what"), v("is"), v("the"), v("value"), v("of"), v("key"), *fact.key]

    def answer_tokens(self, fact: Fact) -> List[int]:
        return list(fact.value)

    def example(self, fact_idx: int, rng: np.random.Generator) -> Example:
        fact = self.facts[fact_idx]
        picks = rng.choice(len(self.facts) - 1, size=self.config.n_distractors, replace=False)
        distractors = [int(i) + int(i >= fact_idx) for i in picks]
        passage_ids = [fact.passage_id, *distractors]
        passage_ids = [passage_ids[i] for i in rng.permutation(len(passage_ids))]
        return Example(
            query=self.query_tokens(fact),
            passage_ids=passage_ids,
            passages=[self.passage_tokens(p) for p in passage_ids],
            answer=self.answer_tokens(fact),
        )

    def examples(self, split: str, rng: Optional[np.random.Generator] = None) -> List[Example]:
        """Fixed distractors per split unless a generator is given."""
        if split not in self.splits:
            raise InvalidArgumentError(f"unknown split {split!r}")
        if rng is None:
            rng = np.random.default_rng([self.config.seed, zlib.crc32(split.encode())])
        return [self.example(i, rng) for i in self.splits[split]]

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Example]:
        picks = rng.choice(self.splits["train"], size=batch_size, replace=True)
        return [self.example(int(i), rng) for i in picks]

    def corpus_lines(self) -> List[str]:
        return [
            f"{fact.passage_id}\t{self.vocab.decode(self.passage_tokens(fact.passage_id))}"
            for fact in self.facts
        ]

    def query_lines(self, split: str) -> List[str]:
        lines = []
        for ex in self.examples(split):
            ids = ",".join(str(p) for p in ex.passage_ids)
            lines.append(f"{self.vocab.decode(ex.query)}\t{ids}\t{self.vocab.decode(ex.answer)}")
        return lines
