import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Set, Union

from btr.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)


class Vocabulary:
    """Fixed whitespace tokenizer: lowercase, split on whitespace, map through the vocabulary."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise InvalidArgumentError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise InvalidArgumentError("vocabulary has duplicate tokens")
        self.tokens = tokens
        self._ids = {token: i for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, text: str) -> List[int]:
        return [self.id_of(token) for token in text.lower().split()]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            words.append(self.tokens[i] if 0 <= i < len(self.tokens) else UNK)
        return " ".join(words)


def load_stopwords(
    path: Union[str, Path], vocab: Optional[Vocabulary] = None, vocab_size: Optional[int] = None
) -> Set[int]:
    """One token per line; '#' starts a comment.

    Words map through ``vocab`` and are skipped when it lacks them. Without a
    vocabulary only integer lines count, read as token ids below ``vocab_size``.
    """
    if vocab is not None:
        vocab_size = len(vocab)
    ids: Set[int] = set()
    skipped = 0
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        word = line.split("#", 1)[0].strip().lower()
        if not word:
            continue
        if vocab is not None:
            if word in vocab:
                ids.add(vocab.id_of(word))
            else:
                skipped += 1
            continue
        try:
            token_id = int(word)
        except ValueError:
            skipped += 1
            continue
        if vocab_size is not None and not 0 <= token_id < vocab_size:
            raise InvalidArgumentError(f"stopword id {token_id} is outside the vocabulary of {vocab_size} tokens")
        ids.add(token_id)
    if vocab is None and skipped:
        logger.warning("%d stopword words in %s need a model vocabulary; pass --model to map them", skipped, path)
    logger.info("loaded %d stopword ids from %s (%d entries skipped)", len(ids), path, skipped)
    return ids
