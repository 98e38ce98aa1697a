import logging
from pathlib import Path
from typing import Dict, Optional, Set, Tuple, Union

from btr.services.reader import MiniReader
from btr.services.tokenizer import Vocabulary, load_stopwords
from btr.store.model_file import load_model
from btr.store.token_store import TokenStore, read_store

logger = logging.getLogger(__name__)


class ServiceManager:
    """Process-wide cache of loaded artifacts, keyed by resolved path."""

    _models: Dict[Path, Tuple[MiniReader, Vocabulary]] = {}
    _stores: Dict[Path, TokenStore] = {}
    _stopwords: Dict[Tuple[Path, Tuple[str, Optional[int]]], Set[int]] = {}

    @classmethod
    def get_model(cls, path: Union[str, Path]) -> Tuple[MiniReader, Vocabulary]:
        key = Path(path).resolve()
        if key not in cls._models:
            cls._models[key] = load_model(key)
            logger.info("loaded model %s", key)
        return cls._models[key]

    @classmethod
    def get_store(cls, path: Union[str, Path]) -> TokenStore:
        key = Path(path).resolve()
        if key not in cls._stores:
            cls._stores[key] = read_store(key)
            store = cls._stores[key]
            logger.info("opened store %s (%d passages, d=%d, compressed=%s)", key, len(store), store.d, store.compressed)
        return cls._stores[key]

    @classmethod
    def get_stopwords(
        cls, path: Union[str, Path], vocab: Optional[Vocabulary] = None, vocab_size: Optional[int] = None
    ) -> Set[int]:
        key = (Path(path).resolve(), ("vocab", id(vocab)) if vocab is not None else ("ids", vocab_size))
        if key not in cls._stopwords:
            cls._stopwords[key] = load_stopwords(key[0], vocab, vocab_size)
        return cls._stopwords[key]

    @classmethod
    def cleanup_services(cls) -> None:
        for path, store in cls._stores.items():
            try:
                store.close()
            except Exception as e:
                logger.warning("Error closing store %s: %s", path, e)
        cls._stores.clear()
        cls._models.clear()
        cls._stopwords.clear()
