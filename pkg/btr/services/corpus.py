"""Plain-text corpus and query files.

corpus:  ``<passage id>\\t<passage text>`` per line, ids are unsigned 64-bit
queries: ``<query text>\\t<id>,<id>,...[\\t<answer text>]`` per line
Blank lines and lines starting with '#' are skipped.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

from btr.errors import CorpusFormatError, NotFoundError
from btr.services.tokenizer import Vocabulary

MAX_PASSAGE_ID = (1 << 64) - 1


@dataclass
class QueryRecord:
    text: str
    tokens: List[int]
    passage_ids: List[int]
    answer: Optional[List[int]] = None


def _lines(path: Union[str, Path]) -> Iterator[Tuple[int, str]]:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"{path} does not exist")
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if line.strip() and not line.startswith("#"):
                yield number, line


def _passage_id(path, number: int, text: str) -> int:
    try:
        value = int(text.strip())
    except ValueError:
        raise CorpusFormatError(str(path), number, f"passage id {text.strip()!r} is not an integer") from None
    if not 0 <= value <= MAX_PASSAGE_ID:
        raise CorpusFormatError(str(path), number, f"passage id {value} is not an unsigned 64-bit value")
    return value


def read_corpus(path: Union[str, Path], vocab: Vocabulary) -> List[Tuple[int, List[int]]]:
    passages: List[Tuple[int, List[int]]] = []
    seen = set()
    for number, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusFormatError(str(path), number, "expected '<id>\\t<text>'")
        passage_id = _passage_id(path, number, parts[0])
        if passage_id in seen:
            raise CorpusFormatError(str(path), number, f"duplicate passage id {passage_id}")
        seen.add(passage_id)
        passages.append((passage_id, vocab.encode(parts[1])))
    return passages


def parse_passage_ids(text: str, path: str = "<arguments>", number: int = 0) -> List[int]:
    return [_passage_id(path, number, part) for part in text.split(",") if part.strip()]


def read_queries(path: Union[str, Path], vocab: Vocabulary) -> List[QueryRecord]:
    records = []
    for number, line in _lines(path):
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise CorpusFormatError(str(path), number, "expected '<query>\\t<ids>[\\t<answer>]'")
        answer = vocab.encode(parts[2]) if len(parts) == 3 else None
        records.append(
            QueryRecord(
                text=parts[0],
                tokens=vocab.encode(parts[0]),
                passage_ids=parse_passage_ids(parts[1], str(path), number),
                answer=answer,
            )
        )
    return records


def write_lines(path: Union[str, Path], lines: List[str]) -> Path:
    path = Path(path)
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return path
