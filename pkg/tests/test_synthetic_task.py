import numpy as np
import pytest

from btr.config import settings
from btr.errors import CorpusFormatError, InvalidArgumentError, NotFoundError
from btr.services.corpus import parse_passage_ids, read_corpus, read_queries, write_lines
from btr.services.synthetic_task import SyntheticTask, build_vocabulary
from btr.services.tokenizer import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocabulary, load_stopwords
from btr.structures.training_structure import TaskConfig


@pytest.fixture
def task():
    return SyntheticTask(TaskConfig(n_facts=40, dev_facts=6, test_facts=6, n_distractors=3, seed=3), 64)


def test_vocabulary_layout():
    vocab, keys, values = build_vocabulary(64)
    assert len(vocab) == 64
    assert vocab.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert not set(keys) & set(values)
    with pytest.raises(InvalidArgumentError):
        build_vocabulary(12)


def test_encode_decode(vocab):
    ids = vocab.encode("What is THE value of key k01 k02 banana")
    assert ids[-1] == UNK_ID
    assert vocab.decode(ids[:-1]) == "what is the value of key k01 k02"
    assert vocab.decode([BOS_ID, ids[0], EOS_ID, ids[1]]) == "what"
    assert vocab.decode([PAD_ID]) == ""


def test_vocabulary_rejects_bad_token_lists():
    with pytest.raises(InvalidArgumentError):
        Vocabulary(["a", "b"])
    with pytest.raises(InvalidArgumentError):
        Vocabulary(["<pad>", "<bos>", "<eos>", "<unk>", "x", "x"])


def test_stopwords_map_through_vocabulary(vocab):
    ids = load_stopwords(settings.STOPWORDS_PATH, vocab)
    assert {vocab.id_of(w) for w in ("the", "of", "is", "what")} <= ids
    assert vocab.id_of("value") not in ids
    assert UNK_ID not in ids


def test_stopword_ids_without_vocabulary(tmp_path):
    path = tmp_path / "stop.txt"
    path.write_text("# ids\n7\nthe\n12  # trailing\n", encoding="utf-8")
    assert load_stopwords(path, vocab_size=64) == {7, 12}
    path.write_text("70\n", encoding="utf-8")
    with pytest.raises(InvalidArgumentError):
        load_stopwords(path, vocab_size=64)


def test_splits_are_disjoint(task):
    splits = [set(task.splits[name]) for name in ("train", "dev", "test")]
    assert sum(len(s) for s in splits) == 40
    assert set.union(*splits) == set(range(40))
    assert not (splits[0] & splits[1] or splits[0] & splits[2] or splits[1] & splits[2])
    assert len({f.key for f in task.facts}) == 40


def test_examples_hold_the_gold_passage(task):
    for ex in task.examples("dev"):
        assert len(ex.passages) == 4
        assert len(set(ex.passage_ids)) == 4
        gold = [p for p in ex.passages if p[4:6] == ex.query[-2:]]
        assert len(gold) == 1
        assert gold[0][-2:] == ex.answer


def test_split_examples_are_fixed(task):
    a = [e.passage_ids for e in task.examples("test")]
    assert a == [e.passage_ids for e in task.examples("test")]
    batch = task.sample(8, np.random.default_rng(0))
    assert all(set(task.splits["train"]) & set(e.passage_ids) for e in batch)
    with pytest.raises(InvalidArgumentError):
        task.examples("validation")


def test_corpus_and_query_files_round_trip(tmp_path, task):
    corpus = read_corpus(write_lines(tmp_path / "corpus.tsv", task.corpus_lines()), task.vocab)
    assert [pid for pid, _ in corpus] == list(range(40))
    assert corpus[7][1] == task.passage_tokens(7)
    queries = read_queries(write_lines(tmp_path / "q.tsv", task.query_lines("dev")), task.vocab)
    examples = task.examples("dev")
    assert [q.passage_ids for q in queries] == [e.passage_ids for e in examples]
    assert [q.answer for q in queries] == [e.answer for e in examples]
    assert [q.tokens for q in queries] == [e.query for e in examples]


def test_corpus_format_errors(tmp_path, vocab):
    path = tmp_path / "c.tsv"
    path.write_text("# comment\n\n1\tthe key\n1\tof\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError) as info:
        read_corpus(path, vocab)
    assert info.value.line_number == 4
    path.write_text("x\tthe\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError):
        read_corpus(path, vocab)
    path.write_text("-3\tthe\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError):
        read_corpus(path, vocab)
    path.write_text("no tab here\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError):
        read_corpus(path, vocab)
    with pytest.raises(NotFoundError):
        read_corpus(tmp_path / "missing.tsv", vocab)


def test_parse_passage_ids():
    assert parse_passage_ids("3, 1,18446744073709551615") == [3, 1, (1 << 64) - 1]
    assert parse_passage_ids("") == []
    with pytest.raises(CorpusFormatError):
        parse_passage_ids("1,two")
