"""Command-line entry point: ``btr <subcommand> ...``."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set

import pandas as pd
import torch
from pydantic import ValidationError

from btr.config import settings
from btr.errors import BTRError, CorruptStoreError, InvalidArgumentError
from btr.services.benchmark import bench, offline_sweep, runtime_sweep
from btr.services.corpus import parse_passage_ids, read_corpus, read_queries, write_lines
from btr.services.offline_compressor import compress_corpus, precompute_corpus, storage_stats
from btr.services.reader import PassageCache, infer
from btr.services.selftest import FAULTS, run_selftest
from btr.services.service_manager import ServiceManager
from btr.services.synthetic_task import SyntheticTask
from btr.services.training import three_step_train
from btr.store.model_file import save_model
from btr.store.token_store import write_store
from btr.structures.reader_structure import MergeSchedule
from btr.structures.run_structure import RunConfig
from btr.structures.training_structure import TrainConfig

logger = logging.getLogger("btr")

ACTIONS = {
    "precompute": "precompute passage representations",
    "compress": "compress store",
    "stats": "report storage",
    "query": "answer query",
    "train-toy": "train toy reader",
    "bench": "run benchmark",
    "selftest": "run selftest",
    "sweep": "run sweep",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _ratio_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of ratios: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with defaults for this run")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker cap (default: BTR_THREADS)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    common.add_argument("--overwrite", action="store_true", default=None, help="replace existing outputs")

    merging = argparse.ArgumentParser(add_help=False)
    merging.add_argument("--runtime-ratio", dest="r_p", type=float, help="runtime merge ratio r_p")
    merging.add_argument("--g", type=int, help="decoder merge period")
    merging.add_argument("--merge-rule", choices=["alg2", "every-g"])
    merging.add_argument("--protect-query", action="store_true", default=None)

    parser = _Parser(prog="btr", description="Binary token representations for retrieval-augmented readers")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("precompute", parents=[common], help="binarize every corpus passage into a store")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--model", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--k", type=int, help="must match the model's decomposition layer")

    p = sub.add_parser("compress", parents=[common], help="offline compression of a store")
    p.add_argument("--in", dest="store", type=Path, help="uncompressed input store")
    p.add_argument("--out", type=Path)
    p.add_argument("--stopwords", type=Path)
    p.add_argument("--model", type=Path, help="maps stopword words to ids; without it the list must hold ids")
    p.add_argument("--ratio", dest="r_o", type=float, help="offline merge ratio r_o")
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("stats", parents=[common], help="storage report of a store")
    p.add_argument("--store", type=Path)
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("query", parents=[common, merging], help="answer one query from cached passages")
    p.add_argument("--store", type=Path)
    p.add_argument("--model", type=Path)
    p.add_argument("--query")
    p.add_argument("--passages", help="comma-separated passage ids")

    p = sub.add_parser("train-toy", parents=[common], help="three-step training on the synthetic task")
    p.add_argument("--out", type=Path)
    p.add_argument("--k", type=int)
    p.add_argument("--ablate", choices=["distill", "recovery"])

    p = sub.add_parser("bench", parents=[common, merging], help="cached vs uncached throughput")
    p.add_argument("--store", type=Path)
    p.add_argument("--model", type=Path)
    p.add_argument("--queries", type=Path)
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("selftest", parents=[common], help="run the oracle suites")
    p.add_argument("--suite", dest="suites", action="append", help="run only this suite (repeatable)")
    p.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)

    p = sub.add_parser("sweep", parents=[common, merging], help="compression-ratio sweeps")
    p.add_argument("--kind", choices=["offline", "runtime"])
    p.add_argument("--store", type=Path)
    p.add_argument("--model", type=Path, help="needed for runtime sweeps; maps stopwords for offline ones")
    p.add_argument("--stopwords", type=Path)
    p.add_argument("--queries", type=Path)
    p.add_argument("--ratios", type=_ratio_list)
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--csv", type=Path)
    return parser


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose or settings.DEBUG else getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: Dict[str, object] = {
        "subcommand": args.subcommand,
        "r_o": settings.OFFLINE_RATIO,
        "r_p": settings.RUNTIME_RATIO,
        "g": settings.MERGE_PERIOD,
        "merge_rule": settings.MERGE_RULE,
        "seed": settings.SEED,
        "threads": settings.THREADS,
        "stopwords": settings.STOPWORDS_PATH,
    }
    config_file = getattr(args, "config", None)
    # train-toy reads its --config as a training budget instead
    if config_file is not None and args.subcommand != "train-toy":
        try:
            loaded = json.loads(Path(config_file).read_text(encoding="utf-8"))
        except OSError as e:
            raise InvalidArgumentError(f"cannot read config file {config_file}: {e}") from e
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"config file {config_file} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise InvalidArgumentError(f"config file {config_file} must hold a JSON object")
        unknown = sorted(set(loaded) - set(RunConfig.model_fields))
        if unknown:
            raise InvalidArgumentError(f"unknown keys in {config_file}: {unknown}")
        values.update(loaded)
    for key, value in vars(args).items():
        if key == "verbose" or value is None:
            continue
        if key == "passages":
            value = parse_passage_ids(value)
        values[key] = value
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise InvalidArgumentError(str(e)) from e


FLAG_ALIASES = {("compress", "store"): "--in"}


def _require(config: RunConfig, *fields: str) -> None:
    missing = [
        FLAG_ALIASES.get((config.subcommand, name), f"--{name.replace('_', '-')}")
        for name in fields
        if getattr(config, name) in (None, "")
    ]
    if missing:
        raise InvalidArgumentError(f"{config.subcommand} needs {', '.join(missing)}")


def _stopwords(config: RunConfig, vocab_size: int) -> Set[int]:
    """Stopword ids for a store; words need ``--model``, bare ids only the store's vocabulary size."""
    if config.model is None:
        return ServiceManager.get_stopwords(config.stopwords, vocab_size=vocab_size)
    _, vocab = ServiceManager.get_model(config.model)
    if vocab_size != len(vocab):
        raise InvalidArgumentError(f"store vocabulary has {vocab_size} tokens, model has {len(vocab)}")
    return ServiceManager.get_stopwords(config.stopwords, vocab)


def _schedule(config: RunConfig) -> MergeSchedule:
    return MergeSchedule(
        r_o=config.r_o,
        r_p=config.r_p,
        g=config.g,
        merge_rule=config.merge_rule,
        protect_query=config.protect_query,
    )


def _write_csv(frame: pd.DataFrame, path: Optional[Path]) -> None:
    if path is not None:
        frame.to_csv(path, index=False)
        logger.info("wrote %s", path)


def run_precompute(config: RunConfig) -> int:
    _require(config, "corpus", "model", "out")
    model, vocab = ServiceManager.get_model(config.model)
    if config.k is not None and config.k != model.config.k:
        raise InvalidArgumentError(f"--k {config.k} does not match the model's decomposition layer {model.config.k}")
    passages = read_corpus(config.corpus, vocab)
    table = precompute_corpus(model, passages)
    path = write_store(table, config.out, overwrite=config.overwrite)
    logger.info("wrote store %s: %d passages, %d vectors", path, len(table.passages), table.vectors_stored)
    return 0


def run_compress(config: RunConfig) -> int:
    _require(config, "store", "out")
    store = ServiceManager.get_store(config.store)
    table = store.to_table()
    if table.compressed:
        raise CorruptStoreError(f"{config.store} is already compressed")
    stopwords = _stopwords(config, store.header.vocab_size)
    compressed = compress_corpus(table, stopwords, config.r_o, workers=config.threads)
    path = write_store(compressed, config.out, overwrite=config.overwrite)
    before, after = storage_stats(table), storage_stats(compressed)
    logger.info(
        "wrote %s: %d -> %d vectors, %d -> %d bytes", path, before.vectors_stored, after.vectors_stored, before.total, after.total
    )
    print(after.to_lines())
    _write_csv(pd.DataFrame([after.model_dump()]), config.csv)
    return 0


def run_stats(config: RunConfig) -> int:
    _require(config, "store")
    store = ServiceManager.get_store(config.store)
    report = storage_stats(store.to_table())
    print(store.header.to_lines())
    print(report.to_lines())
    _write_csv(pd.DataFrame([report.model_dump()]), config.csv)
    return 0


def run_query(config: RunConfig) -> int:
    _require(config, "store", "model", "query")
    model, vocab = ServiceManager.get_model(config.model)
    store = ServiceManager.get_store(config.store)
    if store.d != model.config.d:
        raise InvalidArgumentError(f"store has d={store.d}, model has d={model.config.d}")
    caches = []
    for passage_id in config.passages:
        _, bits, scales = store.lookup_arrays(passage_id)
        caches.append(PassageCache(bits, scales))
    answer = infer(model, vocab.encode(config.query), caches, _schedule(config))
    text = vocab.decode(answer)
    logger.info("answer for %r over %d passages: %r", config.query, len(caches), text)
    print(text)
    return 0


def _train_config(config: RunConfig) -> TrainConfig:
    path = config.config or settings.TOY_CONFIG_PATH
    try:
        train = TrainConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise InvalidArgumentError(f"cannot read training config {path}: {e}") from e
    except ValidationError as e:
        raise InvalidArgumentError(f"bad training config {path}: {e}") from e
    if config.seed is not None:
        train = train.reseeded(config.seed)
    update: Dict[str, object] = {}
    if config.ablate == "distill":
        update["use_distill"] = False
    elif config.ablate == "recovery":
        update["use_recovery"] = False
    values = train.model_dump()
    values.update(update)
    if config.k is not None:
        values["reader"]["k"] = config.k
    try:
        return TrainConfig.model_validate(values)
    except ValidationError as e:
        raise InvalidArgumentError(str(e)) from e


def run_train_toy(config: RunConfig) -> int:
    _require(config, "out")
    train = _train_config(config)
    logger.info("training config: %s", train.model_dump_json())
    out = Path(config.out)
    names = ["reference.btrm", "decomposed.btrm", "binarized.btrm", "corpus.tsv", "dev_queries.tsv", "test_queries.tsv", "metrics.csv"]
    existing = [name for name in names if (out / name).exists()]
    if existing and not config.overwrite:
        raise InvalidArgumentError(f"{out} already holds {existing}; pass --overwrite to replace them")
    out.mkdir(parents=True, exist_ok=True)

    task = SyntheticTask(train.task, train.reader.vocab_size)
    result = three_step_train(train, task)
    save_model(result.reference, task.vocab, out / "reference.btrm", overwrite=True)
    save_model(result.decomposed, task.vocab, out / "decomposed.btrm", overwrite=True)
    save_model(result.binarized, task.vocab, out / "binarized.btrm", overwrite=True)
    write_lines(out / "corpus.tsv", task.corpus_lines())
    write_lines(out / "dev_queries.tsv", task.query_lines("dev"))
    write_lines(out / "test_queries.tsv", task.query_lines("test"))
    _write_csv(result.trace, out / "metrics.csv")
    for stage in (1, 2, 3):
        print(f"step{stage}_dev_accuracy={result.dev_accuracy[stage]:.4f}")
        print(f"step{stage}_test_accuracy={result.test_accuracy[stage]:.4f}")
    return 0


def run_bench(config: RunConfig) -> int:
    _require(config, "store", "model", "queries")
    model, vocab = ServiceManager.get_model(config.model)
    store = ServiceManager.get_store(config.store)
    queries = read_queries(config.queries, vocab)
    ratios = sorted({0.0, config.r_p})
    report = bench(model, store, queries, ratios, _schedule(config), config.repeats, config.warmup)
    print(report.to_string(index=False))
    _write_csv(report, config.csv)
    return 0


def run_selftest_command(config: RunConfig) -> int:
    if config.inject_fault is not None and not settings.DEBUG:
        raise InvalidArgumentError("fault injection needs BTR_DEBUG=true")
    torch.manual_seed(config.seed)
    results = run_selftest(seed=config.seed, fault=config.inject_fault, only=config.suites or None)
    for result in results:
        status = "ok" if result.ok else "FAIL"
        print(f"{result.name:<10} {result.passed}/{result.total} {status} ({result.seconds:.2f}s)")
    failed = [r.name for r in results if not r.ok]
    if failed:
        logger.error("selftest failed: %s", ", ".join(failed))
        return 3
    return 0


def run_sweep(config: RunConfig) -> int:
    if config.kind == "offline":
        _require(config, "store")
        store = ServiceManager.get_store(config.store)
        table = store.to_table()
        if table.compressed:
            raise CorruptStoreError(f"{config.store} is already compressed; sweep an uncompressed store")
        stopwords = _stopwords(config, store.header.vocab_size)
        kwargs = {"ratios": config.ratios} if config.ratios else {}
        report = offline_sweep(table, stopwords, workers=config.threads, **kwargs)
    else:
        _require(config, "store", "model", "queries")
        model, vocab = ServiceManager.get_model(config.model)
        store = ServiceManager.get_store(config.store)
        queries = read_queries(config.queries, vocab)
        kwargs = {"ratios": config.ratios} if config.ratios else {}
        report = runtime_sweep(
            model, store, queries, schedule=_schedule(config), repeats=config.repeats, warmup=config.warmup,
            **kwargs,
        )
    print(report.to_string(index=False))
    _write_csv(report, config.csv)
    return 0


HANDLERS: Dict[str, Callable[[RunConfig], int]] = {
    "precompute": run_precompute,
    "compress": run_compress,
    "stats": run_stats,
    "query": run_query,
    "train-toy": run_train_toy,
    "bench": run_bench,
    "selftest": run_selftest_command,
    "sweep": run_sweep,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    action = ACTIONS[args.subcommand]
    try:
        config = resolve_config(args)
        logger.info("resolved config: %s", config.model_dump_json())
        return HANDLERS[args.subcommand](config)
    except BTRError as e:
        logger.error("Failed to %s: %s", action, e)
        return e.exit_code
    except Exception:
        logger.exception("Failed to %s: unexpected error", action)
        return 3
    finally:
        ServiceManager.cleanup_services()


if __name__ == "__main__":
    sys.exit(main())
