"""Loader for MetaQA-style dataset directories."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path as FsPath

from .kg import KnowledgeGraph, load_graph
from .questions import QuestionBase, QuestionRecord, load_stopwords, read_qa_file

logger = logging.getLogger(__name__)

KB_FILE = "kb.tsv"
SCHEMA_FILE = "schema.json"
TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"


class DatasetError(FileNotFoundError):
    pass


@dataclass
class Dataset:
    kg: KnowledgeGraph
    base: QuestionBase
    test: list[QuestionRecord]
    root: FsPath

    def files(self) -> list[FsPath]:
        return [self.root / n for n in (KB_FILE, SCHEMA_FILE, TRAIN_FILE, TEST_FILE) if (self.root / n).exists()]


def _require(path: FsPath) -> FsPath:
    if not path.is_file():
        raise DatasetError(f"missing dataset file: {path}")
    return path


def load_metaqa_style(root: str | FsPath, stopwords_file: str | FsPath | None = None) -> tuple[KnowledgeGraph, QuestionBase]:
    """Graph from ``kb.tsv`` + ``schema.json`` and a finalized base from ``train.jsonl``."""
    ds = load_dataset(root, stopwords_file, with_test=False)
    return ds.kg, ds.base


def load_dataset(root: str | FsPath, stopwords_file: str | FsPath | None = None,
                 with_test: bool = True) -> Dataset:
    root = FsPath(root)
    kg = load_graph(_require(root / KB_FILE), _require(root / SCHEMA_FILE))
    stop = load_stopwords(stopwords_file) if stopwords_file else None
    train = read_qa_file(_require(root / TRAIN_FILE), kg, stop)
    base = QuestionBase(train)
    base.finalize()
    test = read_qa_file(_require(root / TEST_FILE), kg, stop) if with_test else []
    logger.info("dataset %s: %d train, %d test questions (%d with paths)",
                root, len(train), len(test), sum(bool(r.paths) for r in train))
    return Dataset(kg, base, test, root)
