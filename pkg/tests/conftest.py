from __future__ import annotations

from importlib import resources
from pathlib import Path

import pytest

from splitrag.datasets import load_dataset
from splitrag.kg import KnowledgeGraph
from splitrag.pipeline import build_system
from splitrag.questions import QuestionRecord, default_stopwords, record_from_json

TOY_DIR = Path(str(resources.files("splitrag.data").joinpath("toy_movie")))


def make_kg(triples, types=None, **kw) -> KnowledgeGraph:
    """Graph from (h, r, t) name triples; entity types default to the name's prefix before '_' or digits."""
    types = dict(types or {})
    for h, _, t in triples:
        for e in (h, t):
            types.setdefault(e, e.rstrip("0123456789").split("_")[0])
    return KnowledgeGraph(types, triples, **kw)


def make_record(kg, qid, text, entities=(), path=None, answers=(), qtype=None) -> QuestionRecord:
    """Record with entity spans located by name in ``text``; ``path`` as name list or list of lists."""
    links = []
    for name in entities:
        start = text.index(name)
        links.append({"span": [start, start + len(name)], "name": name})
    obj = {"id": qid, "question": text, "entities": links, "answers": list(answers), "qtype": qtype}
    if path is not None:
        obj["path"] = path
    return record_from_json(obj, kg, default_stopwords())


@pytest.fixture(scope="session")
def toy_dir() -> Path:
    return TOY_DIR


@pytest.fixture()
def toy_dataset():
    return load_dataset(TOY_DIR)


@pytest.fixture()
def toy_system(toy_dataset):
    return build_system(toy_dataset.kg, toy_dataset.base)
