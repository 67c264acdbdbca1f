"""Partitioned, multi-agent retrieval over knowledge graphs for question answering."""
from .kg import KnowledgeGraph, Path, Pattern, Triple, load_graph
from .questions import QuestionBase, QuestionRecord, preprocess, read_qa_file

__all__ = [
    "KnowledgeGraph",
    "Path",
    "Pattern",
    "QuestionBase",
    "QuestionRecord",
    "Triple",
    "load_graph",
    "preprocess",
    "read_qa_file",
]

__version__ = "0.1.0"
