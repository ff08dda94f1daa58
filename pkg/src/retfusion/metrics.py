"""Retrieval evaluation: recall@K and pseudo-recall@K."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError, MissingAnswerError, UnknownIdError


@dataclass
class EvalRecord:
    query_id: str
    gold_doc_ids: set
    answer: str | None = None


def _top_ids(results, record, k):
    if record.query_id not in results:
        raise UnknownIdError(f"no search results for query {record.query_id!r}")
    return [doc_id for doc_id, _ in results[record.query_id][:k]]


def recall_at_k(results: dict, records: list[EvalRecord], k: int) -> float:
    """Fraction of queries whose top-K results contain a gold document.

    ``results`` maps query_id to a ranked list of (doc_id, score); K
    beyond a list's length is treated as its length.
    """
    if not records:
        raise DataError("recall needs at least one evaluation record")
    hits = 0
    for record in records:
        if not record.gold_doc_ids:
            raise DataError(f"query {record.query_id!r} has an empty gold set")
        if any(doc_id in record.gold_doc_ids for doc_id in _top_ids(results, record, k)):
            hits += 1
    return hits / len(records)


def pseudo_recall_at_k(results: dict, records: list[EvalRecord], k: int,
                       doc_texts: dict) -> float:
    """Fraction of queries where any top-K document's text contains the
    answer as a case-insensitive substring."""
    if not records:
        raise DataError("pseudo-recall needs at least one evaluation record")
    hits = 0
    for record in records:
        if record.answer is None:
            raise MissingAnswerError(f"query {record.query_id!r} has no answer string")
        needle = record.answer.lower()
        for doc_id in _top_ids(results, record, k):
            if doc_id not in doc_texts:
                raise UnknownIdError(f"no text for document {doc_id!r}")
            if needle in doc_texts[doc_id].lower():
                hits += 1
                break
    return hits / len(records)
