"""Fine-grained late-interaction relevance and the contrastive objective.

The relevance of a document to a query is the sum, over query tokens,
of the best-matching document token dot product:

    s(Q, D) = sum_i max_j  Q_i . D_j

Ties in the max break toward the lowest document-token index, which
affects only the subgradient path, never the value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as ops
from .errors import ConfigError, DataError, NonFiniteError, ShapeError
from .tensor import Tensor


@dataclass
class TokenMatrix:
    """A (k, d_bar) late-interaction representation of one item."""

    data: np.ndarray
    owner: str = "query"  # "query" or "document"
    item_id: str = ""

    @property
    def k(self) -> int:
        return self.data.shape[0]

    @property
    def d_bar(self) -> int:
        return self.data.shape[1]


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def maxsim_score(q, d) -> float:
    """Late-interaction score between one query and one document.

    Accepts :class:`TokenMatrix` or raw (k, d_bar) arrays.
    """
    qa, da = _as_array(q), _as_array(d)
    if qa.ndim != 2 or da.ndim != 2 or qa.shape[1] != da.shape[1]:
        raise ShapeError(f"maxsim: token widths differ, {qa.shape} vs {da.shape}")
    sims = qa @ da.T
    return float(sims.max(axis=1).sum())


def score_matrix(queries, docs) -> np.ndarray:
    """Pairwise scores: entry (a, b) is maxsim_score(queries[a], docs[b])."""
    if len(queries) == 0 or len(docs) == 0:
        raise DataError("score_matrix needs non-empty query and document batches")
    if len(queries) != len(docs):
        raise ShapeError(f"batch sizes differ: {len(queries)} queries vs {len(docs)} docs")
    out = np.empty((len(queries), len(docs)))
    for a, q in enumerate(queries):
        for b, d in enumerate(docs):
            out[a, b] = maxsim_score(q, d)
    return out


def maxsim_graph(q: Tensor, d: Tensor) -> Tensor:
    """Differentiable maxsim; the subgradient follows the winning
    document token of each query token."""
    return ops.sum_rowmax(ops.matmul(q, ops.transpose(d)))


def score_matrix_graph(queries: list[Tensor], docs: list[Tensor]) -> Tensor:
    if len(queries) == 0 or len(docs) == 0:
        raise DataError("score_matrix needs non-empty query and document batches")
    grid = [[maxsim_graph(q, d) for d in docs] for q in queries]
    return ops.stack_scalars(grid)


def infonce_direction(scores: Tensor, tau: float) -> Tensor:
    """Cross-entropy of each row against its own index, averaged.

    Row a's positive is column a; off-diagonal entries act as in-batch
    negatives.  Invariant to adding a constant to any single row.
    """
    log_probs = ops.log_softmax_rows(ops.scale(scores, 1.0 / tau))
    return ops.scale(ops.mean_diag(log_probs), -1.0)


def symmetric_infonce(scores, tau: float) -> Tensor:
    """Mean of the query->document and document->query InfoNCE terms.

    ``scores`` is the (B, B) pairwise score matrix with positives on the
    diagonal; accepts a raw array or a graph tensor.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if not isinstance(scores, Tensor):
        scores = Tensor(scores)
    if scores.data.ndim != 2 or scores.data.shape[0] != scores.data.shape[1]:
        raise ShapeError(f"score matrix must be square, got {scores.data.shape}")
    if not np.isfinite(scores.data).all():
        raise NonFiniteError("score matrix contains non-finite values")
    row_term = infonce_direction(scores, tau)
    col_term = infonce_direction(ops.transpose(scores), tau)
    return ops.scale(row_term + col_term, 0.5)
