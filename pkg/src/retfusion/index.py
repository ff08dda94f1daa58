"""Exact exhaustive late-interaction index.

Every search scores the query against every stored document with the
full maxsim sum; no approximation, no candidate pruning.  Ranking is
total: descending score with ties broken by insertion order, so
repeated searches are bit-identical.

File layout (integers little-endian uint32, floats little-endian
float64, row-major):

    magic   7 bytes  b"RETIDX1"
    d_bar            token width
    k                tokens per document
    count            number of documents
    repeated count times:
        id_length, id bytes (utf-8)
        has_image 1 byte
        k * d_bar float64 token values
        text_length, text bytes (utf-8)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, DuplicateIdError, ShapeError, SizeMismatchError

MAGIC = b"RETIDX1"


@dataclass
class IndexEntry:
    doc_id: str
    tokens: np.ndarray
    text: str
    has_image: bool


class RetrievalIndex:
    """Ordered, id-addressed store of document token matrices."""

    def __init__(self):
        self._entries: list[IndexEntry] = []
        self._by_id: dict[str, int] = {}
        self._stacked: np.ndarray | None = None  # (count, k, d_bar) cache

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def entries(self) -> list[IndexEntry]:
        return list(self._entries)

    def get_text(self, doc_id: str) -> str:
        return self._entries[self._by_id[doc_id]].text

    def texts(self) -> dict[str, str]:
        return {e.doc_id: e.text for e in self._entries}

    def add(self, doc_id: str, tokens, text: str = "", has_image: bool = False) -> None:
        if doc_id in self._by_id:
            raise DuplicateIdError(f"document id {doc_id!r} already indexed")
        data = np.asarray(getattr(tokens, "data", tokens), dtype=np.float64)
        if data.ndim != 2:
            raise ShapeError(f"token matrix must be 2-d, got shape {data.shape}")
        if self._entries and data.shape != self._entries[0].tokens.shape:
            raise ShapeError(
                f"token matrix shape {data.shape} differs from indexed shape "
                f"{self._entries[0].tokens.shape}"
            )
        self._by_id[doc_id] = len(self._entries)
        self._entries.append(IndexEntry(doc_id=doc_id, tokens=data, text=text,
                                        has_image=has_image))
        self._stacked = None

    def search(self, query, top_k: int) -> list[tuple[str, float]]:
        """Exhaustive maxsim ranking; returns min(top_k, size) results."""
        if top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {top_k}")
        if not self._entries:
            return []
        q = np.asarray(getattr(query, "data", query), dtype=np.float64)
        if q.shape[1] != self._entries[0].tokens.shape[1]:
            raise ShapeError(
                f"query width {q.shape[1]} differs from indexed width "
                f"{self._entries[0].tokens.shape[1]}"
            )
        if self._stacked is None:
            self._stacked = np.stack([e.tokens for e in self._entries])
        # (count, k_q, k_d) token similarities -> max over doc tokens, sum over query tokens
        sims = np.einsum("qd,nkd->nqk", q, self._stacked)
        scores = sims.max(axis=2).sum(axis=1)
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        return [(self._entries[i].doc_id, float(scores[i])) for i in order[:top_k]]

    # -- persistence ------------------------------------------------------

    def save(self, path: str) -> None:
        count = len(self._entries)
        if count:
            k, d_bar = self._entries[0].tokens.shape
        else:
            k = d_bar = 0
        parts = [MAGIC, struct.pack("<III", d_bar, k, count)]
        for e in self._entries:
            id_bytes = e.doc_id.encode("utf-8")
            text_bytes = e.text.encode("utf-8")
            parts.append(struct.pack("<I", len(id_bytes)))
            parts.append(id_bytes)
            parts.append(struct.pack("<B", 1 if e.has_image else 0))
            parts.append(np.ascontiguousarray(e.tokens, dtype="<f8").tobytes())
            parts.append(struct.pack("<I", len(text_bytes)))
            parts.append(text_bytes)
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))

    @classmethod
    def load(cls, path: str) -> "RetrievalIndex":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[: len(MAGIC)] != MAGIC:
            raise BadMagicError(f"{path}: expected magic {MAGIC!r}")
        offset = len(MAGIC)

        def take(n: int, what: str) -> bytes:
            nonlocal offset
            if offset + n > len(raw):
                raise SizeMismatchError(f"{path}: truncated while reading {what}")
            chunk = raw[offset:offset + n]
            offset += n
            return chunk

        d_bar, k, count = struct.unpack("<III", take(12, "header"))
        index = cls()
        for i in range(count):
            (id_len,) = struct.unpack("<I", take(4, f"record {i} id length"))
            doc_id = take(id_len, f"record {i} id").decode("utf-8")
            (img,) = struct.unpack("<B", take(1, f"record {i} image flag"))
            tokens = np.frombuffer(take(8 * k * d_bar, f"record {i} tokens"),
                                   dtype="<f8").reshape(k, d_bar).copy()
            (text_len,) = struct.unpack("<I", take(4, f"record {i} text length"))
            text = take(text_len, f"record {i} text").decode("utf-8")
            index.add(doc_id, tokens, text=text, has_image=bool(img))
        if offset != len(raw):
            raise SizeMismatchError(f"{path}: {len(raw) - offset} trailing bytes")
        return index
