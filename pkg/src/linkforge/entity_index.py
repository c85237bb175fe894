"""Cosine nearest-neighbor search over the entity universe.

Rows are normalized once (in 64-bit) and stored as float32 to halve
memory at the million-entity scale; queries are normalized once and
scored by dot products accumulated in 64-bit over cache-friendly row
blocks.  Results are exact: ties resolve to the lowest entity ID, and
sharded execution merges per-shard winners deterministically, so any
thread count returns identical output.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .corpus import EntityTable
from .errors import ParseError, ValidationError

QUERY_NORM_EPS = 1e-12
BLOCK_ROWS = 65536

INDEX_MAGIC = b"ELIX"
INDEX_VERSION = 1


@dataclass(frozen=True, eq=False)
class EntityIndex:
    unit_rows: np.ndarray  # (k, d) float32, row order matches the table
    source_digest: str
    source_names: tuple[str, ...]

    @property
    def k(self) -> int:
        return self.unit_rows.shape[0]

    @property
    def d(self) -> int:
        return self.unit_rows.shape[1]


def build_index(table: EntityTable) -> EntityIndex:
    """Normalize every table row; zero rows were already rejected at load."""
    k, d = table.embeddings.shape
    unit = np.empty((k, d), dtype=np.float32)
    for start in range(0, k, BLOCK_ROWS):
        block = table.embeddings[start:start + BLOCK_ROWS].astype(np.float64)
        norms = np.linalg.norm(block, axis=1, keepdims=True)
        unit[start:start + BLOCK_ROWS] = block / norms
    unit.setflags(write=False)
    return EntityIndex(unit, table.digest, table.names)


def _top_ids(sims: np.ndarray, ids: np.ndarray, top_k: int) -> np.ndarray:
    """Positions of the top_k entries by (similarity desc, entity ID asc)."""
    n = sims.shape[0]
    if top_k >= n:
        order = np.lexsort((ids, -sims))
        return order
    # All entries tied with the top_k-th value stay in, then exact sort.
    threshold = np.partition(sims, n - top_k)[n - top_k]
    keep = np.flatnonzero(sims >= threshold)
    order = keep[np.lexsort((ids[keep], -sims[keep]))]
    return order[:top_k]


def _scan_scores(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Float32 row scan with 64-bit dot-product accumulation.

    einsum with a forced float64 calculation dtype upcasts in fixed-size
    internal buffers: no full-matrix temporary, and each row's reduction
    runs in a fixed order independent of how rows are sharded.
    """
    return np.einsum("ij,j->i", rows, query, dtype=np.float64)


def search(index: EntityIndex, query: np.ndarray,
           mask: Sequence[int] | None = None,
           top_k: int = 1,
           threads: int = 1) -> list[tuple[int, float]]:
    """Most-similar entities to a query vector.

    Returns (entity ID, cosine similarity) pairs sorted by similarity
    descending, ID ascending, truncated to top_k.  A candidate mask
    restricts scoring to those IDs.  Near-zero queries score 0 against
    everything, so the lowest eligible ID wins.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.d,):
        raise ValidationError(f"query must have dimension {index.d}")
    if not np.all(np.isfinite(query)):
        raise ValidationError("query contains non-finite values")
    if top_k < 1:
        raise ValidationError("top_k must be positive")

    if mask is not None:
        mask_ids = np.asarray(list(mask), dtype=np.int64)
        if mask_ids.size == 0:
            raise ValidationError("empty candidate mask")
        if np.any(mask_ids < 1) or np.any(mask_ids > index.k):
            raise ValidationError("candidate mask holds an invalid entity id")
        mask_ids = np.unique(mask_ids)  # sorted ascending
        rows = index.unit_rows[mask_ids - 1]
        ids = mask_ids
    else:
        rows = index.unit_rows
        ids = np.arange(1, index.k + 1, dtype=np.int64)

    norm = float(np.linalg.norm(query))
    if norm < QUERY_NORM_EPS:
        sims = np.zeros(rows.shape[0], dtype=np.float64)
    else:
        unit_query = query / norm
        n = rows.shape[0]
        n_blocks = -(-n // BLOCK_ROWS)
        if threads > 1 and n_blocks > 1:
            # Shard boundaries sit on block boundaries, so every shard scans
            # exactly the blocks the serial path would: identical reductions.
            splits = np.linspace(0, n_blocks, min(threads, n_blocks) + 1,
                                 dtype=np.int64) * BLOCK_ROWS
            splits = np.minimum(splits, n)
            sims = np.empty(n, dtype=np.float64)
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [
                    (lo, pool.submit(_scan_scores, rows[lo:hi], unit_query))
                    for lo, hi in zip(splits[:-1], splits[1:]) if hi > lo
                ]
                for lo, future in futures:
                    part = future.result()
                    sims[lo:lo + part.shape[0]] = part
        else:
            sims = _scan_scores(rows, unit_query)
        np.clip(sims, -1.0, 1.0, out=sims)

    top = _top_ids(sims, ids, top_k)
    return [(int(ids[i]), float(sims[i])) for i in top]


def save_index_cache(fh: BinaryIO, index: EntityIndex):
    """ELIX cache: magic, version, k, d, source digest, float32 rows."""
    fh.write(INDEX_MAGIC)
    fh.write(struct.pack("<III", INDEX_VERSION, index.k, index.d))
    digest = bytes.fromhex(index.source_digest)
    fh.write(struct.pack("<I", len(digest)))
    fh.write(digest)
    rows = index.unit_rows
    if rows.dtype != np.dtype("<f4") or not rows.flags.c_contiguous:
        rows = np.ascontiguousarray(rows, dtype="<f4")
    fh.write(rows.data)


def load_index_cache(fh: BinaryIO, table: EntityTable) -> EntityIndex | None:
    """Load a cached index; returns None when the table content changed."""
    header = fh.read(4)
    if header != INDEX_MAGIC:
        raise ParseError("not an index cache file (bad magic)")
    version, k, d = struct.unpack("<III", fh.read(12))
    if version != INDEX_VERSION:
        raise ParseError(f"unsupported index cache version {version}")
    (digest_len,) = struct.unpack("<I", fh.read(4))
    digest = fh.read(digest_len).hex()
    if digest != table.digest or k != table.k or d != table.d:
        return None
    buf = fh.read(k * d * 4)
    if len(buf) != k * d * 4:
        raise ParseError("truncated index cache")
    unit = np.frombuffer(buf, dtype="<f4").reshape(k, d).copy()
    unit.setflags(write=False)
    return EntityIndex(unit, table.digest, table.names)
