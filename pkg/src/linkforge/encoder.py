"""Frozen, pluggable context encoders.

The toolkit never trains the encoder; it consumes a p×m context matrix per
piece sequence.  Two sources are provided: a deterministic hashed encoder
(desk-scale stand-in that is pure in its inputs) and a loader for matrices
precomputed by an external model.

Matrix file format: UTF-8 text, line 1 ``p m``, then p lines of m reals.
"""

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ParseError, ValidationError
from .tokenizer import WordPieceSequence


@dataclass(frozen=True)
class EncoderConfig:
    m: int = 64
    window: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError("encoder width m must be >= 1")
        if self.window < 0:
            raise ValidationError("encoder window must be >= 0")

    def to_dict(self) -> dict:
        return {"m": self.m, "window": self.window, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(int(data["m"]), int(data["window"]), int(data["seed"]))


_MASK64 = (1 << 64) - 1


def base_vector(piece_id: int, cfg: EncoderConfig) -> np.ndarray:
    """Unit-norm pseudo-random vector for one piece id.

    Philox is counter-based, so keying it with (seed, piece_id) gives an
    independent, platform-stable stream per piece without storing a table.
    """
    key = [cfg.seed & _MASK64, int(piece_id) & _MASK64]
    gen = np.random.Generator(np.random.Philox(key=key))
    v = gen.standard_normal(cfg.m)
    norm = np.linalg.norm(v)
    if norm == 0.0:  # unreachable for m >= 1 in practice
        v[0] = 1.0
        norm = 1.0
    return v / norm


def encode_hashed(seq: WordPieceSequence, cfg: EncoderConfig,
                  _cache: dict | None = None) -> np.ndarray:
    """h_i = e_i/2 + mean(e_{i-w} .. e_{i+w})/2, pads excluded.

    Pure in (seq, cfg): 64-bit arithmetic throughout, window clipped to the
    sequence bounds, pad positions excluded from the window mean and set to
    zero rows.  An optional cache dict reuses base vectors across calls
    with the same cfg.
    """
    p = len(seq)
    H = np.zeros((p, cfg.m), dtype=np.float64)
    base = np.zeros((p, cfg.m), dtype=np.float64)
    for i in range(p):
        if not seq.pad_mask[i]:
            continue
        piece_id = int(seq.piece_ids[i])
        if _cache is not None:
            e = _cache.get(piece_id)
            if e is None:
                e = base_vector(piece_id, cfg)
                _cache[piece_id] = e
        else:
            e = base_vector(piece_id, cfg)
        base[i] = e
    w = cfg.window
    for i in range(p):
        if not seq.pad_mask[i]:
            continue
        lo = max(0, i - w)
        hi = min(p - 1, i + w)
        neighbors = [j for j in range(lo, hi + 1) if seq.pad_mask[j]]
        context = base[neighbors].sum(axis=0) / len(neighbors)
        H[i] = 0.5 * base[i] + 0.5 * context
    return H


def load_precomputed(stream: Iterable[str], expected_p: int,
                     expected_m: int) -> np.ndarray:
    """Bit-exact load of an externally produced p×m context matrix."""
    it: Iterator[str] = iter(stream)
    try:
        header = next(it)
    except StopIteration:
        raise ParseError("empty matrix file", 1) from None
    parts = header.split()
    if len(parts) != 2:
        raise ParseError("header must be 'p m'", 1)
    try:
        p, m = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError("header must hold two integers", 1) from None
    if p != expected_p or m != expected_m:
        raise ValidationError(
            f"matrix is {p}x{m}, expected {expected_p}x{expected_m}"
        )
    H = np.empty((p, m), dtype=np.float64)
    row = 0
    for lineno, raw in enumerate(it, start=2):
        line = raw.strip()
        if not line:
            continue
        if row >= p:
            raise ParseError(f"more than the declared {p} rows", lineno)
        fields = line.split()
        if len(fields) != m:
            raise ParseError(f"expected {m} values, found {len(fields)}", lineno)
        try:
            H[row] = [float(x) for x in fields]
        except ValueError:
            raise ParseError("non-numeric value", lineno) from None
        row += 1
    if row != p:
        raise ParseError(f"declared {p} rows but found {row}")
    if not np.all(np.isfinite(H)):
        raise ValidationError("context matrix contains non-finite values")
    return H


def serialize_matrix(H: np.ndarray) -> str:
    lines = [f"{H.shape[0]} {H.shape[1]}"]
    for row in H:
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
