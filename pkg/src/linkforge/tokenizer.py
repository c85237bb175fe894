"""Cased WordPiece tokenization with head/tail piece bookkeeping.

Word-level labels project onto the first ("head") piece of each word; tail
pieces are masked out of losses and predictions.  Documents longer than the
piece budget are split at word boundaries into non-overlapping windows, and
a window boundary never cuts through a mention (it shifts left to the
nearest O word).
"""

import hashlib
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .corpus import NIL, Document
from .errors import ParseError, ValidationError

UNK_TOKEN = "[UNK]"
PAD_TOKEN = "[PAD]"
CONTINUATION_PREFIX = "##"

# Tag indices are fixed: I=0, O=1, B=2.  IGNORE marks tail and pad pieces.
TAG_TO_INDEX = {"I": 0, "O": 1, "B": 2}
INDEX_TO_TAG = ("I", "O", "B")
IGNORE_LABEL = -1

MAX_PIECES_PER_WORD = 100


@dataclass(frozen=True, eq=False)
class Vocabulary:
    piece_to_id: dict[str, int]
    pieces: tuple[str, ...]
    unk_id: int
    pad_id: int
    digest: str

    def __len__(self) -> int:
        return len(self.pieces)


def make_vocabulary(pieces: Iterable[str]) -> Vocabulary:
    pieces = tuple(pieces)
    if not pieces:
        raise ValidationError("empty vocabulary")
    piece_to_id: dict[str, int] = {}
    for idx, piece in enumerate(pieces):
        if piece in piece_to_id:
            raise ValidationError(f"duplicate vocabulary piece {piece!r}")
        piece_to_id[piece] = idx
    for required in (UNK_TOKEN, PAD_TOKEN):
        if required not in piece_to_id:
            raise ValidationError(f"vocabulary missing {required}")
    digest = hashlib.sha256("\n".join(pieces).encode("utf-8")).hexdigest()
    return Vocabulary(piece_to_id, pieces, piece_to_id[UNK_TOKEN],
                      piece_to_id[PAD_TOKEN], digest)


def load_vocab(stream: Iterable[str]) -> Vocabulary:
    """One piece per line; must contain [UNK] and [PAD]."""
    pieces = []
    for lineno, raw in enumerate(stream, start=1):
        piece = raw.rstrip("\n").rstrip("\r")
        if not piece:
            continue
        if piece != piece.strip():
            raise ParseError(f"piece {piece!r} has surrounding whitespace", lineno)
        pieces.append(piece)
    return make_vocabulary(pieces)


def tokenize_word(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match-first decomposition; [UNK] when none exists
    or the piece count exceeds the per-word budget."""
    if not word:
        raise ValidationError("cannot tokenize an empty word")
    piece_ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = CONTINUATION_PREFIX + candidate
            piece_id = vocab.piece_to_id.get(candidate)
            if piece_id is not None:
                found = piece_id
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        piece_ids.append(found)
        if len(piece_ids) > MAX_PIECES_PER_WORD:
            return [vocab.unk_id]
        start = end
    return piece_ids


@dataclass(frozen=True, eq=False)
class WordPieceSequence:
    """Piece-level view of (part of) a document.

    head_mask is true on the first piece of each word; word_of_piece maps a
    piece back to its word index within the document (-1 on padding);
    pad_mask is true on real pieces.  word_offset is the document index of
    the window's first word.
    """

    piece_ids: np.ndarray
    head_mask: np.ndarray
    word_of_piece: np.ndarray
    pad_mask: np.ndarray
    word_offset: int
    n_words: int

    def __len__(self) -> int:
        return len(self.piece_ids)

    def head_piece_of_word(self, word_index: int) -> int:
        """Piece index of the head piece of a document word in this window."""
        local = word_index - self.word_offset
        if not 0 <= local < self.n_words:
            raise ValidationError(
                f"word {word_index} not in window [{self.word_offset}, "
                f"{self.word_offset + self.n_words - 1}]"
            )
        heads = np.flatnonzero(self.head_mask)
        return int(heads[local])


@dataclass(frozen=True, eq=False)
class AlignedWindow:
    """A window's pieces plus piece-level training labels.

    md_labels holds tag indices on head pieces and IGNORE_LABEL on tails
    and padding.  entity_refs carries the mention's entity name on the
    first piece of each linkable mention (None elsewhere; NIL mentions
    yield no reference).
    """

    seq: WordPieceSequence
    md_labels: np.ndarray
    entity_refs: tuple[str | None, ...]


def _window_spans(doc: Document, piece_counts: list[int],
                  max_pieces: int, overflow: str) -> list[tuple[int, int]]:
    """Split [0, n) into word ranges whose pieces fit in max_pieces."""
    n = len(doc)
    total = sum(piece_counts)
    if total <= max_pieces:
        return [(0, n)]
    if overflow == "error":
        raise ValidationError(
            f"document {doc.doc_id!r} has {total} pieces "
            f"(budget {max_pieces}); windowing disabled"
        )
    spans = []
    start = 0
    while start < n:
        budget = 0
        end = start
        while end < n and budget + piece_counts[end] <= max_pieces:
            budget += piece_counts[end]
            end += 1
        if end == start:
            raise ValidationError(
                f"document {doc.doc_id!r}: word {start} alone exceeds the "
                f"{max_pieces}-piece budget"
            )
        if end < n and doc.gold_tags[end] == "I":
            # Boundary would split a mention: end after the nearest O word.
            shifted = end - 1
            while shifted > start and doc.gold_tags[shifted] != "O":
                shifted -= 1
            if doc.gold_tags[shifted] != "O":
                raise ValidationError(
                    f"document {doc.doc_id!r}: mention spanning word {end} "
                    f"cannot fit a {max_pieces}-piece window"
                )
            end = shifted + 1
        spans.append((start, end))
        start = end
    return spans


def align_document(doc: Document, vocab: Vocabulary,
                   max_pieces: int = 512,
                   pad_to: int | None = None,
                   overflow: str = "window") -> list[AlignedWindow]:
    """Tokenize a document and project word labels onto head pieces.

    Returns one AlignedWindow per window (a single window for ordinary
    documents).  With ``pad_to``, piece arrays are padded to that length
    with [PAD] ids and IGNORE labels.
    """
    if overflow not in ("window", "error"):
        raise ValidationError(f"unknown overflow policy {overflow!r}")
    word_pieces = [tokenize_word(token, vocab) for token in doc.tokens]
    piece_counts = [len(p) for p in word_pieces]
    if pad_to is not None and pad_to < max_pieces:
        max_pieces = pad_to

    windows = []
    for start, end in _window_spans(doc, piece_counts, max_pieces, overflow):
        ids: list[int] = []
        heads: list[bool] = []
        words: list[int] = []
        labels: list[int] = []
        refs: list[str | None] = []
        for w in range(start, end):
            tag_index = TAG_TO_INDEX[doc.gold_tags[w]]
            first_of_mention = doc.gold_tags[w] == "B"
            entity = doc.gold_entities[w]
            for k, piece_id in enumerate(word_pieces[w]):
                ids.append(piece_id)
                heads.append(k == 0)
                words.append(w)
                if k == 0:
                    labels.append(tag_index)
                    if first_of_mention and entity is not None and entity is not NIL:
                        refs.append(entity)
                    else:
                        refs.append(None)
                else:
                    labels.append(IGNORE_LABEL)
                    refs.append(None)
        n_real = len(ids)
        pad_len = (pad_to - n_real) if pad_to is not None else 0
        if pad_len > 0:
            ids.extend([vocab.pad_id] * pad_len)
            heads.extend([False] * pad_len)
            words.extend([-1] * pad_len)
            labels.extend([IGNORE_LABEL] * pad_len)
            refs.extend([None] * pad_len)
        seq = WordPieceSequence(
            piece_ids=np.asarray(ids, dtype=np.int64),
            head_mask=np.asarray(heads, dtype=bool),
            word_of_piece=np.asarray(words, dtype=np.int64),
            pad_mask=np.arange(len(ids)) < n_real,
            word_offset=start,
            n_words=end - start,
        )
        windows.append(AlignedWindow(seq, np.asarray(labels, dtype=np.int64),
                                     tuple(refs)))
    return windows


def detokenize(piece_ids: Iterable[int], vocab: Vocabulary) -> str:
    """Concatenate pieces of one word, stripping continuation prefixes."""
    parts = []
    for piece_id in piece_ids:
        piece = vocab.pieces[piece_id]
        parts.append(piece[len(CONTINUATION_PREFIX):]
                     if piece.startswith(CONTINUATION_PREFIX) else piece)
    return "".join(parts)
