"""Turn piece-level predictions into span-level (mention, entity) links.

Word-level tags are read off each word's head piece, orphan I tags are
repaired to B, maximal B I* runs become spans, and each span is linked by
searching the entity index with the projection of the head piece of the
span's FIRST word only; other positions' projections never influence the
link.
"""

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import CandidateTable, Document
from .entity_index import EntityIndex, search
from .errors import ValidationError
from .tokenizer import INDEX_TO_TAG, AlignedWindow


@dataclass(frozen=True)
class PredictedMention:
    doc_id: str
    start_word: int
    end_word: int
    entity_id: int
    score: float


@dataclass(frozen=True)
class DecodeConfig:
    # What to do when a span's surface form is absent from the candidate
    # table: search the full universe (default) or drop the span.
    candidate_fallback: str = "full"
    threads: int = 1

    def __post_init__(self):
        if self.candidate_fallback not in ("full", "drop"):
            raise ValidationError(
                f"unknown candidate fallback {self.candidate_fallback!r}"
            )


def repair_iob(tags: Sequence[str]) -> list[str]:
    """An I at position 0 or following an O becomes B; nothing else changes."""
    repaired = []
    for i, tag in enumerate(tags):
        if tag == "I" and (i == 0 or repaired[i - 1] == "O"):
            repaired.append("B")
        else:
            repaired.append(tag)
    return repaired


def spans_from_tags(tags: Sequence[str]) -> list[tuple[int, int]]:
    """Inclusive (start, end) word spans of maximal B I* runs."""
    spans = []
    i = 0
    n = len(tags)
    while i < n:
        if tags[i] == "B":
            j = i
            while j + 1 < n and tags[j + 1] == "I":
                j += 1
            spans.append((i, j))
            i = j + 1
        else:
            i += 1
    return spans


def decode_document(doc: Document,
                    windows: Sequence[AlignedWindow],
                    md_tags: Sequence[np.ndarray],
                    ed_projections: Sequence[np.ndarray],
                    index: EntityIndex,
                    candidates: CandidateTable | None = None,
                    cfg: DecodeConfig = DecodeConfig()) -> list[PredictedMention]:
    """Full span decoding for one document.

    md_tags and ed_projections hold one piece-level array per window
    (tag indices of shape (p,), projections of shape (p, d)).
    """
    n = len(doc)
    if len(windows) != len(md_tags) or len(windows) != len(ed_projections):
        raise ValidationError("one tag array and one projection per window")

    word_tags: list[str | None] = [None] * n
    # (window index, piece index) of each word's head piece.
    head_of_word: list[tuple[int, int] | None] = [None] * n
    for w_idx, (window, tags) in enumerate(zip(windows, md_tags)):
        seq = window.seq
        if tags.shape[0] != len(seq):
            raise ValidationError("tag array length differs from window length")
        heads = np.flatnonzero(seq.head_mask)
        for local, piece in enumerate(heads):
            word = seq.word_offset + local
            word_tags[word] = INDEX_TO_TAG[int(tags[piece])]
            head_of_word[word] = (w_idx, int(piece))
    if any(tag is None for tag in word_tags):
        raise ValidationError(f"windows do not cover document {doc.doc_id!r}")

    repaired = repair_iob(word_tags)
    mentions = []
    for start, end in spans_from_tags(repaired):
        w_idx, piece = head_of_word[start]
        query = ed_projections[w_idx][piece]
        mask = None
        if candidates is not None:
            surface = " ".join(doc.tokens[start:end + 1])
            mask = candidates.lookup(surface)
            if mask is None and cfg.candidate_fallback == "drop":
                continue
        hits = search(index, query, mask=mask, top_k=1, threads=cfg.threads)
        entity_id, score = hits[0]
        mentions.append(PredictedMention(doc.doc_id, start, end, entity_id, score))
    return mentions


def write_predictions(mentions: Iterable[PredictedMention],
                      entity_names: Sequence[str]) -> str:
    """Prediction TSV, sorted by (doc_id, start_word); names are 1-based."""
    rows = sorted(mentions, key=lambda m: (m.doc_id, m.start_word))
    lines = []
    for m in rows:
        name = entity_names[m.entity_id - 1]
        lines.append(f"{m.doc_id}\t{m.start_word}\t{m.end_word}\t{name}\t{repr(m.score)}")
    return "\n".join(lines) + ("\n" if lines else "")
