"""Corpus, entity-table and candidate-table ingestion.

File formats (all UTF-8 text):

* Corpus: one word per line as ``token<TAB>tag<TAB>entity``; tag is one of
  B/I/O; the entity column is empty on O words and carries either an entity
  name or the NIL sentinel ``--NME--`` on mention words.  Documents are
  introduced by a line ``-DOCSTART- <doc_id>``.
* Entity table: line 1 is ``k d``; each of the k following lines is
  ``name v_1 ... v_d`` (space separated, names contain no spaces).
* Candidate table: ``surface<TAB>name1<TAB>name2...``.

All structures are immutable after construction and safe to share across
threads.
"""

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator

import numpy as np

from .errors import ParseError, ValidationError

NIL_SPELLING = "--NME--"

VALID_TAGS = ("B", "I", "O")


class NilType:
    """Singleton marker for gold mentions with no knowledge-base entity."""

    _instance = None
    __slots__ = ()

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NIL"


NIL = NilType()

# A gold entity reference: an entity name, or NIL.
EntityRef = str | NilType


@dataclass(frozen=True)
class GoldMention:
    """A gold (span, entity) annotation; word indices are inclusive."""

    doc_id: str
    start_word: int
    end_word: int
    entity: EntityRef


@dataclass(frozen=True)
class Document:
    """A tokenized document with word-level gold IOB tags and entity refs.

    ``gold_entities[i]`` is None exactly on O words; every mention word
    carries the mention's (uniform) entity reference.
    """

    doc_id: str
    tokens: tuple[str, ...]
    gold_tags: tuple[str, ...]
    gold_entities: tuple[EntityRef | None, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def gold_mentions(self) -> list[GoldMention]:
        """Maximal B I* runs with their entity reference."""
        mentions = []
        i = 0
        n = len(self.tokens)
        while i < n:
            if self.gold_tags[i] == "B":
                j = i
                while j + 1 < n and self.gold_tags[j + 1] == "I":
                    j += 1
                mentions.append(
                    GoldMention(self.doc_id, i, j, self.gold_entities[i])
                )
                i = j + 1
            else:
                i += 1
        return mentions


def _validate_document(doc_id: str, rows: list[tuple[str, str, str]],
                       line_of_word: list[int]) -> Document:
    if not rows:
        raise ValidationError(f"document {doc_id!r} has no tokens")
    tokens = []
    tags = []
    entities: list[EntityRef | None] = []
    for i, (token, tag, entity_text) in enumerate(rows):
        if tag == "I" and (i == 0 or tags[i - 1] == "O"):
            raise ValidationError(
                f"document {doc_id!r}, word {i}: I tag with no preceding B/I "
                f"(line {line_of_word[i]})"
            )
        if tag == "O":
            if entity_text:
                raise ValidationError(
                    f"document {doc_id!r}, word {i}: entity reference "
                    f"{entity_text!r} on an O word (line {line_of_word[i]})"
                )
            entities.append(None)
        else:
            if not entity_text:
                raise ValidationError(
                    f"document {doc_id!r}, word {i}: mention word lacks an "
                    f"entity reference (line {line_of_word[i]})"
                )
            ref: EntityRef = NIL if entity_text == NIL_SPELLING else entity_text
            if tag == "I" and ref != entities[i - 1]:
                raise ValidationError(
                    f"document {doc_id!r}, word {i}: mention words carry "
                    f"different entity references (line {line_of_word[i]})"
                )
            entities.append(ref)
        tokens.append(token)
        tags.append(tag)
    return Document(doc_id, tuple(tokens), tuple(tags), tuple(entities))


def parse_documents(stream: Iterable[str]) -> list[Document]:
    """Parse the canonical corpus format into validated Documents.

    Token lines appearing before any ``-DOCSTART-`` form an implicit
    document with id ``doc1``.  Blank lines are ignored.
    """
    documents: list[Document] = []
    seen_ids: set[str] = set()
    doc_id: str | None = None
    rows: list[tuple[str, str, str]] = []
    line_of_word: list[int] = []

    def flush():
        if doc_id is None and not rows:
            return
        current = doc_id if doc_id is not None else "doc1"
        if current in seen_ids:
            raise ValidationError(f"duplicate doc_id {current!r}")
        seen_ids.add(current)
        documents.append(_validate_document(current, rows, line_of_word))

    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        if line.startswith("-DOCSTART-"):
            flush()
            rows, line_of_word = [], []
            parts = line.split(None, 1)
            if len(parts) != 2 or not parts[1].strip():
                raise ParseError("-DOCSTART- line without a doc_id", lineno)
            doc_id = parts[1].strip()
            continue
        columns = line.split("\t")
        if len(columns) != 3:
            raise ParseError(
                f"expected 3 tab-separated columns, found {len(columns)}",
                lineno,
            )
        token, tag, entity_text = columns
        if not token:
            raise ParseError("empty token", lineno)
        if tag not in VALID_TAGS:
            raise ParseError(f"unknown tag {tag!r} (expected B, I or O)", lineno)
        rows.append((token, tag, entity_text))
        line_of_word.append(lineno)
    flush()
    return documents


def serialize_documents(documents: Iterable[Document]) -> str:
    """Inverse of parse_documents (up to blank lines)."""
    out = []
    for doc in documents:
        out.append(f"-DOCSTART- {doc.doc_id}")
        for token, tag, entity in zip(doc.tokens, doc.gold_tags, doc.gold_entities):
            if entity is None:
                text = ""
            elif entity is NIL:
                text = NIL_SPELLING
            else:
                text = entity
            out.append(f"{token}\t{tag}\t{text}")
    return "\n".join(out) + "\n"


@dataclass(frozen=True, eq=False)
class EntityTable:
    """The entity universe: k names and their k×d embedding matrix.

    Entity IDs are 1-based row indices: ID j refers to ``embeddings[j-1]``.
    The name→ID map is built on first use; at the million-entity scale most
    workloads (index building, full-universe search) never need it.
    """

    names: tuple[str, ...]
    embeddings: np.ndarray
    digest: str

    @cached_property
    def name_to_id(self) -> dict[str, int]:
        return {name: j for j, name in enumerate(self.names, start=1)}

    @property
    def k(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def embedding(self, entity_id: int) -> np.ndarray:
        if not 1 <= entity_id <= self.k:
            raise ValidationError(f"entity id {entity_id} outside [1, {self.k}]")
        return self.embeddings[entity_id - 1]

    def name(self, entity_id: int) -> str:
        if not 1 <= entity_id <= self.k:
            raise ValidationError(f"entity id {entity_id} outside [1, {self.k}]")
        return self.names[entity_id - 1]


def make_entity_table(names: Iterable[str], embeddings: np.ndarray) -> EntityTable:
    """Validate and build an EntityTable from in-memory data.

    The embedding dtype (float32 or float64) is preserved.
    """
    names = tuple(names)
    embeddings = np.ascontiguousarray(embeddings)
    if embeddings.ndim != 2:
        raise ValidationError("embeddings must be a 2-D matrix")
    k, d = embeddings.shape
    if k < 1 or d < 1:
        raise ValidationError("entity table requires k >= 1 and d >= 1")
    if len(names) != k:
        raise ValidationError(f"{len(names)} names for {k} embedding rows")
    if not np.all(np.isfinite(embeddings)):
        raise ValidationError("entity embeddings contain non-finite values")
    # Square norms in float64; a row is rejected only if exactly zero.
    sq = np.einsum("ij,ij->i", embeddings, embeddings, dtype=np.float64)
    zero_rows = np.flatnonzero(sq == 0.0)
    if zero_rows.size:
        raise ValidationError(
            f"entity {names[zero_rows[0]]!r} has a zero-norm embedding"
        )
    seen: set[str] = set()
    for name in names:
        if " " in name or "\t" in name or not name:
            raise ValidationError(f"invalid entity name {name!r}")
        if name in seen:
            raise ValidationError(f"duplicate entity name {name!r}")
        seen.add(name)
    del seen
    embeddings.setflags(write=False)
    digest = _entity_table_digest(names, embeddings)
    return EntityTable(names, embeddings, digest)


def _entity_table_digest(names: tuple[str, ...], embeddings: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(f"{embeddings.shape[0]} {embeddings.shape[1]} {embeddings.dtype.str}".encode())
    h.update("\n".join(names).encode("utf-8"))
    # buffer protocol avoids a full-matrix copy at the million-row scale
    h.update(embeddings.data)
    return h.hexdigest()


def load_entity_table(stream: Iterable[str], dtype=np.float64) -> EntityTable:
    """Load ``k d`` header plus k ``name v_1 ... v_d`` rows."""
    it: Iterator[str] = iter(stream)
    try:
        header = next(it)
    except StopIteration:
        raise ParseError("empty entity table", 1) from None
    parts = header.split()
    if len(parts) != 2:
        raise ParseError("header must be 'k d'", 1)
    try:
        k, d = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError("header must hold two integers", 1) from None
    if k < 1 or d < 1:
        raise ParseError("k and d must be positive", 1)

    names = []
    embeddings = np.empty((k, d), dtype=dtype)
    row = 0
    for lineno, raw in enumerate(it, start=2):
        line = raw.strip()
        if not line:
            continue
        if row >= k:
            raise ParseError(f"more than the declared {k} rows", lineno)
        fields = line.split()
        if len(fields) != d + 1:
            raise ParseError(
                f"expected a name and {d} values, found {len(fields)} fields",
                lineno,
            )
        try:
            embeddings[row] = [float(x) for x in fields[1:]]
        except ValueError:
            raise ParseError("non-numeric embedding value", lineno) from None
        names.append(fields[0])
        row += 1
    if row != k:
        raise ParseError(f"declared {k} rows but found {row}")
    return make_entity_table(names, embeddings)


def serialize_entity_table(table: EntityTable) -> str:
    """Emit the text format; float values round-trip exactly via repr."""
    lines = [f"{table.k} {table.d}"]
    for name, row in zip(table.names, table.embeddings):
        values = " ".join(repr(float(v)) for v in row)
        lines.append(f"{name} {values}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CandidateTable:
    """Per-surface-form shortlists of entity IDs (unbounded size).

    Keys are matched exactly by default; with ``case_fold`` both the stored
    keys and lookups are case-folded.
    """

    entries: dict[str, tuple[int, ...]]
    case_fold: bool = False
    skipped_names: int = 0
    dropped_surfaces: int = 0

    def lookup(self, surface: str) -> tuple[int, ...] | None:
        key = surface.casefold() if self.case_fold else surface
        return self.entries.get(key)

    def __len__(self) -> int:
        return len(self.entries)


def load_candidate_table(stream: Iterable[str], table: EntityTable,
                         case_fold: bool = False) -> CandidateTable:
    """Resolve candidate names against the entity table.

    Unresolvable names are skipped and counted; surfaces whose candidates
    all fail to resolve are dropped and counted.  Candidate lists are never
    truncated.
    """
    entries: dict[str, list[int]] = {}
    skipped = 0
    dropped = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        columns = line.split("\t")
        if len(columns) < 2:
            raise ParseError("expected a surface form and at least one candidate",
                             lineno)
        surface = columns[0].casefold() if case_fold else columns[0]
        ids = []
        for name in columns[1:]:
            entity_id = table.name_to_id.get(name)
            if entity_id is None:
                skipped += 1
            else:
                ids.append(entity_id)
        if not ids:
            dropped += 1
            continue
        bucket = entries.setdefault(surface, [])
        for entity_id in ids:
            if entity_id not in bucket:
                bucket.append(entity_id)
    frozen = {surface: tuple(ids) for surface, ids in entries.items()}
    return CandidateTable(frozen, case_fold, skipped, dropped)
