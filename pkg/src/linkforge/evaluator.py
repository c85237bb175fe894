"""Strong-matching span-level InKB micro/macro F1, plus ED accuracy.

A prediction counts as a true positive only when some retained gold
mention has the identical (doc, start, end, entity) quadruple; each gold
mention can satisfy at most one prediction.  Gold mentions whose entity is
NIL or absent from the entity table are removed before scoring (InKB).
Under the default strict NIL policy a prediction covering a removed gold
span is an ordinary false positive; the lenient policy discards such
predictions instead.
"""

from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import NIL, Document, EntityTable
from .decoder import PredictedMention
from .errors import ValidationError

NIL_POLICIES = ("strict", "lenient")


@dataclass(frozen=True)
class DocCounts:
    tp: int
    fp: int
    fn: int

    @property
    def f1(self) -> float:
        return _f1(self.tp, self.fp, self.fn)


@dataclass(frozen=True)
class EvalReport:
    micro_p: float
    micro_r: float
    micro_f1: float
    macro_f1: float
    per_doc: dict[str, DocCounts]
    tp: int
    fp: int
    fn: int
    mode: str
    nil_policy: str
    duplicates_removed: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "nil_policy": self.nil_policy,
            "micro_p": self.micro_p,
            "micro_r": self.micro_r,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "duplicates_removed": self.duplicates_removed,
            "per_doc": {
                doc_id: {"tp": c.tp, "fp": c.fp, "fn": c.fn, "f1": c.f1}
                for doc_id, c in sorted(self.per_doc.items())
            },
        }

    def format_table(self) -> str:
        lines = [
            f"mode: {self.mode}   nil policy: {self.nil_policy}",
            f"{'':12}{'P':>10}{'R':>10}{'F1':>10}",
            f"{'micro':12}{self.micro_p:>10.4f}{self.micro_r:>10.4f}"
            f"{self.micro_f1:>10.4f}",
            f"{'macro':12}{'':>10}{'':>10}{self.macro_f1:>10.4f}",
            f"counts: tp={self.tp} fp={self.fp} fn={self.fn}"
            f" (duplicate predictions removed: {self.duplicates_removed})",
        ]
        return "\n".join(lines)


def _f1(tp: int, fp: int, fn: int) -> float:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def retained_gold_mentions(doc: Document, table: EntityTable):
    """Split a document's gold mentions into InKB (with resolved IDs) and
    removed (NIL or out-of-table) span lists."""
    in_kb = []
    removed_spans = []
    for mention in doc.gold_mentions():
        if mention.entity is NIL:
            removed_spans.append((mention.start_word, mention.end_word))
            continue
        entity_id = table.name_to_id.get(mention.entity)
        if entity_id is None:
            removed_spans.append((mention.start_word, mention.end_word))
        else:
            in_kb.append((mention.start_word, mention.end_word, entity_id))
    return in_kb, removed_spans


def strong_match_f1(gold_docs: Sequence[Document],
                    predictions: Iterable[PredictedMention],
                    table: EntityTable,
                    nil_policy: str = "strict") -> EvalReport:
    """Score predictions against gold documents."""
    if nil_policy not in NIL_POLICIES:
        raise ValidationError(f"unknown nil policy {nil_policy!r}")

    by_doc: dict[str, list[PredictedMention]] = {doc.doc_id: [] for doc in gold_docs}
    for pred in predictions:
        if pred.doc_id not in by_doc:
            raise ValidationError(f"prediction references unknown doc_id "
                                  f"{pred.doc_id!r}")
        by_doc[pred.doc_id].append(pred)

    per_doc: dict[str, DocCounts] = {}
    duplicates = 0
    total_tp = total_fp = total_fn = 0
    macro_sum = 0.0
    macro_docs = 0

    for doc in gold_docs:
        in_kb, removed_spans = retained_gold_mentions(doc, table)
        removed = set(removed_spans)

        seen: set[tuple[int, int, int]] = set()
        counted: list[tuple[int, int, int]] = []
        for pred in by_doc[doc.doc_id]:
            key = (pred.start_word, pred.end_word, pred.entity_id)
            if key in seen:
                duplicates += 1
                continue
            seen.add(key)
            if nil_policy == "lenient" and (pred.start_word, pred.end_word) in removed:
                continue
            counted.append(key)

        unmatched = {}
        for gold in in_kb:
            unmatched[gold] = True
        tp = fp = 0
        for key in counted:
            if unmatched.get(key):
                unmatched[key] = False
                tp += 1
            else:
                fp += 1
        fn = sum(1 for still in unmatched.values() if still)

        counts = DocCounts(tp, fp, fn)
        per_doc[doc.doc_id] = counts
        total_tp += tp
        total_fp += fp
        total_fn += fn
        if in_kb or counted:
            macro_sum += counts.f1
            macro_docs += 1

    micro_p = total_tp / (total_tp + total_fp) if total_tp + total_fp else 0.0
    micro_r = total_tp / (total_tp + total_fn) if total_tp + total_fn else 0.0
    micro_f1 = (2.0 * micro_p * micro_r / (micro_p + micro_r)
                if micro_p + micro_r > 0 else 0.0)
    macro_f1 = macro_sum / macro_docs if macro_docs else 0.0

    return EvalReport(micro_p, micro_r, micro_f1, macro_f1, per_doc,
                      total_tp, total_fp, total_fn, "EL", nil_policy,
                      duplicates)


def ed_accuracy(gold_entity_ids: Sequence[int],
                predicted_entity_ids: Sequence[int]) -> float:
    """Fraction of retained gold mentions whose predicted entity matches.

    Callers supply exactly one prediction per retained gold mention, in
    the same order (gold spans are given to the model in ED evaluation).
    """
    if len(gold_entity_ids) != len(predicted_entity_ids):
        raise ValidationError(
            f"{len(predicted_entity_ids)} predictions for "
            f"{len(gold_entity_ids)} gold mentions"
        )
    if not gold_entity_ids:
        raise ValidationError("no retained gold mentions to score")
    correct = sum(1 for g, p in zip(gold_entity_ids, predicted_entity_ids)
                  if g == p)
    return correct / len(gold_entity_ids)
