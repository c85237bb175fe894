"""Training/evaluation orchestration: batching, the step loop, periodic
validation, checkpointing, and repeated seeded runs with error ranges.

A step is one Adam update over a batch of documents (default 4); the
per-loss means are taken over all contributing positions pooled across the
batch, and gradients are accumulated in fixed document order, so a run is
bit-reproducible from its config.  Repeat r runs with seed + r.  The
final-step checkpoint is what gets evaluated and saved (no validation
selection); reports carry a flag saying so.
"""

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model
from .corpus import (CandidateTable, Document, EntityTable,
                     load_candidate_table, load_entity_table, parse_documents)
from .decoder import DecodeConfig, PredictedMention, decode_document
from .encoder import EncoderConfig, encode_hashed
from .entity_index import EntityIndex, build_index
from .errors import (DigestMismatchError, TrainingDivergedError,
                     ValidationError)
from .evaluator import EvalReport, strong_match_f1
from .tokenizer import AlignedWindow, Vocabulary, align_document, load_vocab

PAPER_MAX_STEPS = 50_000


@dataclass(frozen=True)
class RunConfig:
    md_loss_weight: float = 0.1
    lr: float = 2e-5
    batch_size: int = 4
    max_steps: int = 2_000  # desk-scale default; the full protocol uses 50,000
    dropout: float = 0.1
    eval_every: int = 500
    seed: int = 0
    repeats: int = 3
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    max_pieces: int = 512
    nil_policy: str = "strict"
    candidate_fallback: str = "full"
    train_corpus: str | None = None
    validation_corpus: str | None = None
    test_corpus: str | None = None
    vocab: str | None = None
    entity_table: str | None = None
    candidate_table: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.md_loss_weight <= 1.0:
            raise ValidationError("md_loss_weight must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.repeats < 1:
            raise ValidationError("repeats must be >= 1")
        if self.max_steps < 0:
            raise ValidationError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        data = {
            "md_loss_weight": self.md_loss_weight,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_steps": self.max_steps,
            "dropout": self.dropout,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "repeats": self.repeats,
            "encoder": self.encoder.to_dict(),
            "max_pieces": self.max_pieces,
            "nil_policy": self.nil_policy,
            "candidate_fallback": self.candidate_fallback,
            "train_corpus": self.train_corpus,
            "validation_corpus": self.validation_corpus,
            "test_corpus": self.test_corpus,
            "vocab": self.vocab,
            "entity_table": self.entity_table,
            "candidate_table": self.candidate_table,
        }
        return data


_CONFIG_KEYS = {f.name for f in RunConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(data)
    if "encoder" in kwargs and isinstance(kwargs["encoder"], dict):
        kwargs["encoder"] = EncoderConfig.from_dict(kwargs["encoder"])
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    """Read a config file: JSON, or flat ``key = value`` lines where nested
    keys use dots (``encoder.m = 64``)."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return config_from_dict(json.loads(text))
    data: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}: line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        target = data
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = parsed
    return config_from_dict(data)


@dataclass(frozen=True, eq=False)
class Resources:
    vocab: Vocabulary
    table: EntityTable
    index: EntityIndex
    candidates: CandidateTable | None


def load_resources(cfg: RunConfig) -> Resources:
    if cfg.vocab is None or cfg.entity_table is None:
        raise ValidationError("config must point at a vocab and an entity table")
    with open(cfg.vocab, encoding="utf-8") as fh:
        vocab = load_vocab(fh)
    with open(cfg.entity_table, encoding="utf-8") as fh:
        table = load_entity_table(fh)
    if table.d < 1:
        raise ValidationError("entity table is empty")
    candidates = None
    if cfg.candidate_table is not None:
        with open(cfg.candidate_table, encoding="utf-8") as fh:
            candidates = load_candidate_table(fh, table)
    return Resources(vocab, table, build_index(table), candidates)


def load_split(path: str | Path) -> list[Document]:
    with open(path, encoding="utf-8") as fh:
        docs = parse_documents(fh)
    return docs


@dataclass(frozen=True, eq=False)
class PreparedWindow:
    window: AlignedWindow
    H: np.ndarray           # (p, m) float64, frozen context features
    ed_mask: np.ndarray     # (p,) bool
    ed_targets: np.ndarray  # (p, d) float64


@dataclass(frozen=True, eq=False)
class PreparedDoc:
    doc: Document
    windows: list[PreparedWindow]


def prepare_documents(docs: list[Document], resources: Resources,
                      cfg: RunConfig) -> list[PreparedDoc]:
    """Tokenize, window, encode and resolve gold targets once per document.

    The encoder is frozen, so context matrices never change across steps.
    Gold mentions whose entity is NIL or missing from the table contribute
    no disambiguation target.
    """
    cache: dict = {}
    prepared = []
    d = resources.table.d
    for doc in docs:
        windows = []
        for window in align_document(doc, resources.vocab,
                                     max_pieces=cfg.max_pieces):
            H = encode_hashed(window.seq, cfg.encoder, _cache=cache)
            p = len(window.seq)
            ed_mask = np.zeros(p, dtype=bool)
            ed_targets = np.zeros((p, d), dtype=np.float64)
            for i, ref in enumerate(window.entity_refs):
                if ref is None:
                    continue
                entity_id = resources.table.name_to_id.get(ref)
                if entity_id is None:
                    continue
                ed_mask[i] = True
                ed_targets[i] = resources.table.embedding(entity_id).astype(np.float64)
            windows.append(PreparedWindow(window, H, ed_mask, ed_targets))
        prepared.append(PreparedDoc(doc, windows))
    return prepared


def predict_mentions(prepared: list[PreparedDoc], params: model.HeadParams,
                     resources: Resources, cfg: RunConfig,
                     use_candidates: bool = True,
                     threads: int = 1) -> list[PredictedMention]:
    """Dropout-free decoding of every document."""
    decode_cfg = DecodeConfig(candidate_fallback=cfg.candidate_fallback,
                              threads=threads)
    candidates = resources.candidates if use_candidates else None
    mentions: list[PredictedMention] = []
    for item in prepared:
        tags = []
        projections = []
        for pw in item.windows:
            _, _, window_tags = model.md_forward(pw.H, params)
            tags.append(window_tags)
            projections.append(model.ed_forward(pw.H, params))
        mentions.extend(decode_document(
            item.doc, [pw.window for pw in item.windows], tags, projections,
            resources.index, candidates, decode_cfg,
        ))
    return mentions


def evaluate_prepared(prepared: list[PreparedDoc], params: model.HeadParams,
                      resources: Resources, cfg: RunConfig,
                      use_candidates: bool = True,
                      threads: int = 1) -> EvalReport:
    if not prepared:
        raise ValidationError("cannot evaluate an empty split (0 documents)")
    mentions = predict_mentions(prepared, params, resources, cfg,
                                use_candidates, threads)
    return strong_match_f1([item.doc for item in prepared], mentions,
                           resources.table, cfg.nil_policy)


@dataclass(frozen=True)
class RepeatReport:
    seed: int
    validation: EvalReport
    test: EvalReport | None
    loss_curve: list[tuple[int, float, float, float]]
    eval_curve: list[tuple[int, float, float]]
    checkpoint_path: str | None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "validation": self.validation.to_dict(),
            "test": self.test.to_dict() if self.test is not None else None,
            "loss_curve": [list(entry) for entry in self.loss_curve],
            "eval_curve": [list(entry) for entry in self.eval_curve],
            "checkpoint_path": self.checkpoint_path,
        }


def _mean_std(values: list[float]) -> dict:
    n = len(values)
    mean = sum(values) / n
    if n > 1:
        var = sum((v - mean) ** 2 for v in values) / (n - 1)
        std = math.sqrt(var)
    else:
        std = 0.0
    return {"values": values, "mean": mean, "stddev": std}


@dataclass(frozen=True)
class RunReport:
    config: RunConfig
    repeats: list[RepeatReport]
    checkpoint_selection: str = "final-step"

    def summary(self) -> dict:
        out = {}
        splits = {"validation": [r.validation for r in self.repeats]}
        if all(r.test is not None for r in self.repeats):
            splits["test"] = [r.test for r in self.repeats]
        for split, reports in splits.items():
            out[split] = {
                "micro_f1": _mean_std([rep.micro_f1 for rep in reports]),
                "macro_f1": _mean_std([rep.macro_f1 for rep in reports]),
            }
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "checkpoint_selection": self.checkpoint_selection,
            "repeats": [r.to_dict() for r in self.repeats],
            "summary": self.summary(),
        }


def _checkpoint_config(cfg: RunConfig, resources: Resources, seed: int) -> dict:
    return {
        "md_loss_weight": cfg.md_loss_weight,
        "seed": seed,
        "encoder": cfg.encoder.to_dict(),
        "max_pieces": cfg.max_pieces,
        "vocab_digest": resources.vocab.digest,
        "entity_table_digest": resources.table.digest,
    }


def _add_grads(a: model.GradTerms, b: model.GradTerms) -> model.GradTerms:
    def add(x: model.HeadParams, y: model.HeadParams) -> model.HeadParams:
        return model.HeadParams(x.md_weight + y.md_weight, x.md_bias + y.md_bias,
                                x.ed_weight + y.ed_weight, x.ed_bias + y.ed_bias)
    return model.GradTerms(add(a.md, b.md), add(a.ed, b.ed))


def _train_one_repeat(cfg: RunConfig, resources: Resources,
                      train_docs: list[PreparedDoc],
                      val_docs: list[PreparedDoc], seed: int):
    params = model.init_params(cfg.encoder.m, resources.table.d, seed)
    adam = model.init_adam(params, lr=cfg.lr)
    order_rng = np.random.default_rng([seed, 0x5D])
    dropout_rng = np.random.default_rng([seed, 0xD0])

    n = len(train_docs)
    order: deque[int] = deque()
    loss_curve: list[tuple[int, float, float, float]] = []
    eval_curve: list[tuple[int, float, float]] = []

    for step in range(1, cfg.max_steps + 1):
        # Leftover documents of an epoch stay queued; a batch may span the
        # epoch boundary.
        while len(order) < cfg.batch_size:
            order.extend(order_rng.permutation(n).tolist())
        batch = [order.popleft() for _ in range(cfg.batch_size)]

        terms = model.ZERO_TERMS
        accum: model.GradTerms | None = None
        for doc_index in batch:
            for pw in train_docs[doc_index].windows:
                masks = model.sample_dropout_masks(
                    dropout_rng, pw.H.shape[0], cfg.encoder.m, cfg.dropout)
                window_terms, window_grads = model.grad_terms(
                    pw.H, pw.window.md_labels, pw.ed_mask, pw.ed_targets,
                    params, cfg.md_loss_weight, masks)
                terms = terms + window_terms
                accum = window_grads if accum is None else _add_grads(accum,
                                                                      window_grads)
        try:
            breakdown = model.combine_terms(terms, cfg.md_loss_weight)
        except Exception as exc:
            raise TrainingDivergedError(step, str(exc)) from exc
        grads = model.combine_gradients(terms, accum, cfg.md_loss_weight)
        params, adam = model.adam_step(params, grads, adam)
        loss_curve.append((step, breakdown.total, breakdown.md_loss,
                           breakdown.ed_loss))

        if cfg.eval_every and step % cfg.eval_every == 0:
            report = evaluate_prepared(val_docs, params, resources, cfg)
            eval_curve.append((step, report.micro_f1, report.macro_f1))

    return params, adam, loss_curve, eval_curve


def train(cfg: RunConfig, resources: Resources | None = None,
          checkpoint_dir: str | Path | None = None) -> RunReport:
    """Run the full protocol: repeats × (train, evaluate, checkpoint)."""
    if cfg.train_corpus is None:
        raise ValidationError("config must point at a training corpus")
    if resources is None:
        resources = load_resources(cfg)

    train_docs = prepare_documents(load_split(cfg.train_corpus), resources, cfg)
    if not train_docs:
        raise ValidationError("training split holds no documents")
    if cfg.validation_corpus is not None:
        val_docs = prepare_documents(load_split(cfg.validation_corpus),
                                     resources, cfg)
    else:
        val_docs = train_docs
    test_docs = None
    if cfg.test_corpus is not None:
        test_docs = prepare_documents(load_split(cfg.test_corpus), resources, cfg)

    repeats = []
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        params, adam, loss_curve, eval_curve = _train_one_repeat(
            cfg, resources, train_docs, val_docs, seed)
        validation = evaluate_prepared(val_docs, params, resources, cfg)
        test = (evaluate_prepared(test_docs, params, resources, cfg)
                if test_docs is not None else None)
        checkpoint_path = None
        if checkpoint_dir is not None:
            directory = Path(checkpoint_dir)
            directory.mkdir(parents=True, exist_ok=True)
            path = directory / f"repeat{r}.elck"
            with open(path, "wb") as fh:
                model.save_checkpoint(fh, params, adam,
                                      _checkpoint_config(cfg, resources, seed))
            checkpoint_path = str(path)
        repeats.append(RepeatReport(seed, validation, test, loss_curve,
                                    eval_curve, checkpoint_path))
    return RunReport(cfg, repeats)


def evaluate_checkpoint(checkpoint_path: str | Path, split_path: str | Path,
                        cfg: RunConfig, resources: Resources | None = None,
                        use_candidates: bool = True,
                        threads: int = 1) -> EvalReport:
    """Load a checkpoint, verify its data digests, and score a split."""
    if resources is None:
        resources = load_resources(cfg)
    with open(checkpoint_path, "rb") as fh:
        params, _, saved = model.load_checkpoint(fh)
    if saved.get("vocab_digest") != resources.vocab.digest:
        raise DigestMismatchError(
            "checkpoint was built against different vocabulary content")
    if saved.get("entity_table_digest") != resources.table.digest:
        raise DigestMismatchError(
            "checkpoint was built against different entity-table content")
    if "encoder" in saved:
        cfg = replace(cfg, encoder=EncoderConfig.from_dict(saved["encoder"]))
    if "md_loss_weight" in saved:
        cfg = replace(cfg, md_loss_weight=float(saved["md_loss_weight"]))
    if "max_pieces" in saved:
        cfg = replace(cfg, max_pieces=int(saved["max_pieces"]))
    docs = prepare_documents(load_split(split_path), resources, cfg)
    return evaluate_prepared(docs, params, resources, cfg,
                             use_candidates=use_candidates, threads=threads)
