"""linkforge: joint mention detection and entity disambiguation over a
frozen text encoder, with cosine-similarity linking against an entity
embedding table."""

__version__ = "0.1.0"

from .corpus import (CandidateTable, Document, EntityTable, GoldMention, NIL,
                     load_candidate_table, load_entity_table, parse_documents)
from .decoder import DecodeConfig, PredictedMention, decode_document, repair_iob
from .encoder import EncoderConfig, encode_hashed, load_precomputed
from .entity_index import EntityIndex, build_index, search
from .evaluator import EvalReport, ed_accuracy, strong_match_f1
from .model import (AdamState, HeadParams, LossBreakdown, adam_step,
                    compute_gradients, compute_loss, ed_forward, init_adam,
                    init_params, md_forward)
from .tokenizer import (Vocabulary, WordPieceSequence, align_document,
                        load_vocab, tokenize_word)
from .trainer import RunConfig, RunReport, evaluate_checkpoint, train

__all__ = [
    "NIL",
    "AdamState",
    "CandidateTable",
    "DecodeConfig",
    "Document",
    "EncoderConfig",
    "EntityIndex",
    "EntityTable",
    "EvalReport",
    "GoldMention",
    "HeadParams",
    "LossBreakdown",
    "PredictedMention",
    "RunConfig",
    "RunReport",
    "Vocabulary",
    "WordPieceSequence",
    "adam_step",
    "align_document",
    "build_index",
    "compute_gradients",
    "compute_loss",
    "decode_document",
    "ed_accuracy",
    "ed_forward",
    "encode_hashed",
    "evaluate_checkpoint",
    "init_adam",
    "init_params",
    "load_candidate_table",
    "load_entity_table",
    "load_precomputed",
    "load_vocab",
    "md_forward",
    "parse_documents",
    "repair_iob",
    "search",
    "strong_match_f1",
    "tokenize_word",
    "train",
]
