"""Shared fixtures: a tiny hand-written corpus and a generated overfit
workspace (20 documents, 50 entities) used by trainer, CLI and acceptance
tests."""

import json
from pathlib import Path

import numpy as np
import pytest

TINY_CORPUS = """\
-DOCSTART- doc-a
Paris\tB\tParis_(city)
is\tO\t
nice\tO\t
-DOCSTART- doc-b
New\tB\tNew_York
York\tI\tNew_York
greets\tO\t
Paris\tB\tParis_(city)
"""

TINY_VOCAB = [
    "[PAD]", "[UNK]", "Paris", "is", "nice", "New", "York", "greets",
    "play", "##ing", "##s",
]

TINY_ENTITIES = """\
3 4
Paris_(city) 1.0 0.5 -0.25 2.0
New_York 0.0 -1.0 0.75 0.125
Rome 0.5 0.5 0.5 0.5
"""


@pytest.fixture
def tiny_corpus_text():
    return TINY_CORPUS


@pytest.fixture
def tiny_vocab_lines():
    return list(TINY_VOCAB)


@pytest.fixture
def tiny_entities_text():
    return TINY_ENTITIES


FILLERS = ["the", "quick", "brown", "fox", "playing"]
MENTION_TAIL = "unit"


def build_overfit_fixture(seed=13, n_entities=50, n_docs=20, dim=16):
    """A small, fully learnable corpus.

    Word identity determines the tag (fillers are always O, entity surface
    words always B, the shared tail word always I), each entity has a
    dedicated surface form, and every entity is mentioned exactly twice, so
    a frozen random encoder plus linear heads can reach exact training F1.
    """
    rng = np.random.default_rng(seed)
    entity_names = [f"E{j:02d}" for j in range(1, n_entities + 1)]
    embeddings = rng.standard_normal((n_entities, dim))
    embeddings /= np.linalg.norm(embeddings, axis=1, keepdims=True)

    surface_of = {}
    for j, name in enumerate(entity_names):
        word = f"ent{j + 1:02d}"
        # every fifth entity gets a two-word surface form
        surface_of[name] = (word, MENTION_TAIL) if j % 5 == 4 else (word,)

    vocab = ["[PAD]", "[UNK]", "play", "##ing", MENTION_TAIL]
    vocab += [f for f in FILLERS if f != "playing"]
    vocab += [surface_of[name][0] for name in entity_names]

    # two mention slots per entity, dealt across documents in random order
    slots = np.array(entity_names * 2)
    rng.shuffle(slots)
    per_doc = np.array_split(slots, n_docs)

    lines = []
    mention_count = 0
    for doc_index in range(n_docs):
        lines.append(f"-DOCSTART- fixture-{doc_index:02d}")
        for name in per_doc[doc_index]:
            for _ in range(int(rng.integers(1, 3))):
                lines.append(f"{FILLERS[rng.integers(len(FILLERS))]}\tO\t")
            surface = surface_of[name]
            lines.append(f"{surface[0]}\tB\t{name}")
            for tail in surface[1:]:
                lines.append(f"{tail}\tI\t{name}")
            mention_count += 1
        lines.append(f"{FILLERS[rng.integers(len(FILLERS))]}\tO\t")

    entity_lines = [f"{n_entities} {dim}"]
    for name, row in zip(entity_names, embeddings):
        entity_lines.append(name + " " + " ".join(repr(float(v)) for v in row))

    return {
        "corpus": "\n".join(lines) + "\n",
        "vocab": "\n".join(vocab) + "\n",
        "entities": "\n".join(entity_lines) + "\n",
        "mention_count": mention_count,
    }


def write_overfit_workspace(root: Path, max_steps=2000, lr=2e-3, repeats=1,
                            seed=7, eval_every=0) -> dict:
    fixture = build_overfit_fixture()
    root.mkdir(parents=True, exist_ok=True)
    (root / "train.tsv").write_text(fixture["corpus"], encoding="utf-8")
    (root / "vocab.txt").write_text(fixture["vocab"], encoding="utf-8")
    (root / "entities.txt").write_text(fixture["entities"], encoding="utf-8")
    config = {
        "md_loss_weight": 0.1,
        "lr": lr,
        "batch_size": 4,
        "max_steps": max_steps,
        "dropout": 0.1,
        "eval_every": eval_every,
        "seed": seed,
        "repeats": repeats,
        "encoder": {"m": 64, "window": 0, "seed": 3},
        "train_corpus": str(root / "train.tsv"),
        "validation_corpus": str(root / "train.tsv"),
        "vocab": str(root / "vocab.txt"),
        "entity_table": str(root / "entities.txt"),
    }
    (root / "run.json").write_text(json.dumps(config, indent=2),
                                   encoding="utf-8")
    return {"root": root, "config_path": root / "run.json", "config": config,
            "mention_count": fixture["mention_count"]}


@pytest.fixture(scope="session")
def overfit_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    return write_overfit_workspace(root)
