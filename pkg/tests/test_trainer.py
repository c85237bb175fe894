import json

import numpy as np
import pytest

from conftest import write_overfit_workspace
from linkforge.errors import DigestMismatchError, ValidationError
from linkforge.model import init_params, load_checkpoint
from linkforge.trainer import (RunConfig, config_from_dict, evaluate_checkpoint,
                               evaluate_prepared, load_config, load_resources,
                               load_split, prepare_documents, train)


@pytest.fixture(scope="module")
def quick_workspace(tmp_path_factory):
    # 30 steps, 2 repeats: enough to exercise every code path cheaply
    return write_overfit_workspace(tmp_path_factory.mktemp("quick"),
                                   max_steps=30, repeats=2, eval_every=10)


@pytest.fixture(scope="module")
def quick_run(quick_workspace, tmp_path_factory):
    cfg = load_config(quick_workspace["config_path"])
    ckpt_dir = tmp_path_factory.mktemp("ckpts")
    report = train(cfg, checkpoint_dir=ckpt_dir)
    return cfg, report


class TestConfig:
    def test_json_round_trip(self, quick_workspace):
        cfg = load_config(quick_workspace["config_path"])
        assert cfg.batch_size == 4
        assert cfg.encoder.m == 64
        assert cfg.md_loss_weight == 0.1

    def test_key_value_format(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment\n"
            "lr = 0.001\n"
            "max_steps = 5\n"
            "encoder.m = 8\n"
            "encoder.window = 0\n"
            "encoder.seed = 2\n"
            'train_corpus = "train.tsv"\n'
            "nil_policy = lenient\n",
            encoding="utf-8",
        )
        cfg = load_config(path)
        assert cfg.lr == 0.001
        assert cfg.max_steps == 5
        assert cfg.encoder.m == 8
        assert cfg.train_corpus == "train.tsv"
        assert cfg.nil_policy == "lenient"

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown config"):
            config_from_dict({"learning_rate": 1.0})

    def test_invalid_values_rejected(self):
        with pytest.raises(ValidationError):
            RunConfig(md_loss_weight=1.5)
        with pytest.raises(ValidationError):
            RunConfig(dropout=1.0)
        with pytest.raises(ValidationError):
            RunConfig(batch_size=0)
        with pytest.raises(ValidationError):
            RunConfig(repeats=0)


class TestTrainLoop:
    def test_repeat_structure(self, quick_run):
        cfg, report = quick_run
        assert len(report.repeats) == 2
        assert [r.seed for r in report.repeats] == [cfg.seed, cfg.seed + 1]
        for repeat in report.repeats:
            assert len(repeat.loss_curve) == cfg.max_steps
            assert [entry[0] for entry in repeat.eval_curve] == [10, 20, 30]
            assert repeat.checkpoint_path is not None

    def test_loss_identity_every_step(self, quick_run):
        cfg, report = quick_run
        w = cfg.md_loss_weight
        for repeat in report.repeats:
            for _, total, md, ed in repeat.loss_curve:
                assert total == w * md + (1.0 - w) * ed

    def test_summary_statistics(self, quick_run):
        _, report = quick_run
        summary = report.summary()
        micro = summary["validation"]["micro_f1"]
        assert len(micro["values"]) == 2
        mean = sum(micro["values"]) / 2
        assert micro["mean"] == mean
        expected_std = (sum((v - mean) ** 2 for v in micro["values"])) ** 0.5
        assert abs(micro["stddev"] - expected_std) < 1e-15

    def test_determinism(self, quick_workspace):
        cfg = load_config(quick_workspace["config_path"])
        first = train(cfg)
        second = train(cfg)
        assert json.dumps(first.to_dict(), sort_keys=True) == \
            json.dumps(second.to_dict(), sort_keys=True)

    def test_zero_steps_keeps_initial_params(self, quick_workspace, tmp_path):
        from dataclasses import replace

        cfg = replace(load_config(quick_workspace["config_path"]),
                      max_steps=0, repeats=1, eval_every=0)
        report = train(cfg, checkpoint_dir=tmp_path)
        repeat = report.repeats[0]
        assert repeat.loss_curve == []
        with open(repeat.checkpoint_path, "rb") as fh:
            params, state, _ = load_checkpoint(fh)
        resources = load_resources(cfg)
        expected = init_params(cfg.encoder.m, resources.table.d, cfg.seed)
        for (_, a), (_, b) in zip(params.arrays(), expected.arrays()):
            assert np.array_equal(a, b)
        assert state.t == 0

    def test_missing_train_corpus_rejected(self):
        with pytest.raises(ValidationError, match="training corpus"):
            train(RunConfig())


class TestEvaluate:
    def test_checkpoint_round_trip_is_bit_identical(self, quick_workspace,
                                                    quick_run):
        cfg, report = quick_run
        resources = load_resources(cfg)
        prepared = prepare_documents(load_split(cfg.train_corpus),
                                     resources, cfg)
        with open(report.repeats[0].checkpoint_path, "rb") as fh:
            params, _, _ = load_checkpoint(fh)
        in_memory = evaluate_prepared(prepared, params, resources, cfg)
        from_file = evaluate_checkpoint(report.repeats[0].checkpoint_path,
                                        cfg.train_corpus, cfg, resources)
        assert from_file.to_dict() == in_memory.to_dict()
        assert from_file.to_dict() == report.repeats[0].validation.to_dict()

    def test_digest_mismatch_refused(self, quick_workspace, quick_run,
                                     tmp_path):
        from dataclasses import replace

        cfg, report = quick_run
        tampered = tmp_path / "vocab.txt"
        original = open(cfg.vocab, encoding="utf-8").read()
        tampered.write_text(original + "extra-piece\n", encoding="utf-8")
        bad_cfg = replace(cfg, vocab=str(tampered))
        with pytest.raises(DigestMismatchError):
            evaluate_checkpoint(report.repeats[0].checkpoint_path,
                                cfg.train_corpus, bad_cfg)

    def test_empty_split_rejected(self, quick_run, tmp_path):
        cfg, report = quick_run
        empty = tmp_path / "empty.tsv"
        empty.write_text("", encoding="utf-8")
        with pytest.raises(ValidationError, match="empty split"):
            evaluate_checkpoint(report.repeats[0].checkpoint_path,
                                str(empty), cfg)

    def test_full_universe_candidate_table_matches_no_candidates(
            self, quick_workspace, quick_run, tmp_path):
        from dataclasses import replace

        cfg, report = quick_run
        resources = load_resources(cfg)
        table = resources.table
        # every surface form maps to the entire universe
        corpus_docs = load_split(cfg.train_corpus)
        surfaces = set()
        for doc in corpus_docs:
            for m in doc.gold_mentions():
                surfaces.add(" ".join(doc.tokens[m.start_word:m.end_word + 1]))
        lines = "\n".join(
            s + "\t" + "\t".join(table.names) for s in sorted(surfaces))
        cand_path = tmp_path / "cands.tsv"
        cand_path.write_text(lines + "\n", encoding="utf-8")

        with_c = evaluate_checkpoint(
            report.repeats[0].checkpoint_path, cfg.train_corpus,
            replace(cfg, candidate_table=str(cand_path)))
        without_c = evaluate_checkpoint(report.repeats[0].checkpoint_path,
                                        cfg.train_corpus, cfg)
        assert with_c.to_dict() == without_c.to_dict()
