import json

import numpy as np
import pytest

import dstsel.autodiff as ad
from dstsel.cli import main as cli_main
from dstsel.corpus import (DialogueCorpus, demo_schema, derive_update_labels,
                           save_corpus, synthesize_corpus)
from dstsel.harness import (ABLATION_SETTINGS, AdamW, EvalReport, HarnessError,
                            TrainConfig, ablate, evaluate, gold_latest_update,
                            predict_dialogue, train)
from dstsel.model import DstModel

TINY = dict(epochs=1, d=16, n_layers=1, n_heads=2, dropout=0.0,
            word_dropout=0.0, seed=3)


@pytest.fixture(scope="module")
def schema():
    return demo_schema()


@pytest.fixture(scope="module")
def corpus(schema):
    return synthesize_corpus(schema, 3, max_turns=3, coref_rate=0.3, seed=2)


@pytest.fixture(scope="module")
def tiny_model(corpus, schema):
    return train(corpus, schema, TrainConfig(**TINY)).model


class TestTrainConfig:
    def test_flat_round_trip(self):
        cfg = TrainConfig(epochs=7, lr=0.5, dropout=0.2)
        again = TrainConfig.from_flat(cfg.to_flat())
        assert again == cfg

    def test_overrides_win(self):
        cfg = TrainConfig.from_flat("epochs=3\n", {"epochs": "9"})
        assert cfg.epochs == 9

    def test_unknown_key_rejected(self):
        with pytest.raises(HarnessError, match="unknown config keys"):
            TrainConfig.from_flat("no_such_field=1\n")

    def test_bad_line_rejected(self):
        with pytest.raises(HarnessError, match="bad config line"):
            TrainConfig.from_flat("epochs\n")

    def test_comments_and_blanks_skipped(self):
        cfg = TrainConfig.from_flat("# a comment\n\nepochs=4\n")
        assert cfg.epochs == 4

    def test_negative_value_rejected(self):
        with pytest.raises(HarnessError, match="non-negative"):
            TrainConfig(lr=-1.0)


class TestAdamW:
    def test_quadratic_descends(self):
        p = ad.Parameter("p", np.array([5.0, -3.0]))
        opt = AdamW([([p], 0.1)], total_steps=200, weight_decay=0.0)
        for _ in range(200):
            p.zero_grad()
            loss = ad.sum_all(ad.mul(p, p))
            ad.backward(loss)
            opt.step()
        assert np.all(np.abs(p.data) < 0.1)

    def test_decay_skips_vectors(self):
        vec = ad.Parameter("vec", np.ones(4))
        mat = ad.Parameter("mat", np.ones((4, 4)))
        opt = AdamW([([vec, mat], 0.0)], total_steps=10, weight_decay=0.5)
        # zero lr: the decay term is also scaled by lr, so nothing may move
        vec.zero_grad(), mat.zero_grad()
        opt.step()
        assert np.array_equal(vec.data, np.ones(4))
        assert np.array_equal(mat.data, np.ones((4, 4)))

    def test_warmup_ramps(self):
        p = ad.Parameter("p", np.array([1.0]))
        opt = AdamW([([p], 1.0)], total_steps=100, warmup=0.1, weight_decay=0.0)
        p.grad = np.array([1.0])
        before = p.data.copy()
        opt.step()
        first = abs(before - p.data)[0]
        # first step runs at a tenth of the peak rate
        assert first < 0.2


class TestGoldLatestUpdate:
    def test_latest_wins(self, schema):
        labels = [{"hotel-area"}, {"hotel-area", "hotel-stay"}, {"restaurant-food"}]
        t_z = gold_latest_update(labels, 3, schema)
        assert t_z[schema.index("hotel-area")] == 2
        assert t_z[schema.index("hotel-stay")] == 2
        assert schema.index("restaurant-food") not in t_z  # turn 3 not < 3

    def test_empty_prefix(self, schema):
        assert gold_latest_update([{"hotel-area"}], 1, schema) == {}


class TestTraining:
    def test_zero_epochs_returns_initial_model(self, corpus, schema):
        res = train(corpus, schema, TrainConfig(**{**TINY, "epochs": 0}))
        assert res.epoch_losses == []
        assert not res.diverged

    def test_deterministic(self, corpus, schema):
        a = train(corpus, schema, TrainConfig(**TINY)).model
        b = train(corpus, schema, TrainConfig(**TINY)).model
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data), pa.name

    def test_loss_decreases(self, corpus, schema):
        res = train(corpus, schema, TrainConfig(**{**TINY, "epochs": 4}))
        assert res.epoch_losses[-1] < res.epoch_losses[0]


class TestEvaluate:
    def test_empty_corpus(self, schema, tiny_model):
        report = evaluate(DialogueCorpus([], schema), tiny_model)
        assert report.no_turns

    def test_metric_ranges_and_identities(self, corpus, tiny_model):
        report = evaluate(corpus, tiny_model)
        assert 0.0 <= report.joint_goal_accuracy <= 1.0
        assert report.joint_goal_accuracy <= report.slot_accuracy + 1e-12
        for acc in report.per_domain.values():
            assert report.joint_goal_accuracy <= acc + 1e-12
        assert 0.0 <= report.selection_recall <= 1.0
        assert 0.0 <= report.update_f1 <= 1.0
        assert report.n_turns == sum(len(d) for d in corpus)

    def test_unknown_mode_rejected(self, corpus, tiny_model):
        with pytest.raises(HarnessError, match="unknown eval mode"):
            evaluate(corpus, tiny_model, mode="nope")

    def test_report_json_round_trips(self, corpus, tiny_model):
        report = evaluate(corpus, tiny_model)
        obj = json.loads(report.to_json())
        assert obj["n_turns"] == report.n_turns

    def test_granularity_mode_runs(self, corpus, tiny_model):
        report = evaluate(corpus, tiny_model, mode="granularity")
        assert report.n_turns > 0

    def test_ablation_table_complete(self, corpus, tiny_model):
        reports = ablate(corpus, tiny_model)
        assert len(reports) == len(ABLATION_SETTINGS)
        assert "SN-DH + CT-DH + IMOR" in reports


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_model, tmp_path):
        d1 = tmp_path / "a"
        tiny_model.save(d1)
        loaded = DstModel.load(d1)
        for pa, pb in zip(tiny_model.parameters(), loaded.parameters()):
            assert np.array_equal(pa.data, pb.data), pa.name
        d2 = tmp_path / "b"
        loaded.save(d2)
        for name in ("params.bin", "params.json", "config.json", "vocab.txt"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name

    def test_loaded_model_predicts_identically(self, corpus, tiny_model, tmp_path):
        tiny_model.save(tmp_path / "m")
        loaded = DstModel.load(tmp_path / "m")
        a = evaluate(corpus, tiny_model).to_json()
        b = evaluate(corpus, loaded).to_json()
        assert a == b


class TestPredictDialogue:
    def test_wire_format(self, corpus, schema, tiny_model):
        d = corpus.dialogues[0]
        lines = predict_dialogue(tiny_model, d, schema)
        assert len(lines) == len(d)
        for i, line in enumerate(lines):
            assert line["turn"] == i + 1
            assert set(line) == {"turn", "updates", "state"}
            for u in line["updates"]:
                assert set(u) == {"slot", "method", "value", "selected_turns"}
                assert all(t < line["turn"] for t in u["selected_turns"])


class TestCli:
    def write_schema(self, tmp_path, schema):
        path = tmp_path / "schema.json"
        schema.save(path)
        return str(path)

    def test_generate_train_eval_cycle(self, tmp_path, schema):
        sp = self.write_schema(tmp_path, schema)
        data = str(tmp_path / "data.jsonl")
        assert cli_main(["generate-data", "--schema", sp, "--out", data,
                         "--n", "3", "--max-turns", "3", "--seed", "5"]) == 0
        ckpt = str(tmp_path / "ckpt")
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("epochs=1\nd=16\nn_layers=1\nn_heads=2\n"
                       "dropout=0.0\nword_dropout=0.0\n")
        assert cli_main(["train", "--config", str(cfg), "--data", data,
                         "--schema", sp, "--out", ckpt]) == 0
        assert cli_main(["eval", "--ckpt", ckpt, "--data", data,
                         "--schema", sp]) == 0
        assert cli_main(["predict", "--ckpt", ckpt, "--dialogue", data,
                         "--schema", sp]) == 0
        assert cli_main(["inspect-graph", "--ckpt", ckpt, "--dialogue", data,
                         "--schema", sp, "--turn", "2",
                         "--slot", "hotel-area"]) == 0

    def test_missing_data_exits_2(self, tmp_path, schema):
        sp = self.write_schema(tmp_path, schema)
        code = cli_main(["generate-data", "--schema", str(tmp_path / "nope.json"),
                         "--out", str(tmp_path / "x"), "--n", "1"])
        assert code == 2
        code = cli_main(["eval", "--ckpt", str(tmp_path / "none"),
                         "--data", str(tmp_path / "none.jsonl"), "--schema", sp])
        assert code == 2

    def test_bad_config_exits_2(self, tmp_path, schema):
        sp = self.write_schema(tmp_path, schema)
        data = str(tmp_path / "d.jsonl")
        cli_main(["generate-data", "--schema", sp, "--out", data, "--n", "1"])
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("bogus_key=1\n")
        code = cli_main(["train", "--config", str(cfg), "--data", data,
                         "--schema", sp, "--out", str(tmp_path / "c")])
        assert code == 2
