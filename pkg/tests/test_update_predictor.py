import numpy as np
import pytest

import dstsel.autodiff as ad
from dstsel.corpus import demo_schema, synthesize_corpus
from dstsel.encoder import EncoderConfig, Transformer, TurnEncoder, Vocabulary
from dstsel.update_predictor import (ConfigError, UpdatePredictor,
                                     update_loss, UpdateDecision)


@pytest.fixture
def schema():
    return demo_schema()


@pytest.fixture
def encoded(schema):
    corpus = synthesize_corpus(schema, 2, seed=0)
    vocab = Vocabulary.build(corpus, schema)
    cfg = EncoderConfig(d=16, n_layers=1, n_heads=2, dropout=0.0, word_dropout=0.0)
    rng = np.random.default_rng(0)
    emb = ad.Parameter("emb", rng.normal(0, 0.25, size=(len(vocab), cfg.d)))
    enc = TurnEncoder(emb, Transformer("enc", cfg, rng), vocab, cfg)
    return enc.encode_turn(corpus.dialogues[0], 1, schema.empty_state(), schema)


def test_scores_are_probabilities(encoded, schema):
    head = UpdatePredictor(16, np.random.default_rng(1))
    decision = head.predict(encoded, schema)
    assert len(decision.scores) == len(schema)
    assert all(0.0 < s < 1.0 for s in decision.scores)


def test_large_positive_bias_selects_everything(encoded, schema):
    head = UpdatePredictor(16, np.random.default_rng(1))
    head.b2.data = np.array([10.0])
    decision = head.predict(encoded, schema)
    assert decision.selected == list(range(len(schema)))
    head.b2.data = np.array([-10.0])
    assert head.predict(encoded, schema).selected == []


def test_threshold_monotonicity(encoded, schema):
    head = UpdatePredictor(16, np.random.default_rng(2))
    lo = head.predict(encoded, schema, threshold=0.1).selected
    hi = head.predict(encoded, schema, threshold=0.9).selected
    assert set(hi) <= set(lo)


def test_bad_threshold_rejected(encoded, schema):
    head = UpdatePredictor(16, np.random.default_rng(1))
    for bad in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(ConfigError):
            head.predict(encoded, schema, threshold=bad)


def test_loss_at_half_is_log_two():
    half = [ad.const(np.float64(0.5)) for _ in range(4)]
    decision = UpdateDecision([0.5] * 4, half, 0.5)
    loss = update_loss(decision, {0, 2})
    assert loss.item() == pytest.approx(np.log(2.0))


def test_loss_rewards_correct_confidence():
    good = UpdateDecision([0.99, 0.01], [ad.const(np.float64(0.99)),
                                         ad.const(np.float64(0.01))], 0.5)
    bad = UpdateDecision([0.01, 0.99], [ad.const(np.float64(0.01)),
                                        ad.const(np.float64(0.99))], 0.5)
    assert update_loss(good, {0}).item() < update_loss(bad, {0}).item()


def test_loss_finite_at_extremes():
    extreme = UpdateDecision([1.0, 0.0], [ad.const(np.float64(1.0)),
                                          ad.const(np.float64(0.0))], 0.5)
    assert np.isfinite(update_loss(extreme, {1}).item())


def test_gradient(encoded, schema):
    head = UpdatePredictor(16, np.random.default_rng(3))

    def f():
        decision = head.predict(encoded, schema)
        return update_loss(decision, {0, 3})

    report = ad.grad_check(f, head.parameters(), rng=np.random.default_rng(4))
    assert report["max_rel_err"] < 1e-5, report
