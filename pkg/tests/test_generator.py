import numpy as np
import pytest

import dstsel.autodiff as ad
from dstsel.corpus import demo_schema, synthesize_corpus, tokenize
from dstsel.encoder import (CLS, IND, SEP, EncoderConfig, Transformer,
                            TurnEncoder, Vocabulary)
from dstsel.generator import (GeneratorError, StateGenerator,
                              build_refined_context, find_gold_span,
                              generation_losses)

D = 16


@pytest.fixture
def schema():
    return demo_schema()


@pytest.fixture
def world(schema):
    corpus = synthesize_corpus(schema, 6, max_turns=4, seed=0)
    dialogue = next(d for d in corpus if len(d) == 4)
    vocab = Vocabulary.build(corpus, schema)
    cfg = EncoderConfig(d=D, n_layers=1, n_heads=2, max_len=256,
                        dropout=0.0, word_dropout=0.0)
    rng = np.random.default_rng(0)
    emb = ad.Parameter("emb", rng.normal(0, 0.25, size=(len(vocab), D)))
    enc = TurnEncoder(emb, Transformer("enc", cfg, rng), vocab, cfg)
    refine = Transformer("refine", cfg, rng)
    gen = StateGenerator(D, np.random.default_rng(1))
    return dialogue, vocab, enc, refine, gen, emb


def refined_for(world, schema, selected, turn_id=4, **kw):
    dialogue, vocab, enc, refine, gen, emb = world
    prev = dialogue.gold_states[turn_id - 2]
    return build_refined_context(dialogue, turn_id, selected, prev, schema,
                                 enc, refine, **kw)


class TestRefinedContext:
    def test_layout(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [1, 3])
        toks = vocab.decode(refined.ids)
        assert toks[0] == CLS
        assert refined.included_turns == [1, 3, 4]
        assert len(refined.indicator_pos) == 3
        for p in refined.indicator_pos:
            assert toks[p] == IND
        # ce covers exactly the dialogue tokens, in turn order
        assert refined.ce_turn == sorted(refined.ce_turn)
        for p in refined.ce_pos:
            assert toks[p] not in (CLS, IND)
        assert toks[-1] == SEP

    def test_current_turn_never_duplicated(self, world, schema):
        refined = refined_for(world, schema, [4, 2])
        assert refined.included_turns == [2, 4]

    def test_empty_selection_keeps_current_turn(self, world, schema):
        refined = refined_for(world, schema, [])
        assert refined.included_turns == [4]
        assert len(refined.indicator_pos) == 1

    def test_overflow_drops_oldest_selected(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        enc.config.max_len = 85
        try:
            refined = refined_for(world, schema, [1, 2, 3])
        finally:
            enc.config.max_len = 256
        assert refined.dropped_turns
        assert refined.dropped_turns[0] == 1
        assert refined.included_turns[-1] == 4

    def test_refine_false_requires_first_pass(self, world, schema):
        with pytest.raises(GeneratorError, match="first-pass"):
            refined_for(world, schema, [1], refine=False)

    def test_stitched_shape_matches_refined(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        batch = enc.encode_turns(dialogue, 4, dialogue.gold_states[2], schema)
        a = refined_for(world, schema, [1, 3])
        b = refined_for(world, schema, [1, 3], refine=False, first_pass=batch)
        assert a.h.data.shape == b.h.data.shape


class TestSpanExtraction:
    def test_distributions_sum_to_one(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [1, 2])
        p, q = gen.span_distributions(refined, 0)
        assert p.data.shape == (len(refined.ce_pos),)
        assert p.data.sum() == pytest.approx(1.0)
        assert q.data.sum() == pytest.approx(1.0)

    def test_inverted_span_yields_none(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [1])
        # rig the heads so start lands after end
        gen.w_start.data = np.zeros_like(gen.w_start.data)
        gen.w_end.data = np.zeros_like(gen.w_end.data)
        p, q, span, value = gen.extract_span(refined, 0, vocab)
        assert (value is None) == (span[1] < span[0])

    def test_find_gold_span_prefers_recent_turn(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [1, 2, 3])
        # pick a token that occurs in at least one turn
        labels_last = dialogue.gold_states[-1]
        for name, value in labels_last.items():
            span = find_gold_span(refined, value, vocab)
            if span is None:
                continue
            i, jj = span
            turn = refined.ce_turn[i]
            # no later turn may contain the same span
            ids = [refined.ids[p] for p in refined.ce_pos]
            want = vocab.encode(tokenize(value))
            for s in range(len(ids) - len(want) + 1):
                if ids[s:s + len(want)] == want and refined.ce_turn[s] == refined.ce_turn[s + len(want) - 1]:
                    assert refined.ce_turn[s] <= turn

    def test_find_gold_span_absent(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [])
        assert find_gold_span(refined, "zanzibar", vocab) is None


class TestClassification:
    def test_candidate_distribution_shape(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [1])
        y_turn, y_cand = gen.candidate_distribution(refined, 0, schema, emb, vocab)
        assert y_turn.data.shape == (len(refined.indicator_pos),)
        assert y_cand.data.shape == (len(schema.slots[0].values),)
        assert y_cand.data.sum() == pytest.approx(1.0)

    def test_classify_returns_candidate(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [2])
        _, value = gen.classify_value(refined, 3, schema, emb, vocab)
        assert value in schema.slots[3].values


class TestHybrid:
    def test_prediction_always_total(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [1, 2])
        for j in range(len(schema)):
            pred = gen.generate_value(refined, j, schema, emb, vocab)
            assert pred.method in ("extractive", "classification")
            assert isinstance(pred.value, str) and pred.value

    def test_classification_fallback_when_span_invalid(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [1])
        gen.w_start.data = np.zeros_like(gen.w_start.data)
        gen.w_end.data = np.zeros_like(gen.w_end.data)
        pred = gen.generate_value(refined, 0, schema, emb, vocab)
        if pred.method == "classification":
            assert pred.distribution is not None
            assert pred.value in schema.slots[0].values


class TestLosses:
    def test_loss_zeroed_terms(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [1, 2, 3])
        # a candidate value absent from the dialogue: cls term only
        absent = next(v for v in schema.slots[0].values
                      if find_gold_span(refined, v, vocab) is None)
        l_ext, l_cls = generation_losses(gen, {0: refined}, {0: absent},
                                         schema, emb, vocab)
        assert l_ext.item() == 0.0
        assert l_cls.item() > 0.0

    def test_loss_error_when_value_unreachable(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [1])
        with pytest.raises(GeneratorError, match="neither"):
            generation_losses(gen, {0: refined}, {0: "zanzibar"}, schema, emb, vocab)

    def test_empty_slots_rejected(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        with pytest.raises(GeneratorError, match="no slots"):
            generation_losses(gen, {}, {}, schema, emb, vocab)

    def test_extractive_loss_decreases_with_confidence(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        refined = refined_for(world, schema, [1, 2, 3])
        labels = dialogue.gold_states[-1]
        slot, gold = next((schema.index(n), v) for n, v in labels.items()
                          if find_gold_span(refined, v, vocab) is not None)
        l1, _ = generation_losses(gen, {slot: refined}, {slot: gold}, schema, emb, vocab)
        assert np.isfinite(l1.item()) and l1.item() > 0.0

    def test_gradient(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        prev = dialogue.gold_states[2]

        def f():
            refined = build_refined_context(dialogue, 4, [2], prev, schema, enc, refine)
            labels = dialogue.gold_states[-1]
            slot = schema.index(next(iter(labels)))
            gold = labels[schema.slots[slot].name]
            if find_gold_span(refined, gold, vocab) is None and \
                    gold not in schema.slots[slot].values:
                pytest.skip("value unreachable in this fixture")
            l_ext, l_cls = generation_losses(gen, {slot: refined}, {slot: gold},
                                             schema, emb, vocab)
            return ad.add(l_ext, l_cls)

        report = ad.grad_check(f, gen.parameters() + refine.parameters(),
                               max_entries=4, rng=np.random.default_rng(7))
        assert report["max_rel_err"] < 1e-5, report


class TestSelectionGradientRouting:
    def test_unselected_turn_perturbation_leaves_output_unchanged(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        prev = dialogue.gold_states[2]
        base = build_refined_context(dialogue, 4, [2], prev, schema, enc, refine)
        # scaling factors applied in train mode are exactly one in the forward
        s = ad.const(np.float64(0.37))
        scaled = build_refined_context(dialogue, 4, [2], prev, schema, enc, refine,
                                       score_tensors={2: s}, train=True,
                                       rng=np.random.default_rng(0))
        # word/residual dropout are at 0 in this fixture, so train mode only
        # adds the routing factors; forward output must be bit-identical
        assert np.array_equal(base.h.data, scaled.h.data)

    def test_gradient_reaches_selected_scores_only(self, world, schema):
        dialogue, vocab, enc, refine, gen, emb = world
        prev = dialogue.gold_states[2]
        s2 = ad.Parameter("s2", np.float64(0.1))
        s3 = ad.Parameter("s3", np.float64(-0.4))
        refined = build_refined_context(dialogue, 4, [2], prev, schema, enc, refine,
                                        score_tensors={2: s2, 3: s3}, train=True,
                                        rng=np.random.default_rng(0))
        labels = dialogue.gold_states[-1]
        slot = schema.index(next(iter(labels)))
        gold = labels[schema.slots[slot].name]
        l_ext, l_cls = generation_losses(gen, {slot: refined}, {slot: gold},
                                         schema, emb, vocab)
        ad.backward(ad.add(l_ext, l_cls))
        assert s2.grad != 0.0      # turn 2 was selected: gradient flows
        assert s3.grad == 0.0      # turn 3 was not in the context
