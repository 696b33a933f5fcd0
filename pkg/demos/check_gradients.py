"""Finite-difference verification of the reverse-mode gradients, module by
module: raw ops, the transformer encoder, the selector, and the generator
losses.  Every analytic gradient is compared against central differences on
a sample of parameter entries.

Run:  python3 demos/check_gradients.py
"""

import time

import numpy as np

import dstsel.autodiff as ad
from dstsel.corpus import demo_schema, synthesize_corpus
from dstsel.encoder import EncoderConfig, Transformer, TurnEncoder, Vocabulary
from dstsel.generator import (StateGenerator, build_refined_context,
                              find_gold_span, generation_losses)
from dstsel.selector import TurnSelector
from dstsel.update_predictor import UpdatePredictor, update_loss

D = 16
rng = np.random.default_rng(0)
schema = demo_schema()
corpus = synthesize_corpus(schema, 4, max_turns=4, seed=0)
dialogue = next(d for d in corpus if len(d) == 4)
vocab = Vocabulary.build(corpus, schema)
cfg = EncoderConfig(d=D, n_layers=1, n_heads=2, max_len=256,
                    dropout=0.0, word_dropout=0.0)
emb = ad.Parameter("emb", rng.normal(0, 0.25, size=(len(vocab), D)))
encoder = TurnEncoder(emb, Transformer("enc", cfg, rng), vocab, cfg)
refiner = Transformer("refine", cfg, rng)
selector = TurnSelector(D, 2, rng, hops=2)
update = UpdatePredictor(D, rng)
generator = StateGenerator(D, rng)

prev = schema.empty_state()
batch = encoder.encode_turns(dialogue, len(dialogue), prev, schema)


def composed_selector():
    res = selector.select_for_slot(batch, schema, 0, 2, {1: 2})
    total = res.score_tensors[0]
    for s in res.score_tensors[1:]:
        total = ad.add(total, s)
    return total


def composed_generator():
    refined = build_refined_context(dialogue, len(dialogue), [1], prev,
                                    schema, encoder, refiner)
    state = dialogue.gold_states[-1]
    slot, gold = next((schema.index(n), v) for n, v in state.items()
                      if v != "none" and (find_gold_span(refined, v, vocab)
                                          or v in schema.slots[schema.index(n)].values))
    l_ext, l_cls = generation_losses(generator, {slot: refined}, {slot: gold},
                                     schema, emb, vocab)
    return ad.add(l_ext, l_cls)


suite = [
    ("softmax-attention op", lambda: ad.sum_all(ad.scaled_dot_attention(
        ad.mul(p_probe, ad.const(np.ones((3, 8)))), p_keys, p_keys)),
     None),  # filled below
    ("encoder stack", lambda: ad.sum_all(ad.tanh(
        encoder.encode_turn(dialogue, 1, prev, schema).h)),
     [emb] + encoder.transformer.parameters()),
    ("update head", lambda: update_loss(
        update.predict(batch.current, schema), {0, 2}), update.parameters()),
    ("selector (all three perspectives)", composed_selector, selector.parameters()),
    ("generator losses", composed_generator,
     generator.parameters() + refiner.parameters()),
]

p_probe = ad.Parameter("probe", rng.standard_normal((3, 8)))
p_keys = ad.Parameter("keys", rng.standard_normal((5, 8)))
suite[0] = ("softmax-attention op", lambda: ad.sum_all(ad.scaled_dot_attention(
    p_probe, p_keys, p_keys)), [p_probe, p_keys])

print(f"{'stage':<36} {'max rel err':>12} {'params':>8} {'secs':>6}")
worst = 0.0
for name, f, params in suite:
    start = time.time()
    report = ad.grad_check(f, params, max_entries=4, rng=np.random.default_rng(1))
    took = time.time() - start
    worst = max(worst, report["max_rel_err"])
    print(f"{name:<36} {report['max_rel_err']:>12.2e} "
          f"{len(report['params']):>8} {took:>6.2f}")

print(f"\nworst relative error across the suite: {worst:.2e}")
assert worst < 1e-4
