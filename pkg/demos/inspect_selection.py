"""Look inside the turn selector on a cross-slot reference turn: the typed
reasoning graph, the three perspective scores, and which history turns the
fused ranking picks.

Run:  python3 demos/inspect_selection.py
"""

import numpy as np

from dstsel import DstModel, ModelConfig, demo_schema, synthesize_corpus
from dstsel.corpus import derive_update_labels
from dstsel.encoder import Vocabulary
from dstsel.harness import gold_latest_update

schema = demo_schema()
corpus = synthesize_corpus(schema, 30, max_turns=4, coref_rate=0.5, seed=3)
vocab = Vocabulary.build(corpus, schema)
model = DstModel(ModelConfig(d=32, n_layers=1, n_heads=2, dropout=0.0,
                             word_dropout=0.0, seed=0), vocab)

# find a dialogue whose last turn is a cross-slot reference
pick = None
for d in corpus:
    t = len(d)
    for (turn, slot), ev in d.evidence.items():
        if turn == t and set(ev) != {turn}:
            pick = (d, turn, slot, ev)
if pick is None:
    raise SystemExit("no reference turn found; raise coref_rate")
dialogue, turn_id, slot_name, evidence = pick
slot = schema.index(slot_name)

print(f"dialogue {dialogue.dialogue_id}, turn {turn_id}, target slot {slot_name}")
for t in dialogue.turns[:turn_id]:
    print(f"  turn {t.turn_id}: {t.user}")
print(f"evidence turns for this update: {sorted(evidence)}")

labels = derive_update_labels(dialogue)
t_z = gold_latest_update(labels, turn_id, schema)
prev = dialogue.gold_states[turn_id - 2]
batch = model.encoder.encode_turns(dialogue, turn_id, prev, schema)
interactions = model.selector.cls_interactions(batch)
graph = model.selector.build_graph(batch, interactions, schema, slot, t_z)

names = [f"turn{t + 1}" for t in range(graph.n_turns)] + \
        [s.name for s in schema.slots]
kind = {1: "target-slot <-> current-turn", 2: "target-slot <-> other-slot",
        3: "other-slot <-> its latest update turn", 4: "same-domain slot pair"}
print(f"\nreasoning graph: {graph.n_turns} turn nodes + {graph.n_slots} slot nodes")
for r in (1, 2, 3):
    for a, b, rr in graph.edges:
        if rr == r:
            print(f"  [{r}] {names[a]} -- {names[b]}   ({kind[r]})")
n4 = sum(1 for *_, rr in graph.edges if rr == 4)
print(f"  [4] {n4} same-domain slot pairs (not listed)")

res = model.selector.select_for_slot(batch, schema, slot, k=2, t_z=t_z)
print("\nper-history-turn fusion gates and scores (untrained weights):")
print(f"{'turn':>4} {'gate sn':>8} {'gate ct':>8} {'gate im':>8} {'score':>9}")
for t, (betas, score) in enumerate(zip(res.betas, res.scores), start=1):
    mark = "  <- selected" if t in res.selected else ""
    print(f"{t:>4} {betas[0]:>8.3f} {betas[1]:>8.3f} {betas[2]:>8.3f} "
          f"{score:>9.4f}{mark}")
print(f"\nselected history turns: {sorted(res.selected)} "
      f"(|selected| = min(k, T-1) = {min(2, turn_id - 1)})")

# ablation masks force individual gates to zero
for mask, label in (((False, False, True), "without the graph perspective"),
                    ((True, True, False), "graph perspective only")):
    r = model.selector.select_for_slot(batch, schema, slot, 2, t_z, mask=mask)
    print(f"{label:>35}: selects {sorted(r.selected)}")
