"""Train a small tracker on synthetic dialogues and evaluate it: tracked
joint goal accuracy, the selection-recall and reference-classification
diagnostics, and the perspective ablation table.

Takes a few minutes.  Run:  python3 demos/train_and_evaluate.py
"""

import numpy as np

from dstsel import (DialogueCorpus, TrainConfig, ablate, demo_schema,
                    evaluate, synthesize_corpus, train)

schema = demo_schema()
corpus = synthesize_corpus(schema, 150, max_turns=4, coref_rate=0.3, seed=13)
train_set = DialogueCorpus(corpus.dialogues[:100], schema)
held_out = DialogueCorpus(corpus.dialogues[100:], schema)

# Quarter-size model so the run stays at a few minutes; the reference-
# classification diagnostic needs the full-size configuration to saturate.
config = TrainConfig(epochs=40, seed=1, d=32, n_layers=1, n_heads=2,
                     dropout=0.0, word_dropout=0.0)
print(f"training on {len(train_set)} dialogues, holding out {len(held_out)} ...")
result = train(train_set, schema, config,
               log=lambda e, l: print(f"  epoch {e:>2}: loss {l:.3f}"))
model = result.model

for name, split in (("train", train_set), ("held-out", held_out)):
    r = evaluate(split, model)
    print(f"\n{name} ({r.n_turns} turns)")
    print(f"  joint goal accuracy   {r.joint_goal_accuracy:.3f}")
    print(f"  slot accuracy         {r.slot_accuracy:.3f}")
    print(f"  update-set F1         {r.update_f1:.3f}")
    print(f"  selection recall      {r.selection_recall:.3f}")
    if r.coref_cls_accuracy is not None:
        print(f"  reference cls acc.    {r.coref_cls_accuracy:.3f}")
    for dom, acc in sorted(r.per_domain.items()):
        print(f"  {dom + ' domain':<21} {acc:.3f}")

# contiguous-window baseline: same turns forced into one recency window
gran = evaluate(held_out, model, mode="granularity")
print(f"\ncontiguous-window baseline joint accuracy: "
      f"{gran.joint_goal_accuracy:.3f}")

print("\nperspective ablations (held-out joint goal accuracy):")
for keep, report in ablate(held_out, model).items():
    print(f"  {keep:<24} {report.joint_goal_accuracy:.3f}")
