"""Walk through the synthetic dialogue corpus: what a dialogue looks like,
how update labels fall out of the state sequence, and where the evidence
records point for cross-slot references.

Run:  python3 demos/build_corpus.py
"""

import tempfile

from dstsel import (demo_schema, derive_update_labels, load_corpus,
                    save_corpus, synthesize_corpus)

schema = demo_schema()
print(f"schema: {len(schema)} slots over domains {sorted(schema.domains)}")

corpus = synthesize_corpus(schema, n_dialogues=20, max_turns=4,
                           coref_rate=0.4, seed=7)

# pick a dialogue that contains a cross-slot reference
dialogue = next(d for d in corpus
                if any(set(ev) != {t} for (t, _), ev in d.evidence.items()))
print(f"\n=== {dialogue.dialogue_id} ===")
labels = derive_update_labels(dialogue)
for turn, state, updated in zip(dialogue.turns, dialogue.gold_states, labels):
    print(f"\nturn {turn.turn_id}")
    if turn.system:
        print(f"  system: {turn.system}")
    print(f"  user:   {turn.user}")
    print(f"  updated: {sorted(updated) or '(nothing)'}")
    print(f"  state:   {{{', '.join(f'{k}={v}' for k, v in sorted(state.items()) if v != 'none')}}}")

print("\nevidence records (turn, slot) -> minimal turns carrying the value:")
for (t, slot), ev in sorted(dialogue.evidence.items()):
    tag = "  <- cross-slot reference" if set(ev) != {t} else ""
    print(f"  ({t}, {slot}) -> {list(ev)}{tag}")

# the JSONL round trip is lossless, including the evidence records
with tempfile.NamedTemporaryFile("w", suffix=".jsonl") as fh:
    save_corpus(corpus, fh.name)
    again = load_corpus(fh.name, schema)
assert again.dialogues[0].gold_states == corpus.dialogues[0].gold_states
assert again.dialogues[0].evidence == corpus.dialogues[0].evidence
print("\nJSONL round trip: lossless")
