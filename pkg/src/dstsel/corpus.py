"""Dialogue/schema data model, JSONL ingestion, and a synthetic corpus generator.

The synthetic generator produces templated multi-domain dialogues where every
updated value is stated verbatim in its turn, except for a configurable
fraction of cross-slot references ("book a taxi to the restaurant" style)
whose value is only recoverable from another slot set in an earlier turn.
The generator records, per update, the minimal set of turns carrying the
evidence; that record is the oracle the selection tests score against.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

NONE_VALUE = "none"

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class CorpusError(Exception):
    pass


def normalize_value(s: str) -> str:
    return " ".join(s.lower().split())


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace+punctuation split; punctuation marks are single tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return normalize_value(" ".join(tokens))


@dataclass(frozen=True)
class Slot:
    name: str
    domain: str
    values: tuple[str, ...]  # candidate values, always including "none"


class SlotSchema:
    def __init__(self, slots: list[Slot]):
        if not slots:
            raise CorpusError("schema needs at least one slot")
        names = [s.name for s in slots]
        if len(set(names)) != len(names):
            raise CorpusError("duplicate slot names in schema")
        for s in slots:
            if not s.values:
                raise CorpusError(f"slot {s.name} has an empty candidate list")
            if NONE_VALUE not in s.values:
                raise CorpusError(f"slot {s.name} candidates must include {NONE_VALUE!r}")
        self.slots = list(slots)
        self.by_name = {s.name: i for i, s in enumerate(slots)}
        self.domains: dict[str, list[int]] = {}
        for i, s in enumerate(slots):
            self.domains.setdefault(s.domain, []).append(i)

    def __len__(self):
        return len(self.slots)

    def index(self, name: str) -> int:
        if name not in self.by_name:
            raise CorpusError(f"unknown slot name {name!r}")
        return self.by_name[name]

    def empty_state(self) -> dict[str, str]:
        return {s.name: NONE_VALUE for s in self.slots}

    def to_json(self) -> dict:
        return {"slots": [{"name": s.name, "domain": s.domain, "values": list(s.values)}
                          for s in self.slots]}

    @classmethod
    def from_json(cls, obj: dict) -> "SlotSchema":
        slots = [Slot(d["name"], d["domain"], tuple(d["values"])) for d in obj["slots"]]
        return cls(slots)

    @classmethod
    def load(cls, path) -> "SlotSchema":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True)
class Turn:
    turn_id: int  # 1-based
    system: str
    user: str


@dataclass
class Dialogue:
    dialogue_id: str
    turns: list[Turn]
    gold_states: list[dict[str, str]]  # total over all slots, one per turn
    # (turn_id, slot_name) -> sorted minimal evidence turn ids; present only
    # for synthesized dialogues
    evidence: dict[tuple[int, str], tuple[int, ...]] = field(default_factory=dict)

    def __len__(self):
        return len(self.turns)


class DialogueCorpus:
    def __init__(self, dialogues: list[Dialogue], schema: SlotSchema):
        self.dialogues = dialogues
        self.schema = schema

    def __len__(self):
        return len(self.dialogues)

    def __iter__(self):
        return iter(self.dialogues)


# ---------------------------------------------------------------------------
# labels and evidence


def derive_update_labels(dialogue: Dialogue) -> list[set[str]]:
    """Per turn, the set of slot names whose value differs from the previous turn.

    Turn 1 diffs against the all-"none" state.
    """
    labels: list[set[str]] = []
    prev: dict[str, str] | None = None
    for state in dialogue.gold_states:
        if prev is None:
            changed = {k for k, v in state.items() if v != NONE_VALUE}
        else:
            changed = {k for k, v in state.items() if prev.get(k, NONE_VALUE) != v}
        labels.append(changed)
        prev = state
    return labels


def evidence_turns(dialogue: Dialogue, turn_id: int, slot_name: str) -> set[int]:
    """Minimal turn set recorded by the synthesizer for one update."""
    labels = derive_update_labels(dialogue)
    if slot_name not in labels[turn_id - 1]:
        raise CorpusError(f"slot {slot_name!r} is not updated at turn {turn_id}")
    key = (turn_id, slot_name)
    if key not in dialogue.evidence:
        raise CorpusError(f"no recorded evidence for {slot_name!r} at turn {turn_id}")
    return set(dialogue.evidence[key])


# ---------------------------------------------------------------------------
# JSONL round trip


def _dialogue_to_json(d: Dialogue, schema: SlotSchema) -> dict:
    obj = {
        "dialogue_id": d.dialogue_id,
        "turns": [{"system": t.system, "user": t.user} for t in d.turns],
        "states": [
            {s.name: st[s.name] for s in schema.slots if st.get(s.name, NONE_VALUE) != NONE_VALUE}
            for st in d.gold_states
        ],
    }
    if d.evidence:
        obj["evidence"] = [
            {"turn": t, "slot": slot, "turns": list(ev)}
            for (t, slot), ev in sorted(d.evidence.items())
        ]
    return obj


def _dialogue_from_json(obj: dict, schema: SlotSchema, lineno: int) -> Dialogue:
    turns = [Turn(i + 1, t.get("system", ""), t.get("user", ""))
             for i, t in enumerate(obj["turns"])]
    raw_states = obj["states"]
    if len(raw_states) != len(turns):
        raise CorpusError(f"line {lineno}: {len(turns)} turns but {len(raw_states)} states")
    states = []
    for st in raw_states:
        full = schema.empty_state()
        for name, value in st.items():
            if name not in schema.by_name:
                raise CorpusError(f"line {lineno}: unknown slot name {name!r}")
            full[name] = normalize_value(value)
        states.append(full)
    evidence = {}
    for e in obj.get("evidence", []):
        evidence[(e["turn"], e["slot"])] = tuple(e["turns"])
    return Dialogue(obj["dialogue_id"], turns, states, evidence)


def _validate_dialogue(d: Dialogue, schema: SlotSchema, lineno: int):
    prev = schema.empty_state()
    turn_tokens: list[list[str]] = []
    for t, state in zip(d.turns, d.gold_states):
        turn_tokens.append(tokenize(t.system) + tokenize(t.user))
        for s in schema.slots:
            value = state[s.name]
            if value == prev[s.name]:
                continue
            if prev[s.name] != NONE_VALUE and value == NONE_VALUE:
                raise CorpusError(
                    f"line {lineno}: slot {s.name!r} reverts to {NONE_VALUE!r} at turn "
                    f"{t.turn_id}; states must be cumulative")
            if value not in s.values and not _appears(value, turn_tokens):
                raise CorpusError(
                    f"line {lineno}: value {value!r} for {s.name!r} at turn {t.turn_id} "
                    f"is neither a candidate nor stated in the dialogue so far")
        prev = state


def _appears(value: str, turn_tokens: list[list[str]]) -> bool:
    want = tokenize(value)
    for toks in turn_tokens:
        for i in range(len(toks) - len(want) + 1):
            if toks[i:i + len(want)] == want:
                return True
    return False


def load_corpus(path, schema: SlotSchema) -> DialogueCorpus:
    dialogues = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            d = _dialogue_from_json(obj, schema, lineno)
            _validate_dialogue(d, schema, lineno)
            dialogues.append(d)
    return DialogueCorpus(dialogues, schema)


def save_corpus(corpus: DialogueCorpus, path):
    with open(path, "w") as fh:
        for d in corpus.dialogues:
            fh.write(json.dumps(_dialogue_to_json(d, corpus.schema), separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic generation


def demo_schema() -> SlotSchema:
    """Two-domain, eight-slot schema used by the examples and the test harness."""
    areas = ("none", "north", "south", "east", "west", "centre")
    prices = ("none", "cheap", "moderate", "expensive")
    counts = ("none", "1", "2", "3", "4", "5", "6")
    foods = ("none", "chinese", "italian", "indian", "british", "thai", "french")
    return SlotSchema([
        Slot("hotel-area", "hotel", areas),
        Slot("hotel-pricerange", "hotel", prices),
        Slot("hotel-stay", "hotel", counts),
        Slot("hotel-people", "hotel", counts),
        Slot("restaurant-area", "restaurant", areas),
        Slot("restaurant-pricerange", "restaurant", prices),
        Slot("restaurant-food", "restaurant", foods),
        Slot("restaurant-people", "restaurant", counts),
    ])


# slots that may reference each other's value ("the same area as the hotel")
_COREF_PARTNERS = {
    "hotel-area": "restaurant-area",
    "restaurant-area": "hotel-area",
    "hotel-pricerange": "restaurant-pricerange",
    "restaurant-pricerange": "hotel-pricerange",
    "hotel-people": "restaurant-people",
    "restaurant-people": "hotel-people",
}

_UPDATE_TEMPLATES = (
    "i want the {domain} {attr} to be {value}",
    "please make the {domain} {attr} {value}",
    "set the {domain} {attr} to {value}",
)

_COREF_TEMPLATES = (
    "make the {domain} {attr} match the {src_domain}",
    "use the same {attr} for the {domain} as the {src_domain}",
    "the {domain} {attr} should match the {src_domain}",
)

_ACKS = ("okay noted anything else", "sure what else can i help with",
         "done do you need anything more")


def _slot_attr(name: str) -> str:
    return name.split("-", 1)[1]


def synthesize_corpus(schema: SlotSchema, n_dialogues: int, max_turns: int = 4,
                      coref_rate: float = 0.3, seed: int = 0) -> DialogueCorpus:
    """Seeded templated dialogue generator with cross-slot references."""
    if n_dialogues < 1:
        raise CorpusError("n_dialogues must be >= 1")
    if not 0.0 <= coref_rate <= 1.0:
        raise CorpusError("coref_rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    dialogues = []
    for di in range(n_dialogues):
        dialogues.append(_synthesize_dialogue(schema, f"syn-{di:04d}", max_turns, coref_rate, rng))
    return DialogueCorpus(dialogues, schema)


def _coref_candidates(schema: SlotSchema, state: dict[str, str]) -> list[tuple[str, str]]:
    """(target, source) pairs where the source value is usable for the target."""
    out = []
    for tgt, src in _COREF_PARTNERS.items():
        if tgt not in schema.by_name or src not in schema.by_name:
            continue
        v = state[src]
        if v == NONE_VALUE or state[tgt] == v:
            continue
        if v in schema.slots[schema.index(tgt)].values:
            out.append((tgt, src))
    return out


def _synthesize_dialogue(schema: SlotSchema, dialogue_id: str, max_turns: int,
                         coref_rate: float, rng: np.random.Generator) -> Dialogue:
    n_turns = int(rng.integers(2, max_turns + 1))
    state = schema.empty_state()
    last_update: dict[str, int] = {}
    turns: list[Turn] = []
    states: list[dict[str, str]] = []
    evidence: dict[tuple[int, str], tuple[int, ...]] = {}

    for t in range(1, n_turns + 1):
        system = "" if t == 1 else str(rng.choice(_ACKS))
        coref_pairs = _coref_candidates(schema, state) if t > 1 else []
        if coref_pairs and rng.random() < coref_rate:
            # cross-slot reference turn: a single update whose value is never
            # stated in this turn's utterances
            tgt, src = coref_pairs[int(rng.integers(len(coref_pairs)))]
            template = _COREF_TEMPLATES[int(rng.integers(len(_COREF_TEMPLATES)))]
            user = template.format(domain=schema.slots[schema.index(tgt)].domain,
                                   attr=_slot_attr(tgt),
                                   src_domain=schema.slots[schema.index(src)].domain)
            state = dict(state)
            state[tgt] = state[src]
            evidence[(t, tgt)] = tuple(sorted({last_update[src], t}))
            last_update[tgt] = t
        else:
            n_updates = int(rng.integers(1, 3))
            chosen = rng.choice(len(schema), size=min(n_updates, len(schema)), replace=False)
            clauses = []
            state = dict(state)
            for j in sorted(int(c) for c in chosen):
                slot = schema.slots[j]
                options = [v for v in slot.values if v not in (NONE_VALUE, state[slot.name])]
                value = str(options[int(rng.integers(len(options)))])
                template = _UPDATE_TEMPLATES[int(rng.integers(len(_UPDATE_TEMPLATES)))]
                clauses.append(template.format(domain=slot.domain,
                                               attr=_slot_attr(slot.name), value=value))
                state[slot.name] = value
                evidence[(t, slot.name)] = (t,)
                last_update[slot.name] = t
            user = " and ".join(clauses)
        turns.append(Turn(t, system, user))
        states.append(state)

    return Dialogue(dialogue_id, turns, states, evidence)
