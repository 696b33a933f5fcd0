"""Training loop, tracked evaluation, metrics, and perspective ablations."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .corpus import (NONE_VALUE, Dialogue, DialogueCorpus, SlotSchema,
                     derive_update_labels, tokenize)
from .encoder import Vocabulary
from .generator import build_refined_context, generation_losses, readback_loss
from .model import DstModel, ModelConfig, states_equal
from .update_predictor import update_loss


class HarnessError(Exception):
    pass


class DivergenceError(HarnessError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    lr: float = 3e-3              # selector / generator / encoder peak rate
    lr_update: float = 3e-3      # update-head peak rate
    batch_size: int = 1           # dialogues per optimizer step
    k: int = 2
    rgcn_hops: int = 3
    update_threshold: float = 0.5
    dropout: float = 0.05
    word_dropout: float = 0.05
    weight_decay: float = 0.01
    warmup: float = 0.01          # proportion of total steps
    update_loss_weight: float = 4.0  # weight of the update-head BCE in the joint loss
    state_readback_weight: float = 4.0  # weight of the history-free classification loss
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 2
    max_len: int = 128

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and f.name != "seed" and v < 0:
                raise HarnessError(f"config field {f.name} must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d, self.n_layers, self.n_heads, self.ffn_mult,
                           self.max_len, self.dropout, self.word_dropout,
                           self.k, self.rgcn_hops, self.update_threshold, self.seed)

    def to_flat(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(asdict(self).items()))

    @classmethod
    def from_flat(cls, text: str, overrides: dict[str, str] | None = None) -> "TrainConfig":
        raw: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise HarnessError(f"bad config line: {line!r}")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
        raw.update(overrides or {})
        kwargs = {}
        for f in fields(cls):
            if f.name in raw:
                kwargs[f.name] = _convert(f.default, raw.pop(f.name))
        if raw:
            raise HarnessError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs)


def _convert(default, text: str):
    return type(default)(text) if not isinstance(default, bool) else text.lower() in ("1", "true")


class AdamW:
    """Adam with decoupled weight decay and linear warmup to a constant rate."""

    def __init__(self, groups: list[tuple[list[ad.Parameter], float]], total_steps: int,
                 warmup: float = 0.01, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 final_lr_frac: float = 0.1):
        self.groups = groups
        self.total_steps = max(1, total_steps)
        self.warmup_steps = max(1, int(warmup * total_steps))
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.final_lr_frac = final_lr_frac
        self.t = 0
        self.state = {p.name: (np.zeros_like(p.data), np.zeros_like(p.data))
                      for params, _ in groups for p in params}

    def step(self):
        self.t += 1
        ramp = min(1.0, self.t / self.warmup_steps)
        # linear decay toward final_lr_frac of the peak after warmup
        progress = min(1.0, self.t / self.total_steps)
        decay = 1.0 - (1.0 - self.final_lr_frac) * progress
        for params, peak_lr in self.groups:
            lr = peak_lr * ramp * decay
            for p in params:
                m, v = self.state[p.name]
                m += (1 - self.beta1) * (p.grad - m)
                v += (1 - self.beta2) * (p.grad * p.grad - v)
                mhat = m / (1 - self.beta1 ** self.t)
                vhat = v / (1 - self.beta2 ** self.t)
                if p.data.ndim >= 2:
                    p.data -= lr * self.weight_decay * p.data
                p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def gold_latest_update(labels: list[set[str]], upto_turn: int,
                       schema: SlotSchema) -> dict[int, int]:
    """slot index -> most recent turn (< upto_turn) where it changed."""
    t_z: dict[int, int] = {}
    for t in range(1, upto_turn):
        for name in labels[t - 1]:
            t_z[schema.index(name)] = t
    return t_z


@dataclass
class TrainResult:
    model: DstModel
    epoch_losses: list[float]
    diverged: bool = False


def train(corpus: DialogueCorpus, schema: SlotSchema, config: TrainConfig,
          vocab: Vocabulary | None = None, log=None) -> TrainResult:
    """Teacher-forced training; deterministic given the seed."""
    if vocab is None:
        vocab = Vocabulary.build(corpus, schema)
    model = DstModel(config.model_config(), vocab)
    rng = np.random.default_rng(config.seed + 1)
    main = [p for p in model.parameters() if not p.name.startswith("update.")]
    upd = model.update.parameters()
    steps_per_epoch = max(1, (len(corpus) + config.batch_size - 1) // config.batch_size)
    opt = AdamW([(main, config.lr), (upd, config.lr_update)],
                total_steps=config.epochs * steps_per_epoch,
                warmup=config.warmup, weight_decay=config.weight_decay)

    epoch_losses: list[float] = []
    last_good = _snapshot(model)
    for epoch in range(config.epochs):
        order = rng.permutation(len(corpus))
        total, count = 0.0, 0
        try:
            for bstart in range(0, len(order), config.batch_size):
                model.zero_grad()
                batch_ids = order[bstart:bstart + config.batch_size]
                losses = []
                for di in batch_ids:
                    losses.append(_dialogue_loss(model, corpus.dialogues[di], schema,
                                                 config, rng))
                loss = losses[0]
                for other in losses[1:]:
                    loss = ad.add(loss, other)
                loss = ad.scale(loss, 1.0 / len(losses))
                ad.backward(loss)
                opt.step()
                total += loss.item()
                count += 1
        except ad.NonFiniteError:
            _restore(model, last_good)
            return TrainResult(model, epoch_losses, diverged=True)
        epoch_losses.append(total / max(count, 1))
        last_good = _snapshot(model)
        if log is not None:
            log(epoch, epoch_losses[-1])
    return TrainResult(model, epoch_losses)


def _snapshot(model: DstModel) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.parameters()}


def _restore(model: DstModel, snap: dict[str, np.ndarray]):
    for p in model.parameters():
        p.data = snap[p.name].copy()


def _dialogue_loss(model: DstModel, dialogue: Dialogue, schema: SlotSchema,
                   config: TrainConfig, rng: np.random.Generator) -> ad.Tensor:
    labels = derive_update_labels(dialogue)
    turn_losses = []
    for turn_id in range(1, len(dialogue) + 1):
        prev_state = dialogue.gold_states[turn_id - 2] if turn_id > 1 else schema.empty_state()
        batch = model.encoder.encode_turns(dialogue, turn_id, prev_state, schema,
                                           train=True, rng=rng)
        decision = model.update.predict(batch.current, schema, config.update_threshold)
        gold_updated = {schema.index(n) for n in labels[turn_id - 1]}
        loss = ad.scale(update_loss(decision, gold_updated), config.update_loss_weight)
        if gold_updated:
            t_z = gold_latest_update(labels, turn_id, schema)
            interactions = model.selector.cls_interactions(batch)
            refined_by_slot, gold_values = {}, {}
            for j in sorted(gold_updated):
                sel = _select(model, batch, schema, j, t_z, interactions=interactions)
                scores = {t: sel.score_tensors[t - 1] for t in sel.selected}
                refined_by_slot[j] = build_refined_context(
                    dialogue, turn_id, sel.selected, prev_state, schema,
                    model.encoder, model.refine_transformer,
                    score_tensors=scores, train=True, rng=rng)
                gold_values[j] = dialogue.gold_states[turn_id - 1][schema.slots[j].name]
            l_ext, l_cls = generation_losses(model.generator, refined_by_slot,
                                             gold_values, schema, model.embedding,
                                             model.vocab)
            loss = ad.add(loss, ad.add(l_ext, l_cls))
            # For values that were carried over from an earlier slot ("make the
            # restaurant area match the hotel") the value word is absent from
            # the current turn, so the classifier must be able to read it off
            # the running-state block alone.  Train that case explicitly on a
            # context with no history turns at all.
            bare_refined, bare_gold, bare_src = {}, {}, {}
            for j in sorted(gold_updated):
                name = schema.slots[j].name
                ev = dialogue.evidence.get((turn_id, name))
                if (ev and set(ev) - {turn_id}
                        and gold_values[j] in schema.slots[j].values):
                    bare_refined[j] = build_refined_context(
                        dialogue, turn_id, [], prev_state, schema,
                        model.encoder, model.refine_transformer,
                        train=True, rng=rng)
                    bare_gold[j] = gold_values[j]
                    src = _source_slot(labels, prev_state, schema, j,
                                       gold_values[j], min(ev))
                    if src is not None:
                        bare_src[j] = src
            if bare_refined:
                _, l_bare = generation_losses(model.generator, bare_refined,
                                              bare_gold, schema,
                                              model.embedding, model.vocab)
                for j, src in bare_src.items():
                    l_bare = ad.add(l_bare, readback_loss(
                        model.generator, bare_refined[j], j, src, schema,
                        model.embedding, model.vocab))
                loss = ad.add(loss, ad.scale(l_bare, config.state_readback_weight))
        turn_losses.append(loss)
    total = turn_losses[0]
    for t in turn_losses[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(turn_losses))


def _source_slot(labels, prev_state, schema: SlotSchema, slot: int,
                 gold: str, source_turn: int) -> int | None:
    """The slot a carried-over value came from: updated at the source turn,
    still holding the gold value; None when ambiguous."""
    hits = [schema.index(name) for name in labels[source_turn - 1]
            if schema.index(name) != slot and prev_state.get(name) == gold]
    return hits[0] if len(hits) == 1 else None


def _select(model: DstModel, batch, schema, slot, t_z, mask=(False, False, False),
            interactions=None, k: int | None = None):
    sel = model.selector
    h_sn = sel.sndh(batch, slot)
    if interactions is None:
        interactions = sel.cls_interactions(batch)
    h_ct = sel.ctdh(interactions)
    graph = sel.build_graph(batch, interactions, schema, slot, t_z)
    h_im = sel.gated_rgcn(graph)
    return sel.fuse_and_rank(h_sn, h_ct, h_im, model.config.k if k is None else k,
                             slot, mask)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    joint_goal_accuracy: float = 0.0
    slot_accuracy: float = 0.0
    per_domain: dict[str, float] = field(default_factory=dict)
    selection_recall: float = 1.0
    coref_cls_accuracy: float | None = None
    update_f1: float = 0.0
    n_turns: int = 0
    no_turns: bool = False
    method_counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(corpus: DialogueCorpus, model: DstModel, k: int | None = None,
             mode: str = "dicos", mask=(False, False, False),
             gold_prev_state: bool = False) -> EvalReport:
    """Tracked inference: each turn consumes the model's own previous state.

    ``mode="granularity"`` replaces the selected set with the contiguous
    window from its earliest turn to the current turn.
    """
    if mode not in ("dicos", "granularity"):
        raise HarnessError(f"unknown eval mode {mode!r}")
    schema = corpus.schema
    k = model.config.k if k is None else k
    joint = slot_hits = slot_total = 0
    dom_hits = {dom: 0 for dom in schema.domains}
    n_turns = 0
    ev_hit = ev_total = 0
    coref_hit = coref_total = 0
    tp = fp = fn = 0
    methods: dict[str, int] = {}

    for dialogue in corpus:
        labels = derive_update_labels(dialogue)
        tracked_state = schema.empty_state()
        tracked_updates: dict[int, int] = {}
        for turn_id in range(1, len(dialogue) + 1):
            gold_prev = dialogue.gold_states[turn_id - 2] if turn_id > 1 else schema.empty_state()
            prev_state = gold_prev if gold_prev_state else dict(tracked_state)
            batch = model.encoder.encode_turns(dialogue, turn_id, prev_state, schema)
            decision = model.update.predict(batch.current, schema,
                                            model.config.update_threshold)
            predicted = decision.selected
            gold_updated = {schema.index(n) for n in labels[turn_id - 1]}
            tp += len(set(predicted) & gold_updated)
            fp += len(set(predicted) - gold_updated)
            fn += len(gold_updated - set(predicted))
            t_z = dict(tracked_updates)
            interactions = model.selector.cls_interactions(batch)
            new_state = dict(prev_state)
            for j in predicted:
                sel = _select(model, batch, schema, j, t_z, mask=mask,
                              interactions=interactions, k=k)
                chosen = sel.selected
                if mode == "granularity" and chosen:
                    chosen = list(range(min(chosen), turn_id))
                refined = build_refined_context(dialogue, turn_id, chosen, prev_state,
                                                schema, model.encoder,
                                                model.refine_transformer)
                pred = model.generator.generate_value(refined, j, schema,
                                                      model.embedding, model.vocab)
                methods[pred.method] = methods.get(pred.method, 0) + 1
                new_state[schema.slots[j].name] = pred.value
            for j in predicted:
                tracked_updates[j] = turn_id

            # selection diagnostics against the evidence oracle (gold updates)
            for j in sorted(gold_updated):
                key = (turn_id, schema.slots[j].name)
                if key not in dialogue.evidence:
                    continue
                evidence = set(dialogue.evidence[key])
                sel = _select(model, batch, schema, j, t_z, mask=mask,
                              interactions=interactions, k=k)
                covered = set(sel.selected) | {turn_id}
                ev_hit += len(evidence & covered)
                ev_total += len(evidence)
                if evidence - {turn_id}:
                    # coreference update: force a history-free context so the
                    # value cannot be extracted, and test the classifier path
                    refined = build_refined_context(dialogue, turn_id, [], prev_state,
                                                    schema, model.encoder,
                                                    model.refine_transformer)
                    _, value = model.generator.classify_value(refined, j, schema,
                                                              model.embedding,
                                                              model.vocab)
                    gold = dialogue.gold_states[turn_id - 1][schema.slots[j].name]
                    coref_total += 1
                    coref_hit += value == gold

            gold_state = dialogue.gold_states[turn_id - 1]
            n_turns += 1
            joint += states_equal(new_state, gold_state, schema)
            for s in schema.slots:
                slot_hits += new_state[s.name] == gold_state[s.name]
            slot_total += len(schema)
            for dom, idxs in schema.domains.items():
                dom_hits[dom] += all(new_state[schema.slots[i].name]
                                     == gold_state[schema.slots[i].name] for i in idxs)
            tracked_state = new_state

    if n_turns == 0:
        return EvalReport(no_turns=True)
    f1 = 2 * tp / max(2 * tp + fp + fn, 1)
    return EvalReport(
        joint_goal_accuracy=joint / n_turns,
        slot_accuracy=slot_hits / slot_total,
        per_domain={dom: dom_hits[dom] / n_turns for dom in dom_hits},
        selection_recall=ev_hit / ev_total if ev_total else 1.0,
        coref_cls_accuracy=coref_hit / coref_total if coref_total else None,
        update_f1=f1,
        n_turns=n_turns,
        method_counts=methods,
    )


PERSPECTIVES = ("SN-DH", "CT-DH", "IMOR")

ABLATION_SETTINGS = (
    ("SN-DH",), ("CT-DH",), ("IMOR",),
    ("SN-DH", "CT-DH"), ("SN-DH", "IMOR"), ("CT-DH", "IMOR"),
    ("SN-DH", "CT-DH", "IMOR"),
)


def ablate(corpus: DialogueCorpus, model: DstModel, k: int | None = None) -> dict[str, EvalReport]:
    """Evaluate every perspective combination; masked gates are forced to 0."""
    reports = {}
    for keep in ABLATION_SETTINGS:
        mask = tuple(p not in keep for p in PERSPECTIVES)
        reports[" + ".join(keep)] = evaluate(corpus, model, k=k, mask=mask)
    return reports


def predict_dialogue(model: DstModel, dialogue: Dialogue, schema: SlotSchema) -> list[dict]:
    """Tracked per-turn predictions in the wire format of the predict command."""
    out = []
    tracked_state = schema.empty_state()
    tracked_updates: dict[int, int] = {}
    for turn_id in range(1, len(dialogue) + 1):
        prev_state = dict(tracked_state)
        batch = model.encoder.encode_turns(dialogue, turn_id, prev_state, schema)
        decision = model.update.predict(batch.current, schema,
                                        model.config.update_threshold)
        interactions = model.selector.cls_interactions(batch)
        updates = []
        new_state = dict(prev_state)
        for j in decision.selected:
            sel = _select(model, batch, schema, j, dict(tracked_updates),
                          interactions=interactions)
            refined = build_refined_context(dialogue, turn_id, sel.selected, prev_state,
                                            schema, model.encoder,
                                            model.refine_transformer)
            pred = model.generator.generate_value(refined, j, schema, model.embedding,
                                                  model.vocab)
            new_state[schema.slots[j].name] = pred.value
            tracked_updates[j] = turn_id
            updates.append({"slot": schema.slots[j].name, "method": pred.method,
                            "value": pred.value, "selected_turns": sorted(sel.selected)})
        out.append({"turn": turn_id, "updates": updates,
                    "state": {k: v for k, v in new_state.items() if v != NONE_VALUE}})
        tracked_state = new_state
    return out
