"""State generation from the selected dialogue turns.

The selected turns plus the current turn are concatenated behind the
previous-state block, with an indicator token in front of each turn, and
re-encoded so the turns attend to each other.  Values are produced by span
extraction over the dialogue region first, falling back to classification
over the slot's candidate set when the extracted span is not a candidate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import NONE_VALUE, Dialogue, SlotSchema, detokenize, tokenize
from .encoder import (CLS, IND, SEMI, SEP, SLOT, VALUE, EncodedTurnBatch,
                      EncoderConfig, Transformer, TurnEncoder, Vocabulary)


class GeneratorError(Exception):
    pass


@dataclass
class RefinedContext:
    ids: list[int]
    h: ad.Tensor
    slot_pos: list[int]
    value_pos: list[int]
    indicator_pos: list[int]        # one per included turn, ascending
    included_turns: list[int]       # original turn ids, ascending; current turn last
    ce_pos: list[int]               # positions of dialogue tokens, in order
    ce_turn: list[int]              # source turn id of each dialogue token
    dropped_turns: list[int] = field(default_factory=list)


@dataclass
class ValuePrediction:
    slot: int
    method: str                     # "extractive" | "classification"
    value: str
    span: tuple[int, int] | None = None
    distribution: list[float] | None = None  # over the slot's candidates


def _turn_tokens(dialogue: Dialogue, turn_id: int) -> list[str]:
    turn = dialogue.turns[turn_id - 1]
    return tokenize(turn.system) + [SEMI] + tokenize(turn.user) + [SEP]


def build_refined_context(dialogue: Dialogue, turn_id: int, selected: list[int],
                          prev_state: dict[str, str], schema: SlotSchema,
                          encoder: TurnEncoder, refine_transformer: Transformer,
                          score_tensors: dict[int, ad.Tensor] | None = None,
                          train: bool = False, rng: np.random.Generator | None = None,
                          first_pass: EncodedTurnBatch | None = None,
                          refine: bool = True) -> RefinedContext:
    """Assemble and encode the refined sequence for one slot update.

    ``selected`` holds history turn ids; the current turn is always appended.
    On overflow the oldest selected turn is dropped and recorded.  With
    ``refine=False`` the re-encoding pass is skipped and the first-pass
    per-turn representations are stitched together instead (structural
    ablation of the refinement stage; requires ``first_pass``).
    """
    config = encoder.config
    include = sorted(t for t in selected if t != turn_id)
    dropped: list[int] = []

    while True:
        toks: list[str] = [CLS]
        slot_pos, value_pos = [], []
        for slot in schema.slots:
            slot_pos.append(len(toks))
            toks.append(SLOT)
            toks.extend(tokenize(slot.name))
            value_pos.append(len(toks))
            toks.append(VALUE)
            toks.extend(tokenize(prev_state.get(slot.name, NONE_VALUE)))
        toks.append(SEP)
        indicator_pos, ce_pos, ce_turn = [], [], []
        turn_blocks: list[tuple[int, int, int]] = []  # (turn id, start, stop)
        for t in include + [turn_id]:
            indicator_pos.append(len(toks))
            start = len(toks)
            toks.append(IND)
            body = _turn_tokens(dialogue, t)
            for tok in body:
                ce_pos.append(len(toks))
                ce_turn.append(t)
                toks.append(tok)
            turn_blocks.append((t, start, len(toks)))
        if len(toks) <= config.max_len or not include:
            break
        dropped.append(include.pop(0))
    if len(toks) > config.max_len:
        raise GeneratorError(f"refined sequence ({len(toks)} tokens) exceeds max_len "
                             f"even with no history turns")

    ids = encoder.vocab.encode(toks)
    if refine:
        x = encoder.embed(ids, train, rng)
        if train and score_tensors:
            x = _scale_selected_blocks(x, turn_blocks, turn_id, score_tensors)
        h = refine_transformer.forward(x, train, rng)
    else:
        if first_pass is None:
            raise GeneratorError("refine=False requires the first-pass encodings")
        h = _stitch_first_pass(ids, toks, turn_blocks, slot_pos, first_pass, encoder)
    return RefinedContext(ids, h, slot_pos, value_pos, indicator_pos,
                          include + [turn_id], ce_pos, ce_turn, dropped)


def _scale_selected_blocks(x: ad.Tensor, turn_blocks, current_turn: int,
                           score_tensors: dict[int, ad.Tensor]) -> ad.Tensor:
    """Multiply each selected history turn's rows by a unit factor that routes
    generator-loss gradient into that turn's selection score."""
    pieces, cursor = [], 0
    for t, start, stop in turn_blocks:
        if t == current_turn or t not in score_tensors:
            continue
        if start > cursor:
            pieces.append(ad.slice_rows(x, cursor, start))
        factor = ad.straight_through_unit(score_tensors[t])
        pieces.append(ad.mul(factor, ad.slice_rows(x, start, stop)))
        cursor = stop
    if cursor < x.data.shape[0]:
        pieces.append(ad.slice_rows(x, cursor, x.data.shape[0]))
    return pieces[0] if len(pieces) == 1 else ad.concat_rows(pieces)


def _stitch_first_pass(ids, toks, turn_blocks, slot_pos, first_pass: EncodedTurnBatch,
                       encoder: TurnEncoder) -> ad.Tensor:
    """Refinement-ablation representation: state block and [CLS] from the current
    turn's first-pass encoding, dialogue regions from each turn's own encoding,
    indicators from the raw embedding table."""
    by_turn = {enc.turn_id: enc for enc in first_pass.turns}
    cur = first_pass.current
    head_len = turn_blocks[0][1]
    rows = [ad.slice_rows(cur.h, 0, head_len)]
    for t, start, stop in turn_blocks:
        enc = by_turn[t]
        rows.append(ad.gather_rows(encoder.embedding, [ids[start]]))
        s, e = enc.dlg_span
        n_body = stop - start - 1
        body = ad.slice_rows(enc.h, max(s, e - n_body), e)
        rows.append(body)
    return ad.concat_rows(rows)


class StateGenerator:
    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.w_start = ad.Parameter("gen.w_start", ad.xavier_uniform(rng, (d, d)))
        self.w_end = ad.Parameter("gen.w_end", ad.xavier_uniform(rng, (d, d)))
        self.w_cls = ad.Parameter("gen.w_cls", ad.xavier_uniform(rng, (d, d)))
        self.w_cand = ad.Parameter("gen.w_cand", ad.xavier_uniform(rng, (d, d)))
        self.w_read = ad.Parameter("gen.w_read", ad.xavier_uniform(rng, (d, d)))

    def parameters(self) -> list[ad.Parameter]:
        return [self.w_start, self.w_end, self.w_cls, self.w_cand, self.w_read]

    # -- extraction ---------------------------------------------------------

    def span_distributions(self, refined: RefinedContext, slot: int) -> tuple[ad.Tensor, ad.Tensor]:
        slot_vec = ad.row(refined.h, refined.slot_pos[slot])
        ce = ad.gather_rows(refined.h, refined.ce_pos)
        p = ad.softmax(ad.mv(ad.matmul(ce, self.w_start), slot_vec))
        q = ad.softmax(ad.mv(ad.matmul(ce, self.w_end), slot_vec))
        return p, q

    def extract_span(self, refined: RefinedContext, slot: int, vocab: Vocabulary):
        """Argmax start/end over the dialogue region; returns (p, q, span, value)."""
        p, q = self.span_distributions(refined, slot)
        start = int(np.argmax(p.data))
        end = int(np.argmax(q.data))
        if end < start:
            return p, q, (start, end), None
        ids = [refined.ids[refined.ce_pos[i]] for i in range(start, end + 1)]
        return p, q, (start, end), detokenize(vocab.decode(ids))

    # -- classification -----------------------------------------------------

    def candidate_parts(self, refined: RefinedContext, slot: int,
                        schema: SlotSchema, embedding: ad.Tensor,
                        vocab: Vocabulary) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        """(turn distribution, state-read attention, candidate distribution).

        The y-weighted indicator summary (plus the slot vector) queries an
        attention over the running-state block's value tokens, so a value
        carried over from another slot is reachable by pointing at that slot
        instead of re-deriving it from the summary alone.
        """
        if not refined.indicator_pos:
            raise GeneratorError("refined context has no indicator tokens")
        slot_vec = ad.row(refined.h, refined.slot_pos[slot])
        inds = ad.gather_rows(refined.h, refined.indicator_pos)
        y_turn = ad.softmax(ad.mv(ad.matmul(inds, self.w_cls), slot_vec))
        context = ad.mv(ad.transpose(inds), y_turn)
        values = ad.gather_rows(refined.h, [p + 1 for p in refined.value_pos])
        query = ad.mv(ad.transpose(self.w_read), ad.add(context, slot_vec))
        attn = ad.softmax(ad.scale(ad.mv(values, query), 1.0 / math.sqrt(self.d)))
        read = ad.mv(ad.transpose(values), attn)
        cand_mat = _candidate_embeddings(schema, slot, embedding, vocab)
        logits = ad.mv(ad.matmul(cand_mat, self.w_cand), ad.add(context, read))
        return y_turn, attn, ad.softmax(logits)

    def candidate_distribution(self, refined: RefinedContext, slot: int,
                               schema: SlotSchema, embedding: ad.Tensor,
                               vocab: Vocabulary) -> tuple[ad.Tensor, ad.Tensor]:
        """Distribution over indicator turns, mapped to the candidate set."""
        y_turn, _, y_cand = self.candidate_parts(refined, slot, schema, embedding, vocab)
        return y_turn, y_cand

    def classify_value(self, refined: RefinedContext, slot: int, schema: SlotSchema,
                       embedding: ad.Tensor, vocab: Vocabulary):
        y_turn, y_cand = self.candidate_distribution(refined, slot, schema, embedding, vocab)
        values = schema.slots[slot].values
        return y_cand, values[int(np.argmax(y_cand.data))]

    # -- hybrid -------------------------------------------------------------

    def generate_value(self, refined: RefinedContext, slot: int, schema: SlotSchema,
                       embedding: ad.Tensor, vocab: Vocabulary) -> ValuePrediction:
        p, q, span, value = self.extract_span(refined, slot, vocab)
        candidates = schema.slots[slot].values
        if value is not None and value in candidates:
            return ValuePrediction(slot, "extractive", value, span)
        y_cand, cls_value = self.classify_value(refined, slot, schema, embedding, vocab)
        return ValuePrediction(slot, "classification", cls_value, None,
                               [float(v) for v in y_cand.data])


def _candidate_embeddings(schema: SlotSchema, slot: int, embedding: ad.Tensor,
                          vocab: Vocabulary) -> ad.Tensor:
    """Mean token embedding per candidate value (shares the model's table)."""
    rows = []
    for value in schema.slots[slot].values:
        ids = vocab.encode(tokenize(value))
        vecs = ad.gather_rows(embedding, ids)
        rows.append(ad.scale(ad.mv(ad.transpose(vecs), ad.const(np.ones(len(ids)))),
                             1.0 / len(ids)))
    return ad.stack_rows(rows)


def find_gold_span(refined: RefinedContext, gold_value: str, vocab: Vocabulary):
    """First occurrence of the gold value in the most recent turn containing it,
    as indices into the dialogue region; None when not extractable."""
    want = vocab.encode(tokenize(gold_value))
    n = len(refined.ce_pos)
    region_ids = [refined.ids[p] for p in refined.ce_pos]
    for turn in sorted(set(refined.ce_turn), reverse=True):
        for i in range(n - len(want) + 1):
            if refined.ce_turn[i] != turn or refined.ce_turn[i + len(want) - 1] != turn:
                continue
            if region_ids[i:i + len(want)] == want:
                return i, i + len(want) - 1
    return None


def generation_losses(generator: StateGenerator, refined_by_slot: dict[int, RefinedContext],
                      gold_values: dict[int, str], schema: SlotSchema,
                      embedding: ad.Tensor, vocab: Vocabulary) -> tuple[ad.Tensor, ad.Tensor]:
    """Cross-entropy span loss and candidate-classification loss, averaged over
    the updated slots.

    The extractive term is zeroed for slots whose gold value is not a span in
    the dialogue region (pure coreference); the classification term is zeroed
    for gold values outside the candidate set.  A value absent from both is a
    data error.
    """
    if not gold_values:
        raise GeneratorError("no slots to generate")
    ext_terms, cls_terms = [], []
    for slot, gold in gold_values.items():
        refined = refined_by_slot[slot]
        candidates = schema.slots[slot].values
        span = find_gold_span(refined, gold, vocab)
        in_cands = gold in candidates
        if span is None and not in_cands:
            raise GeneratorError(f"gold value {gold!r} for slot "
                                 f"{schema.slots[slot].name!r} is neither extractable "
                                 f"nor a candidate")
        if span is not None:
            p, q = generator.span_distributions(refined, slot)
            start, end = span
            ext_terms.append(ad.scale(ad.add(_log_at(p, start), _log_at(q, end)), -1.0))
        if in_cands:
            _, y_cand = generator.candidate_distribution(refined, slot, schema,
                                                         embedding, vocab)
            cls_terms.append(ad.scale(_log_at(y_cand, candidates.index(gold)), -1.0))
    n = len(gold_values)
    return _mean_or_zero(ext_terms, n), _mean_or_zero(cls_terms, n)


def readback_loss(generator: StateGenerator, refined: RefinedContext, slot: int,
                  source_slot: int, schema: SlotSchema, embedding: ad.Tensor,
                  vocab: Vocabulary) -> ad.Tensor:
    """Cross-entropy pointing the state-read attention at the slot the value
    was carried over from (teacher-forced; only used in training)."""
    _, attn, _ = generator.candidate_parts(refined, slot, schema, embedding, vocab)
    return ad.scale(_log_at(attn, source_slot), -1.0)


def _log_at(dist: ad.Tensor, index: int) -> ad.Tensor:
    picked = ad.reshape(ad.slice_rows(ad.reshape(dist, (dist.data.size, 1)),
                                      index, index + 1), ())
    return ad.log(ad.add_const(ad.scale(picked, 1.0 - 1e-12), 1e-12))


def _mean_or_zero(terms: list[ad.Tensor], n: int) -> ad.Tensor:
    if not terms:
        return ad.const(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / n)
