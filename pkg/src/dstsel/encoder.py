"""Per-turn input assembly and the small trainable transformer encoder.

Each turn t of a dialogue prefix is encoded independently as

    [CLS] <state block for the previous turn> [SEP] R_t ; U_t [SEP]

where the state block lists every slot as  [SLOT] <name> [VALUE] <value>.
Positions of the special tokens are recorded so downstream modules can read
slot/value/[CLS] vectors straight out of the contextual matrix.  There is no
cross-turn positional signal: turns interact only later, in the selector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import NONE_VALUE, Dialogue, SlotSchema, tokenize

PAD, UNK, CLS, SEP, SLOT, VALUE, SEMI, IND = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[SLOT]", "[VALUE]", ";", "<t>"
RESERVED = (PAD, UNK, CLS, SEP, SLOT, VALUE, SEMI, IND)


class EncoderError(Exception):
    pass


class Vocabulary:
    def __init__(self, tokens: list[str]):
        self.id_of = {tok: i for i, tok in enumerate(RESERVED)}
        for tok in tokens:
            if tok not in self.id_of:
                self.id_of[tok] = len(self.id_of)
        self.tokens = [t for t, _ in sorted(self.id_of.items(), key=lambda kv: kv[1])]

    def __len__(self):
        return len(self.tokens)

    def get(self, token: str) -> int:
        return self.id_of.get(token, self.id_of[UNK])

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.get(t) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def build(cls, corpus, schema: SlotSchema) -> "Vocabulary":
        seen: set[str] = set()
        for slot in schema.slots:
            seen.update(tokenize(slot.name))
            for v in slot.values:
                seen.update(tokenize(v))
        for d in corpus:
            for t in d.turns:
                seen.update(tokenize(t.system))
                seen.update(tokenize(t.user))
        return cls(sorted(seen - set(RESERVED)))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("# reserved\n")
            for tok in RESERVED:
                fh.write(tok + "\n")
            fh.write("# corpus\n")
            for tok in self.tokens[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        with open(path) as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("#") or not line:
                    continue
                tokens.append(line)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise EncoderError("vocabulary file has a corrupt reserved header")
        return cls(tokens[len(RESERVED):])


@dataclass
class EncoderConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 2
    max_len: int = 128
    dropout: float = 0.1
    word_dropout: float = 0.1

    def __post_init__(self):
        if self.d % self.n_heads:
            raise EncoderError(f"hidden size {self.d} not divisible by {self.n_heads} heads")


@dataclass
class TurnEncoding:
    """One encoded turn: token ids, contextual matrix, special-token positions."""
    turn_id: int
    ids: list[int]
    h: ad.Tensor  # len x d
    cls_pos: int
    slot_pos: list[int]   # one per schema slot
    value_pos: list[int]
    dlg_span: tuple[int, int]  # [start, stop) of the dialogue region R ; U [SEP]


@dataclass
class EncodedTurnBatch:
    turns: list[TurnEncoding] = field(default_factory=list)

    def __len__(self):
        return len(self.turns)

    @property
    def current(self) -> TurnEncoding:
        return self.turns[-1]


def assemble_input(dialogue: Dialogue, turn_id: int, prev_state: dict[str, str],
                   schema: SlotSchema, vocab: Vocabulary, max_len: int):
    """Token ids + recorded positions for one turn; deterministic.

    When the assembled sequence overflows ``max_len`` the dialogue region is
    truncated from the left; the state block is never cut.
    """
    turn = dialogue.turns[turn_id - 1]
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
    head_len = len(toks)
    if head_len + 2 > max_len:
        raise EncoderError(f"state block ({head_len} tokens) does not fit in max_len={max_len}")
    dlg = tokenize(turn.system) + [SEMI] + tokenize(turn.user) + [SEP]
    room = max_len - head_len
    if len(dlg) > room:
        dlg = dlg[len(dlg) - room:]
    dlg_span = (head_len, head_len + len(dlg))
    toks.extend(dlg)
    return vocab.encode(toks), 0, slot_pos, value_pos, dlg_span


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


class Transformer:
    """Pre-norm transformer stack over a shared token embedding table.

    The embedding table is owned by the caller so the first-pass encoder and
    the generator's refinement pass can share it while keeping separate
    blocks.
    """

    def __init__(self, prefix: str, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        d, h = config.d, config.d * config.ffn_mult
        self.layers = []
        for li in range(config.n_layers):
            p = f"{prefix}.layer{li}"
            self.layers.append({
                "wq": ad.Parameter(f"{p}.wq", ad.xavier_uniform(rng, (d, d))),
                "wk": ad.Parameter(f"{p}.wk", ad.xavier_uniform(rng, (d, d))),
                "wv": ad.Parameter(f"{p}.wv", ad.xavier_uniform(rng, (d, d))),
                "wo": ad.Parameter(f"{p}.wo", ad.xavier_uniform(rng, (d, d))),
                "ln1_g": ad.Parameter(f"{p}.ln1_g", np.ones(d)),
                "ln1_b": ad.Parameter(f"{p}.ln1_b", np.zeros(d)),
                "w1": ad.Parameter(f"{p}.w1", ad.xavier_uniform(rng, (d, h))),
                "b1": ad.Parameter(f"{p}.b1", np.zeros(h)),
                "w2": ad.Parameter(f"{p}.w2", ad.xavier_uniform(rng, (h, d))),
                "b2": ad.Parameter(f"{p}.b2", np.zeros(d)),
                "ln2_g": ad.Parameter(f"{p}.ln2_g", np.ones(d)),
                "ln2_b": ad.Parameter(f"{p}.ln2_b", np.zeros(d)),
            })

    def parameters(self) -> list[ad.Parameter]:
        return [p for layer in self.layers for p in layer.values()]

    def forward(self, x: ad.Tensor, train: bool, rng: np.random.Generator | None) -> ad.Tensor:
        cfg = self.config
        for layer in self.layers:
            a = ad.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            att = multi_head_self_attention(a, layer["wq"], layer["wk"], layer["wv"],
                                            layer["wo"], cfg.n_heads)
            if train and cfg.dropout > 0:
                att = ad.dropout(att, cfg.dropout, rng)
            x = ad.add(x, att)
            f = ad.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            f = ad.relu(ad.affine(f, layer["w1"], layer["b1"]))
            f = ad.affine(f, layer["w2"], layer["b2"])
            if train and cfg.dropout > 0:
                f = ad.dropout(f, cfg.dropout, rng)
            x = ad.add(x, f)
        return x


def multi_head_self_attention(x: ad.Tensor, wq: ad.Tensor, wk: ad.Tensor, wv: ad.Tensor,
                              wo: ad.Tensor, n_heads: int) -> ad.Tensor:
    d = x.data.shape[1]
    if d % n_heads:
        raise EncoderError(f"dimension {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    q = ad.matmul(x, wq)
    k = ad.matmul(x, wk)
    v = ad.matmul(x, wv)
    heads = []
    for i in range(n_heads):
        s, e = i * dh, (i + 1) * dh
        heads.append(ad.scaled_dot_attention(ad.slice_cols(q, s, e),
                                             ad.slice_cols(k, s, e),
                                             ad.slice_cols(v, s, e)))
    return ad.matmul(ad.concat_cols(heads), wo)


class TurnEncoder:
    """Embeds assembled turn sequences and runs the shared transformer per turn."""

    def __init__(self, embedding: ad.Parameter, transformer: Transformer,
                 vocab: Vocabulary, config: EncoderConfig):
        self.embedding = embedding
        self.transformer = transformer
        self.vocab = vocab
        self.config = config
        self._pos_cache: dict[int, np.ndarray] = {}

    def _positions(self, n: int) -> np.ndarray:
        if n not in self._pos_cache:
            self._pos_cache[n] = sinusoidal_positions(n, self.config.d)
        return self._pos_cache[n]

    def embed(self, ids: list[int], train: bool, rng: np.random.Generator | None) -> ad.Tensor:
        ids = list(ids)
        if train and self.config.word_dropout > 0:
            unk = self.vocab.get(UNK)
            special = {self.vocab.get(t) for t in RESERVED}
            drop = rng.random(len(ids)) < self.config.word_dropout
            ids = [unk if (drop[i] and tid not in special) else tid
                   for i, tid in enumerate(ids)]
        emb = ad.gather_rows(self.embedding, ids)
        return ad.add(emb, ad.const(self._positions(len(ids))))

    def encode_turn(self, dialogue: Dialogue, turn_id: int, prev_state: dict[str, str],
                    schema: SlotSchema, train: bool = False,
                    rng: np.random.Generator | None = None) -> TurnEncoding:
        ids, cls_pos, slot_pos, value_pos, dlg_span = assemble_input(
            dialogue, turn_id, prev_state, schema, self.vocab, self.config.max_len)
        x = self.embed(ids, train, rng)
        h = self.transformer.forward(x, train, rng)
        return TurnEncoding(turn_id, ids, h, cls_pos, slot_pos, value_pos, dlg_span)

    def encode_turns(self, dialogue: Dialogue, upto_turn: int, prev_state: dict[str, str],
                     schema: SlotSchema, train: bool = False,
                     rng: np.random.Generator | None = None) -> EncodedTurnBatch:
        """Encode turns 1..upto_turn, each against the same previous-state block."""
        if upto_turn < 1:
            raise EncoderError("need at least one turn to encode")
        batch = EncodedTurnBatch()
        for t in range(1, upto_turn + 1):
            batch.turns.append(self.encode_turn(dialogue, t, prev_state, schema, train, rng))
        return batch
