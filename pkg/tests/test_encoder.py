import numpy as np
import pytest

import dstsel.autodiff as ad
from dstsel.corpus import Dialogue, Turn, demo_schema, synthesize_corpus
from dstsel.encoder import (CLS, IND, RESERVED, SEP, SLOT, UNK, VALUE,
                            EncoderConfig, EncoderError, Transformer,
                            TurnEncoder, Vocabulary, assemble_input,
                            multi_head_self_attention, sinusoidal_positions)


@pytest.fixture
def schema():
    return demo_schema()


@pytest.fixture
def corpus(schema):
    return synthesize_corpus(schema, 6, seed=0)


@pytest.fixture
def vocab(corpus, schema):
    return Vocabulary.build(corpus, schema)


def small_encoder(vocab, n_layers=2, seed=0):
    cfg = EncoderConfig(d=16, n_layers=n_layers, n_heads=2, max_len=128,
                        dropout=0.0, word_dropout=0.0)
    rng = np.random.default_rng(seed)
    emb = ad.Parameter("emb", rng.normal(0, 0.25, size=(len(vocab), cfg.d)))
    return TurnEncoder(emb, Transformer("enc", cfg, rng), vocab, cfg)


class TestVocabulary:
    def test_reserved_tokens_first(self, vocab):
        assert tuple(vocab.tokens[:len(RESERVED)]) == RESERVED

    def test_unknown_maps_to_unk(self, vocab):
        assert vocab.get("zyzzyva") == vocab.get(UNK)

    def test_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.tokens == vocab.tokens

    def test_corrupt_header_rejected(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        lines = path.read_text().splitlines()
        del lines[1]  # drop [PAD]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(EncoderError, match="reserved"):
            Vocabulary.load(path)

    def test_covers_schema_values(self, vocab, schema):
        unk = vocab.get(UNK)
        for slot in schema.slots:
            for value in slot.values:
                for tok in value.split():
                    assert vocab.get(tok) != unk


class TestAssembly:
    def test_layout(self, corpus, schema, vocab):
        d = corpus.dialogues[0]
        state = schema.empty_state()
        ids, cls_pos, slot_pos, value_pos, dlg_span = assemble_input(
            d, 1, state, schema, vocab, 128)
        toks = vocab.decode(ids)
        assert toks[cls_pos] == CLS
        assert len(slot_pos) == len(schema) == len(value_pos)
        for sp, vp in zip(slot_pos, value_pos):
            assert toks[sp] == SLOT and toks[vp] == VALUE
        assert toks[dlg_span[0] - 1] == SEP
        assert toks[dlg_span[1] - 1] == SEP
        assert dlg_span[1] == len(toks)

    def test_state_values_appear_after_markers(self, corpus, schema, vocab):
        d = corpus.dialogues[0]
        state = schema.empty_state()
        state["hotel-area"] = "north"
        ids, _, _, value_pos, _ = assemble_input(d, 1, state, schema, vocab, 128)
        toks = vocab.decode(ids)
        j = schema.index("hotel-area")
        assert toks[value_pos[j] + 1] == "north"

    def test_left_truncation_keeps_state_block(self, schema, vocab):
        turns = [Turn(1, "", " ".join(["north"] * 200))]
        state = schema.empty_state()
        d = Dialogue("x", turns, [dict(state, **{"hotel-area": "north"})])
        ids, _, slot_pos, _, dlg_span = assemble_input(d, 1, state, schema, vocab, 64)
        assert len(ids) == 64
        toks = vocab.decode(ids)
        assert toks[slot_pos[0]] == SLOT          # state block intact
        assert toks[-1] == SEP                    # tail of the dialogue kept

    def test_oversized_state_block_rejected(self, corpus, schema, vocab):
        with pytest.raises(EncoderError, match="state block"):
            assemble_input(corpus.dialogues[0], 1, schema.empty_state(), schema,
                           vocab, 16)


class TestPositions:
    def test_first_row_alternates_zero_one(self):
        enc = sinusoidal_positions(4, 6)
        assert np.allclose(enc[0], [0, 1, 0, 1, 0, 1])

    def test_values_bounded(self):
        enc = sinusoidal_positions(50, 16)
        assert np.all(np.abs(enc) <= 1.0)

    def test_rows_distinct(self):
        enc = sinusoidal_positions(50, 16)
        assert len({tuple(r) for r in np.round(enc, 12)}) == 50


class TestTransformer:
    def test_zero_layers_is_identity(self, corpus, schema, vocab):
        enc = small_encoder(vocab, n_layers=0)
        d = corpus.dialogues[0]
        te = enc.encode_turn(d, 1, schema.empty_state(), schema)
        x = enc.embed(te.ids, train=False, rng=None)
        assert np.array_equal(te.h.data, x.data)

    def test_marker_readback_through_zero_layers(self, corpus, schema, vocab):
        # with no mixing, the [SLOT] rows are exactly embedding + position
        enc = small_encoder(vocab, n_layers=0)
        d = corpus.dialogues[0]
        te = enc.encode_turn(d, 1, schema.empty_state(), schema)
        slot_id = vocab.get(SLOT)
        pos = sinusoidal_positions(len(te.ids), enc.config.d)
        for sp in te.slot_pos:
            expect = enc.embedding.data[slot_id] + pos[sp]
            assert np.allclose(te.h.data[sp], expect)

    def test_turns_encoded_independently(self, corpus, schema, vocab):
        enc = small_encoder(vocab)
        a, b = corpus.dialogues[0], corpus.dialogues[1]
        state = schema.empty_state()
        ha = enc.encode_turn(a, 1, state, schema).h.data
        # splice a's first turn into another dialogue: encoding must not change
        spliced = Dialogue("s", [a.turns[0], b.turns[0]],
                           [a.gold_states[0], a.gold_states[0]])
        hs = enc.encode_turn(spliced, 1, state, schema).h.data
        assert np.array_equal(ha, hs)

    def test_heads_must_divide_dim(self):
        x = ad.Tensor(np.zeros((3, 6)))
        w = ad.Tensor(np.zeros((6, 6)))
        with pytest.raises(EncoderError, match="heads"):
            multi_head_self_attention(x, w, w, w, w, 4)

    def test_word_dropout_never_hits_markers(self, corpus, schema, vocab):
        cfg = EncoderConfig(d=16, n_layers=0, n_heads=2, dropout=0.0,
                            word_dropout=1.0)
        rng = np.random.default_rng(0)
        emb = ad.Parameter("emb", rng.normal(0, 0.25, size=(len(vocab), cfg.d)))
        enc = TurnEncoder(emb, Transformer("enc", cfg, rng), vocab, cfg)
        d = corpus.dialogues[0]
        te = enc.encode_turn(d, 1, schema.empty_state(), schema, train=True, rng=rng)
        unk_row = emb.data[vocab.get(UNK)]
        pos = sinusoidal_positions(len(te.ids), cfg.d)
        toks = vocab.decode(te.ids)
        for i, tok in enumerate(toks):
            if tok in RESERVED:
                assert not np.allclose(te.h.data[i] - pos[i], unk_row) or tok == UNK
            else:
                assert np.allclose(te.h.data[i] - pos[i], unk_row)

    def test_encode_turns_batch(self, corpus, schema, vocab):
        enc = small_encoder(vocab)
        d = corpus.dialogues[0]
        batch = enc.encode_turns(d, len(d), schema.empty_state(), schema)
        assert len(batch) == len(d)
        assert batch.current.turn_id == len(d)
        with pytest.raises(EncoderError):
            enc.encode_turns(d, 0, schema.empty_state(), schema)

    def test_gradient_through_encoder(self, corpus, schema, vocab):
        enc = small_encoder(vocab)
        d = corpus.dialogues[0]
        params = [enc.embedding] + enc.transformer.parameters()

        def f():
            te = enc.encode_turn(d, 1, schema.empty_state(), schema)
            return ad.sum_all(ad.tanh(te.h))

        report = ad.grad_check(f, params, max_entries=4,
                               rng=np.random.default_rng(3))
        assert report["max_rel_err"] < 1e-5, report
