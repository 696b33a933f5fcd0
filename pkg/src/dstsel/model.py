"""Bundles the encoder, update head, selector, and generator into one model
with deterministic seeded initialization and a flat named-parameter table."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .corpus import SlotSchema
from .encoder import EncoderConfig, Transformer, TurnEncoder, Vocabulary
from .generator import StateGenerator
from .selector import TurnSelector
from .update_predictor import UpdatePredictor


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 2
    max_len: int = 128
    dropout: float = 0.1
    word_dropout: float = 0.1
    k: int = 2                 # history turns selected per slot
    rgcn_hops: int = 3
    update_threshold: float = 0.5
    seed: int = 0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.d, self.n_layers, self.n_heads, self.ffn_mult,
                             self.max_len, self.dropout, self.word_dropout)


class DstModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config.seed)
        enc_cfg = config.encoder_config()
        scale = 1.0 / np.sqrt(config.d)
        self.embedding = ad.Parameter(
            "embedding", rng.normal(0.0, scale, size=(len(vocab), config.d)))
        self.enc_transformer = Transformer("enc", enc_cfg, rng)
        self.refine_transformer = Transformer("refine", enc_cfg, rng)
        self.encoder = TurnEncoder(self.embedding, self.enc_transformer, vocab, enc_cfg)
        self.update = UpdatePredictor(config.d, rng)
        self.selector = TurnSelector(config.d, config.n_heads, rng, hops=config.rgcn_hops)
        self.generator = StateGenerator(config.d, rng)

    def parameters(self) -> list[ad.Parameter]:
        params = [self.embedding]
        params += self.enc_transformer.parameters()
        params += self.refine_transformer.parameters()
        params += self.update.parameters()
        params += self.selector.parameters()
        params += self.generator.parameters()
        names = [p.name for p in params]
        assert len(set(names)) == len(names), "duplicate parameter names"
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- checkpointing ------------------------------------------------------

    def save(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        params = self.parameters()
        index, offset = [], 0
        with open(os.path.join(directory, "params.bin"), "wb") as fh:
            for p in params:
                raw = np.ascontiguousarray(p.data).tobytes()
                fh.write(raw)
                index.append({"name": p.name, "shape": list(p.data.shape),
                              "offset": offset})
                offset += len(raw)
        with open(os.path.join(directory, "params.json"), "w") as fh:
            json.dump(index, fh, indent=0, sort_keys=True)
        with open(os.path.join(directory, "config.json"), "w") as fh:
            json.dump(asdict(self.config), fh, indent=0, sort_keys=True)
        self.vocab.save(os.path.join(directory, "vocab.txt"))

    @classmethod
    def load(cls, directory: str) -> "DstModel":
        with open(os.path.join(directory, "config.json")) as fh:
            config = ModelConfig(**json.load(fh))
        vocab = Vocabulary.load(os.path.join(directory, "vocab.txt"))
        model = cls(config, vocab)
        with open(os.path.join(directory, "params.json")) as fh:
            index = {e["name"]: e for e in json.load(fh)}
        with open(os.path.join(directory, "params.bin"), "rb") as fh:
            blob = fh.read()
        for p in model.parameters():
            entry = index[p.name]
            arr = np.frombuffer(blob, dtype=np.float64,
                                count=int(np.prod(entry["shape"]) or 1),
                                offset=entry["offset"]).reshape(entry["shape"])
            p.data = arr.copy()
            p.zero_grad()
        return model


def states_equal(a: dict[str, str], b: dict[str, str], schema: SlotSchema) -> bool:
    return all(a.get(s.name, "none") == b.get(s.name, "none") for s in schema.slots)
