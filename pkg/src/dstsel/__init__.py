"""Dialogue state tracking with per-slot dynamic selection of history turns."""

from .corpus import (Dialogue, DialogueCorpus, Slot, SlotSchema, Turn,
                     derive_update_labels, evidence_turns, load_corpus,
                     save_corpus, synthesize_corpus, demo_schema)
from .encoder import EncoderConfig, TurnEncoder, Vocabulary
from .harness import TrainConfig, ablate, evaluate, train
from .model import DstModel, ModelConfig

__all__ = [
    "Dialogue", "DialogueCorpus", "Slot", "SlotSchema", "Turn",
    "derive_update_labels", "evidence_turns", "load_corpus", "save_corpus",
    "synthesize_corpus", "demo_schema", "EncoderConfig", "TurnEncoder",
    "Vocabulary", "TrainConfig", "ablate", "evaluate", "train", "DstModel",
    "ModelConfig",
]
