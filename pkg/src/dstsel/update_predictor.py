"""Per-slot update-vs-inherit head over the current turn's encoding.

Scores each slot from its [SLOT] vector in the current turn's contextual
matrix with a small sigmoid MLP; slots above the threshold form the
selected-slot set, everything else inherits its previous value verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import SlotSchema
from .encoder import TurnEncoding


class ConfigError(Exception):
    pass


@dataclass
class UpdateDecision:
    scores: list[float]              # per slot, in [0, 1]
    score_tensors: list[ad.Tensor]   # scalar tensors, for the training loss
    threshold: float

    @property
    def selected(self) -> list[int]:
        return [j for j, s in enumerate(self.scores) if s > self.threshold]


class UpdatePredictor:
    def __init__(self, d: int, rng: np.random.Generator):
        self.w1 = ad.Parameter("update.w1", ad.xavier_uniform(rng, (d, d)))
        self.b1 = ad.Parameter("update.b1", np.zeros(d))
        self.w2 = ad.Parameter("update.w2", ad.xavier_uniform(rng, (d, 1)))
        self.b2 = ad.Parameter("update.b2", np.zeros(1))

    def parameters(self) -> list[ad.Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def predict(self, current: TurnEncoding, schema: SlotSchema,
                threshold: float = 0.5) -> UpdateDecision:
        if not 0.0 < threshold < 1.0:
            raise ConfigError(f"update_threshold {threshold} outside (0, 1)")
        slot_vecs = ad.gather_rows(current.h, current.slot_pos)  # J x d
        hidden = ad.relu(ad.affine(slot_vecs, self.w1, self.b1))
        logits = ad.affine(hidden, self.w2, self.b2)  # J x 1
        probs = ad.sigmoid(logits)
        tensors = [ad.reshape(ad.slice_rows(probs, j, j + 1), ())
                   for j in range(len(schema))]
        return UpdateDecision([t.item() for t in tensors], tensors, threshold)


def update_loss(decision: UpdateDecision, gold_updated: set[int]) -> ad.Tensor:
    """Mean binary cross-entropy over all slots."""
    terms = []
    for j, p in enumerate(decision.score_tensors):
        # clip via the identity p' = p*(1-2e)+e to keep log finite
        p = ad.add_const(ad.scale(p, 1.0 - 2e-12), 1e-12)
        if j in gold_updated:
            terms.append(ad.scale(ad.log(p), -1.0))
        else:
            terms.append(ad.scale(ad.log(ad.add_const(ad.scale(p, -1.0), 1.0)), -1.0))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))
