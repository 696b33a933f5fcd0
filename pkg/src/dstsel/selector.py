"""Per-slot scoring and top-k selection of dialogue history turns.

Three perspectives score every turn of the prefix:

  * slot-name attention: the slot token attends over each turn's dialogue
    region and pools it;
  * current-turn dependency: multi-head self-attention over the per-turn
    [CLS] vectors, then a sigmoid-bounded mixing weight against the current
    turn;
  * implicit-mention reasoning: a gated relational GCN over turn nodes and
    slot-value nodes connected by four typed edge rules, for values that are
    only reachable through another slot (coreference).

Scalar gates fuse the three per-turn embeddings; an MLP scores each history
turn; the top-k by score (ties broken toward recency) are selected.  The
selection itself is hard: generator-loss gradient reaches a turn's score
only if that turn was selected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import SlotSchema
from .encoder import EncodedTurnBatch, multi_head_self_attention

D_NODE = "dialogue"
SV_NODE = "slot_value"
EDGE_TYPES = (1, 2, 3, 4)


class SelectorError(Exception):
    pass


@dataclass
class SelectionGraph:
    """Typed nodes (one per turn, one per slot) with symmetric typed edges."""
    n_turns: int
    n_slots: int
    target_slot: int
    node_init: ad.Tensor                       # (T + J) x d, turn nodes first
    edges: list[tuple[int, int, int]]          # (node a, node b, edge type), a < b
    t_z: dict[int, int]                        # slot -> latest-update turn (1-based)

    def node_id(self, kind: str, index: int) -> int:
        if kind == D_NODE:
            return index - 1  # turn ids are 1-based
        return self.n_turns + index

    def adjacency(self, edge_type: int) -> np.ndarray:
        """Row-normalized neighbor-mean operator for one edge type."""
        n = self.n_turns + self.n_slots
        a = np.zeros((n, n))
        for i, j, r in self.edges:
            if r == edge_type:
                a[i, j] = 1.0
                a[j, i] = 1.0
        deg = a.sum(axis=1, keepdims=True)
        np.divide(a, deg, out=a, where=deg > 0)
        return a


@dataclass
class SelectionResult:
    slot: int
    scores: list[float]                       # per history turn 1..T-1
    score_tensors: list[ad.Tensor] = field(repr=False, default_factory=list)
    selected: list[int] = field(default_factory=list)  # turn ids, score-ranked
    betas: list[tuple[float, float, float]] = field(default_factory=list)


def graph_edges(n_turns: int, n_slots: int, target_slot: int,
                domain_of: list[str], t_z: dict[int, int]) -> set[tuple[int, int, int]]:
    """The four edge rules, over node ids (turn t -> t-1, slot z -> n_turns+z)."""
    edges: set[tuple[int, int, int]] = set()
    sv = lambda z: n_turns + z
    d = lambda t: t - 1
    j = target_slot
    # 1: target slot <-> current turn
    edges.add((min(sv(j), d(n_turns)), max(sv(j), d(n_turns)), 1))
    for z in range(n_slots):
        if z == j:
            continue
        # 2: target slot <-> every other slot
        edges.add((min(sv(j), sv(z)), max(sv(j), sv(z)), 2))
        # 3: other slot <-> the turn where its latest value was set
        if z in t_z:
            edges.add((min(sv(z), d(t_z[z])), max(sv(z), d(t_z[z])), 3))
    # 4: all within-domain slot pairs
    for z1 in range(n_slots):
        for z2 in range(z1 + 1, n_slots):
            if domain_of[z1] == domain_of[z2]:
                edges.add((sv(z1), sv(z2), 4))
    return edges


class TurnSelector:
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, hops: int = 3):
        self.d = d
        self.n_heads = n_heads
        self.hops = hops
        x = lambda shape: ad.xavier_uniform(rng, shape)
        p = ad.Parameter
        # MHSA over per-turn [CLS] vectors
        self.wq = p("sel.mhsa.wq", x((d, d)))
        self.wk = p("sel.mhsa.wk", x((d, d)))
        self.wv = p("sel.mhsa.wv", x((d, d)))
        self.wo = p("sel.mhsa.wo", x((d, d)))
        # slot-value node projection
        self.w_sv = p("sel.w_sv", x((2 * d, d)))
        self.b_sv = p("sel.b_sv", np.zeros(d))
        # gated relational GCN: self, per-edge-type, and gate transforms
        self.fs_w = p("sel.rgcn.fs_w", x((d, d)))
        self.fs_b = p("sel.rgcn.fs_b", np.zeros(d))
        self.fr_w = [p(f"sel.rgcn.fr{r}_w", x((d, d))) for r in EDGE_TYPES]
        self.fr_b = [p(f"sel.rgcn.fr{r}_b", np.zeros(d)) for r in EDGE_TYPES]
        self.fg_w = p("sel.rgcn.fg_w", x((2 * d, d)))
        self.fg_b = p("sel.rgcn.fg_b", np.zeros(d))
        # fusion gates and ranking head
        self.fuse_w = [p(f"sel.fuse.w{i}", x((d, d))) for i in (1, 2, 3)]
        self.fuse_v = [p(f"sel.fuse.v{i}", x((d, 1))) for i in (1, 2, 3)]
        self.fuse_vb = [p(f"sel.fuse.vb{i}", np.zeros(1)) for i in (1, 2, 3)]
        self.score_w1 = p("sel.score.w1", x((d, d)))
        self.score_b1 = p("sel.score.b1", np.zeros(d))
        self.score_w2 = p("sel.score.w2", x((d, 1)))
        self.score_b2 = p("sel.score.b2", np.zeros(1))

    def parameters(self) -> list[ad.Parameter]:
        out = [self.wq, self.wk, self.wv, self.wo, self.w_sv, self.b_sv,
               self.fs_w, self.fs_b, self.fg_w, self.fg_b,
               self.score_w1, self.score_b1, self.score_w2, self.score_b2]
        out += self.fr_w + self.fr_b + self.fuse_w + self.fuse_v + self.fuse_vb
        return out

    # -- perspectives -------------------------------------------------------

    def sndh(self, batch: EncodedTurnBatch, slot: int) -> list[ad.Tensor]:
        """Slot-name attention pooling of each turn's dialogue region."""
        out = []
        for enc in batch.turns:
            s, e = enc.dlg_span
            if e <= s:
                raise SelectorError(f"turn {enc.turn_id} has an empty dialogue region")
            d_t = ad.slice_rows(enc.h, s, e)
            slot_vec = ad.row(enc.h, enc.slot_pos[slot])
            alpha = ad.softmax(ad.mv(d_t, slot_vec))
            out.append(ad.mv(ad.transpose(d_t), alpha))
        return out

    def cls_interactions(self, batch: EncodedTurnBatch) -> ad.Tensor:
        """MHSA output over the stacked per-turn [CLS] vectors (T x d)."""
        cls = ad.stack_rows([ad.row(enc.h, enc.cls_pos) for enc in batch.turns])
        return multi_head_self_attention(cls, self.wq, self.wk, self.wv, self.wo,
                                         self.n_heads)

    def ctdh(self, interactions: ad.Tensor) -> list[ad.Tensor]:
        """Per-turn residual mix with the current turn, weighted by a bounded score."""
        t_total = interactions.data.shape[0]
        cur = ad.row(interactions, t_total - 1)
        out = []
        for t in range(t_total):
            it = ad.row(interactions, t)
            gamma = ad.sigmoid(ad.scale(ad.dot(it, cur), 1.0 / math.sqrt(self.d)))
            out.append(ad.add(ad.mul(gamma, cur), it))
        return out

    # -- implicit-mention reasoning ----------------------------------------

    def build_graph(self, batch: EncodedTurnBatch, interactions: ad.Tensor,
                    schema: SlotSchema, slot: int, t_z: dict[int, int]) -> SelectionGraph:
        t_total = len(batch)
        current = batch.current
        sv_inits = []
        for z in range(len(schema)):
            pair = ad.concat_rows([
                ad.slice_rows(current.h, current.slot_pos[z], current.slot_pos[z] + 1),
                ad.slice_rows(current.h, current.value_pos[z], current.value_pos[z] + 1),
            ])
            flat = ad.reshape(pair, (2 * self.d,))
            sv_inits.append(ad.affine(flat, self.w_sv, self.b_sv))
        node_init = ad.concat_rows([interactions, ad.stack_rows(sv_inits)])
        t_z = {z: t for z, t in t_z.items() if z != slot and 1 <= t <= t_total}
        edges = sorted(graph_edges(t_total, len(schema), slot,
                                   [s.domain for s in schema.slots], t_z))
        return SelectionGraph(t_total, len(schema), slot, node_init, edges, t_z)

    def gated_rgcn(self, graph: SelectionGraph, hops: int | None = None,
                   gate_override: float | None = None) -> list[ad.Tensor]:
        """Message passing; returns the final embedding of each turn node."""
        hops = self.hops if hops is None else hops
        h = graph.node_init
        adj = {r: graph.adjacency(r) for r in EDGE_TYPES}
        for _ in range(hops):
            u = ad.affine(h, self.fs_w, self.fs_b)
            for ri, r in enumerate(EDGE_TYPES):
                if adj[r].any():
                    msg = ad.affine(h, self.fr_w[ri], self.fr_b[ri])
                    u = ad.add(u, ad.matmul(ad.const(adj[r]), msg))
            if gate_override is None:
                g = ad.sigmoid(ad.affine(ad.concat_cols([u, h]), self.fg_w, self.fg_b))
            else:
                g = ad.const(np.full(h.data.shape, float(gate_override)))
            one_minus_g = ad.add_const(ad.scale(g, -1.0), 1.0)
            h = ad.add(ad.mul(ad.tanh(u), g), ad.mul(h, one_minus_g))
        return [ad.row(h, t) for t in range(graph.n_turns)]

    # -- fusion and ranking -------------------------------------------------

    def fuse_and_rank(self, h_sn: list[ad.Tensor], h_ct: list[ad.Tensor],
                      h_im: list[ad.Tensor], k: int, slot: int,
                      mask: tuple[bool, bool, bool] = (False, False, False)) -> SelectionResult:
        """Gate the perspectives per turn, score, and take the top-k history turns.

        ``mask[i]`` forces the corresponding gate to 0 (perspective ablation).
        Ties prefer the more recent turn; the current turn never competes.
        """
        if k < 1:
            raise SelectorError(f"k must be >= 1, got {k}")
        t_total = len(h_sn)
        score_tensors, scores, betas = [], [], []
        for t in range(t_total - 1):  # history turns only
            hs = (h_sn[t], h_ct[t], h_im[t])
            parts, bvals = [], []
            for i in range(3):
                if mask[i]:
                    bvals.append(0.0)
                    continue
                gate_in = ad.tanh(ad.mv(ad.transpose(self.fuse_w[i]), hs[i]))
                beta = ad.sigmoid(ad.add(ad.mv(ad.transpose(self.fuse_v[i]), gate_in),
                                         self.fuse_vb[i]))
                beta = ad.reshape(beta, ())
                parts.append(ad.mul(beta, hs[i]))
                bvals.append(beta.item())
            if parts:
                h_sum = parts[0]
                for pt in parts[1:]:
                    h_sum = ad.add(h_sum, pt)
            else:
                h_sum = ad.const(np.zeros(self.d))
            hidden = ad.relu(ad.add(ad.mv(ad.transpose(self.score_w1), h_sum), self.score_b1))
            score = ad.reshape(ad.add(ad.mv(ad.transpose(self.score_w2), hidden),
                                      self.score_b2), ())
            score_tensors.append(score)
            scores.append(score.item())
            betas.append(tuple(bvals))
        order = sorted(range(len(scores)), key=lambda t: (-scores[t], -t))
        selected = [t + 1 for t in order[:min(k, len(scores))]]
        return SelectionResult(slot, scores, score_tensors, selected, betas)

    # -- end to end ---------------------------------------------------------

    def select_for_slot(self, batch: EncodedTurnBatch, schema: SlotSchema, slot: int,
                        k: int, t_z: dict[int, int],
                        mask: tuple[bool, bool, bool] = (False, False, False),
                        rgcn_hops: int | None = None) -> SelectionResult:
        h_sn = self.sndh(batch, slot)
        interactions = self.cls_interactions(batch)
        h_ct = self.ctdh(interactions)
        graph = self.build_graph(batch, interactions, schema, slot, t_z)
        h_im = self.gated_rgcn(graph, hops=rgcn_hops)
        return self.fuse_and_rank(h_sn, h_ct, h_im, k, slot, mask)
