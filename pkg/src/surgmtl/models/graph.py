"""Single-layer graph attention over tissue/instrument nodes with edge classification."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class GraphInput:
    visual: torch.Tensor    # V x Dv
    semantic: torch.Tensor  # V x Ds
    spatial: torch.Tensor   # E x 12, one row per labelled edge
    edges: torch.Tensor     # E x 2 long, (tissue node, instrument node)

    def validate(self) -> None:
        v = self.visual.shape[0]
        if self.semantic.shape[0] != v:
            raise ValueError("visual and semantic node counts differ")
        if v < 2:
            raise ValueError("a scene graph needs at least two nodes")
        if self.edges.dim() != 2 or self.edges.shape[0] < 1:
            raise ValueError("graph has no edges")
        if self.spatial.shape[0] != self.edges.shape[0]:
            raise ValueError("one spatial feature row per edge is required")
        if int(self.edges.min()) < 0 or int(self.edges.max()) >= v:
            raise ValueError("edge references a missing node")
        if bool((self.edges[:, 0] == self.edges[:, 1]).any()):
            raise ValueError("self-loops are not allowed")


def segment_softmax(scores: torch.Tensor, segment: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Softmax of ``scores`` within groups sharing the same ``segment`` id."""
    seg_max = scores.new_full((n_segments,), float("-inf")).scatter_reduce(
        0, segment, scores.detach(), reduce="amax", include_self=True)
    ex = torch.exp(scores - seg_max[segment])
    denom = scores.new_zeros(n_segments).index_add(0, segment, ex)
    return ex / denom[segment]


class SceneGraphHead(nn.Module):
    """Edge logits from [h_tissue || h_instrument || encoded spatial].

    attention_norm="destination": each node soft-maxes attention over all its
    neighbours, so a tissue node's state depends on every instrument in view.
    attention_norm="pair": every edge gates its partner independently with a
    sigmoid, so an edge only sees its own two endpoints.
    """

    def __init__(self, visual_dim: int, semantic_dim: int, n_interactions: int,
                 hidden: int = 64, edge_hidden: int = 64, attention_norm: str = "destination"):
        super().__init__()
        if attention_norm not in ("destination", "pair"):
            raise ValueError(f"unknown attention_norm {attention_norm!r}")
        self.attention_norm = attention_norm
        self.node_in = nn.Linear(visual_dim + semantic_dim, hidden)
        self.att_src = nn.Parameter(torch.randn(hidden) * hidden ** -0.5)
        self.att_dst = nn.Parameter(torch.randn(hidden) * hidden ** -0.5)
        # Spatial layout gets its own encoder so 12 numbers are not drowned by node states.
        self.spatial_in = nn.Sequential(nn.Linear(12, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU())
        self.edge_mlp = nn.Sequential(
            nn.Linear(5 * hidden, edge_hidden), nn.ReLU(), nn.Linear(edge_hidden, n_interactions))

    def _score(self, h_dst: torch.Tensor, h_src: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(h_dst @ self.att_dst + h_src @ self.att_src, 0.2)

    def forward(self, g: GraphInput) -> torch.Tensor:
        g.validate()
        h = self.node_in(torch.cat([g.visual, g.semantic], dim=1))
        t, s = g.edges[:, 0], g.edges[:, 1]
        if self.attention_norm == "destination":
            dst = torch.cat([t, s])
            src = torch.cat([s, t])
            alpha = segment_softmax(self._score(h[dst], h[src]), dst, h.shape[0])
            agg = h.new_zeros(h.shape).index_add(0, dst, alpha[:, None] * h[src])
            nodes = F.elu(torch.cat([h, agg], dim=1))
            h_t, h_s = nodes[t], nodes[s]
        else:
            g_ts = torch.sigmoid(self._score(h[t], h[s]))[:, None]
            g_st = torch.sigmoid(self._score(h[s], h[t]))[:, None]
            h_t = F.elu(torch.cat([h[t], g_ts * h[s]], dim=1))
            h_s = F.elu(torch.cat([h[s], g_st * h[t]], dim=1))
        return self.edge_mlp(torch.cat([h_t, h_s, self.spatial_in(g.spatial)], dim=1))
