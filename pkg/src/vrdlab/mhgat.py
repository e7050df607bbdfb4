"""One layer of multi-head heterogeneous graph attention.

Every node attends to every node including itself. For head ``h`` the raw
score of edge ``(i, j)`` is a learned linear read-out of the concatenation
``[f_s(x_i), f_t(x_j), f_e(e_ij)]`` passed through a leaky ReLU; source,
target and edge features each get their own embedding. A read-out of a
concatenation splits into three dot products, which is how it's computed
here. Attention rows are a softmax over ``j``. The message ``f_m([x_i, x_j, e_ij])``
is shared by all heads, so averaging heads is the same as averaging their
attention matrices:

    x'_i = x_i + mean_h sum_j alpha^h_ij f_m([x_i, x_j, e_ij])
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nc
from .numeric import LinearLayer, Tensor


@dataclass
class SceneGraph:
    nodes: Tensor  # (N, d)
    edges: Tensor  # (N, N, d_e)

    def __post_init__(self):
        self.nodes = nc.as_tensor(self.nodes)
        self.edges = nc.as_tensor(self.edges)
        n = self.nodes.shape[0]
        if n < 1 or self.edges.shape[:2] != (n, n):
            raise nc.ShapeError(f"edges {self.edges.shape} do not cover {n} nodes")

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    def permute(self, perm) -> "SceneGraph":
        perm = np.asarray(perm)
        return SceneGraph(Tensor(self.nodes.data[perm]), Tensor(self.edges.data[perm][:, perm]))


@dataclass
class MHGATParams:
    """Per-head embeddings stacked along a leading head axis.

    ``src_w``/``tgt_w``: (H, k, d), ``edge_w``: (H, k, d_e), biases (H, k),
    ``score_src``/``score_tgt``/``score_edge``: (H, k) - the three slices of
    each head's scoring vector. ``message`` maps ``2d + d_e`` to ``d``.
    """

    src_w: Tensor
    src_b: Tensor
    tgt_w: Tensor
    tgt_b: Tensor
    edge_w: Tensor
    edge_b: Tensor
    score_src: Tensor
    score_tgt: Tensor
    score_edge: Tensor
    message: LinearLayer
    negative_slope: float = 0.2

    @property
    def heads(self) -> int:
        return self.src_w.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, edge_dim: int, heads: int = 4,
             head_dim: int = 8, message_scale: float = 0.5) -> "MHGATParams":
        def p(shape, fan_in):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        return cls(
            src_w=p((heads, head_dim, dim), dim), src_b=zeros((heads, head_dim)),
            tgt_w=p((heads, head_dim, dim), dim), tgt_b=zeros((heads, head_dim)),
            edge_w=p((heads, head_dim, edge_dim), edge_dim), edge_b=zeros((heads, head_dim)),
            score_src=p((heads, head_dim), head_dim),
            score_tgt=p((heads, head_dim), head_dim),
            score_edge=p((heads, head_dim), head_dim),
            message=LinearLayer.init(rng, 2 * dim + edge_dim, dim, scale_=message_scale),
        )

    def params(self, prefix: str = "gat") -> dict[str, Tensor]:
        names = ("src_w", "src_b", "tgt_w", "tgt_b", "edge_w", "edge_b",
                 "score_src", "score_tgt", "score_edge")
        out = {f"{prefix}.{n}": getattr(self, n) for n in names}
        out.update(self.message.params(f"{prefix}.message"))
        return out


def _attention_nnh(params: MHGATParams, graph: SceneGraph) -> Tensor:
    """Attention weights laid out as (N_i, N_j, H)."""
    x, e = graph.nodes, graph.edges
    n = graph.num_nodes
    fs = nc.add_bias(nc.einsum("nd,hkd->nhk", x, params.src_w), params.src_b)
    ft = nc.add_bias(nc.einsum("nd,hkd->nhk", x, params.tgt_w), params.tgt_b)
    fe = nc.add_bias(nc.einsum("ijd,hkd->ijhk", e, params.edge_w), params.edge_b)
    s_src = nc.einsum("nhk,hk->nh", fs, params.score_src)
    s_tgt = nc.einsum("nhk,hk->nh", ft, params.score_tgt)
    s_edge = nc.einsum("ijhk,hk->ijh", fe, params.score_edge)
    g = nc.add(nc.add(nc.expand(s_src, 1, n), nc.expand(s_tgt, 0, n)), s_edge)
    g = nc.leaky_relu(g, params.negative_slope)
    return nc.softmax(g, axis=1)


def attention(params: MHGATParams, graph: SceneGraph) -> Tensor:
    """Per-head attention matrices, shape (H, N, N); each row sums to 1."""
    return nc.transpose(_attention_nnh(params, graph), (2, 0, 1))


def message_pass(params: MHGATParams, graph: SceneGraph) -> Tensor:
    """Apply the layer once; returns updated node features (N, d)."""
    x, e = graph.nodes, graph.edges
    n = graph.num_nodes
    alpha = nc.mean(_attention_nnh(params, graph), axis=2)
    pair_in = nc.concat([nc.expand(x, 1, n), nc.expand(x, 0, n), e], axis=-1)
    msg = params.message(pair_in)
    return nc.add(x, nc.einsum("ij,ijd->id", alpha, msg))
