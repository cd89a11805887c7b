"""Multi-head graph attention over the knowledge graph, max-pooled across layers."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


class GatNumericalError(FloatingPointError):
    def __init__(self, layer: int, head: int):
        super().__init__(f"non-finite GAT activation at layer {layer}, head {head}")
        self.layer = layer
        self.head = head


class GAT(nn.Module):
    """Stack of attention layers on ``L x N`` column embeddings.

    Layer ``i`` head ``h`` has a square weight ``W[i, h]`` and an attention
    vector ``a[i, h]`` of length ``2L``. Heads are averaged; the result is the
    elementwise max over all layer outputs. With zero layers the input passes
    through unchanged.
    """

    def __init__(self, dim: int, n_layers: int = 3, n_heads: int = 4, negative_slope: float = 0.2):
        super().__init__()
        self.dim = dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.negative_slope = negative_slope
        self.weight = nn.Parameter(torch.empty(n_layers, n_heads, dim, dim, dtype=torch.float64))
        self.attn = nn.Parameter(torch.empty(n_layers, n_heads, 2 * dim, dtype=torch.float64))

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        # glorot uniform, as in the original GAT
        with torch.no_grad():
            bound_w = math.sqrt(6.0 / (2 * self.dim))
            self.weight.uniform_(-bound_w, bound_w, generator=generator)
            bound_a = math.sqrt(6.0 / (2 * self.dim + 1))
            self.attn.uniform_(-bound_a, bound_a, generator=generator)

    def layer_attention(self, x: torch.Tensor, layer: int, tgt: torch.Tensor, src: torch.Tensor):
        """Per-head projected features ``(H, N, L)`` and edge attention ``(H, E)`` for one layer.

        ``x`` is ``N x L`` (rows are nodes); edges run ``src -> tgt`` and must
        include self-loops.
        """
        z = torch.einsum("nl,hml->hnm", x, self.weight[layer])
        a = self.attn[layer]
        s_tgt = torch.einsum("hnm,hm->hn", z, a[:, : self.dim])
        s_src = torch.einsum("hnm,hm->hn", z, a[:, self.dim :])
        e = F.leaky_relu(s_tgt[:, tgt] + s_src[:, src], self.negative_slope)
        n = x.shape[0]
        shift = torch.full((self.n_heads, n), -math.inf, dtype=e.dtype)
        shift = shift.scatter_reduce(1, tgt.expand(self.n_heads, -1), e.detach(), reduce="amax")
        ex = torch.exp(e - shift[:, tgt])
        denom = torch.zeros(self.n_heads, n, dtype=e.dtype).index_add(1, tgt, ex)
        return z, ex / denom[:, tgt]

    def forward(self, rho0: torch.Tensor, tgt: torch.Tensor, src: torch.Tensor) -> torch.Tensor:
        if self.n_layers == 0:
            return rho0
        x = rho0.T
        n = x.shape[0]
        outputs = []
        for i in range(self.n_layers):
            z, att = self.layer_attention(x, i, tgt, src)
            msg = att.unsqueeze(-1) * z[:, src, :]
            heads = torch.zeros(self.n_heads, n, self.dim, dtype=x.dtype).index_add(1, tgt, msg)
            bad = ~torch.isfinite(heads).reshape(self.n_heads, -1).all(dim=1)
            if bad.any():
                raise GatNumericalError(i + 1, int(torch.nonzero(bad)[0]) + 1)
            x = heads.mean(dim=0)
            outputs.append(x)
        return torch.stack(outputs).amax(dim=0).T


def edge_tensors(tgt: np.ndarray, src: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.as_tensor(tgt, dtype=torch.long), torch.as_tensor(src, dtype=torch.long)


def attention_coefficients(gat: GAT, layer: int, head: int, emb: torch.Tensor,
                           tgt: torch.Tensor, src: torch.Tensor, c: int) -> dict[int, float]:
    """Attention weights of node ``c`` over ``{c} + N(c)`` for one layer/head.

    ``emb`` is the ``L x N`` input to that layer. Layers and heads are 0-based here.
    """
    with torch.no_grad():
        _, att = gat.layer_attention(emb.T, layer, tgt, src)
    mask = (tgt == c).nonzero().flatten()
    return {int(src[j]): float(att[head, j]) for j in mask}
