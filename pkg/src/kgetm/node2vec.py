"""node2vec: second-order biased random walks and skip-gram with negative sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from kgetm.graph import KnowledgeGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WalkConfig:
    p: float = 1.0
    q: float = 1.0
    walk_length: int = 40
    walks_per_node: int = 10
    window: int = 5
    negatives: int = 5
    dim: int = 256
    epochs: int = 5
    lr: float = 0.025
    min_lr_fraction: float = 1e-4
    batch_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.p <= 0 or self.q <= 0:
            raise ValueError("p and q must be positive")
        if self.walk_length < 2:
            raise ValueError("walk_length must be >= 2")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.window < 1 or self.negatives < 0 or self.epochs < 0 or self.walks_per_node < 1:
            raise ValueError("window >= 1, negatives >= 0, epochs >= 0, walks_per_node >= 1 required")


def generate_walks(g: KnowledgeGraph, cfg: WalkConfig) -> list[list[int]]:
    """``walks_per_node`` walks from every node, start order reshuffled each round."""
    rng = np.random.default_rng(cfg.seed)
    adj = [np.asarray(a, dtype=np.int64) for a in g.adjacency()]
    nbr_sets = [set(a.tolist()) for a in adj]
    first_order = cfg.p == 1.0 and cfg.q == 1.0
    cache: dict[tuple[int, int], np.ndarray] = {}

    def transition_cdf(prev: int, cur: int) -> np.ndarray:
        key = (prev, cur)
        cdf = cache.get(key)
        if cdf is None:
            w = np.array([1.0 / cfg.p if x == prev else (1.0 if x in nbr_sets[prev] else 1.0 / cfg.q)
                          for x in adj[cur].tolist()])
            cdf = np.cumsum(w / w.sum())
            cache[key] = cdf
        return cdf

    isolated = [i for i, a in enumerate(adj) if len(a) == 0]
    if isolated:
        log.warning("%d isolated node(s) yield length-1 walks", len(isolated))

    walks = []
    n = len(g.nodes)
    for _ in range(cfg.walks_per_node):
        u = rng.random((n, cfg.walk_length))
        for row, start in enumerate(rng.permutation(n).tolist()):
            if len(adj[start]) == 0:
                walks.append([start])
                continue
            walk = [start]
            draws = u[row]
            for step in range(1, cfg.walk_length):
                cur = walk[-1]
                nbrs = adj[cur]
                if first_order or step == 1:
                    nxt = nbrs[int(draws[step] * len(nbrs))]
                else:
                    cdf = transition_cdf(walk[-2], cur)
                    nxt = nbrs[min(int(np.searchsorted(cdf, draws[step], side="right")), len(nbrs) - 1)]
                walk.append(int(nxt))
            walks.append(walk)
    return walks


def _context_pairs(walks: list[list[int]], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    for walk in walks:
        w = np.asarray(walk, dtype=np.int64)
        for off in range(1, window + 1):
            if off >= len(w):
                break
            centers += [w[:-off], w[off:]]
            contexts += [w[off:], w[:-off]]
    if not centers:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def initial_embedding(n_nodes: int, cfg: WalkConfig) -> np.ndarray:
    """Random ``n_nodes x dim`` input vectors with unit expected row norm."""
    rng = np.random.default_rng([cfg.seed, 1])
    return rng.normal(0.0, 1.0 / np.sqrt(cfg.dim), size=(n_nodes, cfg.dim))


def train_skipgram(walks: list[list[int]], cfg: WalkConfig, n_nodes: int | None = None) -> np.ndarray:
    """Skip-gram with negative sampling over fixed-size windows; returns ``dim x n_nodes``.

    Minibatched SGD with a linearly decaying learning rate, single-threaded and
    deterministic for a fixed ``cfg.seed``. Gradients within a minibatch are
    summed, so the minibatch is capped at ``n_nodes`` pairs; larger batches on
    small graphs stack hundreds of stale updates per node and diverge.
    """
    if not walks:
        raise ValueError("no walks to train on")
    if n_nodes is None:
        n_nodes = 1 + max(max(w) for w in walks)
    w_in = initial_embedding(n_nodes, cfg)
    if cfg.epochs == 0:
        return w_in.T.copy()
    w_out = np.zeros_like(w_in)
    centers, contexts = _context_pairs(walks, cfg.window)
    if len(centers) == 0:
        return w_in.T.copy()

    freq = np.bincount(np.concatenate([np.asarray(w) for w in walks]), minlength=n_nodes).astype(float)
    noise = freq ** 0.75
    noise_cdf = np.cumsum(noise / noise.sum())

    rng = np.random.default_rng([cfg.seed, 2])
    n_pairs = len(centers)
    bs = max(1, min(cfg.batch_size, n_nodes))
    n_batches = cfg.epochs * ((n_pairs + bs - 1) // bs)
    lr_floor = cfg.lr * cfg.min_lr_fraction
    # scatter-adds are far cheaper through torch than np.add.at
    t_in, t_out = torch.from_numpy(w_in), torch.from_numpy(w_out)
    t_centers, t_contexts = torch.from_numpy(centers), torch.from_numpy(contexts)
    t_cdf = torch.from_numpy(noise_cdf)
    step = 0
    for _ in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(n_pairs))
        for lo in range(0, n_pairs, bs):
            idx = order[lo:lo + bs]
            c, o = t_centers[idx], t_contexts[idx]
            lr = max(lr_floor, cfg.lr * (1.0 - step / n_batches))
            step += 1
            vc = t_in[c]
            vo = t_out[o]
            g_pos = 1.0 - torch.sigmoid((vc * vo).sum(dim=1))
            grad_c = g_pos[:, None] * vo
            grad_o = g_pos[:, None] * vc
            if cfg.negatives:
                u = torch.from_numpy(rng.random((len(idx), cfg.negatives)))
                neg = torch.searchsorted(t_cdf, u, right=True).clamp_(max=n_nodes - 1)
                vn = t_out[neg]
                g_neg = -torch.sigmoid(torch.einsum("ij,inj->in", vc, vn))
                grad_c += torch.einsum("in,inj->ij", g_neg, vn)
                t_out.index_add_(0, neg.reshape(-1), (lr * g_neg[:, :, None] * vc[:, None, :]).reshape(-1, cfg.dim))
            t_out.index_add_(0, o, lr * grad_o)
            t_in.index_add_(0, c, lr * grad_c)
    return w_in.T.copy()


def node2vec(g: KnowledgeGraph, cfg: WalkConfig) -> np.ndarray:
    """Walks plus skip-gram: the ``dim x |nodes|`` initial code embedding."""
    return train_skipgram(generate_walks(g, cfg), cfg, n_nodes=len(g.nodes))
