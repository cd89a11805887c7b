"""Embedded topic model with graph-informed code embeddings and an amortized encoder."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from kgetm.gat import GAT

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

# how code embeddings are produced
EMB_GAT = "gat"          # GAT over a fixed initial embedding
EMB_FIXED = "fixed"      # initial embedding used as-is
EMB_FREE = "free"        # directly learned parameter, no graph


@dataclass(frozen=True)
class ModelConfig:
    n_icd: int
    n_atc: int
    n_topics: int = 100
    dim: int = 256
    hidden: int = 128
    trunk_layers: int = 1
    n_layers: int = 3
    n_heads: int = 4
    negative_slope: float = 0.2
    shared_alpha: bool = False
    embedding: str = EMB_GAT


def compute_beta(rho: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """``V x K`` topic matrix: column ``k`` is softmax over codes of ``rho^T alpha_k``."""
    logits = rho.T @ alpha
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite topic logits")
    return torch.softmax(logits, dim=0)


def reparameterize(mu: torch.Tensor, log_sigma: torch.Tensor, noise: torch.Tensor):
    """``delta = mu + sigma * noise`` and ``theta = softmax(delta)``."""
    delta = mu + torch.exp(log_sigma) * noise
    return delta, torch.softmax(delta, dim=-1)


def standard_normal(shape, seed: int | np.random.Generator) -> torch.Tensor:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal(shape))


class UnderflowCounter:
    def __init__(self):
        self.count = 0


underflow = UnderflowCounter()


def log_likelihood(counts_icd: torch.Tensor, counts_atc: torch.Tensor, theta: torch.Tensor,
                   beta_icd: torch.Tensor, beta_atc: torch.Tensor) -> torch.Tensor:
    """Per-document ``sum_t v_t . log(beta_t theta)`` for row-batched counts and mixtures."""
    total = 0.0
    for counts, beta in ((counts_icd, beta_icd), (counts_atc, beta_atc)):
        probs = theta @ beta.T
        small = (probs < PROB_FLOOR) & (counts > 0)
        if small.any():
            underflow.count += int(small.sum())
            log.warning("clamped %d underflowing code probabilities", int(small.sum()))
        total = total + (counts * torch.log(probs.clamp_min(PROB_FLOOR))).sum(dim=-1)
    return total


def kl_to_standard_normal(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """``KL(N(mu, sigma^2) || N(0, I))`` summed over the last axis."""
    return 0.5 * (torch.exp(2 * log_sigma) + mu ** 2 - 1.0 - 2 * log_sigma).sum(dim=-1)


class Encoder(nn.Module):
    """Two ReLU input branches, summed, an optional shared ReLU trunk, then affine mu / log-sigma heads."""

    def __init__(self, n_icd: int, n_atc: int, n_topics: int, hidden: int = 128, trunk_layers: int = 1):
        super().__init__()
        kw = dict(dtype=torch.float64)
        self.icd_in = nn.Linear(n_icd, hidden, **kw)
        self.atc_in = nn.Linear(n_atc, hidden, **kw)
        self.trunk = nn.ModuleList(nn.Linear(hidden, hidden, **kw) for _ in range(trunk_layers))
        self.mu = nn.Linear(hidden, n_topics, **kw)
        self.log_sigma = nn.Linear(hidden, n_topics, **kw)

    def forward(self, bow_icd: torch.Tensor, bow_atc: torch.Tensor):
        h = torch.relu(self.icd_in(bow_icd)) + torch.relu(self.atc_in(bow_atc))
        for layer in self.trunk:
            h = torch.relu(layer(h))
        return self.mu(h), self.log_sigma(h)


class KGETM(nn.Module):
    """Topic model whose code embeddings come from a GAT, a fixed matrix, or a free parameter.

    ``rho0`` is ``L x N_nodes``; ``icd_nodes``/``atc_nodes`` select the graph
    columns of the vocabulary codes. For ``EMB_FREE`` the graph arguments are
    unused.
    """

    def __init__(self, cfg: ModelConfig, rho0: np.ndarray | None = None,
                 edges: tuple[np.ndarray, np.ndarray] | None = None,
                 icd_nodes: np.ndarray | None = None, atc_nodes: np.ndarray | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.n_icd, cfg.n_atc, cfg.n_topics, cfg.hidden, cfg.trunk_layers)
        L, K = cfg.dim, cfg.n_topics
        self.alpha_icd = nn.Parameter(torch.empty(L, K, dtype=torch.float64))
        self.alpha_atc = None if cfg.shared_alpha else nn.Parameter(torch.empty(L, K, dtype=torch.float64))
        self.gat = None
        self.rho_free = None
        if cfg.embedding == EMB_FREE:
            self.rho_free = nn.Parameter(torch.empty(L, cfg.n_icd + cfg.n_atc, dtype=torch.float64))
        else:
            if rho0 is None or icd_nodes is None or atc_nodes is None:
                raise ValueError("graph-based embeddings need rho0 and vocabulary node ids")
            if rho0.shape[0] != L:
                raise ValueError(f"rho0 has dimension {rho0.shape[0]}, expected {L}")
            self.register_buffer("rho0", torch.as_tensor(np.asarray(rho0, dtype=np.float64)))
            self.register_buffer("icd_nodes", torch.as_tensor(icd_nodes, dtype=torch.long))
            self.register_buffer("atc_nodes", torch.as_tensor(atc_nodes, dtype=torch.long))
            if cfg.embedding == EMB_GAT:
                if edges is None:
                    raise ValueError("GAT embeddings need an edge index")
                self.gat = GAT(L, cfg.n_layers, cfg.n_heads, cfg.negative_slope)
                self.register_buffer("edge_tgt", torch.as_tensor(edges[0], dtype=torch.long))
                self.register_buffer("edge_src", torch.as_tensor(edges[1], dtype=torch.long))
            elif cfg.embedding != EMB_FIXED:
                raise ValueError(f"unknown embedding mode {cfg.embedding!r}")

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in [self.encoder.icd_in, self.encoder.atc_in, *self.encoder.trunk,
                           self.encoder.mu, self.encoder.log_sigma]:
                bound = 1.0 / np.sqrt(module.in_features)
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.uniform_(-bound, bound, generator=gen)
            bound = 1.0 / np.sqrt(self.cfg.dim)
            self.alpha_icd.uniform_(-bound, bound, generator=gen)
            if self.alpha_atc is not None:
                self.alpha_atc.uniform_(-bound, bound, generator=gen)
            if self.rho_free is not None:
                self.rho_free.normal_(0.0, bound, generator=gen)
        if self.gat is not None:
            self.gat.reset_parameters(gen)

    def alphas(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.alpha_icd, self.alpha_icd if self.alpha_atc is None else self.alpha_atc

    def code_embeddings(self) -> tuple[torch.Tensor, torch.Tensor]:
        """``(rho_icd, rho_atc)``, each ``L x V_t``."""
        if self.rho_free is not None:
            return self.rho_free[:, : self.cfg.n_icd], self.rho_free[:, self.cfg.n_icd :]
        rho = self.gat(self.rho0, self.edge_tgt, self.edge_src) if self.gat is not None else self.rho0
        return rho[:, self.icd_nodes], rho[:, self.atc_nodes]

    def node_embeddings(self) -> torch.Tensor | None:
        if self.rho_free is not None:
            return None
        return self.gat(self.rho0, self.edge_tgt, self.edge_src) if self.gat is not None else self.rho0

    def betas(self) -> tuple[torch.Tensor, torch.Tensor]:
        rho_icd, rho_atc = self.code_embeddings()
        alpha_icd, alpha_atc = self.alphas()
        return compute_beta(rho_icd, alpha_icd), compute_beta(rho_atc, alpha_atc)

    def encode(self, bow_icd: torch.Tensor, bow_atc: torch.Tensor):
        return self.encoder(bow_icd, bow_atc)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Named parameters split into ``encoder``, ``alpha`` and ``embedding`` groups."""
        groups: dict[str, list] = {"encoder": [], "alpha": [], "embedding": []}
        for name, p in self.named_parameters():
            if name.startswith("encoder."):
                groups["encoder"].append((name, p))
            elif name.startswith("alpha"):
                groups["alpha"].append((name, p))
            else:
                groups["embedding"].append((name, p))
        return groups


def _bow(counts: torch.Tensor) -> torch.Tensor:
    totals = counts.sum(dim=-1, keepdim=True)
    return torch.where(totals > 0, counts / totals.clamp_min(1.0), torch.zeros_like(counts))


def elbo_minibatch(model: KGETM, counts_icd: torch.Tensor, counts_atc: torch.Tensor,
                   noise: torch.Tensor | None, betas: tuple[torch.Tensor, torch.Tensor] | None = None,
                   n_docs: int | None = None) -> dict[str, torch.Tensor]:
    """One-sample ELBO for a batch of count rows.

    Returns per-document ``loglik``, ``kl`` and ``elbo`` plus batch ``total``
    (their sum) and ``scaled`` (likelihood rescaled by ``n_docs / |B|``).
    ``noise=None`` uses the zero-noise limit ``theta = softmax(mu)``.
    """
    if counts_icd.shape[0] == 0:
        raise ValueError("empty minibatch")
    beta_icd, beta_atc = model.betas() if betas is None else betas
    mu, log_sigma = model.encode(_bow(counts_icd), _bow(counts_atc))
    if noise is None:
        noise = torch.zeros_like(mu)
    _, theta = reparameterize(mu, log_sigma, noise)
    ll = log_likelihood(counts_icd, counts_atc, theta, beta_icd, beta_atc)
    kl = kl_to_standard_normal(mu, log_sigma)
    b = counts_icd.shape[0]
    scale = (n_docs / b) if n_docs else 1.0
    return {"loglik": ll, "kl": kl, "elbo": ll - kl, "total": (ll - kl).sum(),
            "scaled": scale * ll.sum() - kl.sum() * scale, "mu": mu, "log_sigma": log_sigma, "theta": theta}
