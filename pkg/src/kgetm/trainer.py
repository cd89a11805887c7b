"""Training loop: per-variant setup, Adam with masked weight decay, checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from kgetm.corpus import PatientDocument, Vocabulary, count_matrices
from kgetm.graph import KnowledgeGraph, augment_ancestors
from kgetm.model import EMB_FIXED, EMB_FREE, EMB_GAT, KGETM, ModelConfig, elbo_minibatch

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-init", "no-aug", "fixed-embedding", "free-embedding")

CHECKPOINT_MAGIC = b"KGETMCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 1.2e-6
    batch_size: int = 512
    epochs: int = 10
    n_topics: int = 100
    dim: int = 256
    hidden: int = 128
    trunk_layers: int = 1
    n_layers: int = 3
    n_heads: int = 4
    negative_slope: float = 0.2
    shared_alpha: bool = False
    beta_per_epoch: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    no_init_scale: float = 0.1
    seed: int = 0
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("lr", "batch_size", "n_topics", "dim", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ValueError("epochs and weight_decay must be non-negative")

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class VariantSetup:
    """What a variant trains on: graph (None when unused), initial embedding and embedding mode."""

    variant: str
    graph: KnowledgeGraph | None
    rho0: np.ndarray | None
    embedding: str


def apply_variant(cfg: TrainConfig, graph: KnowledgeGraph | None, rho0: np.ndarray | None) -> VariantSetup:
    """Select graph, initial embedding and embedding mode for ``cfg.variant``.

    ``rho0`` is the node2vec embedding for the graph the variant uses (the
    caller pretrains on the unaugmented graph for ``no-aug``).
    """
    v = cfg.variant
    if v == "free-embedding":
        return VariantSetup(v, None, None, EMB_FREE)
    if graph is None:
        raise ValueError(f"variant {v!r} needs a knowledge graph")
    if v == "no-aug":
        g = graph.without_augmentation() if graph.augmented else graph
    else:
        g = graph if graph.augmented else augment_ancestors(graph)
    if v == "no-init":
        rng = np.random.default_rng([cfg.seed, 17])
        init = rng.normal(0.0, cfg.no_init_scale, size=(cfg.dim, len(g.nodes)))
    else:
        if rho0 is None:
            raise ValueError(f"variant {v!r} needs a node2vec embedding")
        init = np.asarray(rho0, dtype=np.float64)
        if init.shape != (cfg.dim, len(g.nodes)):
            raise ValueError(f"rho0 shape {init.shape} != ({cfg.dim}, {len(g.nodes)})")
    return VariantSetup(v, g, init, EMB_FIXED if v == "fixed-embedding" else EMB_GAT)


def build_model(cfg: TrainConfig, setup: VariantSetup, vocab: Vocabulary) -> KGETM:
    mcfg = ModelConfig(n_icd=vocab.n_icd, n_atc=vocab.n_atc, n_topics=cfg.n_topics, dim=cfg.dim,
                       hidden=cfg.hidden, trunk_layers=cfg.trunk_layers, n_layers=cfg.n_layers,
                       n_heads=cfg.n_heads, negative_slope=cfg.negative_slope,
                       shared_alpha=cfg.shared_alpha, embedding=setup.embedding)
    if setup.embedding == EMB_FREE:
        return KGETM(mcfg)
    icd_nodes, atc_nodes = setup.graph.vocab_node_ids(vocab)
    edges = setup.graph.edge_index(self_loops=True) if setup.embedding == EMB_GAT else None
    return KGETM(mcfg, setup.rho0, edges, icd_nodes, atc_nodes)


# --------------------------------------------------------------------------- Adam

def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              moments: dict[str, tuple[torch.Tensor, torch.Tensor]], t: int, lr: float,
              decay_mask: dict[str, bool], weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam step ``t`` (1-based) with decoupled weight decay on masked parameters."""
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m, v = moments.get(name) or (torch.zeros_like(p), torch.zeros_like(p))
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            moments[name] = (m, v)
            if decay_mask.get(name) and weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            p -= lr * (m / bc1) / (torch.sqrt(v / bc2) + eps)


def decay_mask(model: KGETM) -> dict[str, bool]:
    """Weight decay applies to the encoder (variational) parameters only."""
    return {name: name.startswith("encoder.") for name, _ in model.named_parameters()}


# --------------------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: dict
    variant: str
    embedding: str
    n_icd: int
    n_atc: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    moments: dict[str, tuple[np.ndarray, np.ndarray]]
    step: int
    epoch: int
    rng_state: dict
    best_valid_nll: float = math.inf
    best_epoch: int = -1
    config_hash: str = ""

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config)


def _model_from_checkpoint(ckpt: Checkpoint) -> KGETM:
    cfg = ckpt.train_config()
    mcfg = ModelConfig(n_icd=ckpt.n_icd, n_atc=ckpt.n_atc, n_topics=cfg.n_topics, dim=cfg.dim,
                       hidden=cfg.hidden, trunk_layers=cfg.trunk_layers, n_layers=cfg.n_layers,
                       n_heads=cfg.n_heads, negative_slope=cfg.negative_slope,
                       shared_alpha=cfg.shared_alpha, embedding=ckpt.embedding)
    b = ckpt.buffers
    edges = (b["edge_tgt"], b["edge_src"]) if "edge_tgt" in b else None
    model = KGETM(mcfg, b.get("rho0"), edges, b.get("icd_nodes"), b.get("atc_nodes"))
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(ckpt.params[name]))
    return model


def load_model(ckpt: Checkpoint) -> KGETM:
    return _model_from_checkpoint(ckpt)


def make_checkpoint(model: KGETM, cfg: TrainConfig, variant: str, moments, step: int, epoch: int,
                    rng: np.random.Generator, best_nll: float = math.inf, best_epoch: int = -1) -> Checkpoint:
    return Checkpoint(
        config=dataclasses.asdict(cfg), variant=variant, embedding=model.cfg.embedding,
        n_icd=model.cfg.n_icd, n_atc=model.cfg.n_atc,
        params={n: p.detach().numpy().copy() for n, p in model.named_parameters()},
        buffers={n: b.numpy().copy() for n, b in model.named_buffers()},
        moments={n: (m.numpy().copy(), v.numpy().copy()) for n, (m, v) in moments.items()},
        step=step, epoch=epoch, rng_state=rng.bit_generator.state,
        best_valid_nll=best_nll, best_epoch=best_epoch, config_hash=cfg.digest())


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Binary layout: magic, u32 version, u64 header length, JSON header, npz payload."""
    from kgetm.io import atomic_write_bytes

    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    arrays.update({f"buffer/{k}": v for k, v in ckpt.buffers.items()})
    for k, (m, v) in ckpt.moments.items():
        arrays[f"m/{k}"] = m
        arrays[f"v/{k}"] = v
    header = {
        "config": ckpt.config, "variant": ckpt.variant, "embedding": ckpt.embedding,
        "n_icd": ckpt.n_icd, "n_atc": ckpt.n_atc, "step": ckpt.step, "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state, "best_valid_nll": repr(ckpt.best_valid_nll),
        "best_epoch": ckpt.best_epoch, "config_hash": ckpt.config_hash,
        "moments": sorted(ckpt.moments),
    }
    buf = io.BytesIO()
    np.savez(buf, **dict(sorted(arrays.items())))  # fixed member order makes the bytes reproducible
    head = json.dumps(header, sort_keys=True).encode()
    blob = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + buf.getvalue()
    atomic_write_bytes(path, blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off:off + hlen])
    with np.load(io.BytesIO(data[off + hlen:])) as npz:
        arrays = {k: npz[k] for k in npz.files}
    pick = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    params, buffers = pick("param/"), pick("buffer/")
    moments = {k: (arrays[f"m/{k}"], arrays[f"v/{k}"]) for k in header["moments"]}
    return Checkpoint(
        config=header["config"], variant=header["variant"], embedding=header["embedding"],
        n_icd=header["n_icd"], n_atc=header["n_atc"], params=params, buffers=buffers,
        moments=moments, step=header["step"], epoch=header["epoch"], rng_state=header["rng_state"],
        best_valid_nll=float(header["best_valid_nll"]), best_epoch=header["best_epoch"],
        config_hash=header["config_hash"])


# --------------------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    train_elbo: float
    valid_nll: float
    seconds: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_elbo!r}\t{self.valid_nll!r}\t{self.seconds:.3f}"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Checkpoint
    log: list[EpochRecord] = field(default_factory=list)

    @property
    def model(self) -> KGETM:
        return load_model(self.checkpoint)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, snapshot: Checkpoint):
        super().__init__(message)
        self.snapshot = snapshot


def write_log(path: str | Path, records: Sequence[EpochRecord]) -> None:
    from kgetm.io import atomic_write_text

    text = "epoch\ttrain_elbo\tvalid_nll\tseconds\n" + "".join(r.line() + "\n" for r in records)
    atomic_write_text(path, text)


def _as_tensors(docs, vocab):
    icd, atc = count_matrices(docs, vocab)
    return torch.from_numpy(icd), torch.from_numpy(atc)


def _epoch_elbo_no_update(model, x_icd, x_atc, batch_size, rng) -> float:
    total = 0.0
    with torch.no_grad():
        betas = model.betas()
        for lo in range(0, x_icd.shape[0], batch_size):
            xi, xa = x_icd[lo:lo + batch_size], x_atc[lo:lo + batch_size]
            noise = torch.from_numpy(rng.standard_normal((xi.shape[0], model.cfg.n_topics)))
            total += float(elbo_minibatch(model, xi, xa, noise, betas)["total"])
    return total / x_icd.shape[0]


def train(train_docs: Sequence[PatientDocument], valid_docs: Sequence[PatientDocument], vocab: Vocabulary,
          graph: KnowledgeGraph | None, rho0: np.ndarray | None, cfg: TrainConfig,
          resume: Checkpoint | None = None,
          on_epoch: Callable[[EpochRecord, Checkpoint], None] | None = None) -> TrainResult:
    """Maximize the minibatch ELBO with Adam for ``cfg.epochs`` epochs.

    Epoch 0 in the log is the untrained model. With ``resume`` the run
    continues from the checkpoint's epoch, parameters, moments and RNG state.
    """
    from kgetm.evaluation import completion_nll

    if not train_docs:
        raise ValueError("no training documents")
    if resume is not None:
        model = load_model(resume)
        variant = resume.variant
        moments = {k: (torch.from_numpy(m.copy()), torch.from_numpy(v.copy())) for k, (m, v) in resume.moments.items()}
        step, start = resume.step, resume.epoch
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        best_nll, best_epoch = resume.best_valid_nll, resume.best_epoch
    else:
        setup = apply_variant(cfg, graph, rho0)
        model = build_model(cfg, setup, vocab)
        model.reset_parameters(cfg.seed)
        variant = setup.variant
        moments, step, start = {}, 0, 0
        rng = np.random.default_rng(cfg.seed)
        best_nll, best_epoch = math.inf, -1

    x_icd, x_atc = _as_tensors(train_docs, vocab)
    n = x_icd.shape[0]
    named = dict(model.named_parameters())
    mask = decay_mask(model)
    halving_seed = cfg.seed + 1_000_003

    def valid_nll() -> float:
        if not valid_docs:
            return math.nan
        return completion_nll(model, valid_docs, vocab, seed=halving_seed)

    records: list[EpochRecord] = []
    best_ckpt = None
    if start == 0:
        t0 = time.perf_counter()
        elbo0 = _epoch_elbo_no_update(model, x_icd, x_atc, cfg.batch_size, np.random.default_rng([cfg.seed, 0]))
        nll0 = valid_nll()
        records.append(EpochRecord(0, elbo0, nll0, time.perf_counter() - t0))
        best_nll, best_epoch = nll0, 0
        best_ckpt = make_checkpoint(model, cfg, variant, moments, step, 0, rng, best_nll, best_epoch)

    for epoch in range(start + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = torch.from_numpy(rng.permutation(n))
        epoch_total = 0.0
        stale = None
        if cfg.beta_per_epoch:
            stale = _StaleBeta(model)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            noise = torch.from_numpy(rng.standard_normal((len(idx), cfg.n_topics)))
            model.zero_grad(set_to_none=True)
            betas = stale.betas if stale is not None else None
            out = elbo_minibatch(model, x_icd[idx], x_atc[idx], noise, betas)
            loss = -out["total"] / len(idx)
            if not torch.isfinite(loss):
                snap = make_checkpoint(model, cfg, variant, moments, step, epoch - 1, rng, best_nll, best_epoch)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step + 1}", snap)
            loss.backward(retain_graph=stale is not None)
            grads = {k: p.grad for k, p in named.items() if p.grad is not None}
            if stale is not None:
                grads.update(stale.grads())
            step += 1
            adam_step(named, grads, moments, step, cfg.lr, mask, cfg.weight_decay,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            epoch_total += out["total"].item()
        nll = valid_nll()
        if nll < best_nll:
            best_nll, best_epoch = nll, epoch
        ckpt = make_checkpoint(model, cfg, variant, moments, step, epoch, rng, best_nll, best_epoch)
        if best_epoch == epoch:
            best_ckpt = ckpt
        rec = EpochRecord(epoch, epoch_total / n, nll, time.perf_counter() - t0)
        records.append(rec)
        log.info("epoch %d  train ELBO %.4f  valid NLL %.4f", epoch, rec.train_elbo, rec.valid_nll)
        if on_epoch is not None:
            on_epoch(rec, ckpt)

    final = make_checkpoint(model, cfg, variant, moments, step, max(start, cfg.epochs), rng, best_nll, best_epoch)
    return TrainResult(final, best_ckpt if best_ckpt is not None else final, records)


class _StaleBeta:
    """Topic matrices computed once per epoch from detached copies of the embedding/alpha parameters.

    Minibatch gradients flow into the copies; ``grads()`` maps them back to the
    live parameter names.
    """

    def __init__(self, model: KGETM):
        live = dict(model.named_parameters())
        self.copies = {n: p.detach().clone().requires_grad_(True)
                       for n, p in live.items() if not n.startswith("encoder.")}
        self.betas = _betas_with(model, self.copies)

    def grads(self) -> dict[str, torch.Tensor]:
        out = {}
        for n, c in self.copies.items():
            if c.grad is not None:
                out[n] = c.grad
                c.grad = None
        return out


def _betas_with(model: KGETM, overrides: dict[str, torch.Tensor]):
    from torch.func import functional_call

    class _Betas(torch.nn.Module):
        def __init__(self, inner):
            super().__init__()
            self.inner = inner

        def forward(self):
            return self.inner.betas()

    wrapper = _Betas(model)
    return functional_call(wrapper, {f"inner.{k}": v for k, v in overrides.items()}, ())
