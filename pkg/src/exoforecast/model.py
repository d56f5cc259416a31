"""Full forecasting model: dual select stages, siamese encoders, fusion.

Also owns the parameter archive: a small versioned binary of named float64
tensors (see ``save_tensors`` for the byte layout) so trained models can be
reloaded bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import BackboneSpec, backbone_forward, init_backbone
from .fusion import (
    AttentionParams,
    BalancerParams,
    attention_enhance,
    context_balance,
    fuse_learnable,
    fuse_simple,
    init_attention,
    init_balancer,
    init_learnable_weights,
)
from .graphs import Graph, build_graph, row_normalize, with_self_loops
from .selector import (
    init_cond_embed,
    init_expert_bank,
    select_stage,
)

ARCHIVE_MAGIC = b"EXOF0001"


@dataclass
class ModelConfig:
    """Everything needed to rebuild the model architecture."""

    n_nodes: int
    past_exo_dim: int
    future_exo_dim: int
    endo_dim: int = 1
    t_past: int = 24
    t_future: int = 24
    hidden: int = 64
    experts: int = 4
    activation: str = "relu"
    keep_prob: float = 0.9
    backbone: str = "grugcn"
    mix_hidden: int = 32
    graph_kind: str = "pearson"
    graph_k: int = 8
    graph_embed_dim: int = 8
    fusion: str = "context"
    reduction: int = 4
    alpha_per_sample: bool = False
    use_selector: bool = True
    use_balancer: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ExoModel:
    """Conditional embedding -> expert selection -> siamese encoding -> fusion.

    The shared-parameter strategy routes both branches through the past
    branch's encoder; every other strategy keeps two independent encoders.
    """

    def __init__(self, config: ModelConfig,
                 target_series: Optional[np.ndarray] = None,
                 static_adjacency: Optional[np.ndarray] = None):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        self.embed_p = init_cond_embed(cfg.endo_dim, cfg.past_exo_dim, cfg.hidden,
                                       rng, cfg.activation, cfg.keep_prob)
        self.embed_f = init_cond_embed(cfg.endo_dim, cfg.future_exo_dim, cfg.hidden,
                                       rng, cfg.activation, cfg.keep_prob)
        self.bank_p = init_expert_bank(cfg.hidden, cfg.experts, rng)
        self.bank_f = init_expert_bank(cfg.hidden, cfg.experts, rng)
        self.spec = BackboneSpec(cfg.backbone, hidden=cfg.hidden,
                                 t_future=cfg.t_future, mix_hidden=cfg.mix_hidden)
        t_in = max(cfg.t_past, cfg.t_future)
        self.backbone_p = init_backbone(self.spec, t_in, rng)
        self.backbone_f = (None if cfg.fusion == "shared"
                           else init_backbone(self.spec, t_in, rng))
        self.balancer: Optional[BalancerParams] = None
        self.learnable_w: Optional[Tensor] = None
        self.attention: Optional[AttentionParams] = None
        if cfg.fusion == "context":
            self.balancer = init_balancer(cfg.t_future, rng, cfg.reduction,
                                          scalar=cfg.alpha_per_sample)
        elif cfg.fusion == "learnable":
            self.learnable_w = init_learnable_weights()
        elif cfg.fusion == "attention":
            self.attention = init_attention(cfg.hidden, rng)
        elif cfg.fusion not in ("shared", "simple"):
            raise ValueError(f"unknown fusion strategy {cfg.fusion!r}")
        self.graph = self._build_graph(target_series, static_adjacency, rng)

    def _build_graph(self, target_series, static_adjacency, rng) -> Optional[Graph]:
        if not self.spec.needs_graph:
            return None  # graph-free backbone
        cfg = self.config
        if static_adjacency is not None and cfg.graph_kind in ("pearson", "identity"):
            provenance = "pearson-topk" if cfg.graph_kind == "pearson" else "identity"
            return Graph(provenance, cfg.n_nodes, adjacency=static_adjacency)
        graph = build_graph(cfg.graph_kind, cfg.n_nodes,
                            target_series=target_series, k=cfg.graph_k,
                            embed_dim=cfg.graph_embed_dim, rng=rng)
        if graph.provenance in ("pearson-topk", "identity"):
            base = graph.adjacency if graph.adjacency is not None \
                else np.eye(cfg.n_nodes)
            # conv prep: self-loops then signed row normalization
            graph.adjacency = row_normalize(with_self_loops(base))
        return graph

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.embed_p.parameters("embed.p"))
        out.update(self.embed_f.parameters("embed.f"))
        out.update(self.bank_p.parameters("select.p"))
        out.update(self.bank_f.parameters("select.f"))
        out.update(self.backbone_p.parameters("backbone.p"))
        if self.backbone_f is not None:
            out.update(self.backbone_f.parameters("backbone.f"))
        if self.balancer is not None:
            out.update(self.balancer.parameters("balancer"))
        if self.learnable_w is not None:
            out["fusion.w_init"] = self.learnable_w
        if self.attention is not None:
            out.update(self.attention.parameters("fusion.attention"))
        if self.graph is not None:
            out.update(self.graph.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        if self.graph is not None and self.graph.adjacency is not None:
            return {"graph.static_adjacency": self.graph.adjacency}
        return {}

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    # -- forward ------------------------------------------------------------

    def forward(self, x, e_past, e_future, *, train: bool = False,
                rng: Optional[np.random.Generator] = None
                ) -> tuple[Tensor, Optional[Tensor]]:
        """Run the full pipeline; returns (prediction, alpha or None).

        Inputs may be numpy arrays or Tensors shaped (..., N, T, F).
        """
        cfg = self.config
        x = ad.as_tensor(x)
        e_past = ad.as_tensor(e_past)
        e_future = ad.as_tensor(e_future)
        x_p = select_stage(x, e_past, self.embed_p, self.bank_p,
                           pad_side="head", train=train, rng=rng,
                           bypass_selector=not cfg.use_selector)
        x_f = select_stage(x, e_future, self.embed_f, self.bank_f,
                           pad_side="tail", train=train, rng=rng,
                           bypass_selector=not cfg.use_selector)
        adj = self.graph.matrix() if self.graph is not None else None
        backbone_f = self.backbone_p if cfg.fusion == "shared" else self.backbone_f
        y_p, pen_p = backbone_forward(x_p, adj, self.backbone_p, self.spec)
        y_f, pen_f = backbone_forward(x_f, adj, backbone_f, self.spec)

        if not cfg.use_balancer:
            return ad.add(y_p, y_f), None
        if cfg.fusion == "context":
            return context_balance(y_p, y_f, self.balancer)
        if cfg.fusion in ("shared", "simple"):
            return fuse_simple(y_p, y_f), None
        if cfg.fusion == "learnable":
            return fuse_learnable(y_p, y_f, self.learnable_w), None
        # attention operates on the width-H penultimate readout features,
        # each enhanced state mapped through its branch's output head
        enh_p, enh_f = attention_enhance(pen_p, pen_f, self.attention)
        head_p = self.backbone_p.readout
        head_f = backbone_f.readout
        out_p = ad.add(ad.matmul(enh_p, head_p.w_out), head_p.b_out)
        out_f = ad.add(ad.matmul(enh_f, head_f.w_out), head_f.b_out)
        return ad.add(ad.mul(out_p, 0.5), ad.mul(out_f, 0.5)), None

    def predict(self, x, e_past, e_future) -> np.ndarray:
        """Eval-mode forward returning plain values."""
        y_hat, _ = self.forward(x, e_past, e_future, train=False)
        return y_hat.values


# ---------------------------------------------------------------------------
# Archive
# ---------------------------------------------------------------------------

def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Versioned binary archive of named tensors.

    Layout: magic ``EXOF0001``; uint32 LE tensor count; per tensor a uint16
    LE name length, the UTF-8 name, uint8 ndim, ndim uint32 LE dims, then
    the float64 LE values in C order. Entries are sorted by name.
    """
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(ARCHIVE_MAGIC))
        if magic != ARCHIVE_MAGIC:
            raise ValueError(f"{path} is not a model archive (magic {magic!r})")
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n_values = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n_values), dtype="<f8")
            out[name] = data.reshape(shape).copy()
    return out


def save_model(path, model: ExoModel) -> None:
    tensors = {name: t.values for name, t in model.parameters().items()}
    tensors.update(model.buffers())
    save_tensors(path, tensors)


def load_model(path, config: ModelConfig) -> ExoModel:
    """Rebuild a model from its config and parameter archive."""
    stored = load_tensors(path)
    adjacency = stored.pop("graph.static_adjacency", None)
    model = ExoModel(config, static_adjacency=adjacency)
    params = model.parameters()
    missing = set(params) ^ set(stored)
    if missing:
        raise ValueError(f"archive/model parameter mismatch: {sorted(missing)}")
    for name, tensor in params.items():
        if tensor.values.shape != stored[name].shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{tensor.values.shape} vs {stored[name].shape}")
        tensor.values = stored[name]
        tensor.grad = np.zeros_like(stored[name])
    return model
