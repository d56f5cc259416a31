"""Pluggable spatio-temporal encoders mapping (N, T, H) to an (N, T_f, 1) forecast.

Two desk-scale kinds: a graph-convolutional recurrent encoder (``grugcn``)
and a graph-free per-node MLP over the flattened window (``mlp-mixer``).
Both share a two-stage readout whose penultimate features (N, T_f, H) are
exposed for the attention fusion strategy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BACKBONE_KINDS = ("grugcn", "mlp-mixer")


@dataclass
class BackboneSpec:
    kind: str
    hidden: int            # latent width H of the conditioned representation
    t_future: int
    mix_hidden: int = 32   # mlp-mixer bottleneck width

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")

    @property
    def needs_graph(self) -> bool:
        return self.kind == "grugcn"


@dataclass
class ReadoutParams:
    """Two-stage head: lift a feature vector to per-step width-H features,
    then project each step to one channel."""

    w_seq: Tensor   # (D, T_f * H)
    b_seq: Tensor   # (T_f * H,)
    w_out: Tensor   # (H, 1)
    b_out: Tensor   # (1,)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_seq": self.w_seq, f"{prefix}.b_seq": self.b_seq,
                f"{prefix}.w_out": self.w_out, f"{prefix}.b_out": self.b_out}


@dataclass
class GruGcnParams:
    w_s: Tensor     # (H, H) spatial mixing weights
    w_z: Tensor     # (2H, H) update gate
    b_z: Tensor
    w_r: Tensor     # (2H, H) reset gate
    b_r: Tensor
    w_c: Tensor     # (2H, H) candidate
    b_c: Tensor
    readout: ReadoutParams

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w_s": self.w_s,
               f"{prefix}.w_z": self.w_z, f"{prefix}.b_z": self.b_z,
               f"{prefix}.w_r": self.w_r, f"{prefix}.b_r": self.b_r,
               f"{prefix}.w_c": self.w_c, f"{prefix}.b_c": self.b_c}
        out.update(self.readout.parameters(f"{prefix}.readout"))
        return out


@dataclass
class MlpMixerParams:
    w1: Tensor      # (T * H, M)
    b1: Tensor
    w2: Tensor      # (M, M)
    b2: Tensor
    readout: ReadoutParams

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
               f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}
        out.update(self.readout.parameters(f"{prefix}.readout"))
        return out


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_readout(feat_dim: int, t_future: int, hidden: int,
                 rng: np.random.Generator) -> ReadoutParams:
    return ReadoutParams(
        w_seq=_uniform(rng, (feat_dim, t_future * hidden), feat_dim),
        b_seq=Tensor(np.zeros(t_future * hidden), requires_grad=True),
        w_out=_uniform(rng, (hidden, 1), hidden),
        b_out=Tensor(np.zeros(1), requires_grad=True),
    )


def init_grugcn(spec: BackboneSpec, rng: np.random.Generator) -> GruGcnParams:
    h = spec.hidden

    def gate():
        return (_uniform(rng, (2 * h, h), 2 * h),
                Tensor(np.zeros(h), requires_grad=True))

    w_z, b_z = gate()
    w_r, b_r = gate()
    w_c, b_c = gate()
    return GruGcnParams(
        w_s=_uniform(rng, (h, h), h),
        w_z=w_z, b_z=b_z, w_r=w_r, b_r=b_r, w_c=w_c, b_c=b_c,
        readout=init_readout(h, spec.t_future, h, rng),
    )


def init_mlp_mixer(spec: BackboneSpec, t_in: int, rng: np.random.Generator) -> MlpMixerParams:
    flat = t_in * spec.hidden
    m = spec.mix_hidden
    return MlpMixerParams(
        w1=_uniform(rng, (flat, m), flat),
        b1=Tensor(np.zeros(m), requires_grad=True),
        w2=_uniform(rng, (m, m), m),
        b2=Tensor(np.zeros(m), requires_grad=True),
        readout=init_readout(m, spec.t_future, spec.hidden, rng),
    )


def apply_readout(features: Tensor, readout: ReadoutParams, t_future: int,
                  hidden: int) -> tuple[Tensor, Tensor]:
    """Return (forecast (..., T_f, 1), penultimate features (..., T_f, H))."""
    lifted = ad.add(ad.matmul(features, readout.w_seq), readout.b_seq)
    penult = ad.reshape(lifted, features.shape[:-1] + (t_future, hidden))
    y = ad.add(ad.matmul(penult, readout.w_out), readout.b_out)
    return y, penult


def grugcn_step(h: Tensor, x_t: Tensor, adj: Tensor, params: GruGcnParams) -> Tensor:
    """One gated-recurrent update on the spatially mixed input.

    s_t = A x_t W_s, gates computed on [s_t, h], candidate with tanh,
    h_next = (1 - z) * h + z * candidate.
    """
    s = ad.matmul(ad.matmul(adj, x_t), params.w_s)
    cat = ad.concat([s, h], axis=-1)
    z = ad.sigmoid(ad.add(ad.matmul(cat, params.w_z), params.b_z))
    r = ad.sigmoid(ad.add(ad.matmul(cat, params.w_r), params.b_r))
    cat_r = ad.concat([s, ad.mul(r, h)], axis=-1)
    c = ad.tanh(ad.add(ad.matmul(cat_r, params.w_c), params.b_c))
    return ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, c))


def grugcn_forward(x: Tensor, adj: Tensor, params: GruGcnParams,
                   spec: BackboneSpec) -> tuple[Tensor, Tensor]:
    """Run the recurrence over time and read out from the last hidden state."""
    t_in = x.shape[-2]
    h = Tensor(np.zeros(x.shape[:-2] + (x.shape[-1],)))
    for t in range(t_in):
        h = grugcn_step(h, x[..., t, :], adj, params)
    return apply_readout(h, params.readout, spec.t_future, spec.hidden)


def mlp_mixer_forward(x: Tensor, params: MlpMixerParams,
                      spec: BackboneSpec) -> tuple[Tensor, Tensor]:
    """Two-layer per-node map over the flattened time-feature window."""
    flat = ad.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
    h1 = ad.relu(ad.add(ad.matmul(flat, params.w1), params.b1))
    h2 = ad.relu(ad.add(ad.matmul(h1, params.w2), params.b2))
    return apply_readout(h2, params.readout, spec.t_future, spec.hidden)


def backbone_forward(x_prime: Tensor, graph, params, spec: BackboneSpec
                     ) -> tuple[Tensor, Tensor]:
    """Dispatch on kind; returns (forecast, penultimate features)."""
    if spec.kind == "grugcn":
        if graph is None:
            raise ValueError("grugcn backbone requires a graph")
        return grugcn_forward(x_prime, graph, params, spec)
    if spec.kind == "mlp-mixer":
        return mlp_mixer_forward(x_prime, params, spec)
    raise ValueError(f"unknown backbone kind {spec.kind!r}")


def init_backbone(spec: BackboneSpec, t_in: int, rng: np.random.Generator):
    if spec.kind == "grugcn":
        return init_grugcn(spec, rng)
    return init_mlp_mixer(spec, t_in, rng)
