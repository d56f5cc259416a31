"""Select stage: conditional embedding plus mixture-of-experts recombination.

Endogenous history is projected into an exogenous-conditioned latent space
(one space per exogenous type), then K expert projections are convexly
recombined per node and step by a dense softmax gate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {
    "relu": ad.relu,
    "identity": lambda t: t,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "leaky-relu": ad.leaky_relu,
}


@dataclass
class CondEmbedParams:
    """Affine projections fusing endogenous and exogenous streams into width H."""

    w_x: Tensor               # (F, H)
    w_e: Tensor               # (F_exo, H)
    b: Tensor                 # (H,)
    activation: str = "relu"
    keep_prob: float = 0.9

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_e": self.w_e,
                f"{prefix}.b": self.b}


@dataclass
class ExpertBank:
    """K expert projections (H, H) and the gate map (H, K)."""

    experts: list[Tensor]
    gate: Tensor

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.expert{k}": w for k, w in enumerate(self.experts)}
        out[f"{prefix}.gate"] = self.gate
        return out


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_cond_embed(f_in: int, f_exo: int, hidden: int, rng: np.random.Generator,
                    activation: str = "relu", keep_prob: float = 0.9) -> CondEmbedParams:
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    return CondEmbedParams(
        w_x=_uniform(rng, (f_in, hidden), f_in),
        w_e=_uniform(rng, (f_exo, hidden), max(f_exo, 1)),
        b=Tensor(np.zeros(hidden), requires_grad=True),
        activation=activation,
        keep_prob=keep_prob,
    )


def init_expert_bank(hidden: int, n_experts: int, rng: np.random.Generator) -> ExpertBank:
    if n_experts < 1:
        raise ValueError("at least one expert required")
    return ExpertBank(
        experts=[_uniform(rng, (hidden, hidden), hidden) for _ in range(n_experts)],
        gate=_uniform(rng, (hidden, n_experts), hidden),
    )


def _pad_time(t: Tensor, length: int, side: str) -> Tensor:
    """Zero-pad along the time axis (second to last) to the requested length."""
    current = t.shape[-2]
    if current == length:
        return t
    if current > length:
        raise ValueError(f"cannot pad length {current} down to {length}")
    pad_shape = t.shape[:-2] + (length - current,) + t.shape[-1:]
    zeros = Tensor(np.zeros(pad_shape))
    parts = [zeros, t] if side == "head" else [t, zeros]
    return ad.concat(parts, axis=-2)


def conditional_embed(x: Tensor, e: Tensor, params: CondEmbedParams, *,
                      pad_side: str = "head", train: bool = False,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
    """Dropout(Act(x W_x + e W_e + b)) with element-wise add fusion.

    When the two streams differ in length the shorter one is zero-padded
    along time: at the head for the past branch, at the tail for the future.
    """
    if x.shape[-1] != params.w_x.shape[0]:
        raise ValueError(
            f"endogenous feature dim {x.shape[-1]} != {params.w_x.shape[0]}")
    if e.shape[-1] != params.w_e.shape[0]:
        raise ValueError(
            f"exogenous feature dim {e.shape[-1]} != {params.w_e.shape[0]}")
    length = max(x.shape[-2], e.shape[-2])
    x = _pad_time(x, length, pad_side)
    e = _pad_time(e, length, pad_side)
    pre = ad.add(ad.add(ad.matmul(x, params.w_x), ad.matmul(e, params.w_e)), params.b)
    act = ACTIVATIONS[params.activation](pre)
    if train and params.keep_prob < 1.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an explicit rng")
        return ad.dropout(act, params.keep_prob, rng, train=True)
    return act


def moe_gate(x_tau: Tensor, gate: Tensor) -> Tensor:
    """Per-(node, step) softmax gate over the K experts."""
    return ad.softmax(ad.matmul(x_tau, gate), axis=-1)


def moe_select(x_tau: Tensor, bank: ExpertBank, g: Tensor) -> Tensor:
    """Convex recombination sum_k g_k * (x W_k) at every node and step.

    Terms are accumulated order-canonically so relabeling the experts
    (with their gate rows) cannot change the output bits.
    """
    terms = [ad.mul(g[..., k:k + 1], ad.matmul(x_tau, w))
             for k, w in enumerate(bank.experts)]
    return ad.ordered_sum(terms)


def select_stage(x: Tensor, e: Tensor, embed: CondEmbedParams, bank: ExpertBank, *,
                 pad_side: str, train: bool = False,
                 rng: Optional[np.random.Generator] = None,
                 bypass_selector: bool = False) -> Tensor:
    """Full select stage; the ablation flag passes the embedding through."""
    x_tau = conditional_embed(x, e, embed, pad_side=pad_side, train=train, rng=rng)
    if bypass_selector:
        return x_tau
    return moe_select(x_tau, bank, moe_gate(x_tau, bank.gate))
