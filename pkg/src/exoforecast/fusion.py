"""Balance stage: combine the two branch forecasts into the final prediction.

The default is a context-aware balancer: a per-horizon-step sigmoid weight
alpha generated from the node-pooled sum of the branches, applied as
alpha * Y_p + (1 - alpha) * Y_f plus the unweighted sum as a residual.
Four alternative strategies (shared encoder, fixed equal weights, learnable
softmax weights, bidirectional per-step attention) are provided for the
strategy comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FUSION_STRATEGIES = ("context", "shared", "simple", "learnable", "attention")


@dataclass
class BalancerParams:
    """Bottleneck MLP generating the balancing weight."""

    w1: Tensor   # (D, width) where D = T_f, or 1 in per-sample-scalar mode
    b1: Tensor   # (width,)
    w2: Tensor   # (width, D)
    b2: Tensor   # (D,)
    scalar: bool = False

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


@dataclass
class AttentionParams:
    """Shared projection maps for the bidirectional attention strategy."""

    w_q: Tensor  # (C, C)
    w_k: Tensor
    w_v: Tensor

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k,
                f"{prefix}.w_v": self.w_v}


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_balancer(t_future: int, rng: np.random.Generator, reduction: int = 4,
                  scalar: bool = False) -> BalancerParams:
    dim = 1 if scalar else t_future
    width = max(dim // max(reduction, 1), 4)
    return BalancerParams(
        w1=_uniform(rng, (dim, width), dim),
        b1=Tensor(np.zeros(width), requires_grad=True),
        w2=_uniform(rng, (width, dim), width),
        b2=Tensor(np.zeros(dim), requires_grad=True),
        scalar=scalar,
    )


def init_attention(width: int, rng: np.random.Generator) -> AttentionParams:
    return AttentionParams(
        w_q=_uniform(rng, (width, width), width),
        w_k=_uniform(rng, (width, width), width),
        w_v=_uniform(rng, (width, width), width),
    )


def init_learnable_weights() -> Tensor:
    return Tensor(np.zeros(2), requires_grad=True)


def context_combine(y_p: Tensor, y_f: Tensor, alpha: Tensor) -> Tensor:
    """Apply alpha * Y_p + (1 - alpha) * Y_f + (Y_p + Y_f) for a given alpha.

    ``alpha`` must broadcast against the branch shapes.
    """
    residual = ad.add(y_p, y_f)
    weighted = ad.add(ad.mul(alpha, y_p), ad.mul(ad.sub(1.0, alpha), y_f))
    return ad.add(weighted, residual)


def context_balance(y_p: Tensor, y_f: Tensor,
                    params: BalancerParams) -> tuple[Tensor, Tensor]:
    """Context-aware fusion; returns (prediction, alpha).

    The two branches are summed, pooled over nodes into a per-step
    descriptor, passed through the bottleneck MLP and a sigmoid, and the
    resulting alpha is broadcast back across nodes.
    """
    if y_p.shape != y_f.shape:
        raise ValueError(f"branch shapes differ: {y_p.shape} vs {y_f.shape}")
    context = ad.add(y_p, y_f)                       # (..., N, T_f, 1)
    pooled = ad.mean(context, axis=-3)               # (..., T_f, 1)
    t_f = pooled.shape[-2]
    descriptor = ad.reshape(pooled, pooled.shape[:-2] + (1, t_f))
    if params.scalar:
        descriptor = ad.mean(descriptor, axis=-1, keepdims=True)
    hidden = ad.relu(ad.add(ad.matmul(descriptor, params.w1), params.b1))
    alpha_row = ad.sigmoid(ad.add(ad.matmul(hidden, params.w2), params.b2))
    # (..., 1, D) -> (..., 1 node, D steps, 1 channel); D=1 broadcasts over steps
    alpha_bc = ad.reshape(alpha_row, alpha_row.shape[:-2] + (1, alpha_row.shape[-1], 1))
    y_hat = context_combine(y_p, y_f, alpha_bc)
    alpha = ad.reshape(alpha_row, alpha_row.shape[:-2] + (alpha_row.shape[-1],))
    return y_hat, alpha


def fuse_simple(y_p: Tensor, y_f: Tensor) -> Tensor:
    """Fixed equal weights, no residual."""
    if y_p.shape != y_f.shape:
        raise ValueError(f"branch shapes differ: {y_p.shape} vs {y_f.shape}")
    return ad.add(ad.mul(y_p, 0.5), ad.mul(y_f, 0.5))


def fuse_learnable(y_p: Tensor, y_f: Tensor, w_init: Tensor) -> Tensor:
    """Softmax-normalized pair of weights plus the residual sum."""
    if y_p.shape != y_f.shape:
        raise ValueError(f"branch shapes differ: {y_p.shape} vs {y_f.shape}")
    w = ad.softmax(w_init, axis=-1)
    weighted = ad.add(ad.mul(w[0:1], y_p), ad.mul(w[1:2], y_f))
    return ad.add(weighted, ad.add(y_p, y_f))


def _directed_enhance(query_src: Tensor, target: Tensor,
                      params: AttentionParams) -> Tensor:
    """Enhance ``target`` with attention queried from the other stream.

    Per-step scores: channel-summed Q.K divided by sqrt(width), softmaxed
    over time, then applied pointwise to V with a residual connection.
    """
    width = target.shape[-1]
    q = ad.matmul(query_src, params.w_q)
    k = ad.matmul(target, params.w_k)
    v = ad.matmul(target, params.w_v)
    scores = ad.mul(ad.reduce_sum(ad.mul(q, k), axis=-1),
                    1.0 / np.sqrt(width))            # (..., T)
    att = ad.softmax(scores, axis=-1)
    att_col = ad.reshape(att, att.shape + (1,))
    return ad.add(target, ad.mul(att_col, v))


def attention_enhance(s_p: Tensor, s_f: Tensor, params: AttentionParams
                      ) -> tuple[Tensor, Tensor]:
    """Bidirectional enhancement of the two branch states."""
    if s_p.shape != s_f.shape:
        raise ValueError(f"branch shapes differ: {s_p.shape} vs {s_f.shape}")
    enhanced_p = _directed_enhance(s_f, s_p, params)   # future -> past
    enhanced_f = _directed_enhance(s_p, s_f, params)   # past -> future
    return enhanced_p, enhanced_f


def fuse_attention(y_p: Tensor, y_f: Tensor, params: AttentionParams) -> Tensor:
    """Average of the two attention-enhanced states."""
    enhanced_p, enhanced_f = attention_enhance(y_p, y_f, params)
    return ad.add(ad.mul(enhanced_p, 0.5), ad.mul(enhanced_f, 0.5))
