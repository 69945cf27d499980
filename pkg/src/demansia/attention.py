"""Single-head and multi-head attention baseline plus an analytic op counter.

Sequences are row-major: x is (n, d_model) and projections act per row,
Q = x W_q^T + b_q. The score scale divides by sqrt(d_model) by default, the
literal reading of the source formulation; `scale_by_dk` switches to the
conventional sqrt(d_K) for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import DimensionError
from .numerics import Tensor

__all__ = [
    "AttentionParams",
    "make_attention_params",
    "project_qkv",
    "scaled_dot_attention",
    "multi_head_attention",
    "attention_flop_count",
]


@dataclass
class AttentionParams:
    """Per-head projection weights/biases plus the shared output map.

    w_q[i], w_k[i]: (d_k, d_model); w_v[i]: (d_v, d_model); biases match the
    projected widths. w_o: (h * d_v, d_model) applied as rows @ w_o; b_o: (d_model,).
    """

    d_model: int
    d_k: int
    d_v: int
    h: int
    w_q: list[Tensor] = field(repr=False)
    w_k: list[Tensor] = field(repr=False)
    w_v: list[Tensor] = field(repr=False)
    b_q: list[Tensor] = field(repr=False)
    b_k: list[Tensor] = field(repr=False)
    b_v: list[Tensor] = field(repr=False)
    w_o: Tensor = field(repr=False)
    b_o: Tensor = field(repr=False)
    scale_by_dk: bool = False

    def __post_init__(self):
        if self.h < 1:
            raise DimensionError(f"head count must be >= 1, got {self.h}")
        for name, mats, rows in (("w_q", self.w_q, self.d_k), ("w_k", self.w_k, self.d_k), ("w_v", self.w_v, self.d_v)):
            if len(mats) != self.h:
                raise DimensionError(f"{name} must hold {self.h} heads, got {len(mats)}")
            for w in mats:
                if w.shape != (rows, self.d_model):
                    raise DimensionError(f"{name} head shape {w.shape} != ({rows}, {self.d_model})")
        if self.w_o.shape != (self.h * self.d_v, self.d_model):
            raise DimensionError(f"w_o shape {self.w_o.shape} != ({self.h * self.d_v}, {self.d_model})")
        if self.b_o.shape != (self.d_model,):
            raise DimensionError(f"b_o shape {self.b_o.shape} != ({self.d_model},)")

    @property
    def scale_width(self) -> int:
        return self.d_k if self.scale_by_dk else self.d_model


def make_attention_params(
    rng: np.random.Generator,
    d_model: int,
    d_k: int,
    d_v: int,
    h: int,
    scale_by_dk: bool = False,
    requires_grad: bool = False,
) -> AttentionParams:
    def mat(rows, cols):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(cols), (rows, cols)), requires_grad=requires_grad)

    def vec(size):
        return Tensor(np.zeros(size), requires_grad=requires_grad)

    return AttentionParams(
        d_model=d_model,
        d_k=d_k,
        d_v=d_v,
        h=h,
        w_q=[mat(d_k, d_model) for _ in range(h)],
        w_k=[mat(d_k, d_model) for _ in range(h)],
        w_v=[mat(d_v, d_model) for _ in range(h)],
        b_q=[vec(d_k) for _ in range(h)],
        b_k=[vec(d_k) for _ in range(h)],
        b_v=[vec(d_v) for _ in range(h)],
        w_o=mat(h * d_v, d_model),
        b_o=vec(d_model),
        scale_by_dk=scale_by_dk,
    )


def project_qkv(x: Tensor, p: AttentionParams, head: int) -> tuple[Tensor, Tensor, Tensor]:
    """Row-wise projections of one head; biases broadcast over positions."""
    if x.ndim != 2 or x.shape[1] != p.d_model:
        raise DimensionError(f"input {x.shape} does not match embedding width {p.d_model}")
    if not 0 <= head < p.h:
        raise DimensionError(f"head {head} out of range for {p.h} heads")
    q = nm.add(nm.matmul(x, nm.transpose(p.w_q[head])), p.b_q[head])
    k = nm.add(nm.matmul(x, nm.transpose(p.w_k[head])), p.b_k[head])
    v = nm.add(nm.matmul(x, nm.transpose(p.w_v[head])), p.b_v[head])
    return q, k, v


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, scale_width: int) -> Tensor:
    """softmax(q k^T / sqrt(scale_width)) v over matching sequence lengths."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query width {q.shape} differs from key width {k.shape}")
    if not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise DimensionError(
            f"sequence lengths differ: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(scale_width))
    return nm.matmul(nm.softmax_rows(scores), v)


def multi_head_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Concatenate per-head attention outputs along width, then project out."""
    heads = []
    for i in range(p.h):
        q, k, v = project_qkv(x, p, i)
        heads.append(scaled_dot_attention(q, k, v, p.scale_width))
    stacked = heads[0] if p.h == 1 else nm.concat(heads, axis=1)
    return nm.add(nm.matmul(stacked, p.w_o), p.b_o)


def attention_flop_count(n: int, p: AttentionParams) -> int:
    """Closed-form multiply-add tally of one multi-head attention application.

    Convention (shared with the instrumented oracle): a length-L dot costs
    2L (L multiplies, L adds), every elementwise scale costs 1, and the
    row-wise softmax is charged 1 per entry. Scores dominate at 2 d_k n^2
    per head and the weighted sum at 2 d_v n^2, so the total grows as n^2.
    """
    if n < 1:
        raise DimensionError(f"sequence length must be >= 1, got {n}")
    proj = 2 * (2 * n * p.d_k * p.d_model + n * p.d_k) + 2 * n * p.d_v * p.d_model + n * p.d_v
    scores = 2 * p.d_k * n * n
    scale_ops = n * n
    softmax_ops = n * n
    weighted = 2 * p.d_v * n * n
    out_proj = 2 * n * p.d_model * (p.h * p.d_v) + n * p.d_model
    return p.h * (proj + scores + scale_ops + softmax_ops + weighted) + out_proj
