"""Gated selective-scan blocks: the single-direction block and its
bidirectional residual variant.

Single-direction dataflow: project to a doubled inner width, split into a
main path and a gate path, run the main path through a depthwise causal
convolution, SiLU, and the selective scan, multiply by the SiLU'd gate,
project back. The bidirectional block normalizes first, runs one branch on
the sequence as-is and an independently parameterized branch on the reversed
sequence (output re-reversed), gates each, merges by summation, and adds the
residual.

State matrices are stored as log magnitudes (a_log) and materialized as
A = -exp(a_log), so A stays strictly negative no matter what training does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError
from .numerics import Tensor
from .ssm import SelectionParams, selective_scan_parallel, selective_scan_sequential

__all__ = [
    "BranchParams",
    "MambaBlockParams",
    "VimBlockParams",
    "rmsnorm",
    "directional_branch",
    "mamba_block",
    "vim_block",
    "make_branch",
    "make_mamba_block",
    "make_vim_block",
    "init_delta_bias",
]

RMS_EPS = 1e-6


def rmsnorm(x: Tensor, weight: Tensor) -> Tensor:
    """Scale each row to unit root-mean-square, then apply a learned gain."""
    if x.ndim != 2 or weight.shape != (x.shape[1],):
        raise DimensionError(f"rmsnorm: x {x.shape} does not match weight {weight.shape}")
    d = x.shape[1]
    ms = nm.scale(nm.sum_axis(nm.mul(x, x), 1), 1.0 / d)
    inv = nm.powc(nm.shift(ms, RMS_EPS), -0.5)
    return nm.mul(nm.mul(x, nm.expand(inv, 1, d)), weight)


@dataclass
class BranchParams:
    """One directional unit: depthwise causal conv, selection, state matrix."""

    conv_w: Tensor  # (d_inner, conv_width)
    conv_b: Tensor  # (d_inner,)
    selection: SelectionParams
    a_log: Tensor  # (d_inner, n_state); A = -exp(a_log)

    @property
    def A(self) -> Tensor:
        return nm.neg(nm.exp(self.a_log))


@dataclass
class MambaBlockParams:
    in_proj_w: Tensor  # (2 d_inner, d_model): main path rows first, gate rows second
    in_proj_b: Tensor
    branch: BranchParams
    out_proj_w: Tensor  # (d_model, d_inner)
    out_proj_b: Tensor

    @property
    def d_model(self) -> int:
        return self.in_proj_w.shape[1]

    @property
    def d_inner(self) -> int:
        return self.in_proj_w.shape[0] // 2


@dataclass
class VimBlockParams:
    norm_scale: Tensor  # (d_model,)
    in_proj_w: Tensor  # (2 d_inner, d_model), shared by both directions
    in_proj_b: Tensor
    forward_branch: BranchParams
    backward_branch: BranchParams
    out_proj_w: Tensor  # (d_model, d_inner)
    out_proj_b: Tensor

    @property
    def d_model(self) -> int:
        return self.in_proj_w.shape[1]

    @property
    def d_inner(self) -> int:
        return self.in_proj_w.shape[0] // 2


def _project_split(x: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    d_inner = w.shape[0] // 2
    ug = nm.add(nm.matmul(x, nm.transpose(w)), b)
    return nm.narrow(ug, 1, 0, d_inner), nm.narrow(ug, 1, d_inner, d_inner)


def directional_branch(
    u: Tensor, branch: BranchParams, reverse: bool = False, parallel: bool = False, fanout: int = 2
) -> Tensor:
    """conv -> SiLU -> selective scan, run along the chosen direction.

    The reversed branch convolves and scans the flipped sequence, so it is
    causal with respect to the reversed order; its output is flipped back.
    """
    seq = nm.reverse(u, 0) if reverse else u
    seq = nm.silu(nm.conv1d_causal(seq, branch.conv_w, branch.conv_b))
    if parallel:
        y = selective_scan_parallel(seq, branch.A, branch.selection, fanout=fanout)
    else:
        y = selective_scan_sequential(seq, branch.A, branch.selection)
    return nm.reverse(y, 0) if reverse else y


def mamba_block(x: Tensor, p: MambaBlockParams, parallel: bool = False) -> Tensor:
    """Gated single-direction block (no norm, no residual)."""
    if x.ndim != 2 or x.shape[1] != p.d_model:
        raise DimensionError(f"input {x.shape} does not match block width {p.d_model}")
    u, g = _project_split(x, p.in_proj_w, p.in_proj_b)
    y = directional_branch(u, p.branch, parallel=parallel)
    gated = nm.mul(y, nm.silu(g))
    return nm.add(nm.matmul(gated, nm.transpose(p.out_proj_w)), p.out_proj_b)


def vim_block(x: Tensor, p: VimBlockParams, parallel: bool = False) -> Tensor:
    """Residual bidirectional block: x + out_proj(sum of gated branches)."""
    if x.ndim != 2 or x.shape[1] != p.d_model:
        raise DimensionError(f"input {x.shape} does not match block width {p.d_model}")
    u, g = _project_split(rmsnorm(x, p.norm_scale), p.in_proj_w, p.in_proj_b)
    yf = directional_branch(u, p.forward_branch, reverse=False, parallel=parallel)
    yb = directional_branch(u, p.backward_branch, reverse=True, parallel=parallel)
    sg = nm.silu(g)
    merged = nm.add(nm.mul(yf, sg), nm.mul(yb, sg))
    return nm.add(x, nm.add(nm.matmul(merged, nm.transpose(p.out_proj_w)), p.out_proj_b))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_delta_bias(rng: np.random.Generator, d: int, requires_grad: bool = False) -> Tensor:
    """Bias such that softplus(bias) lands log-uniformly in [1e-3, 0.1]."""
    target = np.exp(rng.uniform(math.log(1e-3), math.log(0.1), d))
    return Tensor(np.log(np.expm1(target)), requires_grad=requires_grad)


def make_branch(
    rng: np.random.Generator,
    d_inner: int,
    n_state: int,
    conv_width: int = 4,
    requires_grad: bool = False,
) -> BranchParams:
    def mat(rows, cols, std):
        return Tensor(rng.normal(0.0, std, (rows, cols)), requires_grad=requires_grad)

    sel = SelectionParams(
        w_b=mat(n_state, d_inner, 1.0 / math.sqrt(d_inner)),
        w_c=mat(n_state, d_inner, 1.0 / math.sqrt(d_inner)),
        w_delta=mat(1, d_inner, 1.0 / math.sqrt(d_inner)),
        delta_bias=init_delta_bias(rng, d_inner, requires_grad),
    )
    a_log = np.tile(np.log(np.arange(1, n_state + 1, dtype=float)), (d_inner, 1))
    return BranchParams(
        conv_w=mat(d_inner, conv_width, 1.0 / math.sqrt(conv_width)),
        conv_b=Tensor(np.zeros(d_inner), requires_grad=requires_grad),
        selection=sel,
        a_log=Tensor(a_log, requires_grad=requires_grad),
    )


def make_mamba_block(
    rng: np.random.Generator,
    d_model: int,
    d_inner: int,
    n_state: int,
    conv_width: int = 4,
    requires_grad: bool = False,
) -> MambaBlockParams:
    std_in, std_out = 1.0 / math.sqrt(d_model), 1.0 / math.sqrt(d_inner)
    return MambaBlockParams(
        in_proj_w=Tensor(rng.normal(0.0, std_in, (2 * d_inner, d_model)), requires_grad=requires_grad),
        in_proj_b=Tensor(np.zeros(2 * d_inner), requires_grad=requires_grad),
        branch=make_branch(rng, d_inner, n_state, conv_width, requires_grad),
        out_proj_w=Tensor(rng.normal(0.0, std_out, (d_model, d_inner)), requires_grad=requires_grad),
        out_proj_b=Tensor(np.zeros(d_model), requires_grad=requires_grad),
    )


def make_vim_block(
    rng: np.random.Generator,
    d_model: int,
    d_inner: int,
    n_state: int,
    conv_width: int = 4,
    requires_grad: bool = False,
) -> VimBlockParams:
    std_in, std_out = 1.0 / math.sqrt(d_model), 1.0 / math.sqrt(d_inner)
    return VimBlockParams(
        norm_scale=Tensor(np.ones(d_model), requires_grad=requires_grad),
        in_proj_w=Tensor(rng.normal(0.0, std_in, (2 * d_inner, d_model)), requires_grad=requires_grad),
        in_proj_b=Tensor(np.zeros(2 * d_inner), requires_grad=requires_grad),
        forward_branch=make_branch(rng, d_inner, n_state, conv_width, requires_grad),
        backward_branch=make_branch(rng, d_inner, n_state, conv_width, requires_grad),
        out_proj_w=Tensor(rng.normal(0.0, std_out, (d_model, d_inner)), requires_grad=requires_grad),
        out_proj_b=Tensor(np.zeros(d_model), requires_grad=requires_grad),
    )
