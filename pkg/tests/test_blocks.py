import numpy as np
import pytest

from conftest import max_grad_err, naive_selective_scan, np_causal_conv, np_rmsnorm, np_silu
from demansia import numerics as nm
from demansia.blocks import (
    BranchParams,
    VimBlockParams,
    directional_branch,
    make_mamba_block,
    make_vim_block,
    mamba_block,
    rmsnorm,
    vim_block,
)
from demansia.errors import DimensionError
from demansia.numerics import Tensor, rel_err
from demansia.ssm import SelectionParams


def np_branch(u, br, reverse=False):
    seq = u[::-1] if reverse else u
    seq = np_silu(np_causal_conv(seq, br.conv_w.data, br.conv_b.data))
    a = -np.exp(br.a_log.data)
    s = br.selection
    y, _ = naive_selective_scan(seq, a, s.w_b.data, s.w_c.data, s.w_delta.data, s.delta_bias.data)
    return y[::-1] if reverse else y


# ---------------------------------------------------------------------------
# single-direction block
# ---------------------------------------------------------------------------


def test_mamba_block_zero_input_is_zero():
    p = make_mamba_block(np.random.default_rng(0), d_model=3, d_inner=6, n_state=2)
    out = mamba_block(Tensor(np.zeros((5, 3))), p)
    assert np.array_equal(out.data, np.zeros((5, 3)))


def test_mamba_block_closed_gate_silences_output():
    rng = np.random.default_rng(1)
    p = make_mamba_block(rng, d_model=3, d_inner=4, n_state=2)
    # main-path rows stay, gate rows forced to a large negative pre-activation
    w = p.in_proj_w.data.copy()
    b = p.in_proj_b.data.copy()
    w[4:] = 0.0
    b[4:] = -60.0
    p.in_proj_w, p.in_proj_b = Tensor(w), Tensor(b)
    out = mamba_block(Tensor(rng.uniform(-1, 1, (6, 3))), p)
    assert np.max(np.abs(out.data)) <= 1e-12


def test_mamba_block_matches_composition_oracle():
    rng = np.random.default_rng(2)
    p = make_mamba_block(rng, d_model=3, d_inner=6, n_state=2)
    x = rng.uniform(-1, 1, (4, 3))
    got = mamba_block(Tensor(x), p).data

    ug = x @ p.in_proj_w.data.T + p.in_proj_b.data
    u, g = ug[:, :6], ug[:, 6:]
    y = np_branch(u, p.branch)
    want = (y * np_silu(g)) @ p.out_proj_w.data.T + p.out_proj_b.data
    assert rel_err(got, want) <= 1e-12


def test_mamba_block_rejects_width_mismatch():
    p = make_mamba_block(np.random.default_rng(3), d_model=3, d_inner=6, n_state=2)
    with pytest.raises(DimensionError):
        mamba_block(Tensor(np.zeros((4, 5))), p)


# ---------------------------------------------------------------------------
# bidirectional block
# ---------------------------------------------------------------------------


def test_vim_block_zeroed_out_proj_is_identity():
    rng = np.random.default_rng(4)
    p = make_vim_block(rng, d_model=4, d_inner=8, n_state=2)
    p.out_proj_w = Tensor(np.zeros_like(p.out_proj_w.data))
    x = rng.uniform(-1, 1, (5, 4))
    assert np.array_equal(vim_block(Tensor(x), p).data, x)


def test_vim_block_reversal_symmetry_under_parameter_copy():
    rng = np.random.default_rng(5)
    p = make_vim_block(rng, d_model=3, d_inner=6, n_state=2)
    p.backward_branch = BranchParams(
        conv_w=p.forward_branch.conv_w,
        conv_b=p.forward_branch.conv_b,
        selection=SelectionParams(
            p.forward_branch.selection.w_b,
            p.forward_branch.selection.w_c,
            p.forward_branch.selection.w_delta,
            p.forward_branch.selection.delta_bias,
        ),
        a_log=p.forward_branch.a_log,
    )
    x = rng.uniform(-1, 1, (7, 3))
    straight = vim_block(Tensor(x), p).data
    flipped = vim_block(Tensor(x[::-1].copy()), p).data
    assert rel_err(flipped, straight[::-1]) <= 1e-10


def test_vim_block_matches_composition_oracle():
    rng = np.random.default_rng(6)
    p = make_vim_block(rng, d_model=3, d_inner=6, n_state=2)
    x = rng.uniform(-1, 1, (4, 3))
    got = vim_block(Tensor(x), p).data

    r = np_rmsnorm(x, p.norm_scale.data)
    ug = r @ p.in_proj_w.data.T + p.in_proj_b.data
    u, g = ug[:, :6], ug[:, 6:]
    sg = np_silu(g)
    merged = np_branch(u, p.forward_branch) * sg + np_branch(u, p.backward_branch, reverse=True) * sg
    want = x + merged @ p.out_proj_w.data.T + p.out_proj_b.data
    assert rel_err(got, want) <= 1e-12


def test_vim_block_parallel_scan_matches_sequential():
    rng = np.random.default_rng(7)
    p = make_vim_block(rng, d_model=3, d_inner=6, n_state=2)
    x = Tensor(rng.uniform(-1, 1, (9, 3)))
    assert rel_err(vim_block(x, p).data, vim_block(x, p, parallel=True).data) <= 1e-10


def test_directional_branch_causality():
    rng = np.random.default_rng(8)
    p = make_vim_block(rng, d_model=3, d_inner=5, n_state=2)
    u = rng.uniform(-1, 1, (8, 5))
    t = 4
    bump = u.copy()
    bump[t] += 0.5

    fwd_base = directional_branch(Tensor(u), p.forward_branch).data
    fwd_bump = directional_branch(Tensor(bump), p.forward_branch).data
    assert np.array_equal(fwd_base[:t], fwd_bump[:t])
    assert not np.array_equal(fwd_base[t:], fwd_bump[t:])

    bwd_base = directional_branch(Tensor(u), p.backward_branch, reverse=True).data
    bwd_bump = directional_branch(Tensor(bump), p.backward_branch, reverse=True).data
    assert np.array_equal(bwd_base[t + 1 :], bwd_bump[t + 1 :])
    assert not np.array_equal(bwd_base[: t + 1], bwd_bump[: t + 1])


def test_rmsnorm_rows_have_unit_rms():
    rng = np.random.default_rng(9)
    x = rng.uniform(-3, 3, (6, 8))
    y = rmsnorm(Tensor(x), Tensor(np.ones(8))).data
    rms = np.sqrt((y * y).mean(axis=1))
    assert np.max(np.abs(rms - 1.0)) <= 1e-5


def test_vim_block_gradients_pass_oracle():
    rng = np.random.default_rng(10)
    d_model, d_inner, n_state, m = 3, 6, 2, 4
    ref = make_vim_block(rng, d_model, d_inner, n_state)
    x = rng.uniform(-1, 1, (m, d_model))

    arrays = [
        x,
        ref.norm_scale.data,
        ref.in_proj_w.data,
        ref.in_proj_b.data,
        ref.out_proj_w.data,
        ref.out_proj_b.data,
    ]
    for br in (ref.forward_branch, ref.backward_branch):
        arrays += [
            br.conv_w.data,
            br.conv_b.data,
            br.selection.w_b.data,
            br.selection.w_c.data,
            br.selection.w_delta.data,
            br.selection.delta_bias.data,
            br.a_log.data,
        ]

    def f(xt, norm, ipw, ipb, opw, opb, *rest):
        branches = []
        for i in range(2):
            cw, cb, wb, wc, wd, db, al = rest[i * 7 : (i + 1) * 7]
            branches.append(BranchParams(cw, cb, SelectionParams(wb, wc, wd, db), al))
        p = VimBlockParams(norm, ipw, ipb, branches[0], branches[1], opw, opb)
        return nm.sum_all(nm.silu(vim_block(xt, p)))

    assert max_grad_err(f, *arrays) <= 1e-4
