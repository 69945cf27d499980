import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demansia.errors import ConfigError, DimensionError
from demansia.model import (
    DeMansia,
    DeMansiaConfig,
    PRESETS,
    assemble_sequence,
    make_model,
    parameter_count,
    patch_embed,
    predict,
    preset,
)
from demansia.numerics import Tensor, rel_err


MICRO = PRESETS["micro"]


def stem_receptive_field(cfg, g):
    """Pixel interval covered by grid index g: interval propagation through
    the stem (kernel 3, padding 1, per-stage stride)."""
    lo = hi = g
    for _, _, _, stride in reversed(cfg.stem_spec):
        lo = stride * lo - 1
        hi = stride * hi + 1
    return lo, hi


# ---------------------------------------------------------------------------
# config and presets
# ---------------------------------------------------------------------------


def test_config_derived_quantities():
    cfg = MICRO
    assert cfg.grid == 8 and cfg.n_patches == 64 and cfg.cls_index == 32
    assert cfg.d_inner == 64
    strides = [s for (_, _, _, s) in cfg.stem_spec]
    assert np.prod(strides) == cfg.patch_size


def test_config_rejects_bad_combinations():
    with pytest.raises(ConfigError):
        DeMansiaConfig(32, 2, 30, 4, 10, 8)  # not divisible
    with pytest.raises(ConfigError):
        DeMansiaConfig(30, 2, 32, 4, 10, 8)  # stem channels
    with pytest.raises(ConfigError):
        DeMansiaConfig(32, 2, 36, 3, 10, 8)  # non power-of-two patch
    with pytest.raises(ConfigError):
        preset("giant")


def test_tiny_preset_stride_schedule_gives_196_tokens():
    cfg = PRESETS["tiny"]
    assert [s for (_, _, _, s) in cfg.stem_spec] == [2, 2, 2, 2]
    assert cfg.n_patches == 14 * 14 == 196


def test_preset_table_rows():
    assert PRESETS["tiny"].d_model == 192 and PRESETS["tiny"].n_layers == 24
    assert PRESETS["tiny"].image_size == 224 and PRESETS["tiny-384"].image_size == 384
    assert PRESETS["small"].d_model == 384 and PRESETS["small-384"].n_layers == 24


# ---------------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------------


def test_patch_embed_zero_image_zero_biases():
    model = make_model(MICRO, seed=0)
    out = patch_embed(np.zeros((32, 32, 3)), model)
    assert out.shape == (64, 32)
    assert np.array_equal(out.data, np.zeros((64, 32)))


def test_patch_embed_bright_pixel_respects_receptive_field():
    model = make_model(MICRO, seed=1)
    y, x = 20, 9
    img = np.zeros((32, 32, 3))
    img[y, x] = 1.0
    emb = patch_embed(img, model).data.reshape(8, 8, 32)
    row_nonzero = np.abs(emb).sum(axis=(1, 2)) > 0
    col_nonzero = np.abs(emb).sum(axis=(0, 2)) > 0
    for g in range(8):
        lo, hi = stem_receptive_field(MICRO, g)
        if not (lo <= y <= hi):
            assert not row_nonzero[g]
        if not (lo <= x <= hi):
            assert not col_nonzero[g]
    # the cell whose field is centered on the pixel definitely sees it
    assert np.abs(emb[y // 4, x // 4]).sum() > 0


def test_patch_embed_rejects_wrong_size():
    model = make_model(MICRO, seed=0)
    with pytest.raises(ConfigError):
        patch_embed(np.zeros((16, 16, 3)), model)


# ---------------------------------------------------------------------------
# sequence assembly
# ---------------------------------------------------------------------------


def test_assemble_inserts_zero_class_row_mid_sequence():
    model = make_model(MICRO, seed=0)
    model.seq.cls_token = Tensor(np.zeros((1, 32)))
    model.seq.pos_embed = Tensor(np.zeros((65, 32)))
    patches = np.random.default_rng(0).uniform(-1, 1, (64, 32))
    out = assemble_sequence(Tensor(patches), model.seq).data
    c = MICRO.cls_index
    assert np.array_equal(out[:c], patches[:c])
    assert np.array_equal(out[c], np.zeros(32))
    assert np.array_equal(out[c + 1 :], patches[c:])


def test_assemble_center_placement_for_four_patches():
    cfg = DeMansiaConfig(16, 1, 8, 4, 4, 2)
    assert cfg.n_patches == 4 and cfg.cls_index == 2
    model = make_model(cfg, seed=0)
    model.seq.pos_embed = Tensor(np.zeros((5, 16)))
    patches = np.arange(4 * 16, dtype=float).reshape(4, 16)
    out = assemble_sequence(Tensor(patches), model.seq).data
    # order: p1, p2, cls, p3, p4
    assert np.array_equal(out[0], patches[0]) and np.array_equal(out[1], patches[1])
    assert np.array_equal(out[2], model.seq.cls_token.data[0])
    assert np.array_equal(out[3], patches[2]) and np.array_equal(out[4], patches[3])


def test_assemble_additive_positional_identity():
    model = make_model(MICRO, seed=2)
    rng = np.random.default_rng(3)
    model.seq.pos_embed = Tensor(rng.uniform(-1, 1, (65, 32)))
    patches = rng.uniform(-1, 1, (64, 32))
    out = assemble_sequence(Tensor(patches), model.seq).data
    c = MICRO.cls_index
    without = np.concatenate([patches[:c], model.seq.cls_token.data, patches[c:]])
    assert rel_err(out - without, model.seq.pos_embed.data) <= 1e-15


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_micro_forward_shapes():
    model = make_model(MICRO, seed=4)
    img = np.random.default_rng(5).uniform(0, 1, (32, 32, 3))
    cls, patch = model.forward(img)
    assert cls.shape == (10,)
    assert patch.shape == (64, 10)


def test_forward_zero_heads_zero_logits():
    model = make_model(MICRO, seed=6)
    for t in (model.heads.aux_w, model.heads.aux_b, model.heads.class_w, model.heads.class_b):
        t.data = np.zeros_like(t.data)
    img = np.random.default_rng(7).uniform(0, 1, (32, 32, 3))
    cls, patch = model.forward(img)
    assert np.array_equal(cls.data, np.zeros(10))
    assert np.array_equal(patch.data, np.zeros((64, 10)))


def test_forward_distinguishes_images():
    model = make_model(MICRO, seed=8)
    rng = np.random.default_rng(9)
    a, _ = model.forward(rng.uniform(0, 1, (32, 32, 3)))
    b, _ = model.forward(rng.uniform(0, 1, (32, 32, 3)))
    assert not np.allclose(a.data, b.data)


def test_every_preset_satisfies_shape_contract():
    # heavyweight: full forward through each published variant plus micro
    for name, cfg in PRESETS.items():
        model = make_model(cfg, seed=0, requires_grad=False)
        img = np.random.default_rng(1).uniform(0, 1, (cfg.image_size, cfg.image_size, 3))
        cls, patch = model.forward(img)
        assert cls.shape == (cfg.n_classes,), name
        assert patch.shape == (cfg.n_patches, cfg.n_classes), name
        assert model.seq.pos_embed.shape == (cfg.n_patches + 1, cfg.d_model), name


# ---------------------------------------------------------------------------
# inference fusion
# ---------------------------------------------------------------------------


def test_predict_zero_patches_passes_class_logits_bitwise():
    rng = np.random.default_rng(10)
    cls = rng.uniform(-3, 3, 10)
    fused = predict(Tensor(cls), Tensor(np.zeros((64, 10))))
    assert np.array_equal(fused.data, cls)


def test_predict_half_of_max():
    cls = np.zeros(5)
    patch = np.full((7, 5), -1.0)
    patch[3, 2] = 2.0
    fused = predict(Tensor(cls), Tensor(patch))
    assert fused.data[2] == 1.0
    assert np.all(fused.data[[0, 1, 3, 4]] == -0.5)


def test_predict_matches_per_class_max_loop():
    rng = np.random.default_rng(11)
    cls = rng.uniform(-2, 2, 6)
    patch = rng.uniform(-2, 2, (9, 6))
    fused = predict(Tensor(cls), Tensor(patch)).data
    for k in range(6):
        best = max(patch[j, k] for j in range(9))
        assert fused[k] == cls[k] + 0.5 * best


@given(st.integers(0, 5_000))
@settings(max_examples=30, deadline=None)
def test_predict_monotone_in_patch_logits(seed):
    rng = np.random.default_rng(seed)
    cls = rng.uniform(-2, 2, 4)
    patch = rng.uniform(-2, 2, (5, 4))
    base = predict(Tensor(cls), Tensor(patch)).data
    bumped = patch.copy()
    j, k = rng.integers(5), rng.integers(4)
    bumped[j, k] += float(rng.uniform(0, 3))
    after = predict(Tensor(cls), Tensor(bumped)).data
    assert np.all(after >= base - 1e-15)


def test_predict_argmax_shift_invariant():
    rng = np.random.default_rng(12)
    cls = rng.uniform(-2, 2, 8)
    patch = rng.uniform(-2, 2, (6, 8))
    base = np.argmax(predict(Tensor(cls), Tensor(patch)).data)
    shifted = np.argmax(predict(Tensor(cls + 13.5), Tensor(patch + 13.5)).data)
    assert base == shifted


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------


def micro_hand_tally():
    d, j, n_cls, n_state, d_inner, width = 32, 64, 10, 8, 64, 4
    stem = (4 * 3 * 9 + 4) + (8 * 4 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32)
    embeddings = d + (j + 1) * d
    per_branch = (d_inner * width + d_inner) + 2 * (n_state * d_inner) + d_inner + d_inner + d_inner * n_state
    per_block = d + (2 * d_inner * d + 2 * d_inner) + 2 * per_branch + (d * d_inner + d)
    heads = 2 * (n_cls * d + n_cls)
    return stem + embeddings + 4 * per_block + d + heads


def test_parameter_count_micro_matches_hand_tally():
    model = make_model(MICRO, seed=13)
    assert parameter_count(model) == micro_hand_tally()


def test_parameter_count_tiny_anchor():
    model = make_model(PRESETS["tiny"], seed=0, requires_grad=False)
    n = parameter_count(model)
    assert abs(n - 8.06e6) / 8.06e6 <= 0.10


def test_parameter_count_zero_layer_degenerate():
    cfg = DeMansiaConfig(32, 0, 32, 4, 10, 8)
    model = make_model(cfg, seed=0)
    stem = (4 * 3 * 9 + 4) + (8 * 4 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32)
    want = stem + 32 + 65 * 32 + 32 + 2 * (10 * 32 + 10)
    assert parameter_count(model) == want


def test_load_state_validates_names_and_shapes():
    model = make_model(MICRO, seed=14)
    state = model.state_arrays()
    missing = dict(state)
    missing.pop("cls_token")
    with pytest.raises(ConfigError):
        model.load_state(missing)
    bad = dict(state)
    bad["cls_token"] = np.zeros((2, 32))
    with pytest.raises(DimensionError):
        model.load_state(bad)
