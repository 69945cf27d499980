"""Full classifier: conv stem, centered class token, block stack, two heads.

An image runs through four stride-scheduled 3x3 conv stages whose stride
product equals the patch size, giving a row-major grid of patch embeddings.
The learnable class embedding is inserted at the middle of that sequence,
positional embeddings are added, and the sequence crosses the bidirectional
block stack. After a final norm the class row feeds the class head while
every patch row shares one aux head. Inference fuses the two:
``pred = class_logits + 0.5 * per-class max over patch logits``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .blocks import VimBlockParams, make_vim_block, rmsnorm, vim_block
from .errors import ConfigError, DimensionError
from .numerics import Tensor

__all__ = [
    "DeMansiaConfig",
    "SequenceState",
    "HeadParams",
    "DeMansia",
    "PRESETS",
    "preset",
    "make_model",
    "patch_embed",
    "assemble_sequence",
    "predict",
    "parameter_count",
]


@dataclass(frozen=True)
class DeMansiaConfig:
    d_model: int
    n_layers: int
    image_size: int
    patch_size: int
    n_classes: int
    n_state: int
    d_inner: int = 0  # 0 resolves to 2 * d_model
    conv_width: int = 4
    scan_mode: str = "sequential"

    def __post_init__(self):
        if self.d_inner == 0:
            object.__setattr__(self, "d_inner", 2 * self.d_model)
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % 8 != 0:
            raise ConfigError(f"d_model must be divisible by 8 for the stem, got {self.d_model}")
        p = self.patch_size
        if p < 1 or p & (p - 1) or p > 16:
            raise ConfigError(f"patch_size must be a power of two in [1, 16], got {p}")
        if self.n_layers < 0 or self.n_classes < 1 or self.n_state < 1:
            raise ConfigError("n_layers must be >= 0, n_classes and n_state >= 1")
        if self.scan_mode not in ("sequential", "parallel"):
            raise ConfigError(f"scan_mode must be sequential or parallel, got {self.scan_mode!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def cls_index(self) -> int:
        return self.n_patches // 2

    @property
    def stem_spec(self) -> list[tuple[int, int, int, int]]:
        """Four (c_in, c_out, kernel, stride) stages; stride product = patch_size."""
        doublings = self.patch_size.bit_length() - 1
        strides = [2] * doublings + [1] * (4 - doublings)
        channels = [3, self.d_model // 8, self.d_model // 4, self.d_model // 2, self.d_model]
        return [(channels[i], channels[i + 1], 3, strides[i]) for i in range(4)]

    INT_FIELDS = ("d_model", "n_layers", "image_size", "patch_size", "n_classes", "n_state", "d_inner", "conv_width")


PRESETS: dict[str, DeMansiaConfig] = {
    "micro": DeMansiaConfig(32, 4, 32, 4, 10, 8),
    "tiny": DeMansiaConfig(192, 24, 224, 16, 1000, 32),
    "tiny-384": DeMansiaConfig(192, 24, 384, 16, 1000, 32),
    "small": DeMansiaConfig(384, 24, 224, 16, 1000, 32),
    "small-384": DeMansiaConfig(384, 24, 384, 16, 1000, 32),
}


def preset(name: str) -> DeMansiaConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None


@dataclass
class SequenceState:
    """Class embedding, its centered slot, and the positional table."""

    cls_token: Tensor  # (1, d_model)
    pos_embed: Tensor  # (n_patches + 1, d_model)
    cls_index: int


@dataclass
class HeadParams:
    aux_w: Tensor  # (n_classes, d_model), shared across every patch position
    aux_b: Tensor
    class_w: Tensor  # (n_classes, d_model), separate parameters
    class_b: Tensor


@dataclass
class DeMansia:
    cfg: DeMansiaConfig
    stem: list[tuple[Tensor, Tensor]]
    seq: SequenceState
    blocks: list[VimBlockParams]
    final_norm: Tensor
    heads: HeadParams
    _names: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def parameters(self) -> dict[str, Tensor]:
        """Stable name -> tensor map over every learnable parameter."""
        if not self._names:
            named: dict[str, Tensor] = {}
            for i, (w, b) in enumerate(self.stem):
                named[f"stem.{i}.w"] = w
                named[f"stem.{i}.b"] = b
            named["cls_token"] = self.seq.cls_token
            named["pos_embed"] = self.seq.pos_embed
            for i, blk in enumerate(self.blocks):
                pre = f"blocks.{i}"
                named[f"{pre}.norm_scale"] = blk.norm_scale
                named[f"{pre}.in_proj_w"] = blk.in_proj_w
                named[f"{pre}.in_proj_b"] = blk.in_proj_b
                for tag, br in (("fwd", blk.forward_branch), ("bwd", blk.backward_branch)):
                    named[f"{pre}.{tag}.conv_w"] = br.conv_w
                    named[f"{pre}.{tag}.conv_b"] = br.conv_b
                    named[f"{pre}.{tag}.w_b"] = br.selection.w_b
                    named[f"{pre}.{tag}.w_c"] = br.selection.w_c
                    named[f"{pre}.{tag}.w_delta"] = br.selection.w_delta
                    named[f"{pre}.{tag}.delta_bias"] = br.selection.delta_bias
                    named[f"{pre}.{tag}.a_log"] = br.a_log
                named[f"{pre}.out_proj_w"] = blk.out_proj_w
                named[f"{pre}.out_proj_b"] = blk.out_proj_b
            named["final_norm"] = self.final_norm
            named["aux_head.w"] = self.heads.aux_w
            named["aux_head.b"] = self.heads.aux_b
            named["class_head.w"] = self.heads.class_w
            named["class_head.b"] = self.heads.class_b
            self._names = named
        return self._names

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, t in params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint is missing parameter {name}")
            if arrays[name].shape != t.data.shape:
                raise DimensionError(
                    f"{name}: checkpoint shape {arrays[name].shape} != model shape {t.data.shape}"
                )
            t.data = np.array(arrays[name], dtype=np.float64)

    def forward(self, image) -> tuple[Tensor, Tensor]:
        """image (H, W, 3) -> (class_logits (n_classes,), patch_logits (J, n_classes))."""
        cfg = self.cfg
        patches = patch_embed(image, self)
        tokens = assemble_sequence(patches, self.seq)
        parallel = cfg.scan_mode == "parallel"
        for blk in self.blocks:
            tokens = vim_block(tokens, blk, parallel=parallel)
        tokens = rmsnorm(tokens, self.final_norm)
        c = self.seq.cls_index
        j = cfg.n_patches
        cls_row = nm.narrow(tokens, 0, c, 1)
        patch_rows = nm.concat([nm.narrow(tokens, 0, 0, c), nm.narrow(tokens, 0, c + 1, j - c)], axis=0)
        class_logits = nm.reshape(
            nm.add(nm.matmul(cls_row, nm.transpose(self.heads.class_w)), self.heads.class_b),
            (cfg.n_classes,),
        )
        patch_logits = nm.add(nm.matmul(patch_rows, nm.transpose(self.heads.aux_w)), self.heads.aux_b)
        return class_logits, patch_logits


def patch_embed(image, model: DeMansia) -> Tensor:
    """Run the stem; flatten the spatial grid row-major into patch embeddings."""
    cfg = model.cfg
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.shape != (cfg.image_size, cfg.image_size, 3):
        raise ConfigError(f"image shape {img.shape} != ({cfg.image_size}, {cfg.image_size}, 3)")
    x = Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)))
    for i, ((w, b), (_, _, _, stride)) in enumerate(zip(model.stem, cfg.stem_spec)):
        x = nm.conv2d(x, w, b, stride, 1)
        if i < len(model.stem) - 1:
            x = nm.silu(x)
    g = cfg.grid
    return nm.transpose(nm.reshape(x, (cfg.d_model, g * g)))


def assemble_sequence(patches: Tensor, seq: SequenceState) -> Tensor:
    """Insert the class token at its centered slot and add positional embeddings."""
    j = seq.pos_embed.shape[0] - 1
    if patches.shape != (j, seq.pos_embed.shape[1]):
        raise DimensionError(f"patches {patches.shape} do not match positional table {seq.pos_embed.shape}")
    c = seq.cls_index
    tokens = nm.concat([nm.narrow(patches, 0, 0, c), seq.cls_token, nm.narrow(patches, 0, c, j - c)], axis=0)
    return nm.add(tokens, seq.pos_embed)


def predict(class_logits: Tensor, patch_logits: Tensor) -> Tensor:
    """Inference fusion: class logits plus half the per-class patch maximum."""
    cls = class_logits.data if isinstance(class_logits, Tensor) else np.asarray(class_logits, float)
    pat = patch_logits.data if isinstance(patch_logits, Tensor) else np.asarray(patch_logits, float)
    if pat.ndim != 2 or pat.shape[1] != cls.shape[0]:
        raise DimensionError(f"patch logits {pat.shape} do not match class logits {cls.shape}")
    return Tensor(cls + 0.5 * pat.max(axis=0))


def parameter_count(model: DeMansia) -> int:
    return sum(t.size for t in model.parameters().values())


def make_model(cfg: DeMansiaConfig, seed: int = 0, requires_grad: bool = True) -> DeMansia:
    rng = np.random.default_rng(seed)
    stem = []
    for c_in, c_out, k, _ in cfg.stem_spec:
        std = math.sqrt(2.0 / (c_in * k * k))
        stem.append(
            (
                Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)), requires_grad=requires_grad),
                Tensor(np.zeros(c_out), requires_grad=requires_grad),
            )
        )
    seq = SequenceState(
        cls_token=Tensor(rng.normal(0.0, 0.02, (1, cfg.d_model)), requires_grad=requires_grad),
        pos_embed=Tensor(rng.normal(0.0, 0.02, (cfg.n_patches + 1, cfg.d_model)), requires_grad=requires_grad),
        cls_index=cfg.cls_index,
    )
    blocks = [
        make_vim_block(rng, cfg.d_model, cfg.d_inner, cfg.n_state, cfg.conv_width, requires_grad)
        for _ in range(cfg.n_layers)
    ]
    head_std = 1.0 / math.sqrt(cfg.d_model)
    heads = HeadParams(
        aux_w=Tensor(rng.normal(0.0, head_std, (cfg.n_classes, cfg.d_model)), requires_grad=requires_grad),
        aux_b=Tensor(np.zeros(cfg.n_classes), requires_grad=requires_grad),
        class_w=Tensor(rng.normal(0.0, head_std, (cfg.n_classes, cfg.d_model)), requires_grad=requires_grad),
        class_b=Tensor(np.zeros(cfg.n_classes), requires_grad=requires_grad),
    )
    return DeMansia(
        cfg=cfg,
        stem=stem,
        seq=seq,
        blocks=blocks,
        final_norm=Tensor(np.ones(cfg.d_model), requires_grad=requires_grad),
        heads=heads,
    )


def config_arrays(cfg: DeMansiaConfig) -> dict[str, np.ndarray]:
    """Architecture fields as 0-d arrays for the checkpoint container."""
    return {f"config.{name}": np.asarray(float(getattr(cfg, name))) for name in DeMansiaConfig.INT_FIELDS}


def config_from_arrays(arrays: dict[str, np.ndarray]) -> DeMansiaConfig:
    kwargs = {}
    for name in DeMansiaConfig.INT_FIELDS:
        key = f"config.{name}"
        if key not in arrays:
            raise ConfigError(f"checkpoint is missing {key}")
        kwargs[name] = int(arrays[key])
    return DeMansiaConfig(**kwargs)
