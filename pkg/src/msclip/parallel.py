"""Auxiliary multi-scale convolution branch and its fusion adapters.

The branch runs alongside the shared stack: one plain convolution stage
followed by bottleneck residual stages, each feeding an adapter that maps
the stage's feature map onto the token grid and merges it into the stream
entering every other shared layer.  The CLS token bypasses fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import (
    Tensor,
    add,
    avg_pool2d,
    batch_norm,
    concat,
    conv2d,
    gelu,
    getitem,
    layer_norm,
    reshape,
    transpose,
)
from .params import BnStates, ParamSpec, Params

ADAPTER_VARIANTS = ("dwconv", "avgpool_ffn")


@dataclass(frozen=True)
class ParallelStage:
    kind: str  # "conv" | "bottleneck"
    in_ch: int
    out_ch: int
    stride: int


@dataclass(frozen=True)
class AdapterSpec:
    kernel: int
    stride: int
    fusion_layer: int  # 1-indexed layer whose *input* receives the fusion


@dataclass(frozen=True)
class ParallelConfig:
    stages: tuple[ParallelStage, ...]
    adapters: tuple[AdapterSpec, ...]
    variant: str = "dwconv"
    main_kernel: int = 3  # depthwise kernel applied to the token grid
    bottleneck_ratio: int = 4

    def fuse_before_layers(self) -> dict[int, int]:
        """Map 0-indexed layer -> adapter index whose output enters it."""
        return {a.fusion_layer - 1: k for k, a in enumerate(self.adapters)}

    def stage_resolutions(self, image_size: int) -> list[int]:
        out = []
        r = image_size
        for st in self.stages:
            r = r // st.stride
            out.append(r)
        return out


# channel plans chosen once so the branch lands at its documented size;
# the parameter-count tests guard against drift
_FULL_CHANNELS = (96, 192, 384, 704, 768)


def parallel_config_for(
    width: int,
    image_size: int,
    patch_size: int,
    num_layers: int,
    variant: str = "dwconv",
) -> ParallelConfig:
    if variant not in ADAPTER_VARIANTS:
        raise ConfigError(f"unknown adapter variant {variant!r}, expected one of {ADAPTER_VARIANTS}")
    grid = image_size // patch_size
    if num_layers >= 10:
        fusion = (2, 4, 6, 8, 10)
        if patch_size == 32:
            strides = (2, 2, 2, 2, 2)
        elif patch_size == 16:
            strides = (2, 2, 2, 2, 1)
        else:
            raise ConfigError(f"no parallel-branch layout for patch size {patch_size}")
        channels = _FULL_CHANNELS if width == 768 else tuple(
            min(width, width // 8 * (2 ** i)) for i in range(5)
        )
    else:
        # reduced layout for shallow (tiny) stacks: fuse into every other layer
        fusion = tuple(range(2, num_layers + 1, 2))
        strides = (2,) * len(fusion)
        channels = tuple(min(width, width // 4 * (2 ** i)) for i in range(len(fusion)))
    stages = []
    in_ch = 3
    for i, (s, c) in enumerate(zip(strides, channels)):
        stages.append(ParallelStage("conv" if i == 0 else "bottleneck", in_ch, c, s))
        in_ch = c
    adapters = []
    r = image_size
    for s, f in zip(strides, fusion):
        r = r // s
        if r % grid != 0:
            raise ConfigError(f"stage resolution {r} does not map onto token grid {grid}")
        k = r // grid
        adapters.append(AdapterSpec(kernel=k, stride=k, fusion_layer=f))
    cfg = ParallelConfig(tuple(stages), tuple(adapters), variant=variant)
    validate_parallel_config(cfg, image_size, grid, num_layers)
    return cfg


def validate_parallel_config(cfg: ParallelConfig, image_size: int, grid: int, num_layers: int) -> None:
    res = cfg.stage_resolutions(image_size)
    for k, (r, a) in enumerate(zip(res, cfg.adapters)):
        if (r - a.kernel) // a.stride + 1 != grid:
            raise ConfigError(
                f"adapter {k}: {a.kernel}x{a.kernel} stride {a.stride} maps {r} to "
                f"{(r - a.kernel) // a.stride + 1}, token grid is {grid}"
            )
        if not 1 <= a.fusion_layer <= num_layers:
            raise ConfigError(f"adapter {k}: fusion layer {a.fusion_layer} outside 1..{num_layers}")
    if cfg.variant not in ADAPTER_VARIANTS:
        raise ConfigError(f"unknown adapter variant {cfg.variant!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def parallel_param_shapes(cfg: ParallelConfig, width: int) -> dict[str, ParamSpec]:
    shapes: dict[str, ParamSpec] = {}
    for i, st in enumerate(cfg.stages):
        pre = f"stage{i}"
        if st.kind == "conv":
            shapes[f"{pre}.w"] = ParamSpec((st.out_ch, st.in_ch, 3, 3))
            shapes[f"{pre}.b"] = ParamSpec((st.out_ch,), "zeros")
            shapes[f"{pre}.bn.gamma"] = ParamSpec((st.out_ch,), "ones")
            shapes[f"{pre}.bn.beta"] = ParamSpec((st.out_ch,), "zeros")
        else:
            inner = st.out_ch // cfg.bottleneck_ratio
            shapes[f"{pre}.reduce.w"] = ParamSpec((inner, st.in_ch, 1, 1))
            shapes[f"{pre}.reduce.b"] = ParamSpec((inner,), "zeros")
            shapes[f"{pre}.bn1.gamma"] = ParamSpec((inner,), "ones")
            shapes[f"{pre}.bn1.beta"] = ParamSpec((inner,), "zeros")
            shapes[f"{pre}.mid.w"] = ParamSpec((inner, inner, 3, 3))
            shapes[f"{pre}.mid.b"] = ParamSpec((inner,), "zeros")
            shapes[f"{pre}.bn2.gamma"] = ParamSpec((inner,), "ones")
            shapes[f"{pre}.bn2.beta"] = ParamSpec((inner,), "zeros")
            shapes[f"{pre}.expand.w"] = ParamSpec((st.out_ch, inner, 1, 1))
            shapes[f"{pre}.expand.b"] = ParamSpec((st.out_ch,), "zeros")
            shapes[f"{pre}.bn3.gamma"] = ParamSpec((st.out_ch,), "ones")
            shapes[f"{pre}.bn3.beta"] = ParamSpec((st.out_ch,), "zeros")
            shapes[f"{pre}.skip.w"] = ParamSpec((st.out_ch, st.in_ch, 1, 1))
            shapes[f"{pre}.skip.b"] = ParamSpec((st.out_ch,), "zeros")
            shapes[f"{pre}.skip_bn.gamma"] = ParamSpec((st.out_ch,), "ones")
            shapes[f"{pre}.skip_bn.beta"] = ParamSpec((st.out_ch,), "zeros")
    for k, (st, a) in enumerate(zip(cfg.stages, cfg.adapters)):
        pre = f"adapter{k}"
        if cfg.variant == "dwconv":
            shapes[f"{pre}.branch_dw.w"] = ParamSpec((st.out_ch, 1, a.kernel, a.kernel))
            shapes[f"{pre}.branch_dw.b"] = ParamSpec((st.out_ch,), "zeros")
            shapes[f"{pre}.main_dw.w"] = ParamSpec((width, 1, cfg.main_kernel, cfg.main_kernel))
            shapes[f"{pre}.main_dw.b"] = ParamSpec((width,), "zeros")
        shapes[f"{pre}.branch_pw.w"] = ParamSpec((width, st.out_ch, 1, 1))
        shapes[f"{pre}.branch_pw.b"] = ParamSpec((width,), "zeros")
        shapes[f"{pre}.branch_bn.gamma"] = ParamSpec((width,), "ones")
        shapes[f"{pre}.branch_bn.beta"] = ParamSpec((width,), "zeros")
        shapes[f"{pre}.main_bn.gamma"] = ParamSpec((width,), "ones")
        shapes[f"{pre}.main_bn.beta"] = ParamSpec((width,), "zeros")
        shapes[f"{pre}.ln.gamma"] = ParamSpec((width,), "ones")
        shapes[f"{pre}.ln.beta"] = ParamSpec((width,), "zeros")
    return shapes


def parallel_bn_names(cfg: ParallelConfig, width: int) -> dict[str, int]:
    names: dict[str, int] = {}
    for i, st in enumerate(cfg.stages):
        if st.kind == "conv":
            names[f"stage{i}.bn"] = st.out_ch
        else:
            inner = st.out_ch // cfg.bottleneck_ratio
            names[f"stage{i}.bn1"] = inner
            names[f"stage{i}.bn2"] = inner
            names[f"stage{i}.bn3"] = st.out_ch
            names[f"stage{i}.skip_bn"] = st.out_ch
    for k in range(len(cfg.adapters)):
        names[f"adapter{k}.branch_bn"] = width
        names[f"adapter{k}.main_bn"] = width
    return names


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def parallel_forward(
    p: Params,
    bn: BnStates,
    cfg: ParallelConfig,
    images: Tensor,
    training: bool = False,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> list[Tensor]:
    """Run all stages and return one feature map per stage."""
    x = images
    feats: list[Tensor] = []
    for i, st in enumerate(cfg.stages):
        pre = f"stage{i}"
        if st.kind == "conv":
            x = conv2d(x, p[f"{pre}.w"], p[f"{pre}.b"], stride=st.stride, padding=1)
            x = batch_norm(
                x, p[f"{pre}.bn.gamma"], p[f"{pre}.bn.beta"], bn[f"{pre}.bn"], training, momentum, eps
            )
            x = gelu(x)
        else:
            y = conv2d(x, p[f"{pre}.reduce.w"], p[f"{pre}.reduce.b"])
            y = batch_norm(
                y, p[f"{pre}.bn1.gamma"], p[f"{pre}.bn1.beta"], bn[f"{pre}.bn1"], training, momentum, eps
            )
            y = gelu(y)
            y = conv2d(y, p[f"{pre}.mid.w"], p[f"{pre}.mid.b"], stride=st.stride, padding=1)
            y = batch_norm(
                y, p[f"{pre}.bn2.gamma"], p[f"{pre}.bn2.beta"], bn[f"{pre}.bn2"], training, momentum, eps
            )
            y = gelu(y)
            y = conv2d(y, p[f"{pre}.expand.w"], p[f"{pre}.expand.b"])
            y = batch_norm(
                y, p[f"{pre}.bn3.gamma"], p[f"{pre}.bn3.beta"], bn[f"{pre}.bn3"], training, momentum, eps
            )
            skip = conv2d(x, p[f"{pre}.skip.w"], p[f"{pre}.skip.b"], stride=st.stride)
            skip = batch_norm(
                skip,
                p[f"{pre}.skip_bn.gamma"],
                p[f"{pre}.skip_bn.beta"],
                bn[f"{pre}.skip_bn"],
                training,
                momentum,
                eps,
            )
            x = gelu(add(y, skip))
        feats.append(x)
    return feats


def _tokens_to_grid(tokens: Tensor) -> tuple[Tensor, Tensor, int]:
    b, t, d = tokens.shape
    grid = int(round((t - 1) ** 0.5))
    if grid * grid != t - 1:
        raise DimensionError(f"token count {t} is not 1 + a square grid")
    cls = getitem(tokens, (slice(None), slice(0, 1)))
    rest = getitem(tokens, (slice(None), slice(1, None)))
    patches = transpose(reshape(rest, (b, grid, grid, d)), (0, 3, 1, 2))
    return cls, patches, grid


def adapter_fuse(
    p: Params,
    bn: BnStates,
    cfg: ParallelConfig,
    k: int,
    tokens: Tensor,
    feat: Tensor,
    training: bool = False,
    momentum: float = 0.1,
    eps: float = 1e-5,
    ln_eps: float = 1e-5,
) -> Tensor:
    """Merge stage-k features into the token stream; CLS passes through.

    Main path: depthwise conv + batch norm on the token grid.  Branch path:
    depthwise conv (mapping the stage resolution onto the grid), pointwise
    conv, batch norm.  The sum is layer-normalized per token.
    """
    a = cfg.adapters[k]
    pre = p.scope(f"adapter{k}")
    cls, grid_img, grid = _tokens_to_grid(tokens)
    if (feat.shape[2] - a.kernel) // a.stride + 1 != grid:
        raise DimensionError(
            f"adapter {k}: feature resolution {feat.shape[2]} does not map onto grid {grid}"
        )
    ch = feat.shape[1]
    if cfg.variant == "dwconv":
        hp = conv2d(feat, pre["branch_dw.w"], pre["branch_dw.b"], stride=a.stride, groups=ch)
        main = conv2d(
            grid_img,
            pre["main_dw.w"],
            pre["main_dw.b"],
            stride=1,
            padding=cfg.main_kernel // 2,
            groups=grid_img.shape[1],
        )
    else:
        hp = avg_pool2d(feat, a.kernel, a.stride)
        main = avg_pool2d(grid_img, cfg.main_kernel, 1, cfg.main_kernel // 2)
    hp = conv2d(hp, pre["branch_pw.w"], pre["branch_pw.b"])
    hp = batch_norm(
        hp, pre["branch_bn.gamma"], pre["branch_bn.beta"],
        bn[f"adapter{k}.branch_bn"], training, momentum, eps,
    )
    main = batch_norm(
        main, pre["main_bn.gamma"], pre["main_bn.beta"],
        bn[f"adapter{k}.main_bn"], training, momentum, eps,
    )
    fused = add(main, hp)
    b, d = fused.shape[0], fused.shape[1]
    fused = reshape(transpose(fused, (0, 2, 3, 1)), (b, grid * grid, d))
    fused = layer_norm(fused, pre["ln.gamma"], pre["ln.beta"], ln_eps)
    return concat([cls, fused], axis=1)


def adapter_fuse_avgpool_variant(
    p: Params,
    bn: BnStates,
    cfg: ParallelConfig,
    k: int,
    tokens: Tensor,
    feat: Tensor,
    training: bool = False,
    momentum: float = 0.1,
    eps: float = 1e-5,
    ln_eps: float = 1e-5,
) -> Tensor:
    """Adapter with each depthwise conv replaced by an average pool of the
    same kernel/stride/padding; the pointwise path is retained."""
    if cfg.variant != "avgpool_ffn":
        cfg = ParallelConfig(
            cfg.stages, cfg.adapters, variant="avgpool_ffn",
            main_kernel=cfg.main_kernel, bottleneck_ratio=cfg.bottleneck_ratio,
        )
    return adapter_fuse(p, bn, cfg, k, tokens, feat, training, momentum, eps, ln_eps)
