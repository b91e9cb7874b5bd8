"""Modality-specific input stages.

Vision enters either through a linear patch projection or, with early
specialization enabled, through a six-stage residual convolution pyramid
that lands on the same token grid.  Text enters through a learned token +
positional embedding; with early specialization its first encoder layer is
modality-specific instead of shared.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .numerics import (
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    concat,
    conv2d,
    embedding,
    gelu,
    getitem,
    im2col,
    matmul,
    reshape,
    transpose,
)
from .params import BnStates, ParamSpec, Params

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
NUM_SPECIALS = 4
NUM_BYTES = 256
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

class TokenIds:
    """A tokenized caption: BOS ... EOS, optionally PAD-extended."""

    __slots__ = ("ids",)

    def __init__(self, ids):
        arr = np.asarray(ids, dtype=np.int64)
        if arr.ndim != 1:
            raise InputError(f"token ids must be 1-d, got shape {arr.shape}")
        eos = np.flatnonzero(arr == EOS_ID)
        if eos.size != 1:
            raise InputError(f"token sequence must contain exactly one EOS, found {eos.size}")
        self.ids = arr

    @property
    def eos_position(self) -> int:
        return int(np.flatnonzero(self.ids == EOS_ID)[0])

    def __len__(self) -> int:
        return len(self.ids)


class Tokenizer:
    """Word-level vocabulary with byte fallback.

    Ids: 4 specials, 256 bytes, then corpus words by descending frequency.
    """

    def __init__(self, words: list[str]):
        self.words = list(words)
        self._word_to_id = {
            w: NUM_SPECIALS + NUM_BYTES + i for i, w in enumerate(self.words)
        }

    @property
    def vocab_size(self) -> int:
        return NUM_SPECIALS + NUM_BYTES + len(self.words)

    @classmethod
    def build(cls, corpus: list[str], max_vocab: int) -> "Tokenizer":
        if max_vocab < NUM_SPECIALS + NUM_BYTES:
            raise ConfigError(
                f"vocab budget {max_vocab} cannot hold {NUM_SPECIALS} specials + {NUM_BYTES} bytes"
            )
        counts: dict[str, int] = {}
        for text in corpus:
            for w in _WORD_RE.findall(text.lower()):
                counts[w] = counts.get(w, 0) + 1
        budget = max_vocab - NUM_SPECIALS - NUM_BYTES
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[:budget]])

    def encode(self, text: str, context_length: int) -> TokenIds:
        ids = [BOS_ID]
        for w in _WORD_RE.findall(text.lower()):
            wid = self._word_to_id.get(w)
            if wid is not None:
                ids.append(wid)
            else:
                ids.extend(NUM_SPECIALS + b for b in w.encode("utf-8"))
        ids = ids[: context_length - 1]
        ids.append(EOS_ID)
        return TokenIds(ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in SPECIAL_TOKENS:
                f.write(tok + "\n")
            for b in range(NUM_BYTES):
                f.write(f"<0x{b:02x}>\n")
            for w in self.words:
                f.write(w + "\n")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        expect = list(SPECIAL_TOKENS) + [f"<0x{b:02x}>" for b in range(NUM_BYTES)]
        if lines[: len(expect)] != expect:
            raise InputError("vocabulary file does not start with the special/byte block")
        return cls(lines[len(expect) :])


def pad_token_batch(batch: list[TokenIds]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length sequences into [B,T] ids + [B] EOS positions."""
    longest = max(len(t) for t in batch)
    ids = np.full((len(batch), longest), PAD_ID, dtype=np.int64)
    eos = np.zeros(len(batch), dtype=np.int64)
    for i, t in enumerate(batch):
        ids[i, : len(t)] = t.ids
        eos[i] = t.eos_position
    return ids, eos


# ---------------------------------------------------------------------------
# linear patch embedding
# ---------------------------------------------------------------------------

def patch_embed_param_shapes(image_size: int, patch_size: int, width: int) -> dict[str, ParamSpec]:
    grid = image_size // patch_size
    return {
        "patch.w": ParamSpec((3 * patch_size * patch_size, width)),
        "patch.b": ParamSpec((width,), "zeros"),
        "cls": ParamSpec((width,)),
        "pos": ParamSpec((1 + grid * grid, width)),
    }


def patch_embed(p: Params, images: Tensor, patch_size: int) -> Tensor:
    """Non-overlapping patch projection + CLS + positional embeddings.

    images: [B,3,H,W] -> tokens [B, 1+N, width].
    """
    b, c, h, w = images.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise DimensionError(f"resolution {h}x{w} not divisible by patch size {patch_size}")
    n = (h // patch_size) * (w // patch_size)
    cols = im2col(images, patch_size, patch_size, patch_size)  # [B,3,P*P,N]
    cols = transpose(cols, (0, 3, 1, 2))  # [B,N,3,P*P]
    flat = reshape(cols, (b, n, c * patch_size * patch_size))
    tokens = add(matmul(flat, p["patch.w"]), p["patch.b"])
    cls = reshape(p["cls"], (1, 1, -1)) + Tensor(np.zeros((b, 1, 1), dtype=tokens.dtype))
    tokens = concat([cls, tokens], axis=1)
    return add(tokens, p["pos"])


# ---------------------------------------------------------------------------
# early-specialization vision stem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvStageSpec:
    kernel: int
    stride: int
    in_dim: int
    out_dim: int
    residual: bool


@dataclass(frozen=True)
class EarlySpecConfig:
    """Ordered convolution stages of the specialized vision stem."""

    stages: tuple[ConvStageSpec, ...]

    def output_grid(self, image_size: int) -> int:
        r = image_size
        for st in self.stages:
            r = r // st.stride
        return r

    def stage_resolutions(self, image_size: int) -> list[int]:
        out = []
        r = image_size
        for st in self.stages:
            r = r // st.stride
            out.append(r)
        return out


def early_spec_config_for(width: int, patch_size: int) -> EarlySpecConfig:
    """Derive the stem layout from the stack width and the token patch size.

    Channel plan: width/16 doubling up to width; spatial plan: five 3x3
    stages plus a final 1x1, with strides multiplying to the patch size.
    """
    if patch_size == 32:
        strides = (2, 2, 2, 2, 2, 1)
    elif patch_size == 16:
        strides = (2, 2, 2, 2, 1, 1)
    else:
        raise ConfigError(f"no early-specialization layout for patch size {patch_size}")
    if width % 16 != 0:
        raise ConfigError(f"width {width} not divisible by 16, cannot derive stem channels")
    dims = (width // 16, width // 8, width // 4, width // 2, width, width)
    kernels = (3, 3, 3, 3, 3, 1)
    residual = (False, True, True, True, True, False)
    stages = []
    in_dim = 3
    for k, s, d, r in zip(kernels, strides, dims, residual):
        stages.append(ConvStageSpec(k, s, in_dim, d, r))
        in_dim = d
    return EarlySpecConfig(tuple(stages))


def early_spec_param_shapes(cfg: EarlySpecConfig, image_size: int) -> dict[str, ParamSpec]:
    shapes: dict[str, ParamSpec] = {}
    for i, st in enumerate(cfg.stages):
        shapes[f"conv{i}.w"] = ParamSpec((st.out_dim, st.in_dim, st.kernel, st.kernel))
        shapes[f"conv{i}.b"] = ParamSpec((st.out_dim,), "zeros")
        shapes[f"conv{i}.bn.gamma"] = ParamSpec((st.out_dim,), "ones")
        shapes[f"conv{i}.bn.beta"] = ParamSpec((st.out_dim,), "zeros")
        if st.residual:
            shapes[f"conv{i}.skip.w"] = ParamSpec((st.out_dim, st.in_dim, 1, 1))
            shapes[f"conv{i}.skip.b"] = ParamSpec((st.out_dim,), "zeros")
            shapes[f"conv{i}.skip_bn.gamma"] = ParamSpec((st.out_dim,), "ones")
            shapes[f"conv{i}.skip_bn.beta"] = ParamSpec((st.out_dim,), "zeros")
    grid = cfg.output_grid(image_size)
    width = cfg.stages[-1].out_dim
    shapes["cls"] = ParamSpec((width,))
    shapes["pos"] = ParamSpec((1 + grid * grid, width))
    return shapes


def early_spec_bn_names(cfg: EarlySpecConfig) -> dict[str, int]:
    names = {}
    for i, st in enumerate(cfg.stages):
        names[f"conv{i}.bn"] = st.out_dim
        if st.residual:
            names[f"conv{i}.skip_bn"] = st.out_dim
    return names


def early_spec_stage_forward(
    p: Params,
    bn: BnStates,
    stage_index: int,
    st: ConvStageSpec,
    x: Tensor,
    training: bool,
    momentum: float,
    eps: float,
) -> Tensor:
    main = conv2d(
        x,
        p[f"conv{stage_index}.w"],
        p[f"conv{stage_index}.b"],
        stride=st.stride,
        padding=st.kernel // 2,
    )
    main = batch_norm(
        main,
        p[f"conv{stage_index}.bn.gamma"],
        p[f"conv{stage_index}.bn.beta"],
        bn[f"conv{stage_index}.bn"],
        training,
        momentum,
        eps,
    )
    if st.residual:
        skip = conv2d(
            x, p[f"conv{stage_index}.skip.w"], p[f"conv{stage_index}.skip.b"], stride=st.stride
        )
        skip = batch_norm(
            skip,
            p[f"conv{stage_index}.skip_bn.gamma"],
            p[f"conv{stage_index}.skip_bn.beta"],
            bn[f"conv{stage_index}.skip_bn"],
            training,
            momentum,
            eps,
        )
        main = add(main, skip)
    return gelu(main)


def early_spec_vision(
    p: Params,
    bn: BnStates,
    cfg: EarlySpecConfig,
    images: Tensor,
    training: bool = False,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Run the conv pyramid and emit [B, 1+grid^2, width] tokens."""
    b, c, h, w = images.shape
    if c != 3:
        raise ConfigError(f"stem expects 3 input channels, got {c}")
    x = images
    for i, st in enumerate(cfg.stages):
        if x.shape[2] % st.stride != 0:
            raise ConfigError(
                f"stage {i} stride {st.stride} does not divide resolution {x.shape[2]}"
            )
        x = early_spec_stage_forward(p, bn, i, st, x, training, momentum, eps)
    grid = x.shape[2]
    width = x.shape[1]
    tokens = reshape(transpose(x, (0, 2, 3, 1)), (b, grid * grid, width))
    cls = reshape(p["cls"], (1, 1, -1)) + Tensor(np.zeros((b, 1, 1), dtype=tokens.dtype))
    tokens = concat([cls, tokens], axis=1)
    return add(tokens, p["pos"])


# ---------------------------------------------------------------------------
# text embedding
# ---------------------------------------------------------------------------

def text_embed_param_shapes(vocab_size: int, context_length: int, width: int) -> dict[str, ParamSpec]:
    return {
        "tok_emb": ParamSpec((vocab_size, width)),
        "pos": ParamSpec((context_length, width)),
    }


def embed_text(p: Params, ids: np.ndarray, context_length: int) -> Tensor:
    """Token + positional embedding for [B,T] ids -> [B,T,width]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise InputError(f"expected [B,T] token ids, got shape {ids.shape}")
    t = ids.shape[1]
    if t > context_length:
        raise InputError(f"sequence length {t} exceeds context length {context_length}")
    tok = embedding(p["tok_emb"], ids)
    pos = getitem(p["pos"], slice(0, t))
    return add(tok, pos)
