"""Modality-shared transformer stack.

Twelve pre-LN blocks whose attention / feed-forward / layer-norm submodules
are individually stored once (shared) or per modality, selected by a
SharingPolicy.  The vision pass uses a bidirectional attention mask, the
text pass an auto-regressive one; each modality keeps its own stem, final
norm and output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import parallel as par
from . import stems
from .errors import ConfigError, DimensionError, InputError
from .numerics import (
    MASK_VALUE,
    BatchNormState,
    Tensor,
    add,
    gelu,
    l2_normalize,
    layer_norm,
    matmul,
    reshape,
    softmax_rows,
    take_rows,
    transpose,
)
from .params import BnStates, ParamSpec, Params, init_parameter

VISION = "vision"
TEXT = "text"
MODALITIES = (VISION, TEXT)

BIDIRECTIONAL = "bidirectional"
CAUSAL = "causal"

SUBMODULES = ("attn", "ffn", "ln1", "ln2")

TEMPERATURE_NAME = "temperature.log_scale"
TEMPERATURE_INIT = math.log(1.0 / 0.07)
MAX_LOGIT_SCALE = 100.0


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 12
    width: int = 768
    heads: int = 12
    patch_size: int = 32
    image_size: int = 224
    context_length: int = 77
    vocab_size: int = 49408
    embed_dim: int = 512
    text_width: int | None = None  # None: same as width
    mlp_ratio: int = 4
    early_specialization: bool = False
    parallel_branch: bool = False
    adapter_variant: str = "dwconv"
    gelu_mode: str = "tanh"  # recorded so oracles match the forward pass
    ln_eps: float = 1e-5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype: str = "float32"

    @property
    def text_width_resolved(self) -> int:
        return self.width if self.text_width is None else self.text_width

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def text_heads(self) -> int:
        return self.text_width_resolved // self.head_dim

    def heads_for(self, modality: str) -> int:
        return self.text_heads if modality == TEXT else self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def vision_tokens(self) -> int:
        return 1 + self.grid * self.grid

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def validate(self) -> None:
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.text_width_resolved % self.head_dim != 0:
            raise ConfigError(
                f"text width {self.text_width_resolved} not divisible by head dim {self.head_dim}"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.adapter_variant not in par.ADAPTER_VARIANTS:
            raise ConfigError(f"unknown adapter variant {self.adapter_variant!r}")
        if self.gelu_mode != "tanh":
            raise ConfigError(f"unsupported gelu mode {self.gelu_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass(frozen=True)
class LayerSharing:
    shared_attn: bool
    shared_ffn: bool
    shared_ln1: bool
    shared_ln2: bool

    def is_shared(self, sub: str) -> bool:
        return getattr(self, "shared_" + sub)


@dataclass(frozen=True)
class SharingPolicy:
    layers: tuple[LayerSharing, ...]

    def any_shared(self) -> bool:
        return any(
            layer.is_shared(sub) for layer in self.layers for sub in SUBMODULES
        )

    @classmethod
    def uniform(cls, n: int, attn: bool, ffn: bool, ln1: bool, ln2: bool) -> "SharingPolicy":
        return cls(tuple(LayerSharing(attn, ffn, ln1, ln2) for _ in range(n)))

    @classmethod
    def share_all(cls, n: int = 12) -> "SharingPolicy":
        return cls.uniform(n, True, True, True, True)

    @classmethod
    def share_none(cls, n: int = 12) -> "SharingPolicy":
        return cls.uniform(n, False, False, False, False)

    @classmethod
    def ms_clip(cls, n: int = 12) -> "SharingPolicy":
        """Attention and FFN shared everywhere, layer norms modality-specific."""
        return cls.uniform(n, True, True, False, False)

    @classmethod
    def share_last(cls, n: int, last: int) -> "SharingPolicy":
        if not 0 <= last <= n:
            raise ConfigError(f"share-last-{last} outside 0..{n}")
        layers = [LayerSharing(False, False, False, False)] * (n - last) + [
            LayerSharing(True, True, False, False)
        ] * last
        return cls(tuple(layers))

    @classmethod
    def attn_only(cls, n: int = 12) -> "SharingPolicy":
        return cls.uniform(n, True, False, False, False)

    @classmethod
    def ffn_only(cls, n: int = 12) -> "SharingPolicy":
        return cls.uniform(n, False, True, False, False)


@dataclass
class AttentionRecord:
    """Per-head attention probabilities captured during a forward pass."""

    layer: int
    head: int
    modality: str
    probs: np.ndarray  # [T, T], rows sum to 1

    def validate(self, atol: float = 1e-5) -> None:
        sums = self.probs.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=atol):
            raise DimensionError(f"attention rows do not sum to 1 (max dev {abs(sums - 1).max()})")


@dataclass
class ForwardCapture:
    """Optional per-layer capture of hidden states and attention maps.

    hidden[l] is the token stream after block l ([B,T,D]); for early
    specialization, index 0 holds the specialized module's output.
    attn_probs[l] / attn_logits[l] are [B,H,T,T] or None where the layer has
    no attention (vision layer 0 under early specialization).
    """

    hidden: list[np.ndarray] = field(default_factory=list)
    attn_probs: list[np.ndarray | None] = field(default_factory=list)
    attn_logits: list[np.ndarray | None] = field(default_factory=list)

    def records(self, modality: str, batch_index: int = 0) -> list[AttentionRecord]:
        out = []
        for layer, probs in enumerate(self.attn_probs):
            if probs is None:
                continue
            for head in range(probs.shape[1]):
                out.append(AttentionRecord(layer, head, modality, probs[batch_index, head]))
        return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class MsClipModel:
    """Parameter store partitioned into shared and modality-specific groups."""

    def __init__(
        self,
        config: EncoderConfig,
        policy: SharingPolicy,
        params: dict[str, Tensor],
        bn_states: dict[str, BatchNormState],
        early_cfg: stems.EarlySpecConfig | None,
        parallel_cfg: par.ParallelConfig | None,
        seed: int,
    ):
        self.config = config
        self.policy = policy
        self.params = params
        self.bn_states = bn_states
        self.early_cfg = early_cfg
        self.parallel_cfg = parallel_cfg
        self.seed = seed

    # -- parameter bookkeeping ------------------------------------------------

    @staticmethod
    def group_of(name: str) -> str:
        if name.startswith("shared."):
            return "shared"
        if name.startswith("vision."):
            return "vision_specific"
        if name.startswith("text."):
            return "text_specific"
        if name.startswith("temperature."):
            return "temperature"
        raise KeyError(f"parameter {name!r} belongs to no group")

    def group_names(self, group: str) -> list[str]:
        return [n for n in self.params if self.group_of(n) == group]

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def logit_scale(self) -> Tensor:
        return self.params[TEMPERATURE_NAME]

    def clamp_logit_scale(self) -> None:
        np.minimum(
            self.logit_scale.data, math.log(MAX_LOGIT_SCALE), out=self.logit_scale.data
        )

    # -- submodule resolution ---------------------------------------------------

    def submodule_owner(self, layer: int, sub: str, modality: str) -> str:
        if self.config.early_specialization and layer == 0:
            return modality
        return "shared" if self.policy.layers[layer].is_shared(sub) else modality

    def submodule_params(self, layer: int, sub: str, modality: str) -> Params:
        owner = self.submodule_owner(layer, sub, modality)
        return Params(self.params, f"{owner}.layer{layer}.{sub}.")

    def shared_layer_range(self) -> range:
        start = 1 if self.config.early_specialization else 0
        return range(start, self.config.num_layers)


def count_parameters(model: MsClipModel) -> dict[str, int]:
    """Scalar counts per group; shared parameters are counted once."""
    counts = {"shared": 0, "vision_specific": 0, "text_specific": 0, "temperature": 0}
    for name, p in model.params.items():
        counts[MsClipModel.group_of(name)] += p.size
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _layer_param_shapes(width: int, mlp_ratio: int) -> dict[str, ParamSpec]:
    hidden = width * mlp_ratio
    return {
        "attn.wq": ParamSpec((width, width)),
        "attn.bq": ParamSpec((width,), "zeros"),
        "attn.wk": ParamSpec((width, width)),
        "attn.bk": ParamSpec((width,), "zeros"),
        "attn.wv": ParamSpec((width, width)),
        "attn.bv": ParamSpec((width,), "zeros"),
        "attn.wo": ParamSpec((width, width)),
        "attn.bo": ParamSpec((width,), "zeros"),
        "ffn.w1": ParamSpec((width, hidden)),
        "ffn.b1": ParamSpec((hidden,), "zeros"),
        "ffn.w2": ParamSpec((hidden, width)),
        "ffn.b2": ParamSpec((width,), "zeros"),
        "ln1.gamma": ParamSpec((width,), "ones"),
        "ln1.beta": ParamSpec((width,), "zeros"),
        "ln2.gamma": ParamSpec((width,), "ones"),
        "ln2.beta": ParamSpec((width,), "zeros"),
    }


_SUB_KEYS = {
    "attn": ("attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo"),
    "ffn": ("ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"),
    "ln1": ("ln1.gamma", "ln1.beta"),
    "ln2": ("ln2.gamma", "ln2.beta"),
}


def build_model(config: EncoderConfig, policy: SharingPolicy, seed: int = 0) -> MsClipModel:
    """Deterministically initialize a model whose parameter partition
    follows the sharing policy."""
    config.validate()
    if len(policy.layers) != config.num_layers:
        raise ConfigError(
            f"policy covers {len(policy.layers)} layers, config has {config.num_layers}"
        )
    if policy.any_shared() and config.text_width_resolved != config.width:
        raise ConfigError(
            f"sharing requires equal widths, got vision {config.width} "
            f"and text {config.text_width_resolved}"
        )
    dtype = config.np_dtype()
    shapes: dict[str, ParamSpec] = {}
    bn_channels: dict[str, int] = {}

    vision_layer_shapes = _layer_param_shapes(config.width, config.mlp_ratio)
    text_layer_shapes = _layer_param_shapes(config.text_width_resolved, config.mlp_ratio)

    start = 1 if config.early_specialization else 0
    for layer in range(start, config.num_layers):
        sharing = policy.layers[layer]
        for sub in SUBMODULES:
            if sharing.is_shared(sub):
                for key in _SUB_KEYS[sub]:
                    shapes[f"shared.layer{layer}.{key}"] = vision_layer_shapes[key]
            else:
                for key in _SUB_KEYS[sub]:
                    shapes[f"vision.layer{layer}.{key}"] = vision_layer_shapes[key]
                    shapes[f"text.layer{layer}.{key}"] = text_layer_shapes[key]

    early_cfg = None
    if config.early_specialization:
        # text keeps a standard modality-specific first layer
        for key, spec in text_layer_shapes.items():
            shapes[f"text.layer0.{key}"] = spec
        early_cfg = stems.early_spec_config_for(config.width, config.patch_size)
        if early_cfg.output_grid(config.image_size) != config.grid:
            raise ConfigError(
                f"stem reduces {config.image_size} to grid "
                f"{early_cfg.output_grid(config.image_size)}, patch grid is {config.grid}"
            )
        for key, spec in stems.early_spec_param_shapes(early_cfg, config.image_size).items():
            shapes[f"vision.stem.{key}"] = spec
        for key, ch in stems.early_spec_bn_names(early_cfg).items():
            bn_channels[f"vision.stem.{key}"] = ch
    else:
        for key, spec in stems.patch_embed_param_shapes(
            config.image_size, config.patch_size, config.width
        ).items():
            shapes[f"vision.stem.{key}"] = spec

    parallel_cfg = None
    if config.parallel_branch:
        parallel_cfg = par.parallel_config_for(
            config.width,
            config.image_size,
            config.patch_size,
            config.num_layers,
            config.adapter_variant,
        )
        for key, spec in par.parallel_param_shapes(parallel_cfg, config.width).items():
            shapes[f"vision.branch.{key}"] = spec
        for key, ch in par.parallel_bn_names(parallel_cfg, config.width).items():
            bn_channels[f"vision.branch.{key}"] = ch

    for key, spec in stems.text_embed_param_shapes(
        config.vocab_size, config.context_length, config.text_width_resolved
    ).items():
        shapes[f"text.stem.{key}"] = spec

    shapes["vision.ln_post.gamma"] = ParamSpec((config.width,), "ones")
    shapes["vision.ln_post.beta"] = ParamSpec((config.width,), "zeros")
    shapes["vision.proj"] = ParamSpec((config.width, config.embed_dim))
    shapes["text.ln_final.gamma"] = ParamSpec((config.text_width_resolved,), "ones")
    shapes["text.ln_final.beta"] = ParamSpec((config.text_width_resolved,), "zeros")
    shapes["text.proj"] = ParamSpec((config.text_width_resolved, config.embed_dim))
    shapes[TEMPERATURE_NAME] = ParamSpec((), f"const:{TEMPERATURE_INIT}")

    params = {name: init_parameter(name, spec, seed, dtype) for name, spec in shapes.items()}
    bn_states = {name: BatchNormState(ch, dtype) for name, ch in bn_channels.items()}
    return MsClipModel(config, policy, params, bn_states, early_cfg, parallel_cfg, seed)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def attention_forward(
    p: Params, x: Tensor, heads: int, mask: str
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Multi-head scaled dot-product attention over [B,T,D].

    Returns (output, probs, logits); probs/logits are detached [B,H,T,T]
    copies for capture.
    """
    if mask not in (BIDIRECTIONAL, CAUSAL):
        raise ConfigError(f"unknown attention mask {mask!r}")
    b, t, d = x.shape
    if d % heads != 0:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    hd = d // heads

    def split_heads(v: Tensor) -> Tensor:
        return transpose(reshape(v, (b, t, heads, hd)), (0, 2, 1, 3))

    q = split_heads(add(matmul(x, p["wq"]), p["bq"]))
    k = split_heads(add(matmul(x, p["wk"]), p["bk"]))
    v = split_heads(add(matmul(x, p["wv"]), p["bv"]))
    logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    if mask == CAUSAL:
        tri = np.triu(np.full((t, t), MASK_VALUE, dtype=x.dtype), k=1)
        logits = add(logits, Tensor(tri))
    probs = softmax_rows(logits)
    ctx = matmul(probs, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = add(matmul(ctx, p["wo"]), p["bo"])
    return out, probs.data.copy(), logits.data.copy()


def encoder_layer_forward(
    model: MsClipModel,
    x: Tensor,
    layer: int,
    modality: str,
    mask: str,
    capture: ForwardCapture | None = None,
) -> Tensor:
    """One pre-LN block: x + Attn(LN1(x)), then + FFN(LN2(.))."""
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}")
    cfg = model.config
    ln1 = model.submodule_params(layer, "ln1", modality)
    attn = model.submodule_params(layer, "attn", modality)
    ln2 = model.submodule_params(layer, "ln2", modality)
    ffn = model.submodule_params(layer, "ffn", modality)

    h = layer_norm(x, ln1["gamma"], ln1["beta"], cfg.ln_eps)
    attn_out, probs, logits = attention_forward(attn, h, cfg.heads_for(modality), mask)
    x = add(x, attn_out)
    h2 = layer_norm(x, ln2["gamma"], ln2["beta"], cfg.ln_eps)
    mid = gelu(add(matmul(h2, ffn["w1"]), ffn["b1"]))
    x = add(x, add(matmul(mid, ffn["w2"]), ffn["b2"]))
    if capture is not None:
        capture.hidden.append(x.data.copy())
        capture.attn_probs.append(probs)
        capture.attn_logits.append(logits)
    return x


def vision_forward(
    model: MsClipModel,
    images: Tensor,
    training: bool = False,
    capture: ForwardCapture | None = None,
) -> Tensor:
    """Full vision pass: stem, optional fusion, shared stack, projection.

    images: [B,3,H,W] -> L2-normalized embeddings [B,embed_dim].
    """
    cfg = model.config
    if images.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"expected images [B,3,{cfg.image_size},{cfg.image_size}], got {images.shape}"
        )
    vp = Params(model.params, "vision.")
    vbn = BnStates(model.bn_states, "vision.")
    if cfg.early_specialization:
        x = stems.early_spec_vision(
            vp.scope("stem"), vbn.scope("stem"), model.early_cfg, images,
            training, cfg.bn_momentum, cfg.bn_eps,
        )
        if capture is not None:
            capture.hidden.append(x.data.copy())
            capture.attn_probs.append(None)
            capture.attn_logits.append(None)
    else:
        x = stems.patch_embed(vp.scope("stem"), images, cfg.patch_size)

    feats = None
    fuse_at: dict[int, int] = {}
    if cfg.parallel_branch:
        feats = par.parallel_forward(
            vp.scope("branch"), vbn.scope("branch"), model.parallel_cfg, images,
            training, cfg.bn_momentum, cfg.bn_eps,
        )
        fuse_at = model.parallel_cfg.fuse_before_layers()

    for layer in model.shared_layer_range():
        if layer in fuse_at:
            k = fuse_at[layer]
            x = par.adapter_fuse(
                vp.scope("branch"), vbn.scope("branch"), model.parallel_cfg, k, x, feats[k],
                training, cfg.bn_momentum, cfg.bn_eps, cfg.ln_eps,
            )
        x = encoder_layer_forward(model, x, layer, VISION, BIDIRECTIONAL, capture)

    x = layer_norm(x, model.params["vision.ln_post.gamma"], model.params["vision.ln_post.beta"], cfg.ln_eps)
    cls = take_rows(x, np.zeros(x.shape[0], dtype=np.int64))
    return l2_normalize(matmul(cls, model.params["vision.proj"]))


def text_forward(
    model: MsClipModel,
    ids: np.ndarray,
    eos_positions: np.ndarray,
    training: bool = False,
    capture: ForwardCapture | None = None,
) -> Tensor:
    """Full text pass on padded [B,T] ids -> L2-normalized [B,embed_dim]."""
    cfg = model.config
    tp = Params(model.params, "text.")
    x = stems.embed_text(tp.scope("stem"), ids, cfg.context_length)
    if cfg.early_specialization:
        x = encoder_layer_forward(model, x, 0, TEXT, CAUSAL, capture)
    for layer in model.shared_layer_range():
        x = encoder_layer_forward(model, x, layer, TEXT, CAUSAL, capture)
    x = layer_norm(x, model.params["text.ln_final.gamma"], model.params["text.ln_final.beta"], cfg.ln_eps)
    eos = take_rows(x, np.asarray(eos_positions, dtype=np.int64))
    return l2_normalize(matmul(eos, model.params["text.proj"]))


def encode_image(
    model: MsClipModel,
    image: Tensor | np.ndarray,
    training: bool = False,
    capture: ForwardCapture | None = None,
) -> Tensor:
    """Embed a single [3,H,W] image to a unit vector [embed_dim]."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3:
        raise DimensionError(f"encode_image expects [3,H,W], got {data.shape}")
    batch = Tensor(data[None].astype(model.config.np_dtype(), copy=False))
    emb = vision_forward(model, batch, training, capture)
    return reshape(emb, (model.config.embed_dim,))


def encode_text(
    model: MsClipModel,
    tokens: stems.TokenIds,
    training: bool = False,
    capture: ForwardCapture | None = None,
) -> Tensor:
    """Embed one tokenized caption (feature taken at the EOS position)."""
    if not isinstance(tokens, stems.TokenIds):
        tokens = stems.TokenIds(tokens)
    if len(tokens) > model.config.context_length:
        raise InputError(
            f"sequence length {len(tokens)} exceeds context {model.config.context_length}"
        )
    if tokens.ids.max() >= model.config.vocab_size:
        raise InputError(
            f"token id {int(tokens.ids.max())} outside vocabulary of {model.config.vocab_size}"
        )
    ids = tokens.ids[None, :]
    eos = np.array([tokens.eos_position], dtype=np.int64)
    emb = text_forward(model, ids, eos, training, capture)
    return reshape(emb, (model.config.embed_dim,))
