"""Symmetric contrastive objective, AdamW with split weight decay, and the
training loop.

Shared parameters are updated through both modality graphs each step, so
their decay rate (0.2) is deliberately higher than for modality-specific
parameters (0.05); the learnable temperature is excluded from decay.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from .encoder import TEMPERATURE_NAME, MsClipModel, text_forward, vision_forward
from .errors import ContractError, NumericError
from .numerics import (
    Tape,
    Tensor,
    add,
    backward,
    exp,
    getitem,
    log,
    matmul,
    mul,
    reshape,
    sub,
    tensor_mean,
    tensor_sum,
    transpose,
)
from .stems import Tokenizer, pad_token_batch


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear warmup followed by a cosine decay to lr_min."""

    lr_max: float = 1.6e-3
    lr_min: float = 1.6e-4
    warmup_epochs: int = 5
    total_epochs: int = 30
    steps_per_epoch: int = 1

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    total = schedule.total_steps
    warmup = schedule.warmup_steps
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside schedule range 0..{total}")
    if warmup > 0 and step < warmup:
        return schedule.lr_max * step / warmup
    if total == warmup:
        return schedule.lr_max
    progress = (step - warmup) / (total - warmup)
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (
        1.0 + math.cos(math.pi * progress)
    )


# ---------------------------------------------------------------------------
# contrastive objective
# ---------------------------------------------------------------------------

def _cross_entropy_with_diagonal_targets(logits: Tensor) -> Tensor:
    """Mean CE over rows where row i's target is column i."""
    n = logits.shape[0]
    shift = Tensor(logits.data.max(axis=-1, keepdims=True).copy())  # constant
    lse = add(log(tensor_sum(exp(sub(logits, shift)), axis=-1)), reshape(shift, (n,)))
    idx = np.arange(n)
    diag = getitem(logits, (idx, idx))
    return tensor_mean(sub(lse, diag))


def contrastive_loss(img_emb: Tensor, txt_emb: Tensor, scale: Tensor | float = 1.0) -> Tensor:
    """Mean of image->text and text->image cross-entropies over the scaled
    cosine-similarity matrix with matched pairs on the diagonal.

    Rows must arrive L2-normalized; ``scale`` multiplies the similarities
    (pass the exponentiated learnable temperature here).
    """
    n = img_emb.shape[0]
    if n < 2:
        raise ContractError(f"contrastive loss needs at least 2 pairs, got {n}")
    if txt_emb.shape != img_emb.shape:
        raise ContractError(f"embedding shapes differ: {img_emb.shape} vs {txt_emb.shape}")
    for name, emb in (("image", img_emb), ("text", txt_emb)):
        norms = np.sqrt((emb.data.astype(np.float64) ** 2).sum(axis=-1))
        if np.abs(norms - 1.0).max() > 1e-3:
            raise ContractError(
                f"{name} embeddings are not L2-normalized (max deviation {np.abs(norms - 1.0).max():.2e})"
            )
    sims = matmul(img_emb, transpose(txt_emb))
    if isinstance(scale, Tensor):
        logits = mul(sims, scale)
    else:
        logits = mul(sims, Tensor(np.asarray(scale, dtype=sims.dtype)))
    loss_i2t = _cross_entropy_with_diagonal_targets(logits)
    loss_t2i = _cross_entropy_with_diagonal_targets(transpose(logits))
    return mul(add(loss_i2t, loss_t2i), Tensor(np.asarray(0.5, dtype=sims.dtype)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """AdamW moments plus the shared / non-shared decay-group metadata."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    decay: dict[str, float]  # parameter name -> weight-decay rate
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6

    @classmethod
    def for_model(
        cls,
        model: MsClipModel,
        shared_wd: float = 0.2,
        non_shared_wd: float = 0.05,
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-6,
    ) -> "OptimizerState":
        m = {}
        v = {}
        decay = {}
        for name, p in model.named_parameters():
            m[name] = np.zeros_like(p.data)
            v[name] = np.zeros_like(p.data)
            group = MsClipModel.group_of(name)
            if group == "shared":
                decay[name] = shared_wd
            elif group == "temperature":
                decay[name] = 0.0
            else:
                decay[name] = non_shared_wd
        return cls(m=m, v=v, step=0, decay=decay, beta1=beta1, beta2=beta2, eps=eps)


def adamw_step(
    model: MsClipModel,
    state: OptimizerState,
    lr: float,
    grads: dict[str, np.ndarray] | None = None,
) -> None:
    """Decoupled-decay update; the decay rate follows the parameter group."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            raise ContractError(f"parameter {name} has no gradient")
        wd = state.decay[name]
        if wd:
            p.data *= 1.0 - lr * wd
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    model.clamp_logit_scale()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 32
    seed: int = 0
    grad_accum: int = 1
    shared_wd: float = 0.2
    non_shared_wd: float = 0.05
    out_dir: str | None = None
    checkpoint_every: int = 1  # epochs; 0 disables periodic checkpoints
    log_name: str = "train_log.jsonl"


def prepare_batches(
    manifest: datamod.PairManifest, batch_size: int, rng: np.random.Generator
) -> list[list[int]]:
    order = rng.permutation(len(manifest.records))
    batches = [order[i : i + batch_size].tolist() for i in range(0, len(order), batch_size)]
    return [b for b in batches if len(b) >= 2]


def encode_pair_batch(
    model: MsClipModel,
    manifest: datamod.PairManifest,
    indices: list[int],
    tokenizer: Tokenizer,
    training: bool,
) -> tuple[Tensor, Tensor]:
    dtype = model.config.np_dtype()
    images = np.stack(
        [datamod.load_image(manifest.records[i]) for i in indices]
    ).astype(dtype)
    tokens = [
        tokenizer.encode(manifest.records[i].caption, model.config.context_length)
        for i in indices
    ]
    ids, eos = pad_token_batch(tokens)
    img_emb = vision_forward(model, Tensor(images), training=training)
    txt_emb = text_forward(model, ids, eos, training=training)
    return img_emb, txt_emb


def train(
    model: MsClipModel,
    manifest: datamod.PairManifest,
    config: TrainConfig,
    tokenizer: Tokenizer | None = None,
) -> list[dict]:
    """Run the contrastive loop; returns the per-step log records.

    Deterministic under a fixed seed.  A NaN loss aborts with a diagnostic.
    """
    from .checkpoint import save_checkpoint  # local import to avoid a cycle

    if not manifest.records:
        raise ContractError("manifest is empty")
    if config.batch_size < 2:
        raise ContractError(f"batch size must be >= 2, got {config.batch_size}")
    if tokenizer is None:
        tokenizer = Tokenizer.build(manifest.captions(), model.config.vocab_size)
    state = OptimizerState.for_model(
        model, shared_wd=config.shared_wd, non_shared_wd=config.non_shared_wd
    )
    rng = np.random.default_rng(config.seed)
    records: list[dict] = []
    log_file = None
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        tokenizer.save(os.path.join(config.out_dir, "vocab.txt"))
        log_file = open(os.path.join(config.out_dir, config.log_name), "w", encoding="utf-8")
    step = 0
    try:
        for epoch in range(config.schedule.total_epochs):
            batches = prepare_batches(manifest, config.batch_size, rng)
            accum = 0
            for batch in batches:
                with Tape():
                    img_emb, txt_emb = encode_pair_batch(
                        model, manifest, batch, tokenizer, training=True
                    )
                    scale = exp(model.logit_scale)
                    loss = contrastive_loss(img_emb, txt_emb, scale)
                backward(loss)
                loss_value = loss.item()
                if math.isnan(loss_value):
                    raise NumericError(
                        f"loss became NaN at step {step} (epoch {epoch}); aborting"
                    )
                accum += 1
                if accum < config.grad_accum:
                    continue
                if config.grad_accum > 1:
                    inv = 1.0 / config.grad_accum
                    for _, p in model.named_parameters():
                        if p.grad is not None:
                            p.grad *= inv
                lr = lr_at(min(step, config.schedule.total_steps), config.schedule)
                adamw_step(model, state, lr)
                model.zero_grad()
                accum = 0
                record = {
                    "step": step,
                    "epoch": epoch,
                    "loss": loss_value,
                    "lr": lr,
                    "temp": float(np.exp(model.logit_scale.data)),
                }
                records.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                step += 1
            if (
                config.out_dir
                and config.checkpoint_every
                and (epoch + 1) % config.checkpoint_every == 0
            ):
                save_checkpoint(model, os.path.join(config.out_dir, f"ckpt-epoch{epoch + 1:03d}.bin"))
        if config.out_dir:
            save_checkpoint(model, os.path.join(config.out_dir, "ckpt-final.bin"))
    finally:
        if log_file is not None:
            log_file.close()
    return records
