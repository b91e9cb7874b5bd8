"""Named architecture presets and the experiment configuration schema.

Preset names map one-to-one onto the studied model family: the two
non-shared baselines, the shared-backbone baseline, its two auxiliary
variants, the combined model, the share-last-N spectrum and the
single-submodule ablations.  ``tiny=True`` shrinks every preset to a
CI-friendly scale while keeping all structural behavior active.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .encoder import EncoderConfig, MsClipModel, SharingPolicy, build_model
from .errors import ConfigError
from .training import ScheduleConfig, TrainConfig

PRESET_NAMES = (
    "clip_b32",
    "clip_b32_t768",
    "ms_clip",
    "ms_clip_early",
    "ms_clip_parallel",
    "ms_clip_s",
    "share_last_n",
    "attn_only",
    "ffn_only",
)

TINY = dict(
    num_layers=4,
    width=128,
    heads=4,
    patch_size=16,
    image_size=64,
    context_length=32,
    vocab_size=512,
    embed_dim=64,
)


def encoder_preset(name: str, n: int | None = None, tiny: bool = False, **overrides) -> tuple[EncoderConfig, SharingPolicy]:
    """Resolve a preset name to (EncoderConfig, SharingPolicy)."""
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    base = dict(TINY) if tiny else {}
    base.update(overrides)
    cfg = EncoderConfig(**base)
    layers = cfg.num_layers
    if name == "clip_b32":
        # the narrow-text baseline: 512 at full width, scaled otherwise,
        # rounded to a whole number of heads
        head_dim = cfg.width // cfg.heads
        tw = max(head_dim, round(cfg.width * 2 / 3 / head_dim) * head_dim)
        cfg = replace(cfg, text_width=tw)
        policy = SharingPolicy.share_none(layers)
    elif name == "clip_b32_t768":
        policy = SharingPolicy.share_none(layers)
    elif name == "ms_clip":
        policy = SharingPolicy.ms_clip(layers)
    elif name == "ms_clip_early":
        cfg = replace(cfg, early_specialization=True)
        policy = SharingPolicy.ms_clip(layers)
    elif name == "ms_clip_parallel":
        cfg = replace(cfg, parallel_branch=True)
        policy = SharingPolicy.ms_clip(layers)
    elif name == "ms_clip_s":
        cfg = replace(cfg, early_specialization=True, parallel_branch=True)
        policy = SharingPolicy.ms_clip(layers)
    elif name == "share_last_n":
        if n is None:
            raise ConfigError("preset share_last_n requires n")
        policy = SharingPolicy.share_last(layers, n)
    elif name == "attn_only":
        policy = SharingPolicy.attn_only(layers)
    else:
        policy = SharingPolicy.ffn_only(layers)
    return cfg, policy


def build_preset(name: str, n: int | None = None, tiny: bool = False, seed: int = 0, **overrides) -> MsClipModel:
    cfg, policy = encoder_preset(name, n=n, tiny=tiny, **overrides)
    return build_model(cfg, policy, seed=seed)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run."""

    preset: str = "ms_clip_s"
    share_last_n: int | None = None
    tiny: bool = False
    seed: int = 0
    out_dir: str = "runs/out"
    adapter_variant: str = "dwconv"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 32
    grad_accum: int = 1
    shared_wd: float = 0.2
    non_shared_wd: float = 0.05
    checkpoint_every: int = 1

    def encoder(self) -> tuple[EncoderConfig, SharingPolicy]:
        return encoder_preset(
            self.preset, n=self.share_last_n, tiny=self.tiny,
            **({"adapter_variant": self.adapter_variant} if self.adapter_variant != "dwconv" else {}),
        )

    def build(self) -> MsClipModel:
        cfg, policy = self.encoder()
        return build_model(cfg, policy, seed=self.seed)

    def train_config(self, steps_per_epoch: int) -> TrainConfig:
        return TrainConfig(
            schedule=replace(self.schedule, steps_per_epoch=steps_per_epoch),
            batch_size=self.batch_size,
            seed=self.seed,
            grad_accum=self.grad_accum,
            shared_wd=self.shared_wd,
            non_shared_wd=self.non_shared_wd,
            out_dir=self.out_dir,
            checkpoint_every=self.checkpoint_every,
        )


# ---------------------------------------------------------------------------
# flat dotted-key config files
# ---------------------------------------------------------------------------

def save_experiment_config(config: ExperimentConfig, path: str) -> None:
    lines = ["schema=1"]
    for key, value in vars(config).items():
        if key == "schedule":
            for skey, svalue in vars(value).items():
                lines.append(f"schedule.{skey}={json.dumps(svalue)}")
        else:
            lines.append(f"{key}={json.dumps(value)}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_experiment_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines or lines[0] != "schema=1":
        raise ConfigError(f"{path}: expected 'schema=1' first line")
    plain: dict[str, object] = {}
    schedule_kv: dict[str, object] = {}
    for line in lines[1:]:
        key, _, value = line.partition("=")
        parsed = json.loads(value)
        if key.startswith("schedule."):
            schedule_kv[key[len("schedule."):]] = parsed
        else:
            plain[key] = parsed
    config = ExperimentConfig(**plain)
    if schedule_kv:
        config.schedule = ScheduleConfig(**schedule_kv)
    return config
