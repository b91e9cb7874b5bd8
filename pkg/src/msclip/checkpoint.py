"""Checkpoint container: versioned plain-text header + raw little-endian payload.

The header carries the encoder config, the sharing policy, the build seed
and a byte-range index of every named tensor (parameters and batch-norm
buffers).  Round-trips are bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .encoder import EncoderConfig, LayerSharing, MsClipModel, SharingPolicy, build_model
from .errors import InputError

MAGIC = "msclip-checkpoint v1"

_DTYPE_TAGS = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}


def _header_lines(model: MsClipModel, index: list[tuple[str, str, tuple[int, ...], int, int]]) -> list[str]:
    lines = [MAGIC, f"seed={model.seed}"]
    for key, value in vars(model.config).items():
        lines.append(f"config.{key}={json.dumps(value)}")
    for i, layer in enumerate(model.policy.layers):
        flags = ",".join(
            str(int(v)) for v in (layer.shared_attn, layer.shared_ffn, layer.shared_ln1, layer.shared_ln2)
        )
        lines.append(f"policy.layer{i}={flags}")
    for name, state in model.bn_states.items():
        lines.append(f"bnstate.{name}={state.count}")
    for name, tag, shape, offset, nbytes in index:
        shape_s = ",".join(str(s) for s in shape) if shape else "scalar"
        lines.append(f"tensor {name} {tag} {shape_s} {offset} {nbytes}")
    lines.append("end-header")
    return lines


def _named_arrays(model: MsClipModel) -> list[tuple[str, np.ndarray]]:
    arrays = [(name, p.data) for name, p in model.params.items()]
    for name, state in model.bn_states.items():
        arrays.append((f"{name}.running_mean", state.running_mean))
        arrays.append((f"{name}.running_var", state.running_var))
    return arrays


def save_checkpoint(model: MsClipModel, path: str) -> None:
    arrays = _named_arrays(model)
    index = []
    offset = 0
    payload = []
    for name, arr in arrays:
        tag = _DTYPE_TAGS[arr.dtype]
        raw = np.ascontiguousarray(arr).astype(tag, copy=False).tobytes()
        index.append((name, tag, arr.shape, offset, len(raw)))
        payload.append(raw)
        offset += len(raw)
    header = "\n".join(_header_lines(model, index)) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        for raw in payload:
            f.write(raw)


def load_checkpoint(path: str) -> MsClipModel:
    with open(path, "rb") as f:
        blob = f.read()
    marker = b"end-header\n"
    cut = blob.find(marker)
    if cut < 0:
        raise InputError(f"{path}: missing end-header marker")
    header = blob[:cut].decode("utf-8").splitlines()
    payload = blob[cut + len(marker):]
    if not header or header[0] != MAGIC:
        raise InputError(f"{path}: not a checkpoint file (bad magic)")

    seed = 0
    config_kv: dict[str, object] = {}
    policy_flags: dict[int, LayerSharing] = {}
    bn_counts: dict[str, int] = {}
    index: list[tuple[str, str, tuple[int, ...], int, int]] = []
    for line in header[1:]:
        if line.startswith("seed="):
            seed = int(line.split("=", 1)[1])
        elif line.startswith("config."):
            key, _, value = line[len("config."):].partition("=")
            config_kv[key] = json.loads(value)
        elif line.startswith("policy.layer"):
            key, _, value = line[len("policy.layer"):].partition("=")
            flags = [bool(int(v)) for v in value.split(",")]
            policy_flags[int(key)] = LayerSharing(*flags)
        elif line.startswith("bnstate."):
            key, _, value = line[len("bnstate."):].partition("=")
            bn_counts[key] = int(value)
        elif line.startswith("tensor "):
            _, name, tag, shape_s, offset_s, nbytes_s = line.split(" ")
            shape = () if shape_s == "scalar" else tuple(int(v) for v in shape_s.split(","))
            index.append((name, tag, shape, int(offset_s), int(nbytes_s)))
        else:
            raise InputError(f"{path}: unrecognized header line {line!r}")

    config = EncoderConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in config_kv.items()})
    policy = SharingPolicy(tuple(policy_flags[i] for i in range(len(policy_flags))))
    model = build_model(config, policy, seed=seed)

    tensors: dict[str, np.ndarray] = {}
    for name, tag, shape, offset, nbytes in index:
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=tag).reshape(shape)
        tensors[name] = arr
    for name, p in model.params.items():
        if name not in tensors:
            raise InputError(f"{path}: checkpoint missing parameter {name}")
        p.data = tensors[name].astype(p.data.dtype, copy=True).reshape(p.data.shape)
    for name, state in model.bn_states.items():
        state.running_mean = tensors[f"{name}.running_mean"].astype(
            state.running_mean.dtype, copy=True
        )
        state.running_var = tensors[f"{name}.running_var"].astype(
            state.running_var.dtype, copy=True
        )
        state.count = bn_counts.get(name, 0)
    return model
