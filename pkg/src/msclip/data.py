"""Paired image/caption data: synthetic generation, manifests, grounding.

Synthetic records are self-describing ``synth:`` references that render
deterministically, so manifests stay tiny and byte-reproducible; records
may also point at ``.npy`` image files on disk.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white")

_COLOR_RGB = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
}

_POSITIONS = (
    "top left", "top center", "top right",
    "middle left", "center", "middle right",
    "bottom left", "bottom center", "bottom right",
)

_SIZES = ("small", "large")

_TEMPLATES = (
    "a {size} {color} {shape} in the {pos}",
    "the {pos} shows a {size} {color} {shape}",
    "photo of a {size} {color} {shape} at the {pos}",
    "a {color} {shape}, {size}, located in the {pos}",
)


@dataclass(frozen=True)
class PairRecord:
    image_ref: str  # "synth:..." or a path to a .npy image
    caption: str


@dataclass
class PairManifest:
    records: list[PairRecord]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.records)

    def captions(self) -> list[str]:
        return [r.caption for r in self.records]


@dataclass(frozen=True)
class Concept:
    box: tuple[float, float, float, float]  # x0, y0, x1, y1 in pixels
    span: tuple[int, int]  # half-open word-index span over the caption


@dataclass(frozen=True)
class GroundedPair:
    image_ref: str
    caption: str
    concepts: tuple[Concept, ...]


# ---------------------------------------------------------------------------
# synthetic rendering
# ---------------------------------------------------------------------------

def _synth_ref(size: int, shape: str, color: str, cell: int, scale: str, noise: int) -> str:
    return f"synth:v1;size={size};shape={shape};color={color};cell={cell};scale={scale};noise={noise}"


def parse_synth_ref(ref: str) -> dict:
    if not ref.startswith("synth:v1;"):
        raise InputError(f"not a synthetic image reference: {ref!r}")
    fields = {}
    for part in ref[len("synth:v1;"):].split(";"):
        key, _, value = part.partition("=")
        fields[key] = value
    try:
        return {
            "size": int(fields["size"]),
            "shape": fields["shape"],
            "color": fields["color"],
            "cell": int(fields["cell"]),
            "scale": fields["scale"],
            "noise": int(fields["noise"]),
        }
    except KeyError as exc:
        raise InputError(f"synthetic reference missing field {exc}: {ref!r}") from exc


def _shape_mask(shape: str, size: int, cy: float, cx: float, rad: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
    if shape == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= rad
    if shape == "triangle":
        top = cy - rad
        return (yy >= top) & (yy <= cy + rad) & (np.abs(xx - cx) <= (yy - top) * 0.5)
    if shape == "cross":
        arm = rad / 3.0
        return ((np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= rad)) | (
            (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= rad)
        )
    raise ConfigError(f"unknown shape {shape!r}")


def shape_bounding_box(spec: dict) -> tuple[float, float, float, float]:
    size = spec["size"]
    row, col = divmod(spec["cell"], 3)
    cy = (row + 0.5) * size / 3.0
    cx = (col + 0.5) * size / 3.0
    rad = size * (0.16 if spec["scale"] == "large" else 0.10)
    return (cx - rad, cy - rad, cx + rad, cy + rad)


def render_synthetic(ref: str) -> np.ndarray:
    """Deterministically render a synth: reference to a [3,S,S] float32 image."""
    spec = parse_synth_ref(ref)
    size = spec["size"]
    rng = np.random.default_rng(spec["noise"])
    base = rng.uniform(0.30, 0.50, size=(size, size))
    img = np.repeat(base[None, :, :], 3, axis=0)
    row, col = divmod(spec["cell"], 3)
    cy = (row + 0.5) * size / 3.0
    cx = (col + 0.5) * size / 3.0
    rad = size * (0.16 if spec["scale"] == "large" else 0.10)
    mask = _shape_mask(spec["shape"], size, cy, cx, rad)
    rgb = _COLOR_RGB[spec["color"]]
    jitter = rng.uniform(-0.03, 0.03, size=3)
    for c in range(3):
        img[c][mask] = np.clip(rgb[c] + jitter[c], 0.0, 1.0)
    return img.astype(np.float32)


def load_image(record: PairRecord, root: str | None = None) -> np.ndarray:
    if record.image_ref.startswith("synth:"):
        return render_synthetic(record.image_ref)
    path = record.image_ref
    if root is not None and not os.path.isabs(path):
        path = os.path.join(root, path)
    return np.load(path).astype(np.float32)


def class_of_record(record: PairRecord) -> str:
    """Class name ("<color> <shape>") of a synthetic record."""
    spec = parse_synth_ref(record.image_ref)
    return f"{spec['color']} {spec['shape']}"


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def class_list(num_classes: int) -> list[tuple[str, str]]:
    combos = [(s, c) for c in COLORS for s in SHAPES]
    if not 2 <= num_classes <= len(combos):
        raise ConfigError(f"num_classes must be in 2..{len(combos)}, got {num_classes}")
    return combos[:num_classes]


def generate_synthetic_pairs(
    num_classes: int,
    pairs_per_class: int,
    seed: int,
    image_size: int = 224,
    split: str = "train",
) -> PairManifest:
    """Procedurally drawn colored shapes with templated captions.

    Captions name the class's shape and color plus the rendered position
    and size, so each pair is (almost always) textually distinctive while
    staying class-consistent.
    """
    classes = class_list(num_classes)
    rng = np.random.default_rng(seed)
    records = []
    for shape, color in classes:
        for _ in range(pairs_per_class):
            cell = int(rng.integers(0, 9))
            scale = _SIZES[int(rng.integers(0, 2))]
            template = _TEMPLATES[int(rng.integers(0, len(_TEMPLATES)))]
            noise = int(rng.integers(0, 2**31 - 1))
            ref = _synth_ref(image_size, shape, color, cell, scale, noise)
            caption = template.format(size=scale, color=color, shape=shape, pos=_POSITIONS[cell])
            records.append(PairRecord(ref, caption))
    return PairManifest(records, split=split)


def generate_grounded_pairs(
    num_pairs: int, seed: int, image_size: int = 224
) -> list[GroundedPair]:
    """Two-shape scenes with boxes grounded to caption word spans."""
    rng = np.random.default_rng(seed)
    out = []
    combos = [(s, c) for c in COLORS for s in SHAPES]
    for _ in range(num_pairs):
        i, j = rng.choice(len(combos), size=2, replace=False)
        (shape_a, color_a), (shape_b, color_b) = combos[i], combos[j]
        cell_a, cell_b = rng.choice(9, size=2, replace=False)
        noise = int(rng.integers(0, 2**31 - 1))
        ref = _synth_ref(image_size, shape_a, color_a, int(cell_a), "large", noise)
        spec_a = parse_synth_ref(ref)
        spec_b = dict(spec_a, shape=shape_b, color=color_b, cell=int(cell_b))
        caption = f"a {color_a} {shape_a} and a {color_b} {shape_b}"
        # word indices: a(0) color(1) shape(2) and(3) a(4) color(5) shape(6)
        concepts = (
            Concept(shape_bounding_box(spec_a), (1, 3)),
            Concept(shape_bounding_box(spec_b), (5, 7)),
        )
        out.append(GroundedPair(ref, caption, concepts))
    return out


def render_grounded_image(pair: GroundedPair) -> np.ndarray:
    """Render both shapes of a grounded pair into one image."""
    spec = parse_synth_ref(pair.image_ref)
    img = render_synthetic(pair.image_ref)
    words = pair.caption.split()
    # second concept's appearance is encoded by its caption words + box
    color_b, shape_b = words[5], words[6]
    box = pair.concepts[1].box
    cx, cy = (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0
    rad = (box[2] - box[0]) / 2.0
    mask = _shape_mask(shape_b, spec["size"], cy, cx, rad)
    rgb = _COLOR_RGB[color_b]
    for c in range(3):
        img[c][mask] = rgb[c]
    return img


# ---------------------------------------------------------------------------
# manifest and grounded-pair files
# ---------------------------------------------------------------------------

def save_manifest(manifest: PairManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest.records:
            f.write(f"{r.image_ref}\t{r.caption}\n")


def load_manifest(path: str, split: str = "train") -> tuple[PairManifest, list[str]]:
    """Parse a TSV manifest; returns (manifest, warnings for rejected lines)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    root = os.path.dirname(os.path.abspath(path))
    records = []
    warnings = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            warnings.append(f"line {lineno}: missing tab separator")
            continue
        ref, _, caption = line.partition("\t")
        caption = caption.strip()
        if not ref or not caption:
            warnings.append(f"line {lineno}: empty path or caption")
            continue
        if ref.startswith("synth:"):
            try:
                parse_synth_ref(ref)
            except InputError:
                warnings.append(f"line {lineno}: malformed synthetic reference")
                continue
        else:
            resolved = ref if os.path.isabs(ref) else os.path.join(root, ref)
            if not os.path.exists(resolved):
                warnings.append(f"line {lineno}: image file not found: {ref}")
                continue
            ref = resolved
        records.append(PairRecord(ref, caption))
    if not records:
        raise InputError(f"manifest {path} contains no valid records")
    return PairManifest(records, split=split), warnings


def save_grounded_pairs(pairs: list[GroundedPair], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            concepts = ";".join(
                f"{c.box[0]:g},{c.box[1]:g},{c.box[2]:g},{c.box[3]:g}:{c.span[0]},{c.span[1]}"
                for c in p.concepts
            )
            f.write(f"{p.image_ref}\t{p.caption}\t{concepts}\n")


def load_grounded_pairs(path: str) -> list[GroundedPair]:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise InputError(f"grounded pairs line {lineno}: expected 3 tab-separated fields")
        ref, caption, concept_field = parts
        concepts = []
        for chunk in concept_field.split(";"):
            box_part, _, span_part = chunk.partition(":")
            try:
                box = tuple(float(v) for v in box_part.split(","))
                span = tuple(int(v) for v in span_part.split(","))
            except ValueError as exc:
                raise InputError(f"grounded pairs line {lineno}: bad concept {chunk!r}") from exc
            if len(box) != 4 or len(span) != 2:
                raise InputError(f"grounded pairs line {lineno}: bad concept {chunk!r}")
            concepts.append(Concept(box, span))
        out.append(GroundedPair(ref, caption, tuple(concepts)))
    if not out:
        raise InputError(f"grounded pairs file {path} contains no records")
    return out


def materialize_manifest(manifest: PairManifest, out_dir: str) -> PairManifest:
    """Write synthetic images to .npy files and return a path-based manifest."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i, r in enumerate(manifest.records):
        img = load_image(r)
        path = os.path.join(out_dir, f"img_{i:05d}.npy")
        np.save(path, img)
        records.append(PairRecord(path, r.caption))
    return PairManifest(records, split=manifest.split)
