"""Bidirectional conversion between structured annotations and fixed-length
token sequences.

Coordinates quantize into B = 2R uniform bins: offsets over [-R, R] (1 px
bins), ray lengths and absolute coordinates over [0, R] (0.5 px bins).
Token layouts per track: det [class, 4 box offsets]; insseg [class, 4 box
offsets, 2 center offsets, 24 rays]; semseg 16 raster labels; caption 20
subword pieces padded with terminators; grounding 4 absolute coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assign import BACKGROUND, instance_center, polar_decode, polar_encode
from .errors import (InvalidCoordinate, OffsetOverflow, ScheduleViolation,
                     UnknownCategory)
from .tasks import StepKind, Task, TaskSpec
from .vocab import Tokenizer, Vocabulary

# Sentinel for unsupervised padding slots (background tracks); embedded as a
# zero vector, never decoded.
PAD = -1


def discretize(x: float, lo: float, hi: float, bins: int) -> int:
    if not math.isfinite(x):
        raise InvalidCoordinate(f"non-finite coordinate {x}")
    b = math.floor((x - lo) / (hi - lo) * bins)
    return min(max(b, 0), bins - 1)


def undiscretize(b: int, lo: float, hi: float, bins: int) -> float:
    """Bin center."""
    return lo + (b + 0.5) * (hi - lo) / bins


def coord_range(kind: StepKind, image_size: int) -> tuple[float, float]:
    if kind is StepKind.OFFSET:
        return -float(image_size), float(image_size)
    if kind in (StepKind.RAY, StepKind.ABS):
        return 0.0, float(image_size)
    raise ValueError(f"{kind} is not a coordinate step")


def encode_coord(x: float, kind: StepKind, spec: TaskSpec) -> int:
    lo, hi = coord_range(kind, spec.image_size)
    if kind is StepKind.OFFSET and not lo <= x <= hi:
        raise OffsetOverflow(f"offset {x} outside [{lo}, {hi}]")
    return discretize(x, lo, hi, spec.num_bins)


def decode_coord(b: int, kind: StepKind, spec: TaskSpec) -> float:
    lo, hi = coord_range(kind, spec.image_size)
    return undiscretize(b, lo, hi, spec.num_bins)


# ---------------------------------------------------------------- encoders

def encode_detection(spec: TaskSpec, vocab: Vocabulary, box, category: str,
                     grid_point) -> tuple[list[int], list[int]]:
    """[class, x1, y1, x2, y2] as offsets from the grid point; returns
    (tokens, supervision mask)."""
    gx, gy = grid_point
    try:
        cat = vocab.concept_id(category)
    except KeyError as e:
        raise UnknownCategory(category) from e
    offs = [box[0] - gx, box[1] - gy, box[2] - gx, box[3] - gy]
    tokens = [cat] + [encode_coord(o, StepKind.OFFSET, spec) for o in offs]
    return tokens, [1] * 5


def encode_background(spec: TaskSpec, vocab: Vocabulary) -> tuple[list[int], list[int]]:
    """Background track: one supervised class token, padding after."""
    steps = spec.steps
    return ([vocab.background_id] + [PAD] * (steps - 1),
            [1] + [0] * (steps - 1))


def encode_instance(spec: TaskSpec, vocab: Vocabulary, polygon, box,
                    category: str, grid_point) -> tuple[list[int], list[int]]:
    """[class, box(4), mass-center(2), ray lengths(24)] = 31 tokens."""
    gx, gy = grid_point
    try:
        cat = vocab.concept_id(category)
    except KeyError as e:
        raise UnknownCategory(category) from e
    center = instance_center(polygon)
    rays = polar_encode(polygon, center)
    offs = [box[0] - gx, box[1] - gy, box[2] - gx, box[3] - gy,
            center[0] - gx, center[1] - gy]
    tokens = ([cat]
              + [encode_coord(o, StepKind.OFFSET, spec) for o in offs]
              + [encode_coord(r, StepKind.RAY, spec) for r in rays])
    return tokens, [1] * len(tokens)


def encode_dense(spec: TaskSpec, vocab: Vocabulary,
                 labels) -> tuple[list[int], list[int]]:
    """One grid point's 4x4 label block, raster order; labels are class
    indices with -1 for background."""
    flat = np.asarray(labels).reshape(-1)
    if flat.size != spec.steps:
        raise UnknownCategory(f"expected {spec.steps} labels, got {flat.size}")
    tokens = []
    for lab in flat:
        if lab == BACKGROUND:
            tokens.append(vocab.background_id)
        elif 0 <= lab < vocab.num_concepts:
            tokens.append(vocab.coord_bins + int(lab))
        else:
            raise UnknownCategory(f"label {lab}")
    return tokens, [1] * len(tokens)


def encode_caption(spec: TaskSpec, vocab: Vocabulary, text: str,
                   tokenizer: Tokenizer | None = None) -> tuple[list[int], list[int]]:
    """Exactly 20 tokens, right-padded with terminators; over-long captions
    truncate. Supervision covers the text and the first terminator."""
    tokenizer = tokenizer or Tokenizer(vocab.base_entries)
    ids = tokenizer.tokenize(text)[: spec.steps - 1]
    eos = tokenizer.eos_id
    tokens = ids + [eos] * (spec.steps - len(ids))
    mask = [1] * (len(ids) + 1) + [0] * (spec.steps - len(ids) - 1)
    return tokens, mask


def encode_grounding(spec: TaskSpec, vocab: Vocabulary,
                     box) -> tuple[list[int], list[int]]:
    """4 absolute coordinates; grounding boxes skip the grid anchor."""
    tokens = [encode_coord(c, StepKind.ABS, spec) for c in box]
    return tokens, [1] * 4


# ---------------------------------------------------------------- outputs

@dataclass
class DetectionOutput:
    category: str
    category_index: int
    box: tuple[float, float, float, float]


@dataclass
class InstanceOutput:
    category: str
    category_index: int
    box: tuple[float, float, float, float]
    center: tuple[float, float]
    polygon: np.ndarray


@dataclass
class DenseOutput:
    labels: np.ndarray  # (4, 4) class indices, -1 background


@dataclass
class CaptionOutput:
    text: str
    token_ids: list[int]


@dataclass
class GroundingOutput:
    box: tuple[float, float, float, float]


def validate_schedule(spec: TaskSpec, vocab: Vocabulary,
                      tokens) -> None:
    if len(tokens) != spec.steps:
        raise ScheduleViolation(
            f"{len(tokens)} tokens for {spec.steps}-step task {spec.task}")
    for s, (tok, kind) in enumerate(zip(tokens, spec.kinds)):
        if tok not in vocab.slice_for(kind):
            raise ScheduleViolation(f"token {tok} outside {kind} slice at step {s}")


def decode_response(spec: TaskSpec, vocab: Vocabulary, tokens,
                    grid_point=None):
    """Inverse codec. Background class at step 0 returns None (empty output)
    for the sparse tasks; caption tokens after the first terminator are
    dropped."""
    task = spec.task
    if task is Task.CAPTION:
        if len(tokens) != spec.steps:
            raise ScheduleViolation(f"caption length {len(tokens)}")
        tokenizer = Tokenizer(vocab.base_entries)
        kept: list[int] = []
        for tok in tokens:
            if tok not in vocab.slice_for(StepKind.TEXT):
                raise ScheduleViolation(f"token {tok} outside base vocabulary")
            if tok == tokenizer.eos_id:
                break
            kept.append(tok)
        return CaptionOutput(text=tokenizer.detokenize(kept), token_ids=kept)

    if task is Task.GROUNDING:
        validate_schedule(spec, vocab, tokens)
        box = tuple(decode_coord(t, StepKind.ABS, spec) for t in tokens)
        return GroundingOutput(box=box)

    if task is Task.SEMANTIC_SEG:
        validate_schedule(spec, vocab, tokens)
        labels = np.array([BACKGROUND if t == vocab.background_id
                           else t - vocab.coord_bins for t in tokens])
        return DenseOutput(labels=labels.reshape(4, 4))

    # sparse tasks need their anchor
    gx, gy = grid_point
    if tokens[0] not in vocab.slice_for(StepKind.CLASS):
        raise ScheduleViolation(f"class token {tokens[0]} outside slice")
    if tokens[0] == vocab.background_id:
        return None
    validate_schedule(spec, vocab, tokens)
    cat_idx = tokens[0] - vocab.coord_bins
    name = vocab.concept_entries[cat_idx][0]
    offs = [decode_coord(t, StepKind.OFFSET, spec) for t in tokens[1:5]]
    box = (gx + offs[0], gy + offs[1], gx + offs[2], gy + offs[3])
    if task is Task.DETECTION:
        return DetectionOutput(category=name, category_index=cat_idx, box=box)
    cofs = [decode_coord(t, StepKind.OFFSET, spec) for t in tokens[5:7]]
    center = (gx + cofs[0], gy + cofs[1])
    rays = [decode_coord(t, StepKind.RAY, spec) for t in tokens[7:31]]
    poly, _ = polar_decode(center, rays)
    return InstanceOutput(category=name, category_index=cat_idx, box=box,
                          center=center, polygon=poly)


# ---------------------------------------------------------------- dumps

def dump_tracks(spec: TaskSpec, vocab: Vocabulary, points,
                track_tokens) -> str:
    """One track per line of space-separated surface forms, preceded by a
    comment header naming the task and the grid points."""
    lines = [f"# task={spec.task.value} image={spec.image_size} "
             f"steps={spec.steps}"]
    pts = " ".join(f"({p[0]:g},{p[1]:g})" for p in points)
    lines.append(f"# points: {pts}")
    for tokens in track_tokens:
        surfaces = ["[pad]" if t == PAD else vocab.surface(t) for t in tokens]
        lines.append(" ".join(surfaces))
    return "\n".join(lines) + "\n"
