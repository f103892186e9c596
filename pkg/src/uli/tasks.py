"""Task definitions: the five supported tasks, their decode-step schedules,
grid geometry parameters, and the desk/paper configuration profiles.

Each task decodes a fixed number of tokens per track (det 5, insseg 31,
semseg 16, caption 20, grounding 4); every step draws from one of a small
set of vocabulary slices described by StepKind.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class Task(str, enum.Enum):
    DETECTION = "det"
    INSTANCE_SEG = "insseg"
    SEMANTIC_SEG = "semseg"
    CAPTION = "caption"
    GROUNDING = "grounding"


class StepKind(enum.Enum):
    """What a decode step predicts; fixes its vocabulary slice and, for
    coordinates, the continuous range being quantized."""

    CLASS = "class"      # category or background
    OFFSET = "offset"    # signed pixel offset from the grid point, [-R, R]
    RAY = "ray"          # ray length from the mass center, [0, R]
    ABS = "abs"          # absolute image coordinate, [0, R]
    DENSE = "dense"      # one cell of the downsampled semantic map
    TEXT = "text"        # subword piece or terminator

    @property
    def is_coord(self) -> bool:
        return self in (StepKind.OFFSET, StepKind.RAY, StepKind.ABS)


# Decoded tokens per track, fixed per task.
STEP_COUNTS = {
    Task.DETECTION: 5,
    Task.INSTANCE_SEG: 31,
    Task.SEMANTIC_SEG: 16,
    Task.CAPTION: 20,
    Task.GROUNDING: 4,
}

# Raster mask annotations are reduced by this factor before token encoding;
# each semseg grid point then owns a DENSE_BLOCK x DENSE_BLOCK cell block.
DENSE_DOWNSAMPLE = 4
DENSE_BLOCK = 4

# Text prompt naming the task; composed into the single task-identifier token.
TASK_PROMPTS = {
    Task.DETECTION: "object detection",
    Task.INSTANCE_SEG: "instance segmentation",
    Task.SEMANTIC_SEG: "semantic segmentation",
    Task.CAPTION: "image captioning",
    Task.GROUNDING: "visual grounding",
}


def step_kinds(task: Task) -> tuple[StepKind, ...]:
    """Per-step prediction kinds, in decode order."""
    c, o, r = StepKind.CLASS, StepKind.OFFSET, StepKind.RAY
    if task is Task.DETECTION:
        return (c,) + (o,) * 4
    if task is Task.INSTANCE_SEG:
        # class, box corners, mass-center offsets, 24 ray lengths
        return (c,) + (o,) * 4 + (o,) * 2 + (r,) * 24
    if task is Task.SEMANTIC_SEG:
        return (StepKind.DENSE,) * 16
    if task is Task.CAPTION:
        return (StepKind.TEXT,) * 20
    if task is Task.GROUNDING:
        return (StepKind.ABS,) * 4
    raise ValueError(f"unknown task {task!r}")


@dataclass(frozen=True)
class TaskSpec:
    """Static description of one task under one profile."""

    task: Task
    image_size: int
    patch_size: int
    window_patches: int            # window side length, in patches
    points_per_window: int = 0     # side length of the point lattice per window
                                   # (grid tasks only; 0 for derived/image-level)
    sample_budget: int = 0         # training tracks kept per window (0 = all)
    has_instruction: bool = False
    text_conditioning: bool = False
    max_instruction_tokens: int = 16

    @property
    def steps(self) -> int:
        return STEP_COUNTS[self.task]

    @property
    def kinds(self) -> tuple[StepKind, ...]:
        return step_kinds(self.task)

    @property
    def num_bins(self) -> int:
        """Coordinate bin count B = 2 x image resolution."""
        return 2 * self.image_size

    @property
    def prompt(self) -> str:
        return TASK_PROMPTS[self.task]


def desk_tasks() -> dict[Task, TaskSpec]:
    """Desk profile: 64 px images, patch 8, 4-patch windows."""
    base = dict(image_size=64, patch_size=8, window_patches=4)
    return {
        Task.DETECTION: TaskSpec(Task.DETECTION, points_per_window=2,
                                 sample_budget=3, **base),
        Task.INSTANCE_SEG: TaskSpec(Task.INSTANCE_SEG, points_per_window=2,
                                    sample_budget=3, **base),
        Task.SEMANTIC_SEG: TaskSpec(Task.SEMANTIC_SEG, **base),
        Task.CAPTION: TaskSpec(Task.CAPTION, **base),
        Task.GROUNDING: TaskSpec(Task.GROUNDING, has_instruction=True,
                                 text_conditioning=True, **base),
    }


def paper_tasks() -> dict[Task, TaskSpec]:
    """Published configuration, retained for documentation and geometry
    tests; full-scale training is out of scope."""
    return {
        Task.DETECTION: TaskSpec(Task.DETECTION, image_size=1120, patch_size=16,
                                 window_patches=14, points_per_window=5,
                                 sample_budget=10),
        Task.INSTANCE_SEG: TaskSpec(Task.INSTANCE_SEG, image_size=1120,
                                    patch_size=16, window_patches=14,
                                    points_per_window=5, sample_budget=10),
        Task.SEMANTIC_SEG: TaskSpec(Task.SEMANTIC_SEG, image_size=672,
                                    patch_size=16, window_patches=14,
                                    sample_budget=32),
        Task.CAPTION: TaskSpec(Task.CAPTION, image_size=224, patch_size=16,
                               window_patches=14),
        Task.GROUNDING: TaskSpec(Task.GROUNDING, image_size=224, patch_size=16,
                                 window_patches=14, has_instruction=True,
                                 text_conditioning=True),
    }


TASK_PROFILES = {"desk": desk_tasks, "paper": paper_tasks}


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic scene generator settings."""

    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    unique_classes: bool = False   # forbid repeated (color, shape) pairs
    background_gray: int = 40
