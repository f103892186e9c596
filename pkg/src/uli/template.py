"""Multi-track sequence template: grid sampling, the flattened layout of
shared observation plus N parallel tracks, bilinear local features, and the
boolean attention masks.

Every track is [local feature token][task identifier][response steps] and
tracks never see each other; the shared observation (image patches and an
optional instruction) is visible to all tracks but blind to them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import GeometryError
from .tasks import DENSE_BLOCK, DENSE_DOWNSAMPLE, Task, TaskSpec

# Semantic-seg grid points sit one per this many pixels so that each point
# owns a DENSE_BLOCK x DENSE_BLOCK cell of the downsampled map exactly.
SEMSEG_STRIDE = DENSE_BLOCK * DENSE_DOWNSAMPLE


@dataclass(frozen=True)
class GridSpec:
    """Grid-point geometry plus the window partition of points and patches."""

    points: np.ndarray            # (N, 2) float pixel coords, row-major
    shape: tuple[int, int]        # point lattice (rows, cols)
    point_window: np.ndarray      # (N,) window index per point
    patch_window: np.ndarray      # (P,) window index per patch, raster order
    n_windows: int
    patch_shape: tuple[int, int]  # patch lattice (rows, cols)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_patches(self) -> int:
        return len(self.patch_window)


def make_grid(spec: TaskSpec) -> GridSpec:
    """Grid-point placement per task.

    Detection/instance: a points_per_window lattice centered in equal
    sub-cells of each window. Semantic seg: one point per 16 px cell (equals
    one per patch when patch size is 16). Image-level tasks: a single center
    point, with the whole image treated as one window.
    """
    size, patch = spec.image_size, spec.patch_size
    if size % patch:
        raise GeometryError(f"image {size} not divisible by patch {patch}")
    pside = size // patch
    if pside % spec.window_patches:
        raise GeometryError(
            f"patch grid {pside} not divisible by window {spec.window_patches}")
    wside = pside // spec.window_patches
    win_px = spec.window_patches * patch

    if spec.task in (Task.CAPTION, Task.GROUNDING):
        points = np.array([[size / 2.0, size / 2.0]])
        return GridSpec(points=points, shape=(1, 1),
                        point_window=np.zeros(1, dtype=np.int64),
                        patch_window=np.zeros(pside * pside, dtype=np.int64),
                        n_windows=1, patch_shape=(pside, pside))

    if spec.task is Task.SEMANTIC_SEG:
        if size % SEMSEG_STRIDE or win_px % SEMSEG_STRIDE:
            raise GeometryError(
                f"image/window not divisible by stride {SEMSEG_STRIDE}")
        side = size // SEMSEG_STRIDE
        stride = float(SEMSEG_STRIDE)
    else:
        if spec.points_per_window <= 0:
            raise GeometryError(f"{spec.task} needs points_per_window")
        side = wside * spec.points_per_window
        stride = size / side

    ax = (np.arange(side) + 0.5) * stride
    pts = np.stack(np.meshgrid(ax, ax), axis=-1).reshape(-1, 2)  # (x, y)
    point_window = ((pts[:, 1] // win_px).astype(np.int64) * wside
                    + (pts[:, 0] // win_px).astype(np.int64))
    pr, pc = np.divmod(np.arange(pside * pside), pside)
    patch_window = (pr // spec.window_patches) * wside + (pc // spec.window_patches)
    return GridSpec(points=pts, shape=(side, side),
                    point_window=point_window,
                    patch_window=patch_window.astype(np.int64),
                    n_windows=wside * wside, patch_shape=(pside, pside))


@dataclass(frozen=True)
class TrackLayout:
    """Flattened position bookkeeping for one (task, grid, selection)."""

    steps: int
    n_patches: int
    instruction_len: int
    track_indices: tuple[int, ...]   # selected grid-point indices
    track_window: tuple[int, ...]    # window per selected track
    spec: TaskSpec | None = None
    patch_window: np.ndarray = field(repr=False, default=None)
    points: np.ndarray = field(repr=False, default=None)  # (n_tracks, 2)

    @property
    def track_len(self) -> int:
        return 2 + self.steps

    @property
    def n_tracks(self) -> int:
        return len(self.track_indices)

    @property
    def shared_len(self) -> int:
        return self.n_patches + self.instruction_len

    @property
    def total_len(self) -> int:
        return self.shared_len + self.n_tracks * self.track_len

    def track_start(self, t: int) -> int:
        return self.shared_len + t * self.track_len

    def response_position(self, t: int, s: int) -> int:
        """Absolute position of response slot s of track t."""
        return self.track_start(t) + 2 + s

    def predict_position(self, t: int, s: int) -> int:
        """Position whose logits predict response step s (shift by one:
        the task identifier prompts step 0)."""
        return self.track_start(t) + 1 + s

    def segments(self) -> list[tuple[str, int | None, int]]:
        segs: list[tuple[str, int | None, int]] = [("image", None, self.n_patches)]
        if self.instruction_len:
            segs.append(("instruction", None, self.instruction_len))
        for t in range(self.n_tracks):
            segs += [("local_prompt", t, 1), ("task_prompt", t, 1),
                     ("response", t, self.steps)]
        return segs

    def position_tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(track_id, step_index, window) per absolute position; shared
        positions get track −1, instruction window −1 (wildcard)."""
        T = self.total_len
        track = np.full(T, -1, dtype=np.int64)
        step = np.full(T, -1, dtype=np.int64)
        window = np.full(T, -1, dtype=np.int64)
        window[: self.n_patches] = (0 if self.patch_window is None
                                    else self.patch_window)
        for t in range(self.n_tracks):
            lo = self.track_start(t)
            track[lo: lo + self.track_len] = t
            step[lo: lo + self.track_len] = np.arange(self.track_len)
            window[lo: lo + self.track_len] = self.track_window[t]
        return track, step, window


def build_layout(spec: TaskSpec, grid: GridSpec, instruction_len: int = 0,
                 track_indices: list[int] | None = None) -> TrackLayout:
    """Assemble the layout for a subset of grid points (default: all)."""
    if not spec.has_instruction:
        instruction_len = 0
    elif instruction_len > spec.max_instruction_tokens:
        instruction_len = spec.max_instruction_tokens
    idx = list(range(grid.n_points)) if track_indices is None else list(track_indices)
    return TrackLayout(steps=spec.steps, spec=spec, n_patches=grid.n_patches,
                       instruction_len=instruction_len,
                       track_indices=tuple(idx),
                       track_window=tuple(int(grid.point_window[i]) for i in idx),
                       patch_window=grid.patch_window,
                       points=grid.points[idx])


def build_attention_mask(layout: TrackLayout,
                         text_conditioning: bool = False) -> np.ndarray:
    """T x T boolean mask, True where the query row may attend the key column.

    Rules: image and instruction are bidirectional within themselves;
    instruction always sees the image, the image sees the instruction only
    under text conditioning; tracks see the whole shared observation and
    themselves causally, never each other; the shared observation never
    attends any track.
    """
    track, step, _ = layout.position_tables()
    is_image = np.zeros(layout.total_len, dtype=bool)
    is_image[: layout.n_patches] = True
    is_instr = np.zeros(layout.total_len, dtype=bool)
    is_instr[layout.n_patches: layout.shared_len] = True
    shared = is_image | is_instr

    allow = np.zeros((layout.total_len,) * 2, dtype=bool)
    allow |= is_image[:, None] & is_image[None, :]
    allow |= is_instr[:, None] & is_instr[None, :]
    allow |= is_instr[:, None] & is_image[None, :]
    if text_conditioning:
        allow |= is_image[:, None] & is_instr[None, :]
    in_track = track[:, None] >= 0
    allow |= in_track & shared[None, :]
    same = in_track & (track[:, None] == track[None, :])
    allow |= same & (step[:, None] >= step[None, :])
    return allow


def window_compatibility(layout: TrackLayout) -> np.ndarray:
    """True where query and key share a window; instruction tokens are
    wildcards visible from every window."""
    _, _, window = layout.position_tables()
    return ((window[:, None] == window[None, :])
            | (window[:, None] == -1) | (window[None, :] == -1))


def build_window_mask(layout: TrackLayout,
                      text_conditioning: bool = False) -> np.ndarray:
    """Attention mask for window layers: the base rules intersected with
    window locality."""
    return build_attention_mask(layout, text_conditioning) & window_compatibility(layout)


def interpolate_local_feature(feature_map: torch.Tensor, point,
                              patch_size: int) -> torch.Tensor:
    """Bilinear sample of a (..., Hp, Wp, D) patch-feature grid at a pixel
    point; patch centers are the sample sites and edges clamp."""
    hp, wp = feature_map.shape[-3], feature_map.shape[-2]
    gx = min(max(point[0] / patch_size - 0.5, 0.0), wp - 1.0)
    gy = min(max(point[1] / patch_size - 0.5, 0.0), hp - 1.0)
    x0, y0 = int(np.floor(gx)), int(np.floor(gy))
    x1, y1 = min(x0 + 1, wp - 1), min(y0 + 1, hp - 1)
    fx, fy = gx - x0, gy - y0
    top = (1 - fx) * feature_map[..., y0, x0, :] + fx * feature_map[..., y0, x1, :]
    bot = (1 - fx) * feature_map[..., y1, x0, :] + fx * feature_map[..., y1, x1, :]
    return (1 - fy) * top + fy * bot


def mask_to_pbm(mask: np.ndarray, comment: str = "") -> str:
    """Serialize a boolean mask as an ASCII portable bitmap (P1)."""
    h, w = mask.shape
    lines = ["P1"]
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"{w} {h}")
    lines += [" ".join("1" if v else "0" for v in row) for row in mask]
    return "\n".join(lines) + "\n"
