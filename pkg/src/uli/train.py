"""Training: dynamic-vocabulary cross-entropy, the multi-task sampler, the
layer-wise cosine learning-rate schedule, and the optimizer loop.

Supervision follows the shift-by-one rule: the task-identifier position
predicts response step 0 and each response position predicts the next step.
Every step's loss is a cross-entropy restricted to that step's vocabulary
slice; unsupervised positions (background padding, caption tail) are left
out of the mean entirely.

Batches are single-task (unmixed sampling). Samples inside a batch are
processed one at a time with gradient accumulation, because each sample may
select different grid points and therefore carry a different attention
mask.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .assign import (hungarian_match, sample_grid_points, semseg_targets)
from .codec import (PAD, encode_background, encode_caption, encode_detection,
                    encode_dense, encode_grounding, encode_instance)
from .errors import ScheduleViolation, TrainingDiverged
from .model import UliModel, save_checkpoint
from .tasks import Task, TaskSpec
from .template import TrackLayout, build_layout, make_grid
from .vocab import Tokenizer, Vocabulary

TASK_ALIASES = {t.value: t for t in Task}


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 2e-4
    weight_decay: float = 0.05
    horizon: int = 2000
    iterations: int = 2000
    batch_size: int = 8
    task_weights: tuple[tuple[Task, float], ...] = tuple(
        (t, 0.2) for t in Task)
    seed: int = 0
    profile: str = "desk"
    checkpoint_every: int = 500
    log_every: int = 50
    accelerated: bool = False

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("learning rate must be positive")
        total = sum(w for _, w in self.task_weights)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"task weights sum to {total}, expected 1")

    @property
    def weights(self) -> dict[Task, float]:
        return dict(self.task_weights)


def load_train_config(path: str, profile: str = "desk") -> TrainConfig:
    """Flat key=value config with one section per profile."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(path)
    section = f"profile.{profile}"
    if section not in parser:
        raise KeyError(f"no [{section}] section in {path}")
    raw = parser[section]
    kwargs: dict = {"profile": profile}
    for key in ("base_lr", "weight_decay"):
        if key in raw:
            kwargs[key] = raw.getfloat(key)
    for key in ("horizon", "iterations", "batch_size", "seed",
                "checkpoint_every", "log_every"):
        if key in raw:
            kwargs[key] = raw.getint(key)
    if "accelerated" in raw:
        kwargs["accelerated"] = raw.getboolean("accelerated")
    if "tasks" in raw:
        names = [n.strip() for n in raw["tasks"].split(",") if n.strip()]
        tasks = [TASK_ALIASES[n] for n in names]
        weights = []
        for t in tasks:
            key = f"weight_{t.value}"
            weights.append(raw.getfloat(key) if key in raw
                           else 1.0 / len(tasks))
        kwargs["task_weights"] = tuple(zip(tasks, weights))
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------- sampler

@dataclass(frozen=True)
class DataSource:
    """One dataset feeding a task: a name and its sample count."""

    name: str
    size: int


def sample_task(rng: np.random.Generator,
                weights: dict[Task, float]) -> Task:
    tasks = list(weights)
    p = np.array([weights[t] for t in tasks], dtype=np.float64)
    return tasks[rng.choice(len(tasks), p=p / p.sum())]


def source_weights(task_weight: float,
                   groups: list[list[DataSource]]) -> dict[str, float]:
    """Dataset weights under the grouped rule: the task's weight is split
    uniformly across groups, then size-proportionally inside each group."""
    out: dict[str, float] = {}
    per_group = task_weight / len(groups)
    for group in groups:
        total = sum(s.size for s in group)
        for s in group:
            out[s.name] = per_group * s.size / total
    return out


def sample_source(rng: np.random.Generator, task_weight: float,
                  groups: list[list[DataSource]]) -> str:
    w = source_weights(task_weight, groups)
    names = list(w)
    p = np.array([w[n] for n in names])
    return names[rng.choice(len(names), p=p / p.sum())]


# ---------------------------------------------------------------- schedule

def cosine_factor(iteration: int, horizon: int) -> float:
    it = min(max(iteration, 0), horizon)
    return 0.5 * (1.0 + math.cos(math.pi * it / horizon))


def layer_factor(layer: int | None, pretrained: int) -> float:
    """Linear ramp 0.1 -> 1.0 across the pretrained stack; new layers and
    periphery parameters run at full rate."""
    if layer is None or layer >= pretrained:
        return 1.0
    if pretrained == 1:
        return 0.1
    return 0.1 + 0.9 * layer / (pretrained - 1)


def lr_at(iteration: int, layer: int | None, config: TrainConfig,
          pretrained: int) -> float:
    return (config.base_lr * cosine_factor(iteration, config.horizon)
            * layer_factor(layer, pretrained))


# ---------------------------------------------------------------- optimizer

def decay_applies(model: UliModel, name: str, param: torch.Tensor) -> bool:
    """Decoupled weight decay hits matrix weights only: biases, norms and
    every lookup table are exempt."""
    if param.ndim < 2:
        return False
    if "." not in name:           # direct parameters are positional tables
        return False
    owner = model.get_submodule(name.rsplit(".", 1)[0])
    return not isinstance(owner, nn.Embedding)


def build_optimizer(model: UliModel, config: TrainConfig) -> torch.optim.AdamW:
    """One parameter group per (layer, decay) pair so the layer-wise factors
    can be refreshed every step."""
    buckets: dict[tuple[int | None, bool], list[torch.Tensor]] = {}
    for name, param in model.named_parameters():
        key = (model.layer_index(name), decay_applies(model, name, param))
        buckets.setdefault(key, []).append(param)
    pretrained = model.config.pretrained_layers
    groups = []
    for (layer, decay), params in sorted(
            buckets.items(), key=lambda kv: (kv[0][0] is None, kv[0])):
        groups.append({"params": params,
                       "lr": lr_at(0, layer, config, pretrained),
                       "weight_decay": config.weight_decay if decay else 0.0,
                       "layer": layer})
    return torch.optim.AdamW(groups, betas=(0.9, 0.999))


def apply_lr(optimizer: torch.optim.Optimizer, iteration: int,
             config: TrainConfig, pretrained: int) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr_at(iteration, group["layer"], config, pretrained)


# ---------------------------------------------------------------- batches

@dataclass
class TaskSample:
    """One image's worth of supervision for one task."""

    task: Task
    spec: TaskSpec
    vocab: Vocabulary
    image: torch.Tensor            # (1, 3, H, W)
    layout: TrackLayout
    inputs: torch.Tensor           # (1, N, steps) teacher-forced inputs
    targets: torch.Tensor          # (1, N, steps), PAD where unsupervised
    mask: torch.Tensor             # (1, N, steps) bool
    instruction: list[int] = field(default_factory=list)


@dataclass
class SupervisedBatch:
    """Same-task samples trained in one optimizer step."""

    task: Task
    samples: list[TaskSample]

    def __post_init__(self):
        if any(s.task is not self.task for s in self.samples):
            raise ScheduleViolation("mixed-task batch")


def _to_image_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) floats in [0, 1] -> (1, 3, H, W)."""
    arr = np.asarray(image, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1)[None]


def _sample_from_tracks(spec: TaskSpec, vocab: Vocabulary, image, layout,
                        rows: list[tuple[list[int], list[int]]],
                        instruction: list[int] | None = None) -> TaskSample:
    tokens = torch.as_tensor([t for t, _ in rows], dtype=torch.long)[None]
    mask = torch.as_tensor([m for _, m in rows], dtype=torch.bool)[None]
    targets = tokens.clone()
    targets[~mask] = PAD
    inputs = tokens.clone()
    return TaskSample(task=spec.task, spec=spec, vocab=vocab,
                      image=_to_image_tensor(image), layout=layout,
                      inputs=inputs, targets=targets, mask=mask,
                      instruction=list(instruction or []))


def detection_sample(spec: TaskSpec, vocab: Vocabulary, image, boxes,
                     categories: list[str],
                     rng: np.random.Generator) -> TaskSample:
    grid = make_grid(spec)
    match = hungarian_match(grid, boxes, spec.image_size)
    selection = sample_grid_points(match.positive_mask, grid, spec.sample_budget,
                                   rng)
    layout = build_layout(spec, grid, track_indices=selection)
    rows = []
    for i in selection:
        j = match.matched[i]
        if j < 0:
            rows.append(encode_background(spec, vocab))
        else:
            rows.append(encode_detection(spec, vocab, boxes[j],
                                         categories[j], grid.points[i]))
    return _sample_from_tracks(spec, vocab, image, layout, rows)


def instance_sample(spec: TaskSpec, vocab: Vocabulary, image, polygons,
                    boxes, categories: list[str],
                    rng: np.random.Generator) -> TaskSample:
    grid = make_grid(spec)
    match = hungarian_match(grid, boxes, spec.image_size)
    selection = sample_grid_points(match.positive_mask, grid, spec.sample_budget,
                                   rng)
    layout = build_layout(spec, grid, track_indices=selection)
    rows = []
    for i in selection:
        j = match.matched[i]
        if j < 0:
            rows.append(encode_background(spec, vocab))
        else:
            rows.append(encode_instance(spec, vocab, polygons[j], boxes[j],
                                        categories[j], grid.points[i]))
    return _sample_from_tracks(spec, vocab, image, layout, rows)


def semseg_sample(spec: TaskSpec, vocab: Vocabulary, image,
                  semantic_map: np.ndarray) -> TaskSample:
    grid = make_grid(spec)
    layout = build_layout(spec, grid)
    dense = semseg_targets(np.asarray(semantic_map), grid,
                           num_classes=vocab.num_concepts)
    rows = [encode_dense(spec, vocab, block) for block in dense]
    return _sample_from_tracks(spec, vocab, image, layout, rows)


def caption_sample(spec: TaskSpec, vocab: Vocabulary, image,
                   text: str, tokenizer: Tokenizer | None = None
                   ) -> TaskSample:
    grid = make_grid(spec)
    layout = build_layout(spec, grid)
    rows = [encode_caption(spec, vocab, text, tokenizer)]
    return _sample_from_tracks(spec, vocab, image, layout, rows)


def grounding_sample(spec: TaskSpec, vocab: Vocabulary, image, phrase: str,
                     box, tokenizer: Tokenizer | None = None) -> TaskSample:
    tokenizer = tokenizer or Tokenizer()
    instruction = tokenizer.tokenize(phrase)[: spec.max_instruction_tokens]
    grid = make_grid(spec)
    layout = build_layout(spec, grid, instruction_len=len(instruction))
    rows = [encode_grounding(spec, vocab, box)]
    return _sample_from_tracks(spec, vocab, image, layout, rows,
                               instruction=instruction)


# ---------------------------------------------------------------- loss

def slice_cross_entropy(model: UliModel, hidden: torch.Tensor,
                        emb: torch.Tensor,
                        sample: TaskSample) -> torch.Tensor:
    """Mean cross-entropy over supervised positions, each step scored inside
    its own vocabulary slice."""
    layout, spec = sample.layout, sample.spec
    n = layout.n_tracks
    base = layout.shared_len + 1
    total = hidden.new_zeros(())
    count = 0
    for s, kind in enumerate(spec.kinds):
        sel = sample.mask[0, :, s]
        if not bool(sel.any()):
            continue
        sl = sample.vocab.slice_for(kind)
        tgt = sample.targets[0, :, s][sel]
        if bool((tgt < sl.start).any()) or bool((tgt >= sl.stop).any()):
            raise ScheduleViolation(
                f"target outside {kind} slice at step {s}")
        positions = base + torch.arange(n)[sel] * layout.track_len + s
        logits = model.logits(hidden[0, positions], emb, sl)
        total = total + torch.nn.functional.cross_entropy(
            logits, tgt - sl.start, reduction="sum")
        count += int(sel.sum())
    if count == 0:
        raise ScheduleViolation("sample supervises no positions")
    return total / count


def sample_loss(model: UliModel, sample: TaskSample,
                accelerated: bool = False) -> torch.Tensor:
    """Teacher-forced forward and the masked slice loss for one sample."""
    emb = model.assemble_embeddings(sample.vocab)
    shared, fmap = model.embed_shared(sample.image, sample.instruction)
    tracks = model.embed_tracks(fmap, sample.layout, sample.task,
                                sample.inputs, emb)
    hidden = model(torch.cat([shared, tracks], dim=1), sample.layout,
                   text_conditioning=sample.spec.text_conditioning,
                   accelerated=accelerated)
    return slice_cross_entropy(model, hidden, emb, sample)


# ---------------------------------------------------------------- loop

def train_step(model: UliModel, batch: SupervisedBatch,
               optimizer: torch.optim.Optimizer, config: TrainConfig,
               iteration: int) -> float:
    """One accumulate-and-step update; returns the mean sample loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for sample in batch.samples:
        loss = sample_loss(model, sample, accelerated=config.accelerated)
        (loss / len(batch.samples)).backward()
        total += float(loss.detach())
    apply_lr(optimizer, iteration, config, model.config.pretrained_layers)
    optimizer.step()
    return total / len(batch.samples)


def run_training(model: UliModel, config: TrainConfig,
                 providers: dict[Task, object], out_dir: str | None = None,
                 on_log=None) -> list[dict]:
    """Drive the unmixed loop: draw a task, assemble a batch from its
    provider, update. Providers map a task to `f(rng) -> TaskSample`.

    A non-finite loss writes a final checkpoint (when out_dir is set) and
    raises; periodic checkpoints land in out_dir as iter_<n>.ckpt.
    """
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    weights = dict(config.task_weights)
    missing = set(weights) - set(providers)
    if missing:
        raise KeyError(f"no providers for {sorted(t.value for t in missing)}")
    optimizer = build_optimizer(model, config)
    history: list[dict] = []
    for it in range(config.iterations):
        task = sample_task(rng, weights)
        batch = SupervisedBatch(task=task, samples=[
            providers[task](rng) for _ in range(config.batch_size)])
        loss = train_step(model, batch, optimizer, config, it)
        if not math.isfinite(loss):
            if out_dir:
                save_checkpoint(os.path.join(out_dir, "diverged.ckpt"),
                                model, extra={"iteration": it})
            raise TrainingDiverged(f"loss {loss} at iteration {it}")
        entry = {"iteration": it, "task": task.value, "loss": loss}
        history.append(entry)
        if on_log and it % config.log_every == 0:
            on_log(entry)
        if out_dir and config.checkpoint_every > 0 and (
                (it + 1) % config.checkpoint_every == 0):
            save_checkpoint(os.path.join(out_dir, f"iter_{it + 1}.ckpt"),
                            model, extra={"iteration": it + 1})
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), model,
                        extra={"iteration": config.iterations})
    return history


# ---------------------------------------------------------------- checks

def finite_difference_check(model: UliModel, samples: list[TaskSample],
                            coords_per_tensor: int = 2, eps: float = 1e-5,
                            seed: int = 0) -> float:
    """Compare analytic gradients of the summed sample losses against
    central finite differences on a few coordinates of every parameter;
    returns the worst relative error. Run under double precision."""
    rng = np.random.default_rng(seed)

    def objective() -> torch.Tensor:
        return sum(sample_loss(model, s) for s in samples)

    model.zero_grad(set_to_none=True)
    objective().backward()
    worst = 0.0
    for _, param in sorted(model.named_parameters()):
        grad = param.grad
        if grad is None:
            grad = torch.zeros_like(param)
        flat = param.data.view(-1)
        n = flat.numel()
        for idx in rng.choice(n, size=min(coords_per_tensor, n),
                              replace=False):
            idx = int(idx)
            keep = float(flat[idx])
            flat[idx] = keep + eps
            with torch.no_grad():
                up = float(objective())
            flat[idx] = keep - eps
            with torch.no_grad():
                down = float(objective())
            flat[idx] = keep
            fd = (up - down) / (2 * eps)
            an = float(grad.view(-1)[idx])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-4)
            worst = max(worst, rel)
    return worst
