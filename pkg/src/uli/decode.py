"""Parallel multi-track inference.

All tracks advance one step per model invocation: shared-observation
keys/values are computed once per layer and reused for every step, and each
track keeps its own growing key/value cache, so a step touches only the new
row. Works because the attention rules make shared rows independent of
tracks and tracks independent of each other; `sequential_decode` is the
slow full-forward oracle the equivalence tests compare against.

Captioning additionally gets a beam search; grid tasks stay greedy, one beam
per track would multiply the cost by the width for marginal gain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .assign import assemble_dense_map
from .codec import PAD, decode_response, validate_schedule
from .errors import LayoutMismatch, ScheduleViolation
from .geometry import box_iou, rasterize_polygon
from .model import UliModel
from .tasks import STEP_COUNTS, Task, TaskSpec
from .template import SEMSEG_STRIDE, TrackLayout
from .vocab import Vocabulary


@dataclass(frozen=True)
class DecodeSchedule:
    """Per-step vocabulary slices for one task."""

    task: Task
    slices: tuple[range, ...]

    def __post_init__(self):
        if len(self.slices) != STEP_COUNTS[self.task]:
            raise ScheduleViolation(
                f"{len(self.slices)} slices for task {self.task}")

    @property
    def steps(self) -> int:
        return len(self.slices)


def schedule_for(spec: TaskSpec, vocab: Vocabulary) -> DecodeSchedule:
    return DecodeSchedule(task=spec.task,
                          slices=tuple(vocab.slice_for(k) for k in spec.kinds))


@dataclass
class DecodeResult:
    """Raw per-track decode: global token ids, the class-step confidence,
    and per-step log-probabilities of the chosen tokens."""

    tokens: np.ndarray     # (N, steps)
    scores: np.ndarray     # (N,) softmax probability of the step-0 token
    logprobs: np.ndarray   # (N, steps)


def _shared_only(layout: TrackLayout) -> TrackLayout:
    return TrackLayout(steps=layout.steps, n_patches=layout.n_patches,
                       instruction_len=layout.instruction_len,
                       track_indices=(), track_window=(), spec=layout.spec,
                       patch_window=layout.patch_window,
                       points=np.zeros((0, 2)))


def _shared_caches(model: UliModel, layout: TrackLayout,
                   shared_rows: torch.Tensor, text_conditioning: bool
                   ) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Per-layer keys/values of the shared observation, recorded at each
    block's input; the shared rows never see tracks, so this equals their
    state in the full forward."""
    g_allow, w_allow = model.masks_for(_shared_only(layout),
                                       text_conditioning)
    caches = []
    h = shared_rows
    for i, blk in enumerate(model.blocks):
        caches.append(blk.context_kv(h))
        allow = g_allow if i in model.config.global_indices else w_allow
        h = blk(h, allow)
    return caches


def _window_gather(layout: TrackLayout) -> torch.Tensor:
    """(N, Lw) shared-row indices each track's window layers may attend:
    its window's patches plus all instruction positions."""
    pw = (np.zeros(layout.n_patches, dtype=np.int64)
          if layout.patch_window is None
          else np.asarray(layout.patch_window))
    instr = np.arange(layout.n_patches, layout.shared_len)
    rows = [np.concatenate([np.flatnonzero(pw == w), instr])
            for w in layout.track_window]
    sizes = {len(r) for r in rows}
    if len(sizes) > 1:
        raise LayoutMismatch(f"uneven window sizes {sorted(sizes)}")
    return torch.as_tensor(np.stack(rows))


class _TrackState:
    """Growing per-layer key/value caches for the track rows."""

    def __init__(self, num_layers: int):
        self.k: list[torch.Tensor | None] = [None] * num_layers
        self.v: list[torch.Tensor | None] = [None] * num_layers

    def extend(self, layer: int, k: torch.Tensor, v: torch.Tensor):
        if self.k[layer] is None:
            self.k[layer], self.v[layer] = k, v
        else:
            self.k[layer] = torch.cat([self.k[layer], k], dim=1)
            self.v[layer] = torch.cat([self.v[layer], v], dim=1)


def _advance(model: UliModel, x: torch.Tensor, shared, win_idx, state,
             accelerated: bool) -> torch.Tensor:
    """Push r new rows per track through every block against the caches;
    returns their normed hidden states (N, r, D)."""
    n, r, _ = x.shape
    for i, blk in enumerate(model.blocks):
        is_global = i in model.config.global_indices
        if is_global and accelerated:
            continue
        k_new, v_new = blk.context_kv(x)
        ks, vs = shared[i]
        if is_global:
            k_sh, v_sh = ks.expand(n, -1, -1), vs.expand(n, -1, -1)
        else:
            k_sh, v_sh = ks[0][win_idx], vs[0][win_idx]
        parts_k, parts_v = [k_sh], [v_sh]
        if state.k[i] is not None:
            parts_k.append(state.k[i])
            parts_v.append(state.v[i])
        parts_k.append(k_new)
        parts_v.append(v_new)
        k_ctx, v_ctx = torch.cat(parts_k, 1), torch.cat(parts_v, 1)
        allow = None
        if r > 1:  # causal order among the rows added in one call
            allow = torch.ones(r, k_ctx.shape[1], dtype=torch.bool)
            allow[:, -r:] = torch.tril(torch.ones(r, r, dtype=torch.bool))
        q = blk.attn.q(blk.ln1(x))
        x = x + blk.attn.attend(q, k_ctx, v_ctx, allow)
        x = x + blk.mlp(blk.ln2(x))
        state.extend(i, k_new, v_new)
    return model.final_norm(x)


def parallel_decode(model: UliModel, layout: TrackLayout,
                    schedule: DecodeSchedule, image: torch.Tensor,
                    vocab: Vocabulary, *, instruction: list[int] | None = None,
                    emb: torch.Tensor | None = None,
                    accelerated: bool = False) -> DecodeResult:
    """Greedy decode of every track at once, one step per model invocation.

    Each step's argmax is taken inside that step's vocabulary slice and the
    chosen embedding is fed back as the next response input. Background
    tracks keep decoding like everyone else; post-processing discards them.
    """
    spec = layout.spec
    text_conditioning = spec.text_conditioning if spec else False
    if len(instruction or []) != layout.instruction_len:
        raise LayoutMismatch(
            f"instruction length {len(instruction or [])} vs layout "
            f"{layout.instruction_len}")
    n, steps = layout.n_tracks, layout.steps
    with torch.no_grad():
        emb = emb if emb is not None else model.assemble_embeddings(vocab)
        shared_rows, fmap = model.embed_shared(image, instruction)
        if shared_rows.shape[0] != 1:
            raise LayoutMismatch("decode expects a single image")
        shared = _shared_caches(model, layout, shared_rows, text_conditioning)
        win_idx = _window_gather(layout)
        state = _TrackState(model.config.num_layers)

        local = model.local_features(fmap, layout.points)[0]        # (N, D)
        task_row = model.task_embed(
            torch.tensor(list(Task).index(spec.task)))
        x = torch.stack([local + model.step_embed.weight[0],
                         task_row.expand(n, -1) + model.step_embed.weight[1]],
                        dim=1)
        h = _advance(model, x, shared, win_idx, state, accelerated)

        tokens = np.zeros((n, steps), dtype=np.int64)
        scores = np.zeros(n)
        logprobs = np.zeros((n, steps))
        for s in range(steps):
            sl = schedule.slices[s]
            logits = model.logits(h[:, -1], emb, sl)
            lp = torch.log_softmax(logits, dim=-1)
            pick = logits.argmax(dim=-1)
            tokens[:, s] = sl.start + pick.numpy()
            logprobs[:, s] = lp[torch.arange(n), pick].numpy()
            if s == 0:
                scores = torch.softmax(logits, -1)[
                    torch.arange(n), pick].numpy()
            if s + 1 < steps:
                x = (emb[torch.as_tensor(tokens[:, s])]
                     + model.step_embed.weight[2 + s])[:, None]
                h = _advance(model, x, shared, win_idx, state, accelerated)
    for t in range(n):
        validate_schedule(spec, vocab, tokens[t].tolist())
    return DecodeResult(tokens=tokens, scores=scores, logprobs=logprobs)


def sequential_decode(model: UliModel, layout: TrackLayout,
                      schedule: DecodeSchedule, image: torch.Tensor,
                      vocab: Vocabulary, *,
                      instruction: list[int] | None = None,
                      emb: torch.Tensor | None = None,
                      accelerated: bool = False) -> DecodeResult:
    """Oracle path: one track at a time, full teacher-forced forwards, no
    caches. Slow; exists so tests can pin the parallel path against it."""
    spec = layout.spec
    text_conditioning = spec.text_conditioning if spec else False
    steps = layout.steps
    all_tokens, all_scores, all_lp = [], [], []
    with torch.no_grad():
        emb = emb if emb is not None else model.assemble_embeddings(vocab)
        shared_rows, fmap = model.embed_shared(image, instruction)
        for t in range(layout.n_tracks):
            sub = TrackLayout(steps=steps, n_patches=layout.n_patches,
                              instruction_len=layout.instruction_len,
                              track_indices=(layout.track_indices[t],),
                              track_window=(layout.track_window[t],),
                              spec=spec, patch_window=layout.patch_window,
                              points=layout.points[t: t + 1])
            toks: list[int] = []
            score = 0.0
            lps: list[float] = []
            for s in range(steps):
                padded = toks + [PAD] * (steps - len(toks))
                tt = torch.as_tensor(padded, dtype=torch.long)[None, None]
                rows = model.embed_tracks(fmap, sub, spec.task, tt, emb)
                h = model(torch.cat([shared_rows, rows], 1), sub,
                          text_conditioning=text_conditioning,
                          accelerated=accelerated)
                sl = schedule.slices[s]
                logits = model.logits(h[0, sub.predict_position(0, s)],
                                      emb, sl)
                pick = int(logits.argmax())
                toks.append(sl.start + pick)
                lps.append(float(torch.log_softmax(logits, -1)[pick]))
                if s == 0:
                    score = float(torch.softmax(logits, -1)[pick])
            all_tokens.append(toks)
            all_scores.append(score)
            all_lp.append(lps)
    return DecodeResult(tokens=np.array(all_tokens, dtype=np.int64),
                        scores=np.array(all_scores),
                        logprobs=np.array(all_lp))


# ---------------------------------------------------------------- beam

@dataclass
class BeamState:
    """Hypotheses kept sorted by cumulative log-probability, best first."""

    width: int
    hypotheses: list[tuple[tuple[int, ...], float, bool]] = field(
        default_factory=lambda: [((), 0.0, False)])

    def all_done(self) -> bool:
        return all(done for _, _, done in self.hypotheses)

    def best(self) -> tuple[tuple[int, ...], float]:
        toks, score, _ = self.hypotheses[0]
        return toks, score


def beam_search(step_fn, num_steps: int, width: int,
                eos_id: int | None = None) -> tuple[list[int], float]:
    """Fixed-length beam search over a log-probability step function.

    step_fn(prefix) returns log-probabilities over the whole step vocabulary.
    Hypotheses that emit the terminator stop growing but keep competing on
    their frozen score. Width 1 degenerates to greedy.
    """
    state = BeamState(width=width)
    for _ in range(num_steps):
        if state.all_done():
            break
        candidates: list[tuple[tuple[int, ...], float, bool]] = []
        for toks, score, done in state.hypotheses:
            if done:
                candidates.append((toks, score, True))
                continue
            lp = np.asarray(step_fn(toks))
            top = np.argpartition(-lp, min(width, len(lp)) - 1)[:width]
            for v in np.sort(top):
                candidates.append((toks + (int(v),), score + float(lp[v]),
                                   v == eos_id))
        # stable sort: earlier (lower-id) candidates win ties, so width 1
        # reproduces plain argmax decoding
        candidates.sort(key=lambda c: -c[1])
        state.hypotheses = candidates[:width]
    return list(state.best()[0]), state.best()[1]


def caption_step_fn(model: UliModel, layout: TrackLayout,
                    vocab: Vocabulary, image: torch.Tensor,
                    emb: torch.Tensor | None = None):
    """Step function over caption prefixes via full teacher-forced forwards
    on the single caption track."""
    spec = layout.spec
    if spec.task is not Task.CAPTION or layout.n_tracks != 1:
        raise LayoutMismatch("caption decoding expects one caption track")
    steps = layout.steps
    with torch.no_grad():
        table = emb if emb is not None else model.assemble_embeddings(vocab)
        shared_rows, fmap = model.embed_shared(image)

    def step(prefix: tuple[int, ...]) -> np.ndarray:
        s = len(prefix)
        padded = list(prefix) + [PAD] * (steps - s)
        tt = torch.as_tensor(padded, dtype=torch.long)[None, None]
        with torch.no_grad():
            rows = model.embed_tracks(fmap, layout, Task.CAPTION, tt, table)
            h = model(torch.cat([shared_rows, rows], 1), layout)
            logits = model.logits(h[0, layout.predict_position(0, s)],
                                  table, range(0, len(vocab.base_entries)))
            return torch.log_softmax(logits, -1).numpy()

    return step


def beam_decode(model: UliModel, layout: TrackLayout, vocab: Vocabulary,
                image: torch.Tensor, width: int = 2
                ) -> tuple[list[int], float]:
    """Beam-searched caption tokens and their cumulative log-probability."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    step = caption_step_fn(model, layout, vocab, image)
    tokenizer_eos = vocab.base_entries.index("[end]")
    tokens, score = beam_search(step, layout.steps, width,
                                eos_id=tokenizer_eos)
    tokens += [tokenizer_eos] * (layout.steps - len(tokens))
    return tokens, score


# ---------------------------------------------------------------- outputs

@dataclass
class ScoredBox:
    box: tuple[float, float, float, float]
    score: float
    category: str
    category_index: int


@dataclass
class ScoredInstance:
    box: tuple[float, float, float, float]
    score: float
    category: str
    category_index: int
    polygon: np.ndarray
    mask: np.ndarray


def nms_filter(items, iou_threshold: float = 0.5):
    """Greedy class-wise suppression on score-sorted boxes."""
    kept = []
    for item in sorted(items, key=lambda i: -i.score):
        if all(i.category_index != item.category_index
               or box_iou(i.box, item.box) <= iou_threshold for i in kept):
            kept.append(item)
    return kept


def postprocess_detection(result: DecodeResult, layout: TrackLayout,
                          vocab: Vocabulary, *, nms: bool = False,
                          iou_threshold: float = 0.5) -> list[ScoredBox]:
    """Background tracks dropped; box = grid point + offsets; score = class
    softmax probability. Suppression is off by default: one-to-one target
    assignment already discourages duplicates."""
    out = []
    for t in range(layout.n_tracks):
        dec = decode_response(layout.spec, vocab, result.tokens[t].tolist(),
                              grid_point=tuple(layout.points[t]))
        if dec is None:
            continue
        out.append(ScoredBox(box=dec.box, score=float(result.scores[t]),
                             category=dec.category,
                             category_index=dec.category_index))
    out.sort(key=lambda b: -b.score)
    return nms_filter(out, iou_threshold) if nms else out


def postprocess_instance(result: DecodeResult, layout: TrackLayout,
                         vocab: Vocabulary, *, nms: bool = False,
                         iou_threshold: float = 0.5) -> list[ScoredInstance]:
    spec = layout.spec
    out = []
    for t in range(layout.n_tracks):
        dec = decode_response(spec, vocab, result.tokens[t].tolist(),
                              grid_point=tuple(layout.points[t]))
        if dec is None:
            continue
        mask = rasterize_polygon(dec.polygon, spec.image_size,
                                 spec.image_size)
        out.append(ScoredInstance(box=dec.box, score=float(result.scores[t]),
                                  category=dec.category,
                                  category_index=dec.category_index,
                                  polygon=dec.polygon, mask=mask))
    out.sort(key=lambda b: -b.score)
    return nms_filter(out, iou_threshold) if nms else out


def postprocess_semseg(result: DecodeResult, layout: TrackLayout,
                       vocab: Vocabulary) -> np.ndarray:
    """Full-resolution label map: 4x4 blocks assembled in raster order on
    the quarter-resolution lattice, then nearest-neighbor upsampled 4x.
    Background cells stay -1."""
    spec = layout.spec
    side = spec.image_size // SEMSEG_STRIDE
    if layout.n_tracks != side * side:
        raise LayoutMismatch(
            f"{layout.n_tracks} tracks cannot tile a {side}x{side} grid")
    blocks = np.stack([
        decode_response(spec, vocab, result.tokens[t].tolist()).labels.ravel()
        for t in range(layout.n_tracks)])
    quarter = assemble_dense_map(blocks, (side, side))
    full = np.kron(quarter, np.ones((4, 4), dtype=np.int64))
    assert full.shape == (spec.image_size, spec.image_size)
    return full


def postprocess_grounding(result: DecodeResult, layout: TrackLayout,
                          vocab: Vocabulary) -> tuple[float, ...]:
    dec = decode_response(layout.spec, vocab, result.tokens[0].tolist())
    return dec.box


def postprocess_caption(tokens, vocab: Vocabulary, spec: TaskSpec) -> str:
    dec = decode_response(spec, vocab, list(tokens))
    return dec.text
