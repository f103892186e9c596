"""Transformer backbone with interleaved window/global attention and a
dynamic-vocabulary logit head.

One stack serves every task: image patches (plus an optional instruction)
form the shared observation, and each grid point appends a short track of
local-feature, task-identifier and response positions. Masks from the
template module decide who sees whom; the model itself is mask-agnostic.
Logits are dot products against whatever embedding table the task's
vocabulary assembles, so the output space can change per task and per step
without architectural changes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import GeometryError, LayoutMismatch, ParseError, \
    ScheduleViolation
from .tasks import Task
from .template import TrackLayout, build_attention_mask, build_window_mask
from .vocab import (OovComposer, Vocabulary, background_embedding,
                    compose_concept)

CHECKPOINT_MAGIC = b"ULI1"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs. The desk profile is the tested configuration; the
    paper profile documents the full-scale layout without being runnable
    here."""

    embed_dim: int = 128
    num_heads: int = 4
    pretrained_layers: int = 4
    new_layers: int = 2
    patch_size: int = 8
    image_size: int = 64
    window_patches: int = 4
    global_every: int = 2
    max_steps: int = 31
    max_pieces: int = 8
    max_instruction_tokens: int = 16
    profile: str = "desk"

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must divide evenly into heads")
        if self.new_layers < 0 or self.pretrained_layers < 1:
            raise ValueError("need >= 1 pretrained and >= 0 new layers")
        if (self.image_size // self.patch_size) % self.window_patches:
            raise ValueError("window must tile the patch grid")

    @property
    def num_layers(self) -> int:
        return self.pretrained_layers + self.new_layers

    @property
    def patches_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def coord_bins(self) -> int:
        return 2 * self.image_size

    @property
    def global_indices(self) -> tuple[int, ...]:
        """Global-attention layers, evenly interleaved: every Nth layer,
        counting from one, is global; the rest are window layers."""
        return tuple(i for i in range(self.num_layers)
                     if (i + 1) % self.global_every == 0)


MODEL_PROFILES: dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "paper": ModelConfig(embed_dim=768, num_heads=12, pretrained_layers=12,
                         new_layers=6, patch_size=16, image_size=1120,
                         window_patches=14, global_every=4, profile="paper"),
}


class Attention(nn.Module):
    """Multi-head attention with an explicit boolean allow-mask and split
    projections so decoding can cache keys/values per layer."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
               allow: torch.Tensor | None) -> torch.Tensor:
        """q: (B, Tq, D); k, v: (B, Tk, D); allow: broadcastable (Tq, Tk)."""
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scores = qh @ kh.transpose(-2, -1) / self.head_dim ** 0.5
        if allow is not None:
            scores = scores.masked_fill(~allow, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ vh
        b, _, t, _ = out.shape
        out = out.transpose(1, 2).reshape(b, t, -1)
        return self.proj(out)

    def forward(self, x: torch.Tensor,
                allow: torch.Tensor | None) -> torch.Tensor:
        return self.attend(self.q(x), self.k(x), self.v(x), allow)


class Block(nn.Module):
    """Pre-norm residual block: attention then a 4x GELU feed-forward."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(),
                                 nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor,
                allow: torch.Tensor | None) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), allow)
        return x + self.mlp(self.ln2(x))

    def context_kv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Keys/values this block would produce for rows x, for caching."""
        h = self.ln1(x)
        return self.attn.k(h), self.attn.v(h)

    def increment(self, x: torch.Tensor, k_ctx: torch.Tensor,
                  v_ctx: torch.Tensor,
                  allow: torch.Tensor | None = None) -> torch.Tensor:
        """Advance rows x one block against an externally assembled context.

        The caller is responsible for including x's own keys/values in the
        context when self-attention is wanted.
        """
        q = self.attn.q(self.ln1(x))
        x = x + self.attn.attend(q, k_ctx, v_ctx, allow)
        return x + self.mlp(self.ln2(x))


class UliModel(nn.Module):
    """The full stack: patch embedding, positional tables, track-side
    embeddings, transformer blocks, final norm, and the logit head."""

    STEP_LOCAL = 0
    STEP_TASK = 1

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        side = config.patches_per_side
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.patch_size,
                                     stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.empty(1, side, side, d))
        self.composer = OovComposer(d, max_pieces=config.max_pieces)
        self.bin_embed = nn.Embedding(config.coord_bins, d)
        self.step_embed = nn.Embedding(config.max_steps + 2, d)
        self.task_embed = nn.Embedding(len(Task), d)
        self.instr_pos = nn.Embedding(config.max_instruction_tokens, d)
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads) for _ in range(config.num_layers))
        self.final_norm = nn.LayerNorm(d)
        for table in (self.pos_embed, self.bin_embed.weight,
                      self.step_embed.weight, self.task_embed.weight,
                      self.instr_pos.weight, self.patch_embed.weight):
            nn.init.normal_(table, std=0.02)
        nn.init.zeros_(self.patch_embed.bias)

    # ---- embedding assembly -------------------------------------------

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) pixels -> (B, Hp, Wp, D) patch features with
        positional embedding added."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise LayoutMismatch(f"expected (B, 3, H, W), got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        p = self.config.patch_size
        if h % p or w % p:
            raise GeometryError(f"{h}x{w} not divisible by patch size {p}")
        x = self.patch_embed(images).permute(0, 2, 3, 1)
        return x + self._pos_for(h // p, w // p)

    def _pos_for(self, hp: int, wp: int) -> torch.Tensor:
        side = self.config.patches_per_side
        if (hp, wp) == (side, side):
            return self.pos_embed
        resized = torch.nn.functional.interpolate(
            self.pos_embed.permute(0, 3, 1, 2), size=(hp, wp),
            mode="bilinear", align_corners=False)
        return resized.permute(0, 2, 3, 1)

    def local_features(self, feature_map: torch.Tensor,
                       points: np.ndarray) -> torch.Tensor:
        """Bilinear sample of (B, Hp, Wp, D) at pixel points -> (B, N, D);
        patch centers are the lattice sites and edges clamp."""
        hp, wp = feature_map.shape[1], feature_map.shape[2]
        p = self.config.patch_size
        pts = torch.as_tensor(np.asarray(points, dtype=np.float64))
        gx = (pts[:, 0] / p - 0.5).clamp(0, wp - 1)
        gy = (pts[:, 1] / p - 0.5).clamp(0, hp - 1)
        x0, y0 = gx.floor().long(), gy.floor().long()
        x1, y1 = (x0 + 1).clamp(max=wp - 1), (y0 + 1).clamp(max=hp - 1)
        fx = (gx - x0).to(feature_map.dtype)[None, :, None]
        fy = (gy - y0).to(feature_map.dtype)[None, :, None]
        top = (1 - fx) * feature_map[:, y0, x0] + fx * feature_map[:, y0, x1]
        bot = (1 - fx) * feature_map[:, y1, x0] + fx * feature_map[:, y1, x1]
        return (1 - fy) * top + fy * bot

    def assemble_embeddings(self, vocab: Vocabulary) -> torch.Tensor:
        """(V, D) embedding table for one task's vocabulary, recomputed so
        gradients reach the composer: coordinate bins from the learned bin
        table, concepts through the composer, background as the negated mean,
        captions straight from the text table."""
        if vocab.embedding_dim != self.config.embed_dim:
            raise LayoutMismatch("vocabulary dim differs from model dim")
        if vocab.task is Task.CAPTION:
            return self.composer.text_embed.weight
        if vocab.coord_bins != self.config.coord_bins:
            raise LayoutMismatch(
                f"vocabulary has {vocab.coord_bins} bins, model expects "
                f"{self.config.coord_bins}")
        rows = [self.bin_embed.weight]
        if vocab.num_concepts:
            concepts = torch.stack([compose_concept(p, self.composer)
                                    for p in vocab.concept_pieces])
            rows.append(concepts)
            rows.append(background_embedding(concepts)[None])
        return torch.cat(rows)

    def embed_shared(self, images: torch.Tensor,
                     instruction: list[int] | None = None
                     ) -> tuple[torch.Tensor, torch.Tensor]:
        """Shared-observation rows: flattened patch tokens plus optional
        instruction pieces. Returns (rows (B, S, D), feature map)."""
        fmap = self.embed_image(images)
        b = fmap.shape[0]
        rows = fmap.reshape(b, -1, self.config.embed_dim)
        if instruction:
            if len(instruction) > self.config.max_instruction_tokens:
                raise LayoutMismatch("instruction longer than the position table")
            idx = torch.as_tensor(instruction, dtype=torch.long)
            text = self.composer.text_embed(idx) + self.instr_pos(
                torch.arange(len(instruction)))
            rows = torch.cat([rows, text[None].expand(b, -1, -1)], dim=1)
        return rows, fmap

    def embed_tracks(self, feature_map: torch.Tensor, layout: TrackLayout,
                     task: Task, tokens: torch.Tensor,
                     emb: torch.Tensor) -> torch.Tensor:
        """Track rows (B, N*(2+steps), D): local feature, task identifier,
        then teacher-forced response inputs. tokens is (B, N, steps) and may
        hold -1 padding, which embeds as zero content."""
        b = feature_map.shape[0]
        n, steps = layout.n_tracks, layout.steps
        if tokens.shape[-2:] != (n, steps):
            raise LayoutMismatch(
                f"tokens {tuple(tokens.shape)} vs layout ({n}, {steps})")
        local = self.local_features(feature_map, layout.points)
        task_row = self.task_embed(torch.tensor(list(Task).index(task)))
        content = torch.where((tokens >= 0).unsqueeze(-1),
                              emb[tokens.clamp(min=0)],
                              torch.zeros((), dtype=emb.dtype))
        track = torch.cat([local[:, :, None],
                           task_row.expand(b, n, 1, -1),
                           content], dim=2)
        track = track + self.step_embed(torch.arange(2 + steps))
        return track.reshape(b, n * (2 + steps), -1)

    # ---- transformer ---------------------------------------------------

    def masks_for(self, layout: TrackLayout, text_conditioning: bool = False
                  ) -> tuple[torch.Tensor, torch.Tensor]:
        """(global allow, window allow) boolean tensors for a layout."""
        g = build_attention_mask(layout, text_conditioning)
        w = build_window_mask(layout, text_conditioning)
        return torch.from_numpy(g), torch.from_numpy(w)

    def forward(self, embeds: torch.Tensor, layout: TrackLayout, *,
                text_conditioning: bool = False, accelerated: bool = False,
                masks: tuple[torch.Tensor, torch.Tensor] | None = None
                ) -> torch.Tensor:
        """Run the stack over one assembled sequence; returns normed hidden
        states aligned with the layout.

        Accelerated mode runs global layers over the shared observation only;
        track rows skip those layers through the residual path, trading a
        small output change for much shorter global attention.
        """
        if embeds.ndim == 2:
            embeds = embeds[None]
        if embeds.shape[1] != layout.total_len:
            raise LayoutMismatch(
                f"sequence {embeds.shape[1]} vs layout {layout.total_len}")
        g_allow, w_allow = masks or self.masks_for(layout, text_conditioning)
        s = layout.shared_len
        x = embeds
        for i, blk in enumerate(self.blocks):
            if i in self.config.global_indices:
                if accelerated:
                    x = torch.cat([blk(x[:, :s], g_allow[:s, :s]), x[:, s:]],
                                  dim=1)
                else:
                    x = blk(x, g_allow)
            else:
                x = blk(x, w_allow)
        return self.final_norm(x)

    def logits(self, hidden: torch.Tensor, emb: torch.Tensor,
               sl: range) -> torch.Tensor:
        """Scores over one vocabulary slice: scaled dot products between
        hidden rows and the slice's embeddings."""
        if len(sl) == 0:
            raise ScheduleViolation("empty vocabulary slice")
        table = emb[sl.start: sl.stop]
        return hidden @ table.T / self.config.embed_dim ** 0.5

    # ---- bookkeeping ----------------------------------------------------

    def parameter_breakdown(self) -> dict[str, int]:
        """Parameter counts by function: the transformer stack versus the
        embedding/head periphery."""
        blocks = sum(p.numel() for p in self.blocks.parameters())
        blocks += sum(p.numel() for p in self.final_norm.parameters())
        total = sum(p.numel() for p in self.parameters())
        return {"transformer": blocks, "periphery": total - blocks,
                "total": total, "per_block": blocks_parameter_count(
                    self.config.embed_dim)}

    def layer_index(self, param_name: str) -> int | None:
        """Transformer layer an optimizer parameter belongs to, or None for
        periphery parameters."""
        if param_name.startswith("blocks."):
            return int(param_name.split(".")[1])
        return None


def blocks_parameter_count(dim: int) -> int:
    """Closed-form per-block parameter count (attention + MLP + norms)."""
    attn = 4 * (dim * dim + dim)
    mlp = dim * 4 * dim + 4 * dim + 4 * dim * dim + dim
    norms = 2 * 2 * dim
    return attn + mlp + norms


# ---- checkpoints --------------------------------------------------------


def save_checkpoint(path: str, model: UliModel,
                    extra: dict | None = None) -> None:
    """Flat binary checkpoint: magic, manifest length, JSON manifest, then
    all parameter tensors as little-endian float32 in manifest order."""
    tensors = []
    payload = io.BytesIO()
    offset = 0
    for name, param in model.state_dict().items():
        data = param.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(data.shape),
                        "dtype": "f4", "offset": offset})
        payload.write(data.tobytes())
        offset += data.nbytes
    manifest = {"config": asdict(model.config), "tensors": tensors,
                "extra": extra or {}}
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload.getvalue())


def load_checkpoint(path: str) -> tuple[ModelConfig, dict, dict]:
    """Read a checkpoint back: (config, state_dict, extra)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (mlen,) = struct.unpack("<Q", raw[4:12])
    try:
        manifest = json.loads(raw[12:12 + mlen])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: corrupt manifest") from exc
    base = 12 + mlen
    state = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        buf = raw[start: start + 4 * count]
        if len(buf) != 4 * count:
            raise ParseError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return ModelConfig(**manifest["config"]), state, manifest.get("extra", {})


def model_from_checkpoint(path: str) -> tuple[UliModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra)."""
    config, state, extra = load_checkpoint(path)
    model = UliModel(config)
    model.load_state_dict(state)
    return model, extra
