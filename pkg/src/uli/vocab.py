"""Token tables and embeddings shared by every task.

Three token populations exist: base subword pieces (captions, instructions,
concept names), coordinate bins (quantized pixel values), and per-task
concept tokens (categories compressed to a single embedding, plus a
synthesized background token). Concept embeddings come out of a one-layer
attention composer so multi-word categories stay a single decode step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import (DuplicateCategory, InvalidConcept, ScheduleViolation,
                     UnknownSymbol)
from .tasks import StepKind, Task, TaskSpec

ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
EOS_PIECE = "[end]"
CONTINUATION = "##"

# Whole words matched greedily before falling back to subword pieces. Small
# and fixed so runs are reproducible without external vocabulary files.
_WORDS = sorted({
    "a", "an", "and", "the", "empty", "image", "images",
    "red", "green", "blue",
    "square", "circle", "triangle",
    "object", "detection", "instance", "semantic", "segmentation",
    "captioning", "visual", "grounding",
    "traffic", "light", "cat", "dog", "person", "car", "bus", "bird",
    "sky", "grass", "road", "tree", "box", "mask", "shape",
    "left", "right", "top", "bottom", "small", "large",
})

_SUFFIXES = sorted({"##ing", "##ion", "##tion", "##s", "##ed", "##er",
                    "##es", "##ly", "##al", "##ic"})

BASE_ENTRIES: tuple[str, ...] = tuple(dict.fromkeys(
    (EOS_PIECE,)
    + tuple(_WORDS)
    + tuple(_SUFFIXES)
    + tuple(ALPHABET)
    + tuple(CONTINUATION + c for c in ALPHABET)
))


class Tokenizer:
    """Greedy longest-match subword tokenizer over a fixed piece table.

    Words are matched left to right: the longest known prefix starts the
    word, then the longest known ``##`` continuation piece repeats until the
    word is consumed. Single characters (and their continuations) are all in
    the table, so any text over the alphabet tokenizes.
    """

    def __init__(self, entries: tuple[str, ...] = BASE_ENTRIES):
        self.entries = tuple(entries)
        self.piece_to_id = {p: i for i, p in enumerate(self.entries)}
        if len(self.piece_to_id) != len(self.entries):
            raise DuplicateCategory("duplicate base entries")
        self.eos_id = self.piece_to_id[EOS_PIECE]
        self._max_len = max(len(p) for p in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def tokenize(self, text: str) -> list[int]:
        words = text.lower().split()
        if not words:
            raise UnknownSymbol("empty text")
        ids: list[int] = []
        for word in words:
            bad = set(word) - set(ALPHABET)
            if bad:
                raise UnknownSymbol(f"character {bad.pop()!r} not in alphabet")
            pos = 0
            while pos < len(word):
                prefix = CONTINUATION if pos else ""
                match = None
                limit = min(len(word) - pos, self._max_len - len(prefix))
                for n in range(limit, 0, -1):
                    cand = prefix + word[pos:pos + n]
                    if cand in self.piece_to_id:
                        match = cand
                        break
                assert match is not None, "single characters cover the alphabet"
                ids.append(self.piece_to_id[match])
                pos += len(match) - len(prefix)
        return ids

    def detokenize(self, ids: list[int]) -> str:
        out: list[str] = []
        for i in ids:
            piece = self.entries[i]
            if piece == EOS_PIECE:
                continue
            if piece.startswith(CONTINUATION) and out:
                out[-1] += piece[len(CONTINUATION):]
            else:
                out.append(piece)
        return " ".join(out)


class OovComposer(nn.Module):
    """Single-head attention layer that folds a multi-piece concept into one
    embedding; also owns the base text-embedding table.

    Value/output projections start as the identity and the query/key
    projections small, so at initialization a composed concept is close to a
    plain average of its piece embeddings.
    """

    def __init__(self, dim: int, num_base: int = len(BASE_ENTRIES),
                 max_pieces: int = 8):
        super().__init__()
        self.dim = dim
        self.max_pieces = max_pieces
        self.text_embed = nn.Embedding(num_base, dim)
        self.piece_pos = nn.Embedding(max_pieces, dim)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)
        nn.init.normal_(self.text_embed.weight, std=0.02)
        nn.init.normal_(self.piece_pos.weight, std=0.02)
        nn.init.normal_(self.q.weight, std=0.02)
        nn.init.normal_(self.k.weight, std=0.02)
        with torch.no_grad():
            self.v.weight.copy_(torch.eye(dim))
            self.out.weight.copy_(torch.eye(dim))


def compose_concept(pieces: list[int], composer: OovComposer) -> torch.Tensor:
    """Compress a piece-id sequence into one concept embedding.

    Single pieces pass through as their raw text embedding; longer sequences
    run one attention layer over embedding+position and keep the first
    output slot.
    """
    if len(pieces) == 0:
        raise InvalidConcept("empty piece list")
    if len(pieces) > composer.max_pieces:
        raise InvalidConcept(
            f"{len(pieces)} pieces exceeds max {composer.max_pieces}")
    idx = torch.as_tensor(pieces, dtype=torch.long)
    if len(pieces) == 1:
        return composer.text_embed(idx)[0]
    x = composer.text_embed(idx) + composer.piece_pos(
        torch.arange(len(pieces)))
    scores = composer.q(x) @ composer.k(x).T / composer.dim ** 0.5
    attn = torch.softmax(scores, dim=-1)
    return composer.out(attn @ composer.v(x))[0]


def background_embedding(positives) -> torch.Tensor:
    """Background class embedding: the negated mean of the positive-class
    embeddings, recomputed whenever the positives change."""
    if isinstance(positives, torch.Tensor):
        stack = positives
        if stack.ndim != 2 or stack.shape[0] == 0:
            raise InvalidConcept("need a non-empty (N, D) stack")
    else:
        if len(positives) == 0:
            raise InvalidConcept("empty positive list")
        stack = torch.stack([torch.as_tensor(p, dtype=torch.get_default_dtype())
                             for p in positives])
    return -stack.mean(dim=0)


@dataclass
class Vocabulary:
    """One task's token table.

    Id layout is contiguous by kind: for perception tasks
    ``[0, B)`` coordinate bins, ``[B, B+C)`` concepts, then one background
    id; captioning uses the base table directly (terminator included).
    """

    task: Task
    embedding_dim: int
    base_entries: tuple[str, ...] = ()
    concept_entries: list[tuple[str, torch.Tensor]] = field(default_factory=list)
    concept_pieces: list[list[int]] = field(default_factory=list)
    coord_bins: int = 0
    background_id: int | None = None

    @property
    def num_concepts(self) -> int:
        return len(self.concept_entries)

    @property
    def size(self) -> int:
        if self.task is Task.CAPTION:
            return len(self.base_entries)
        return self.coord_bins + self.num_concepts + (
            1 if self.background_id is not None else 0)

    def concept_id(self, name: str) -> int:
        for i, (n, _) in enumerate(self.concept_entries):
            if n == name:
                return self.coord_bins + i
        raise KeyError(name)

    def kind_of(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise IndexError(token_id)
        if self.task is Task.CAPTION:
            return "base"
        if token_id < self.coord_bins:
            return "coord"
        if token_id == self.background_id:
            return "background"
        return "concept"

    def surface(self, token_id: int) -> str:
        kind = self.kind_of(token_id)
        if kind == "base":
            return self.base_entries[token_id]
        if kind == "coord":
            return f"bin{token_id}"
        if kind == "background":
            return "[background]"
        name, _ = self.concept_entries[token_id - self.coord_bins]
        return name.replace(" ", "_")

    def slice_for(self, kind: StepKind) -> range:
        """Token-id range a decode step of the given kind draws from."""
        if kind is StepKind.TEXT:
            sl = range(0, len(self.base_entries))
        elif kind.is_coord:
            sl = range(0, self.coord_bins)
        else:  # CLASS / DENSE: categories plus background
            hi = self.coord_bins + self.num_concepts
            if self.background_id is not None:
                hi += 1
            sl = range(self.coord_bins, hi)
        if len(sl) == 0:
            raise ScheduleViolation(f"empty vocabulary slice for {kind}")
        return sl

    def dump_lines(self) -> list[str]:
        """`<id>\\t<kind>\\t<surface>` per entry, dump/debug format."""
        return [f"{i}\t{self.kind_of(i)}\t{self.surface(i)}"
                for i in range(self.size)]


def build_task_vocabulary(spec: TaskSpec, categories: list[str],
                          composer: OovComposer,
                          tokenizer: Tokenizer | None = None) -> Vocabulary:
    """Assemble the per-task table: B = 2R coordinate bins, one composed
    concept per category, one synthesized background token. Captioning keeps
    the base table (terminator included) instead."""
    tokenizer = tokenizer or Tokenizer()
    if len(set(categories)) != len(categories):
        raise DuplicateCategory("category list has repeats")
    if spec.task is Task.CAPTION:
        return Vocabulary(task=spec.task, embedding_dim=composer.dim,
                          base_entries=tokenizer.entries)
    perception = spec.task in (Task.DETECTION, Task.INSTANCE_SEG,
                               Task.SEMANTIC_SEG)
    if perception and not categories:
        raise InvalidConcept("perception tasks need at least one category")
    pieces = [tokenizer.tokenize(c) for c in categories]
    with torch.no_grad():
        embeds = [compose_concept(p, composer).detach() for p in pieces]
    vocab = Vocabulary(task=spec.task, embedding_dim=composer.dim,
                       base_entries=tokenizer.entries,
                       concept_entries=list(zip(categories, embeds)),
                       concept_pieces=pieces,
                       coord_bins=spec.num_bins)
    if categories:
        vocab.background_id = vocab.coord_bins + vocab.num_concepts
    return vocab
