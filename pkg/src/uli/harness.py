"""Synthetic scene generation, tiny COCO-format ingestion, and the
evaluation metrics used by the eval CLI and the overfit smoke tests.

Scenes are solid-color shapes on a gray background. Every annotation is
derived from the same polygon list, so the five task views of one scene
(boxes, polygons, semantic map, caption, grounding pairs) are mutually
consistent by construction.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .assign import BACKGROUND
from .errors import DegenerateInstance, GeometryError, ParseError
from .geometry import box_iou, polygon_bbox, rasterize_polygon, regular_polygon
from .tasks import SceneConfig, Task, TaskSpec
from .train import (TaskSample, caption_sample, detection_sample,
                    grounding_sample, instance_sample, semseg_sample)
from .vocab import Tokenizer, Vocabulary

SHAPE_COLORS = {"red": (0.86, 0.16, 0.16),
                "green": (0.16, 0.71, 0.24),
                "blue": (0.16, 0.31, 0.86)}
SHAPE_KINDS = ("square", "circle", "triangle")
CLASS_NAMES = tuple(f"{color} {shape}" for color in ("red", "green", "blue")
                    for shape in SHAPE_KINDS)
EMPTY_CAPTION = "an empty image"


@dataclass(frozen=True)
class SceneInstance:
    name: str                       # "<color> <shape>", indexes CLASS_NAMES
    polygon: np.ndarray             # (V, 2) float vertices
    box: tuple[float, float, float, float]

    @property
    def class_id(self) -> int:
        return CLASS_NAMES.index(self.name)


@dataclass(frozen=True)
class SyntheticScene:
    image: np.ndarray               # (H, W, 3) float in [0, 1]
    instances: tuple[SceneInstance, ...]
    semantic_map: np.ndarray        # (H, W) int, CLASS_NAMES ids, -1 outside
    caption: str
    grounding: tuple[tuple[str, tuple[float, float, float, float]], ...]

    @property
    def boxes(self) -> list[tuple[float, float, float, float]]:
        return [inst.box for inst in self.instances]

    @property
    def names(self) -> list[str]:
        return [inst.name for inst in self.instances]


def _circumradius(kind: str, radius: float) -> float:
    if kind == "square":
        return radius * math.sqrt(2.0)
    return radius if kind == "circle" else radius * 1.25


def _shape_polygon(kind: str, center, radius: float,
                   rng: np.random.Generator) -> np.ndarray:
    if kind == "square":
        return regular_polygon(center, radius * math.sqrt(2.0), 4,
                               phase=math.pi / 4)
    if kind == "circle":
        return regular_polygon(center, radius, 24)
    return regular_polygon(center, radius * 1.25, 3,
                           phase=float(rng.uniform(0, 2 * math.pi)))


def gen_scene(rng: np.random.Generator,
              config: SceneConfig | None = None) -> SyntheticScene:
    """Draw K non-overlapping colored shapes; K=0 yields the empty scene.

    Placement is rejection-sampled on center distance, so polygons (and
    therefore boxes and semantic regions) never intersect. The caption
    lists the shapes left to right; grounding pairs exist only for class
    names that appear exactly once, since "the red square" is otherwise
    ambiguous.
    """
    config = config or SceneConfig()
    size = config.image_size
    k = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    scale = size / 64.0

    names: list[str] = []
    if config.unique_classes:
        order = rng.permutation(len(CLASS_NAMES))[:k]
        names = [CLASS_NAMES[i] for i in order]
    else:
        names = [CLASS_NAMES[int(rng.integers(len(CLASS_NAMES)))]
                 for _ in range(k)]

    placed: list[tuple[float, float, float]] = []   # (cx, cy, circumradius)
    instances: list[SceneInstance] = []
    for name in names:
        _, kind = name.split()
        for _ in range(200):
            radius = float(rng.uniform(6.0, 11.0)) * scale
            reach = _circumradius(kind, radius)
            margin = reach + 2.0
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            if all(math.hypot(cx - px, cy - py) > reach + pr + 2.0
                   for px, py, pr in placed):
                break
        else:
            raise GeometryError(
                f"could not place {k} shapes in a {size}px scene")
        placed.append((cx, cy, reach))
        poly = _shape_polygon(kind, (cx, cy), radius, rng)
        instances.append(SceneInstance(name, poly, polygon_bbox(poly)))

    image = np.full((size, size, 3), config.background_gray / 255.0)
    semantic = np.full((size, size), BACKGROUND, dtype=np.int64)
    for inst in instances:
        mask = rasterize_polygon(inst.polygon, size, size)
        image[mask] = SHAPE_COLORS[inst.name.split()[0]]
        semantic[mask] = inst.class_id

    ordered = sorted(instances, key=lambda i: (i.box[0] + i.box[2]) / 2)
    caption = compose_caption([i.name for i in ordered])

    counts = Counter(i.name for i in instances)
    grounding = tuple((f"the {i.name}", i.box) for i in instances
                      if counts[i.name] == 1)
    return SyntheticScene(image, tuple(instances), semantic, caption,
                          grounding)


def compose_caption(names: list[str]) -> str:
    if not names:
        return EMPTY_CAPTION
    return " and ".join(f"a {name}" for name in names)


def parse_caption(caption: str) -> Counter:
    """Invert the caption grammar into a (color, shape) class multiset."""
    if caption == EMPTY_CAPTION:
        return Counter()
    out: Counter = Counter()
    for part in caption.split(" and "):
        if not part.startswith("a ") or part[2:] not in CLASS_NAMES:
            raise ParseError(f"not a scene caption: {caption!r}")
        out[part[2:]] += 1
    return out


def sample_from_scene(task: Task, scene: SyntheticScene, spec: TaskSpec,
                      vocab: Vocabulary, rng: np.random.Generator,
                      tokenizer: Tokenizer | None = None) -> TaskSample:
    """Bridge a scene to the per-task supervised sample builders."""
    if task is Task.DETECTION:
        return detection_sample(spec, vocab, scene.image, scene.boxes,
                                scene.names, rng)
    if task is Task.INSTANCE_SEG:
        polys = [inst.polygon for inst in scene.instances]
        return instance_sample(spec, vocab, scene.image, polys, scene.boxes,
                               scene.names, rng)
    if task is Task.SEMANTIC_SEG:
        return semseg_sample(spec, vocab, scene.image, scene.semantic_map)
    if task is Task.CAPTION:
        return caption_sample(spec, vocab, scene.image, scene.caption,
                              tokenizer)
    if not scene.grounding:
        raise DegenerateInstance("no uniquely named shape to ground")
    phrase, box = scene.grounding[int(rng.integers(len(scene.grounding)))]
    return grounding_sample(spec, vocab, scene.image, phrase, box, tokenizer)


# --- COCO-format ingestion ---------------------------------------------

@dataclass(frozen=True)
class CocoRecord:
    image_id: int
    file_name: str
    width: int
    height: int
    boxes: tuple[tuple[float, float, float, float], ...]
    categories: tuple[int, ...]             # remapped contiguous ids
    polygons: tuple[np.ndarray | None, ...]  # aligned with boxes


@dataclass(frozen=True)
class CocoSubset:
    records: tuple[CocoRecord, ...]
    category_names: tuple[str, ...]
    remap: dict         # original category id -> contiguous id


def load_coco_subset(path: str, max_images: int | None = None) -> CocoSubset:
    """Read a COCO-style JSON; boxes become corner form, polygon
    segmentations are kept, RLE ones dropped with a warning."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc

    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise ParseError(f"{path}: missing top-level key {key!r}")

    cats = sorted(data["categories"], key=lambda c: c["id"])
    remap = {c["id"]: i for i, c in enumerate(cats)}
    names = tuple(str(c["name"]) for c in cats)

    images = sorted(data["images"], key=lambda im: im["id"])
    if max_images is not None:
        images = images[:max_images]
    keep = {im["id"] for im in images}

    by_image: dict[int, list] = {im["id"]: [] for im in images}
    for ann in data["annotations"]:
        if ann["image_id"] not in keep:
            continue
        if ann["category_id"] not in remap:
            raise ParseError(f"{path}: unknown category id "
                             f"{ann['category_id']} in annotation")
        x, y, w, h = ann["bbox"]
        box = (float(x), float(y), float(x + w), float(y + h))
        seg = ann.get("segmentation")
        poly = None
        if isinstance(seg, dict):
            warnings.warn(f"annotation {ann.get('id')}: RLE segmentation "
                          "not supported, mask dropped")
        elif seg:
            ring = np.asarray(seg[0], dtype=np.float64).reshape(-1, 2)
            if len(ring) >= 3:
                poly = ring
        by_image[ann["image_id"]].append((box, remap[ann["category_id"]],
                                          poly))

    records = []
    for im in images:
        anns = by_image[im["id"]]
        records.append(CocoRecord(
            image_id=int(im["id"]),
            file_name=str(im.get("file_name", "")),
            width=int(im["width"]), height=int(im["height"]),
            boxes=tuple(a[0] for a in anns),
            categories=tuple(a[1] for a in anns),
            polygons=tuple(a[2] for a in anns)))
    return CocoSubset(tuple(records), names, remap)


# --- Metrics ------------------------------------------------------------

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def _ap_from_matches(scores: np.ndarray, matched: np.ndarray,
                     n_truth: int) -> float:
    """101-point interpolated AP from per-prediction match flags."""
    if n_truth == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(matched[order])
    fp = np.cumsum(~matched[order])
    recall = tp / n_truth
    precision = tp / (tp + fp)
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    # running max of precision from the right = best precision at recall >= r
    best = np.maximum.accumulate(precision[::-1])[::-1]
    interp = np.where(idx < len(best), best[np.minimum(idx, len(best) - 1)],
                      0.0)
    return float(interp.mean())


def _match_predictions(preds, truths, threshold: float,
                       iou_fn) -> np.ndarray:
    """Greedy score-order matching; each truth claims one prediction."""
    flags = np.zeros(len(preds), dtype=bool)
    used = [False] * len(truths)
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    for i in order:
        obj = preds[i][0]
        best, best_iou = -1, threshold
        for j, t in enumerate(truths):
            if used[j]:
                continue
            iou = iou_fn(obj, t[0])
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[best] = True
            flags[i] = True
    return flags


def eval_ap(predictions: dict, truths: dict,
            iou_fn=box_iou) -> tuple[float, float, float]:
    """COCO-style AP over IoU 0.50:0.05:0.95 plus AP50 and AP75.

    `predictions` maps image id to [(object, score, class)], `truths` to
    [(object, class)]; `iou_fn` compares two objects, so boxes and boolean
    masks share this code path. Classes absent from the ground truth are
    skipped; an empty ground truth scores 0.
    """
    classes = sorted({c for anns in truths.values() for _, c in anns})
    if not classes:
        return 0.0, 0.0, 0.0
    per_threshold = {thr: [] for thr in AP_THRESHOLDS}
    for cls in classes:
        n_truth = sum(sum(1 for _, c in anns if c == cls)
                      for anns in truths.values())
        scores, matches = [], {thr: [] for thr in AP_THRESHOLDS}
        for image_id, anns in truths.items():
            gt = [(obj, c) for obj, c in anns if c == cls]
            pr = [(obj, s) for obj, s, c in predictions.get(image_id, [])
                  if c == cls]
            scores.extend(s for _, s in pr)
            for thr in AP_THRESHOLDS:
                matches[thr].extend(_match_predictions(pr, gt, thr, iou_fn))
        score_arr = np.asarray(scores, dtype=np.float64)
        for thr in AP_THRESHOLDS:
            per_threshold[thr].append(_ap_from_matches(
                score_arr, np.asarray(matches[thr], dtype=bool), n_truth))
    means = {thr: float(np.mean(vals)) for thr, vals in per_threshold.items()}
    ap = float(np.mean(list(means.values())))
    return ap, means[0.5], means[0.75]


def eval_miou(pred_maps: list[np.ndarray],
              true_maps: list[np.ndarray]) -> float:
    """Mean IoU over every label (background included) that occurs in
    either side, accumulated across the whole image list."""
    if len(pred_maps) != len(true_maps):
        raise GeometryError("prediction/truth count mismatch")
    inter: Counter = Counter()
    union: Counter = Counter()
    for pred, true in zip(pred_maps, true_maps):
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise GeometryError(
                f"map shapes differ: {pred.shape} vs {true.shape}")
        for label in np.union1d(np.unique(pred), np.unique(true)):
            p = pred == label
            t = true == label
            inter[int(label)] += int(np.sum(p & t))
            union[int(label)] += int(np.sum(p | t))
    ious = [inter[l] / union[l] for l in union if union[l] > 0]
    return float(np.mean(ious)) if ious else 0.0


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def eval_bleu4(candidates: list[str], references: list[str]) -> float:
    """Corpus BLEU-4: geometric mean of clipped 1..4-gram precisions with
    the standard brevity penalty, single reference per candidate."""
    if len(candidates) != len(references):
        raise ParseError("candidate/reference count mismatch")
    if not candidates:
        return 0.0
    match = np.zeros(4)
    total = np.zeros(4)
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        c = cand.split()
        r = ref.split()
        cand_len += len(c)
        ref_len += len(r)
        for n in range(1, 5):
            cn = _ngrams(c, n)
            rn = _ngrams(r, n)
            total[n - 1] += sum(cn.values())
            match[n - 1] += sum(min(v, rn[g]) for g, v in cn.items())
    if np.any(total == 0) or np.any(match == 0):
        return 0.0
    log_prec = np.mean(np.log(match / total))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return float(bp * math.exp(log_prec))


def eval_grounding_acc(pred_boxes: list, true_boxes: list,
                       threshold: float = 0.5) -> float:
    """Fraction of predictions whose IoU with the target clears 0.5."""
    if len(pred_boxes) != len(true_boxes):
        raise GeometryError("prediction/truth count mismatch")
    if not pred_boxes:
        return 0.0
    hits = sum(box_iou(p, t) >= threshold
               for p, t in zip(pred_boxes, true_boxes))
    return hits / len(pred_boxes)


@dataclass
class EvalReport:
    """Fractional metrics in [0, 1]; tasks not evaluated stay None."""

    det_ap: float | None = None
    det_ap50: float | None = None
    det_ap75: float | None = None
    ins_ap: float | None = None
    ins_ap50: float | None = None
    ins_ap75: float | None = None
    miou: float | None = None
    bleu4: float | None = None
    grounding_acc: float | None = None

    def __post_init__(self):
        for name, value in vars(self).items():
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")

    def to_json(self) -> str:
        present = {k: v for k, v in vars(self).items() if v is not None}
        return json.dumps(present, indent=2, sort_keys=True)
