"""Command line front end.

Subcommands: vocab (dump the token table), encode (annotations to token
tracks), decode (checkpoint + image to predictions), train (synthetic
scenes), eval (metrics on generated scenes), inspect (attention masks,
assignments), gen (write a scene dataset). `ULI_SEED` overrides any seed
argument; validation failures exit with status 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import torch

from .assign import hungarian_match
from .codec import (dump_tracks, encode_caption, encode_detection,
                    encode_grounding, encode_instance)
from .decode import (beam_decode, parallel_decode, postprocess_caption,
                     postprocess_detection, postprocess_grounding,
                     postprocess_instance, postprocess_semseg, schedule_for)
from .errors import ParseError, UliError
from .harness import (CLASS_NAMES, EvalReport, eval_ap, eval_bleu4,
                      eval_grounding_acc, eval_miou, gen_scene,
                      load_coco_subset, sample_from_scene)
from .geometry import mask_iou
from .model import MODEL_PROFILES, UliModel, model_from_checkpoint, save_checkpoint
from .tasks import SceneConfig, Task, desk_tasks, paper_tasks
from .template import build_layout, make_grid, mask_to_pbm
from .train import TrainConfig, load_train_config, run_training
from .vocab import OovComposer, Tokenizer, build_task_vocabulary

TASK_BY_VALUE = {t.value: t for t in Task}


def _specs(profile: str):
    return desk_tasks() if profile == "desk" else paper_tasks()


def _seed(value: int) -> int:
    env = os.environ.get("ULI_SEED")
    return int(env) if env else value


def _read_categories(path: str | None) -> list[str]:
    if path is None:
        return list(CLASS_NAMES)
    with open(path) as fh:
        cats = [line.strip() for line in fh if line.strip()]
    if not cats:
        raise ParseError(f"{path}: no category names")
    return cats


def _write(text: str, out: str | None) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load_image(path: str, size: int) -> np.ndarray:
    if path.endswith(".npy"):
        arr = np.asarray(np.load(path), dtype=np.float64)
    else:
        from PIL import Image
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParseError(f"{path}: expected an RGB image")
    if arr.shape[:2] != (size, size):
        raise ParseError(f"{path}: expected {size}x{size} pixels, "
                         f"got {arr.shape[1]}x{arr.shape[0]}")
    return arr


def _save_png(path: str, array: np.ndarray) -> None:
    from PIL import Image
    Image.fromarray(array).save(path)


# ----------------------------------------------------------- subcommands

def cmd_vocab(args) -> int:
    spec = _specs(args.profile)[TASK_BY_VALUE[args.task]]
    composer = OovComposer(MODEL_PROFILES[args.profile].embed_dim)
    vocab = build_task_vocabulary(spec, _read_categories(args.categories),
                                  composer)
    _write("\n".join(vocab.dump_lines()) + "\n", args.out)
    return 0


def _coco_image(args):
    ds = load_coco_subset(args.coco)
    by_id = {r.image_id: r for r in ds.records}
    if args.image_id not in by_id:
        raise ParseError(f"image id {args.image_id} not in {args.coco}")
    return ds, by_id[args.image_id]


def cmd_encode(args) -> int:
    task = TASK_BY_VALUE[args.task]
    spec = _specs(args.profile)[task]
    composer = OovComposer(MODEL_PROFILES[args.profile].embed_dim)

    if task is Task.CAPTION:
        if not args.text:
            raise ParseError("caption encoding needs --text")
        vocab = build_task_vocabulary(spec, [], composer)
        tokens, _ = encode_caption(spec, vocab, args.text)
        text = dump_tracks(spec, vocab, [], [tokens])
    elif task is Task.GROUNDING:
        if not args.box:
            raise ParseError("grounding encoding needs --box x1,y1,x2,y2")
        box = tuple(float(v) for v in args.box.split(","))
        if len(box) != 4:
            raise ParseError(f"--box needs four numbers, got {args.box!r}")
        vocab = build_task_vocabulary(spec, [], composer)
        tokens, _ = encode_grounding(spec, vocab, box)
        text = dump_tracks(spec, vocab, [], [tokens])
    elif task is Task.SEMANTIC_SEG:
        raise ParseError("semantic maps have no COCO encoding; use uli gen")
    else:
        if not args.coco or args.image_id is None:
            raise ParseError(f"{args.task} encoding needs --coco and "
                             "--image-id")
        ds, rec = _coco_image(args)
        vocab = build_task_vocabulary(spec, list(ds.category_names), composer)
        grid = make_grid(spec)
        match = hungarian_match(grid, list(rec.boxes), spec.image_size)
        points, tracks = [], []
        for point in range(grid.n_points):
            target = int(match.matched[point])
            gp = tuple(grid.points[point])
            name = None if target < 0 else ds.category_names[
                rec.categories[target]]
            if target < 0:
                continue
            if task is Task.DETECTION:
                tok, _ = encode_detection(spec, vocab, rec.boxes[target],
                                          name, gp)
            else:
                poly = rec.polygons[target]
                if poly is None:
                    continue
                tok, _ = encode_instance(spec, vocab, poly,
                                         rec.boxes[target], name, gp)
            points.append(gp)
            tracks.append(tok)
        if not tracks:
            raise ParseError("no encodable annotations on this image")
        text = dump_tracks(spec, vocab, points, tracks)
    _write(text, args.out)
    return 0


def cmd_decode(args) -> int:
    task = TASK_BY_VALUE[args.task]
    model, extra = model_from_checkpoint(args.ckpt)
    model.eval()
    profile = model.config.profile
    spec = _specs(profile)[task]
    cats = (_read_categories(args.categories) if args.categories
            else list(extra.get("categories", CLASS_NAMES)))
    vocab = build_task_vocabulary(spec, cats, model.composer)
    image = torch.from_numpy(
        _load_image(args.image, spec.image_size).transpose(2, 0, 1)
    ).float().unsqueeze(0)

    instruction = None
    if task is Task.GROUNDING:
        if not args.phrase:
            raise ParseError("grounding decode needs --phrase")
        instruction = Tokenizer().tokenize(args.phrase)[
            :spec.max_instruction_tokens]
    layout = build_layout(spec, make_grid(spec),
                          instruction_len=len(instruction or []))

    payload: dict = {"task": task.value, "boxes": []}
    with torch.no_grad():
        if task is Task.CAPTION and args.beam > 1:
            tokens, _ = beam_decode(model, layout, vocab, image,
                                    width=args.beam)
            payload["caption"] = postprocess_caption(tokens, vocab, spec)
        else:
            result = parallel_decode(model, layout, schedule_for(spec, vocab),
                                     image, vocab, instruction=instruction,
                                     accelerated=args.accelerated)
            if task is Task.DETECTION:
                boxes = postprocess_detection(result, layout, vocab,
                                              nms=args.nms)
                payload["boxes"] = [{"bbox": list(b.box), "score": b.score,
                                     "category": b.category} for b in boxes]
            elif task is Task.INSTANCE_SEG:
                insts = postprocess_instance(result, layout, vocab,
                                             nms=args.nms)
                payload["boxes"] = [{"bbox": list(i.box), "score": i.score,
                                     "category": i.category} for i in insts]
                if args.out and insts:
                    stack = np.zeros(insts[0].mask.shape, dtype=np.uint8)
                    for rank, inst in enumerate(insts, start=1):
                        stack[inst.mask] = rank
                    mask_path = os.path.splitext(args.out)[0] + "_mask.png"
                    _save_png(mask_path, stack)
                    payload["mask_png"] = mask_path
            elif task is Task.SEMANTIC_SEG:
                label_map = postprocess_semseg(result, layout, vocab)
                if args.out:
                    mask_path = os.path.splitext(args.out)[0] + "_mask.png"
                    _save_png(mask_path,
                              (label_map + 1).astype(np.uint8))
                    payload["mask_png"] = mask_path
            elif task is Task.GROUNDING:
                box = postprocess_grounding(result, layout, vocab)
                payload["boxes"] = [{"bbox": list(box), "score": 1.0,
                                     "category": args.phrase}]
            else:
                payload["caption"] = postprocess_caption(
                    result.tokens[0].tolist(), vocab, spec)
    _write(json.dumps(payload, indent=2) + "\n", args.out)
    return 0


def _scene_provider(task: Task, spec, vocab, scene_cfg: SceneConfig):
    tokenizer = Tokenizer()

    def provide(rng):
        scene = gen_scene(rng, scene_cfg)
        return sample_from_scene(task, scene, spec, vocab, rng, tokenizer)
    return provide


def cmd_train(args) -> int:
    config = (load_train_config(args.config, args.profile) if args.config
              else TrainConfig(profile=args.profile))
    overrides: dict = {"seed": _seed(config.seed)}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.tasks:
        chosen = [TASK_BY_VALUE[v] for v in args.tasks.split(",")]
        kept = {t: w for t, w in config.task_weights if t in chosen}
        missing = set(chosen) - set(kept)
        if missing:
            raise ParseError("tasks absent from config weights: " +
                             ",".join(sorted(t.value for t in missing)))
        total = sum(kept.values())
        overrides["task_weights"] = tuple(
            (t, w / total) for t, w in kept.items())
    config = dataclasses.replace(config, **overrides)

    torch.manual_seed(config.seed)
    model = UliModel(MODEL_PROFILES[config.profile])
    specs = _specs(config.profile)
    scene_cfg = SceneConfig(image_size=specs[Task.DETECTION].image_size,
                            unique_classes=True)
    providers = {}
    for task, _ in config.task_weights:
        vocab = build_task_vocabulary(specs[task], list(CLASS_NAMES),
                                      model.composer)
        providers[task] = _scene_provider(task, specs[task], vocab,
                                          scene_cfg)

    def log(entry):
        print(f"iter {entry['iteration']:>6} {entry['task']:<9} "
              f"loss {entry['loss']:.4f}")

    run_training(model, config, providers, out_dir=args.out_dir, on_log=log)
    if args.out_dir:
        save_checkpoint(os.path.join(args.out_dir, "final.ckpt"), model,
                        extra={"iteration": config.iterations,
                               "categories": list(CLASS_NAMES)})
    return 0


def _decode_scene(model, task, spec, vocab, scene):
    image = torch.from_numpy(
        scene.image.transpose(2, 0, 1)).float().unsqueeze(0)
    instruction = None
    phrase_box = None
    if task is Task.GROUNDING:
        phrase, phrase_box = scene.grounding[0]
        instruction = Tokenizer().tokenize(phrase)[
            :spec.max_instruction_tokens]
    layout = build_layout(spec, make_grid(spec),
                          instruction_len=len(instruction or []))
    with torch.no_grad():
        result = parallel_decode(model, layout, schedule_for(spec, vocab),
                                 image, vocab, instruction=instruction)
    return result, layout, phrase_box


def cmd_eval(args) -> int:
    model, extra = model_from_checkpoint(args.ckpt)
    model.eval()
    specs = _specs(model.config.profile)
    cats = list(extra.get("categories", CLASS_NAMES))
    tasks = ([TASK_BY_VALUE[v] for v in args.tasks.split(",")]
             if args.tasks else list(Task))
    seed = _seed(args.seed)
    scene_cfg = SceneConfig(unique_classes=True)
    name_to_id = {n: i for i, n in enumerate(cats)}

    report_kw: dict = {}
    for task in tasks:
        spec = specs[task]
        vocab = build_task_vocabulary(spec, cats, model.composer)
        rng = np.random.default_rng(seed)
        preds, truths = {}, {}
        pred_maps, true_maps = [], []
        pred_caps, true_caps = [], []
        pred_boxes, true_boxes = [], []
        for i in range(args.n):
            scene = gen_scene(rng, scene_cfg)
            result, layout, phrase_box = _decode_scene(
                model, task, spec, vocab, scene)
            if task is Task.DETECTION:
                out = postprocess_detection(result, layout, vocab, nms=True)
                preds[i] = [(b.box, b.score, name_to_id[b.category])
                            for b in out]
                truths[i] = [(inst.box, name_to_id[inst.name])
                             for inst in scene.instances]
            elif task is Task.INSTANCE_SEG:
                out = postprocess_instance(result, layout, vocab, nms=True)
                preds[i] = [(inst.mask, inst.score,
                             name_to_id[inst.category]) for inst in out]
                truths[i] = [(scene.semantic_map == inst.class_id,
                              name_to_id[inst.name])
                             for inst in scene.instances]
            elif task is Task.SEMANTIC_SEG:
                pred_maps.append(postprocess_semseg(result, layout, vocab))
                true_maps.append(scene.semantic_map)
            elif task is Task.CAPTION:
                pred_caps.append(postprocess_caption(
                    result.tokens[0].tolist(), vocab, spec))
                true_caps.append(scene.caption)
            else:
                pred_boxes.append(postprocess_grounding(result, layout,
                                                        vocab))
                true_boxes.append(phrase_box)
        if task is Task.DETECTION:
            ap, ap50, ap75 = eval_ap(preds, truths)
            report_kw.update(det_ap=ap, det_ap50=ap50, det_ap75=ap75)
        elif task is Task.INSTANCE_SEG:
            ap, ap50, ap75 = eval_ap(preds, truths, iou_fn=mask_iou)
            report_kw.update(ins_ap=ap, ins_ap50=ap50, ins_ap75=ap75)
        elif task is Task.SEMANTIC_SEG:
            report_kw["miou"] = eval_miou(pred_maps, true_maps)
        elif task is Task.CAPTION:
            report_kw["bleu4"] = eval_bleu4(pred_caps, true_caps)
        else:
            report_kw["grounding_acc"] = eval_grounding_acc(pred_boxes,
                                                            true_boxes)
    _write(EvalReport(**report_kw).to_json() + "\n", args.out)
    return 0


def cmd_inspect(args) -> int:
    if args.what == "mask":
        task = TASK_BY_VALUE[args.task]
        spec = _specs(args.profile)[task]
        layout = build_layout(spec, make_grid(spec))
        from .template import build_attention_mask
        mask = build_attention_mask(layout)
        _write(mask_to_pbm(mask, comment=f"task={args.task} "
                                         f"profile={args.profile}"),
               args.out)
        return 0
    if not args.coco or args.image_id is None:
        raise ParseError("inspect assign needs --coco and --image-id")
    task = TASK_BY_VALUE[args.task]
    spec = _specs(args.profile)[task]
    ds, rec = _coco_image(args)
    grid = make_grid(spec)
    match = hungarian_match(grid, list(rec.boxes), spec.image_size)
    lines = [f"# task={args.task} image={args.image_id} "
             f"boxes={len(rec.boxes)}"]
    for point in range(grid.n_points):
        x, y = grid.points[point]
        target = int(match.matched[point])
        if target < 0:
            lines.append(f"point {point} ({x:.1f}, {y:.1f}) -> background")
        else:
            name = ds.category_names[rec.categories[target]]
            lines.append(f"point {point} ({x:.1f}, {y:.1f}) -> "
                         f"box {target} [{name}] "
                         f"cost {match.cost[point, target]:.4f}")
    _write("\n".join(lines) + "\n", args.out)
    return 0


def cmd_gen(args) -> int:
    rng = np.random.default_rng(_seed(args.seed))
    cfg = SceneConfig(image_size=args.size, min_shapes=args.min_shapes,
                      max_shapes=args.max_shapes,
                      unique_classes=args.unique)
    os.makedirs(args.out_dir, exist_ok=True)
    images, annotations, captions = [], [], {}
    ann_id = 1
    for i in range(args.n):
        scene = gen_scene(rng, cfg)
        name = f"scene_{i:04d}.png"
        _save_png(os.path.join(args.out_dir, name),
                  (scene.image * 255).astype(np.uint8))
        np.save(os.path.join(args.out_dir, f"scene_{i:04d}_sem.npy"),
                scene.semantic_map)
        images.append({"id": i, "file_name": name, "width": args.size,
                       "height": args.size})
        captions[str(i)] = scene.caption
        for inst in scene.instances:
            x1, y1, x2, y2 = inst.box
            annotations.append({
                "id": ann_id, "image_id": i,
                "category_id": inst.class_id,
                "bbox": [x1, y1, x2 - x1, y2 - y1],
                "segmentation": [
                    [float(v) for v in inst.polygon.reshape(-1)]],
                "area": float((x2 - x1) * (y2 - y1)), "iscrowd": 0})
            ann_id += 1
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i, "name": n}
                       for i, n in enumerate(CLASS_NAMES)],
        "captions": captions,
    }
    path = os.path.join(args.out_dir, "scenes.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
    print(f"wrote {args.n} scenes to {args.out_dir}")
    return 0


# ----------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uli", description="multi-task vision-language toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    task_values = sorted(TASK_BY_VALUE)

    p = sub.add_parser("vocab", help="dump a task vocabulary table")
    vocab_sub = p.add_subparsers(dest="vocab_command", required=True)
    pb = vocab_sub.add_parser("build")
    pb.add_argument("--task", required=True, choices=task_values)
    pb.add_argument("--categories")
    pb.add_argument("--profile", default="desk", choices=("desk", "paper"))
    pb.add_argument("--out")
    pb.set_defaults(func=cmd_vocab)

    p = sub.add_parser("encode", help="annotations to token tracks")
    p.add_argument("--task", required=True, choices=task_values)
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--coco")
    p.add_argument("--image-id", type=int)
    p.add_argument("--text")
    p.add_argument("--box")
    p.add_argument("--out")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="predict from a checkpoint")
    p.add_argument("--task", required=True, choices=task_values)
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--categories")
    p.add_argument("--phrase")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--nms", action="store_true")
    p.add_argument("--accelerated", action="store_true")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train on synthetic scenes")
    p.add_argument("--config")
    p.add_argument("--tasks", help="comma-separated subset, e.g. det,semseg")
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics on generated scenes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tasks")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump masks or assignments")
    p.add_argument("what", choices=("mask", "assign"))
    p.add_argument("--task", required=True, choices=task_values)
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--coco")
    p.add_argument("--image-id", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gen", help="write a synthetic scene dataset")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--min-shapes", type=int, default=1)
    p.add_argument("--max-shapes", type=int, default=3)
    p.add_argument("--unique", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UliError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
