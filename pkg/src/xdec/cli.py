"""Command-line surface: dataset generation, training, evaluation,
single-image inference, and two-stage task composition.

Every command exits 0 on success. Failures print one machine-parsable line
to stderr, `xdec-error: <ErrorClass>: <message>`, and exit with the error
class code (input 2, format 3, training 4, other 1).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import torch
from PIL import Image

from .config import Config, load_config
from .data import Dataset, category_names, generate_corpus, write_dataset
from .errors import InputError, XDecError
from .tasks import (
    ALL_TASKS,
    build_concepts,
    compose_referring_caption,
    compose_region_retrieval,
    evaluate_model,
    generate_caption,
    referring_segment,
    run_vqa,
    segmentation_inference,
    encode_single,
)
from .attention import TaskMode
from .training import checkpoint_load, run_training

OVERLAY_PALETTE = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
)

INFER_TASKS = ("panoptic", "semantic", "instance", "refer", "caption", "vqa")


def _configure_threads() -> None:
    raw = os.environ.get("XDEC_NUM_THREADS")
    if raw is None:
        return
    try:
        count = int(raw)
    except ValueError as exc:
        raise InputError(f"XDEC_NUM_THREADS must be an integer, got {raw!r}") from exc
    if count < 1:
        raise InputError("XDEC_NUM_THREADS must be >= 1")
    torch.set_num_threads(count)


def _resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=args.seed)
        )
    return cfg


def _load_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.float32) / 255.0
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def _write_overlay(path: str, image: np.ndarray, id_map: np.ndarray) -> None:
    """Blend a fixed 8-color palette over the image, keyed by segment id;
    id 0 is left untouched."""
    if id_map.shape != image.shape[:2]:
        raise InputError("overlay id map does not match the image size")
    out = np.round(image * 255.0).astype(np.float32)
    for sid in np.unique(id_map):
        if sid == 0:
            continue
        color = np.array(OVERLAY_PALETTE[(int(sid) - 1) % len(OVERLAY_PALETTE)], dtype=np.float32)
        region = id_map == sid
        out[region] = 0.5 * out[region] + 0.5 * color
    Image.fromarray(out.astype(np.uint8), mode="RGB").save(path, format="PNG")


def _emit(result: dict) -> None:
    print(json.dumps(result, indent=2, sort_keys=True))


def _split_csv(raw: str | None):
    if raw is None:
        return None
    items = [item.strip() for item in raw.split(",") if item.strip()]
    if not items:
        raise InputError("expected a non-empty comma-separated list")
    return items


def cmd_datagen(args) -> int:
    cfg = _resolve_config(args)
    out = args.out
    for split in ("train", "eval"):
        split_dir = os.path.join(out, split)
        if os.path.isdir(split_dir) and os.listdir(split_dir) and not args.force:
            raise InputError(f"{split_dir} already exists and is not empty (use --force)")
    seed = cfg.train.seed
    train_samples, next_seed = generate_corpus(seed, cfg.data.train_count, cfg.data)
    train_captions = {s.caption for s in train_samples}
    eval_samples, _ = generate_corpus(
        next_seed, cfg.data.eval_count, cfg.data, skip_captions=train_captions
    )
    write_dataset(os.path.join(out, "train"), train_samples, seed, cfg.data)
    write_dataset(os.path.join(out, "eval"), eval_samples, next_seed, cfg.data)
    _emit(
        {
            "out": out,
            "train_count": len(train_samples),
            "eval_count": len(eval_samples),
            "seed": seed,
        }
    )
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset = Dataset(args.data)
    state = run_training(cfg, dataset, args.out, resume=args.resume)
    _emit(
        {
            "out": args.out,
            "checkpoint": os.path.join(args.out, "checkpoint.xdec"),
            "log": os.path.join(args.out, "train_log.jsonl"),
            "steps": state.step,
            "final_loss": state.history[-1] if state.history else None,
        }
    )
    return 0


def cmd_eval(args) -> int:
    state = checkpoint_load(args.checkpoint)
    state.model.eval()
    dataset = Dataset(args.data)
    tasks = _split_csv(args.tasks) or list(ALL_TASKS)
    report = evaluate_model(state.model, dataset, tasks=tasks, beam_size=args.beam)
    payload = report.to_dict()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "metrics.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _emit(payload)
    return 0


def _infer_segmentation(model, image, task, concepts):
    with torch.no_grad():
        pyramid, pixel_map = encode_single(model, image)
        output = model.decode(pyramid, pixel_map, TaskMode.GENERIC_SEG)
        return segmentation_inference(output, concepts, task, image.shape[:2])


def cmd_infer(args) -> int:
    state = checkpoint_load(args.checkpoint)
    model = state.model
    model.eval()
    image = _load_image(args.image)
    vocab = state.vocab
    result: dict = {"task": args.task, "image": args.image}
    overlay_ids: np.ndarray | None = None

    if args.task in ("panoptic", "semantic", "instance"):
        names = _split_csv(args.concepts) or list(category_names())
        concepts = build_concepts(model, names, vocab)
        prediction = _infer_segmentation(model, image, args.task, concepts)
        if args.task == "panoptic":
            result["segments"] = [
                {"id": sid, "category": names[cat], "score": round(score, 6)}
                for sid, cat, score in prediction.segments
            ]
            overlay_ids = prediction.segment_map
        elif args.task == "semantic":
            counts = {
                names[int(c)]: int(n)
                for c, n in zip(*np.unique(prediction, return_counts=True))
            }
            result["category_pixels"] = counts
            overlay_ids = prediction + 1
        else:
            result["instances"] = [
                {"category": names[cat], "score": round(score, 6), "area": int(mask.sum())}
                for mask, cat, score in prediction
            ]
            overlay_ids = np.zeros(image.shape[:2], dtype=np.int32)
            ranked = sorted(prediction, key=lambda item: -item[2])
            for rank, (mask, _, _) in enumerate(ranked, start=1):
                overlay_ids[mask & (overlay_ids == 0)] = rank
    elif args.task == "refer":
        if not args.phrase:
            raise InputError("--task refer requires --phrase")
        refer = referring_segment(model, image, args.phrase, vocab)
        result.update(
            phrase=args.phrase,
            score=round(refer.score, 6),
            query=refer.query,
            area=int(refer.mask.sum()),
        )
        overlay_ids = refer.mask.astype(np.int32)
    elif args.task == "caption":
        caption = generate_caption(model, image, vocab, beam_size=args.beam)
        result.update(
            caption=caption.text,
            tokens=list(caption.tokens),
            logprobs=[round(lp, 6) for lp in caption.step_logprobs],
        )
    elif args.task == "vqa":
        if not args.question:
            raise InputError("--task vqa requires --question")
        answers = _split_csv(args.answers)
        if answers is None:
            raise InputError("--task vqa requires --answers")
        vqa = run_vqa(model, image, args.question, answers, vocab)
        result.update(
            question=args.question,
            answer=vqa.answer,
            index=vqa.index,
            scores=[round(float(s), 6) for s in vqa.scores],
        )
    else:
        raise InputError(f"unknown inference task {args.task!r}")

    if args.overlay:
        if overlay_ids is None:
            raise InputError(f"task {args.task} produces no mask overlay")
        _write_overlay(args.overlay, image, overlay_ids)
        result["overlay"] = args.overlay
    _emit(result)
    return 0


def cmd_compose(args) -> int:
    state = checkpoint_load(args.checkpoint)
    model = state.model
    model.eval()
    vocab = state.vocab
    if args.mode == "refer-caption":
        if not args.image or len(args.image) != 1:
            raise InputError("refer-caption needs exactly one --image")
        if not args.word:
            raise InputError("refer-caption requires --word")
        image = _load_image(args.image[0])
        refer, caption = compose_referring_caption(
            model, image, args.word, vocab, beam_size=args.beam
        )
        result = {
            "mode": args.mode,
            "word": args.word,
            "refer_score": round(refer.score, 6),
            "mask_area": int(refer.mask.sum()),
            "caption": caption.text,
        }
        if args.overlay:
            _write_overlay(args.overlay, image, refer.mask.astype(np.int32))
            result["overlay"] = args.overlay
    elif args.mode == "region-retrieval":
        if not args.image:
            raise InputError("region-retrieval needs at least one --image")
        if not args.phrase:
            raise InputError("region-retrieval requires --phrase")
        images = [_load_image(path) for path in args.image]
        best, refer = compose_region_retrieval(model, images, args.phrase, vocab)
        result = {
            "mode": args.mode,
            "phrase": args.phrase,
            "best_index": best,
            "best_image": args.image[best],
            "refer_score": round(refer.score, 6),
            "mask_area": int(refer.mask.sum()),
        }
        if args.overlay:
            _write_overlay(args.overlay, images[best], refer.mask.astype(np.int32))
            result["overlay"] = args.overlay
    else:
        raise InputError(f"unknown compose mode {args.mode!r}")
    _emit(result)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xdec",
        description="Train and run the multi-task segmentation/text decoder.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("datagen", help="generate the synthetic corpus")
    common(p, "data")
    p.add_argument("--force", action="store_true", help="overwrite non-empty splits")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="pretrain on a generated split")
    common(p, "run")
    p.add_argument("--data", required=True, help="split directory (from datagen)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p, None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split directory (from datagen)")
    p.add_argument("--tasks", help=f"comma list from {','.join(ALL_TASKS)}")
    p.add_argument("--beam", type=int, default=5, help="caption beam size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run one task on one image")
    common(p, None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--task", required=True, choices=INFER_TASKS)
    p.add_argument("--phrase", help="referring phrase (--task refer)")
    p.add_argument("--question", help="question text (--task vqa)")
    p.add_argument("--answers", help="comma list of answer candidates (--task vqa)")
    p.add_argument("--concepts", help="comma list of category names")
    p.add_argument("--beam", type=int, default=5, help="caption beam size")
    p.add_argument("--overlay", help="write a mask overlay PNG here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("compose", help="two-stage task compositions")
    common(p, None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--mode", required=True, choices=("refer-caption", "region-retrieval")
    )
    p.add_argument("--image", action="append", help="input PNG (repeatable)")
    p.add_argument("--word", help="word to ground (refer-caption)")
    p.add_argument("--phrase", help="query phrase (region-retrieval)")
    p.add_argument("--beam", type=int, default=5, help="caption beam size")
    p.add_argument("--overlay", help="write a mask overlay PNG here")
    p.set_defaults(func=cmd_compose)
    return parser


def main(argv=None) -> int:
    try:
        _configure_threads()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except XDecError as exc:
        print(f"xdec-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
