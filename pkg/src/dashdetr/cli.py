"""Command-line entry point: ``dashdetr <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
input), 3 numeric failure (NaN loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .autograd.checkpoint import CheckpointError
from .boxes import box_convert
from .config import PRESETS, ConfigError, load_config, save_config
from .data import (
    CLASS_NAMES,
    AnnotationError,
    GroundTruthObject,
    Letterbox,
    SceneError,
    SceneRecipe,
    class_histogram,
    generate_dataset,
    load_annotations,
    load_dataset,
    read_png,
    write_dataset,
)
from .evaluation import Detection, EvaluationError, evaluate
from .matching import MatchingError, hungarian, parse_cost_grid
from .train import NumericalError, infer, load_checkpoint, parse_step_log, parse_val_log, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- commands ------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    recipe = SceneRecipe.from_file(args.recipe) if args.recipe else SceneRecipe()
    if args.seed is not None:
        recipe = dataclasses.replace(recipe, seed=args.seed)
    samples = generate_dataset(recipe, args.count, start=args.start)
    path = write_dataset(samples, args.out)
    counts = class_histogram(samples)
    print(f"wrote {len(samples)} images to {path.parent}")
    print("class\tcount")
    for name, c in zip(CLASS_NAMES, counts):
        print(f"{name}\t{c}")
    return EXIT_OK


def _run_config(args):
    base = PRESETS[args.preset]
    return load_config(args.config, base) if args.config else base


def cmd_train(args) -> int:
    cfg = _run_config(args)
    mc = cfg.model
    train_set = load_dataset(args.data, mc.image_height, mc.image_width)
    val_set = load_dataset(args.val, mc.image_height, mc.image_width) if args.val else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            print(f"step {rec['step']}\ttotal {rec['total']:.4f}\tclass {rec['class']:.4f}\t"
                  f"l1 {rec['l1']:.4f}\tgiou {rec['giou']:.4f}", flush=True)

    try:
        result = train(cfg, train_set, val_set, out_dir=out, resume=args.resume, max_steps=args.max_steps,
                       on_step=progress)
    except NumericalError as exc:
        print(f"numeric failure: {exc}; offending batch dumped under {out}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"finished at step {result.step}; checkpoint {out / f'step_{result.step}.ckpt'}")
    if result.log.epochs:
        last = result.log.epochs[-1]
        print(f"final validation\tmAP {last['mAP']:.3f}\tmAP50 {last['mAP50']:.3f}")
    return EXIT_OK


def _predictions(checkpoint, data_dir, threshold):
    model, _, cfg, _ = load_checkpoint(checkpoint)
    mc = cfg.model
    descs = load_annotations(Path(data_dir) / "annotations.json")
    results, per_image = [], []
    for desc in descs:
        lb = Letterbox.fit(desc.width, desc.height, mc.image_width, mc.image_height)
        img = lb.image(read_png(Path(data_dir) / "images" / desc.file_name))
        (dets,) = infer(model, img[None], threshold)
        rows = []
        for d in dets:
            # canvas pixels -> normalised canvas -> original image pixels
            canvas = box_convert(d.xyxy, "xyxy", "cxcywh", (mc.image_width, mc.image_height))
            x1, y1, x2, y2 = lb.canvas_to_pixels(canvas, desc.width, desc.height)
            rows.append(((x1, y1, x2, y2), d.class_id, d.score))
            results.append({"image_id": desc.image_id, "category_id": d.class_id,
                            "bbox": [round(float(v), 4) for v in (x1, y1, x2 - x1, y2 - y1)],
                            "score": round(d.score, 6)})
        per_image.append((desc, rows))
    return results, per_image


def cmd_infer(args) -> int:
    results, per_image = _predictions(args.checkpoint, args.data, args.threshold)
    Path(args.out).write_text(json.dumps(results, indent=1))
    print(f"{len(results)} detections over {len(per_image)} images written to {args.out}")
    if args.figures:
        from .report import detections_figure

        for desc, rows in per_image[:args.figures_limit]:
            img = read_png(Path(args.data) / "images" / desc.file_name)
            gts = [(box_convert(o.box, "cxcywh", "xyxy", (desc.width, desc.height)), o.class_id)
                   for o in desc.objects]
            detections_figure(img, rows, gts, Path(args.figures) / f"detections_{desc.image_id}.png")
    return EXIT_OK


def load_predictions(path, descs) -> dict[int, list[Detection]]:
    """COCO-style result list back to normalised detections keyed by image id."""
    sizes = {d.image_id: (d.width, d.height) for d in descs}
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise EvaluationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(rows, list):
        raise EvaluationError(f"{path}: expected a JSON array of detections")
    out: dict[int, list[Detection]] = {}
    for row in rows:
        try:
            iid, cid, bbox, score = int(row["image_id"]), int(row["category_id"]), row["bbox"], float(row["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise EvaluationError(f"{path}: bad detection record {row!r}") from exc
        if iid not in sizes:
            raise EvaluationError(f"detection references unknown image id {iid}")
        box = box_convert(bbox, "xywh", "cxcywh", sizes[iid])
        out.setdefault(iid, []).append(Detection(box, cid, score))
    return out


def cmd_eval(args) -> int:
    descs = load_annotations(args.annotations)
    dets = load_predictions(args.predictions, descs)
    gts: dict[int, list[GroundTruthObject]] = {d.image_id: d.objects for d in descs}
    report = evaluate(dets, gts, interpolation=args.interpolation)
    doc = report.as_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps(doc, indent=2) if args.json else report.table())
    return EXIT_OK


def cmd_match(args) -> int:
    cost = parse_cost_grid(Path(args.cost).read_text())
    a = hungarian(cost)
    if args.json:
        print(json.dumps({"assignment": [{"target": j, "prediction": r} for j, r in enumerate(a.pred_for_target)],
                          "unmatched": a.unmatched(), "total_cost": a.total_cost}))
    else:
        print("target\tprediction\tcost")
        for j, r in enumerate(a.pred_for_target):
            print(f"{j}\t{r}\t{float(cost[r, j])!r}")
        print(f"total\t\t{a.total_cost!r}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed)
    worst = max(results.values())
    if args.json:
        print(json.dumps({"seed": args.seed, "max_relative_error": worst, "cases": results,
                          "tolerance": GRAD_TOLERANCE}))
    else:
        print("case\trelative_error")
        for name, err in results.items():
            print(f"{name}\t{err:.3e}")
        print(f"max\t{worst:.3e}")
    return EXIT_OK if worst < GRAD_TOLERANCE else EXIT_NUMERIC


def cmd_report(args) -> int:
    from .report import class_histogram_figure, loss_curve, map_curve

    run = Path(args.run)
    out = Path(args.out or run)
    steps = parse_step_log((run / "train_log.tsv").read_text())
    epochs = parse_val_log((run / "val_log.tsv").read_text())
    written = []
    if steps:
        written.append(loss_curve(steps, out / "loss_curve.png"))
    if epochs:
        written.append(map_curve(epochs, out / "map_curve.png"))
    print("epoch\tstep\tmAP\tmAP50\tmAR_10d\tmAR_100d")
    for r in epochs:
        print(f"{r['epoch']}\t{r['step']}\t{r['mAP']:.4f}\t{r['mAP50']:.4f}\t{r['mAR_10d']:.4f}\t{r['mAR_100d']:.4f}")
    if args.data:
        counts = class_histogram(load_annotations(Path(args.data) / "annotations.json"))
        written.append(class_histogram_figure(counts, out / "class_histogram.png"))
        print("\nclass\tcount")
        for name, c in zip(CLASS_NAMES, counts):
            print(f"{name}\t{c}")
    if steps:
        print(f"\nfinal_step\t{steps[-1]['step']}\nfinal_loss\t{steps[-1]['total']:.4f}")
    for p in written:
        print(f"figure\t{p}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _unit_float(text):
    v = float(text)
    if not 0.0 <= v <= 1.0 or math.isnan(v):
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dashdetr", description="Set-prediction object detector for dashcam scenes.",
                epilog="exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="render a synthetic dataset")
    g.add_argument("--recipe", help="JSON scene recipe (defaults apply when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=_positive_int, required=True)
    g.add_argument("--start", type=int, default=0, help="index of the first scene")
    g.add_argument("--seed", type=int, help="override the recipe seed")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="flat JSON config layered over the preset")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--val", help="validation dataset directory")
    t.add_argument("--out", required=True, help="run directory for logs and checkpoints")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=_positive_int)
    t.add_argument("--log-every", type=_positive_int, default=50)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run a checkpoint over a dataset directory")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--threshold", type=_unit_float, default=0.5)
    i.add_argument("--out", required=True, help="predictions JSON")
    i.add_argument("--figures", help="directory for side-by-side detection figures")
    i.add_argument("--figures-limit", type=_positive_int, default=8)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against annotations")
    e.add_argument("--predictions", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--interpolation", choices=("101", "all"), default="101")
    e.add_argument("--json", action="store_true", help="machine-readable output")
    e.add_argument("--out", help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("match", help="solve an assignment for a cost grid")
    m.add_argument("--cost", required=True, help="text grid, one prediction per row")
    m.add_argument("--json", action="store_true", help="machine-readable output")
    m.set_defaults(func=cmd_match)

    c = sub.add_parser("check-grad", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_check_grad)

    r = sub.add_parser("report", help="render figures and a summary for a run directory")
    r.add_argument("--run", required=True, help="run directory written by train")
    r.add_argument("--data", help="dataset directory for the class histogram")
    r.add_argument("--out", help="figure directory (defaults to the run directory)")
    r.set_defaults(func=cmd_report)
    return p


DATA_ERRORS = (AnnotationError, CheckpointError, ConfigError, EvaluationError, MatchingError, SceneError,
               FileNotFoundError, IsADirectoryError, ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
