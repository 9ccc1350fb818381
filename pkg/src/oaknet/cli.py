"""Command-line orchestration for the whole pipeline.

Subcommands: synth, train-fcn, detect, extract, train-cnn, evaluate,
pipeline, gradcheck, rf.  Every run echoes its configuration to
``run-config.txt`` in the output directory so results are reproducible.
Exit codes: 0 success, 1 runtime failure (with a typed message), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as D
from . import imageproc as I
from . import locate as L
from . import metrics as M
from . import quantify as Q
from . import nn
from .gradsuite import CHECKS, run_suite


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return args.func(args) or 0
    except Exception as err:  # surface a typed one-line failure
        print(f"error [{type(err).__name__}]: {err}", file=sys.stderr)
        return 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="oaknet",
        description="Radiographic knee osteoarthritis pipeline: FCN joint "
                    "localisation and CNN severity grading.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--kind", choices=["radiographs", "knees"], default="radiographs")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-fcn", help="train a localisation FCN")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="desk-fcn")
    p.add_argument("--mask-mode", choices=["center", "roi"], default="roi")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--optimizer", choices=["sgd", "adam", "default"],
                   default="default")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_fcn)

    p = sub.add_parser("detect", help="localise knee joints in a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["fcn-roi", "fcn-center", "svm", "template"],
                   default="fcn-roi")
    p.add_argument("--checkpoint", help="FCN checkpoint (fcn methods)")
    p.add_argument("--train-manifest",
                   help="annotated images that supply templates / SVM samples "
                        "(svm and template methods); defaults to --manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("extract", help="crop detected knee joints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-cnn", help="train a severity quantifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=list(Q.MODES), default="joint")
    p.add_argument("--preset", default=None,
                   help="override the preset inferred from --mode")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--w-reg", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_cnn)

    p = sub.add_parser("evaluate", help="score detections or predictions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--detections", help="detections.txt to score against boxes")
    p.add_argument("--predictions", help="predictions.txt to score against grades")
    p.add_argument("--mask-mode", choices=["center", "roi"], default="roi",
                   help="ground-truth box flavour for detection scoring")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="full diagnosis of each radiograph")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fcn", required=True, help="localisation checkpoint")
    p.add_argument("--cnn", required=True, help="quantifier checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--all", action="store_true")
    p.add_argument("--op", action="append", choices=sorted(CHECKS),
                   help="check one operation (repeatable)")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("rf", help="receptive field of a preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--layer", default=None,
                   help="defaults to the last conv before upsampling")
    p.set_defaults(func=cmd_rf)
    return parser


def _prepare_out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "run-config.txt").write_text(
        json.dumps(echo, indent=2, default=str) + "\n", encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    out = _prepare_out(args)
    if args.kind == "radiographs":
        cfg = D.SyntheticConfig.radiographs(args.count, noise=args.noise,
                                            seed=args.seed)
        ds = D.synth_radiographs(cfg)
    else:
        cfg = D.SyntheticConfig.knees(args.count, noise=args.noise, seed=args.seed)
        ds = D.synth_knees(cfg)
    manifest = D.save_dataset(ds, out)
    hist = ds.grade_histogram()
    print(f"wrote {len(ds)} images to {out}")
    print("grade distribution:", " ".join(f"{g}:{n}" for g, n in hist.items()))
    print(f"manifest: {manifest}")


def _fcn_optimizer(args):
    if args.optimizer == "default":
        return None
    if args.optimizer == "sgd":
        base = nn.SGD_FCN
    else:
        base = nn.ADAM_DEFAULT
    if args.lr is not None:
        from dataclasses import replace
        base = replace(base, lr=args.lr)
    return base


def cmd_train_fcn(args):
    out = _prepare_out(args)
    ds = D.load_manifest(args.manifest)
    cfg = L.FcnTrainConfig(mask_mode=args.mask_mode, epochs=args.epochs,
                           batch_size=args.batch_size, seed=args.seed,
                           optimizer=_fcn_optimizer(args))
    t0 = time.time()
    network, history = L.train_localizer(ds, args.preset, cfg)
    path = out / "fcn.oakn"
    nn.save_checkpoint(network, path, epoch=args.epochs)
    _write_history(out, history)
    print(f"trained {args.preset} for {args.epochs} epochs "
          f"({time.time() - t0:.0f}s), final val loss "
          f"{history['val_loss'][-1]:.4f}")
    print(f"checkpoint: {path}")


def _write_history(out, history):
    (out / "history.txt").write_text(
        json.dumps(history, indent=2, default=str) + "\n", encoding="utf-8")


def _detection_line(image, det):
    x, y, w, h = det.bbox
    return (f"{image}  {det.side}  {x},{y},{w},{h}  "
            f"{det.score:.6g}  {det.method}")


def parse_detections(path):
    dets = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        image, side, box_s, score, method = line.split()
        box = tuple(int(v) for v in box_s.split(","))
        dets[(image, side)] = {"bbox": box, "score": float(score),
                               "method": method}
    return dets


def _working_image(img):
    eq = I.hist_equalize(img)
    if eq.shape != (D.WORKING_SIZE, D.WORKING_SIZE):
        eq = I.resize(eq, D.WORKING_SIZE, D.WORKING_SIZE)
    return eq


def _center_patches(train_ds, rng, negatives_per_positive=3):
    """20x20 patches at annotated centres (positives) and random patches
    away from them (negatives), at the working scale."""
    positives, negatives = [], []
    size = L.TEMPLATE_SIZE
    for rec in train_ds.records:
        img = _working_image(train_ds.image(rec.image))
        centers = [ann.center for ann in rec.sides.values()
                   if ann.center is not None]
        for cx, cy in centers:
            x0 = int(round(cx)) - size // 2
            y0 = int(round(cy)) - size // 2
            if 0 <= x0 <= img.shape[1] - size and 0 <= y0 <= img.shape[0] - size:
                positives.append(img[y0:y0 + size, x0:x0 + size])
        for _ in range(negatives_per_positive * max(1, len(centers))):
            while True:
                x0 = int(rng.integers(0, img.shape[1] - size))
                y0 = int(rng.integers(0, img.shape[0] - size))
                if all(abs(x0 + size / 2 - cx) > size or abs(y0 + size / 2 - cy) > size
                       for cx, cy in centers):
                    break
            negatives.append(img[y0:y0 + size, x0:x0 + size])
    if not positives:
        raise ValueError("training manifest has no centre annotations")
    return positives, negatives


def cmd_detect(args):
    out = _prepare_out(args)
    ds = D.load_manifest(args.manifest)
    method = args.method
    network = None
    templates = None
    model = None
    if method in ("fcn-roi", "fcn-center"):
        if not args.checkpoint:
            raise ValueError(f"--checkpoint is required for method {method}")
        network, _ = nn.load_checkpoint(args.checkpoint)
    else:
        rng = np.random.default_rng(args.seed)
        train_ds = D.load_manifest(args.train_manifest) if args.train_manifest else ds
        positives, negatives = _center_patches(train_ds, rng)
        if method == "template":
            rng.shuffle(positives)
            templates = [p.astype(np.float64) for p in positives[:25]]
        else:
            from oaknet.imageproc import sobel_horizontal
            feats = [sobel_horizontal(p).reshape(-1) for p in positives + negatives]
            labels = [1.0] * len(positives) + [-1.0] * len(negatives)
            model = L.train_svm(np.array(feats), np.array(labels),
                                L.SvmConfig(seed=args.seed))

    def detect_one(rec):
        img = _working_image(ds.image(rec.image))
        if method == "fcn-roi":
            orig = ds.image(rec.image).shape
            return L.fcn_localize_roi(img, network, original_size=orig)
        if method == "fcn-center":
            return L.fcn_localize_centers(img, network)
        if method == "template":
            return L.match_templates(img, templates)
        return L.svm_detect(img, model)

    results, failures = _parallel_map(detect_one, ds.records, args.threads)
    lines = ["# image  side  x,y,w,h  score  method"]
    for image, dets in results:
        for det in dets:
            lines.append(_detection_line(image, det))
    (out / "detections.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"detected {sum(len(d) for _, d in results)} joints in "
          f"{len(results)} images ({len(failures)} failures)")
    for image, err in failures:
        print(f"  failed {image}: {err}")
    if failures:
        return 1
    return 0


def _parallel_map(fn, records, threads):
    """Apply fn per record; returns ([(image, payload)], [(image, error)])."""
    results = []
    failures = []

    def safe(rec):
        try:
            return rec.image, fn(rec), None
        except Exception as err:
            return rec.image, None, err

    if threads <= 1:
        rows = [safe(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(safe, records))
    for image, value, err in rows:
        if err is None:
            results.append((image, value))
        else:
            failures.append((image, err))
    return results, failures


def cmd_extract(args):
    out = _prepare_out(args)
    ds = D.load_manifest(args.manifest)
    dets = parse_detections(args.detections)
    records = []
    images = {}
    for rec in ds.records:
        eq = I.hist_equalize(ds.image(rec.image))
        for side in D.SIDES:
            entry = dets.get((rec.image, side))
            if entry is None:
                continue
            knee = L.extract_roi(eq, entry["bbox"])
            name = f"{Path(rec.image).stem}_{side}.pgm"
            images[name] = knee
            grade = rec.sides.get(side).grade if side in rec.sides else None
            records.append(D.ManifestRecord(
                image=name, sides={side: D.SideAnnotation(grade=grade)}))
    knee_ds = D.Dataset(records, images=images)
    manifest = D.save_dataset(knee_ds, out)
    print(f"extracted {len(records)} knees; manifest: {manifest}")


def cmd_train_cnn(args):
    out = _prepare_out(args)
    ds = D.load_manifest(args.manifest)
    preset = args.preset
    if preset is None:
        preset = "desk-cnn" if args.mode == "joint" else f"desk-cnn-{args.mode}"
    cfg = Q.TrainConfig(mode=args.mode, epochs=args.epochs,
                        batch_size=args.batch_size, w_reg=args.w_reg,
                        seed=args.seed)
    t0 = time.time()
    network, history = Q.train_quantifier(ds, preset, cfg)
    path = out / "cnn.oakn"
    nn.save_checkpoint(network, path, epoch=args.epochs)
    _write_history(out, history)
    print(f"trained {preset} [{args.mode}] for {args.epochs} epochs "
          f"({time.time() - t0:.0f}s), final val accuracy "
          f"{history['val_accuracy'][-1]:.3f}")
    print(f"checkpoint: {path}")


def _prediction_line(image, side, bbox, pred):
    probs = "-" if pred.probs is None else ",".join(f"{p:.6f}" for p in pred.probs)
    cont = "-" if pred.grade_continuous is None else f"{pred.grade_continuous:.6f}"
    box_s = ",".join(str(v) for v in bbox)
    return f"{image}  {side}  {box_s}  {probs}  {pred.grade_discrete}  {cont}"


def parse_predictions(path):
    rows = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        image, side, box_s, probs_s, discrete, cont = line.split()
        rows.append({
            "image": image, "side": side,
            "bbox": tuple(int(v) for v in box_s.split(",")),
            "probs": None if probs_s == "-" else
                     tuple(float(v) for v in probs_s.split(",")),
            "grade_discrete": int(discrete),
            "grade_continuous": None if cont == "-" else float(cont),
        })
    return rows


def cmd_pipeline(args):
    out = _prepare_out(args)
    ds = D.load_manifest(args.manifest)
    fcn, _ = nn.load_checkpoint(args.fcn)
    cnn, _ = nn.load_checkpoint(args.cnn)

    def run_one(rec):
        return Q.run_pipeline(ds.image(rec.image), fcn, cnn)

    results, failures = _parallel_map(run_one, ds.records, args.threads)
    lines = ["# image  side  x,y,w,h  probs  grade  continuous"]
    knees = 0
    for (image, pairs) in results:
        for det, pred in pairs:
            lines.append(_prediction_line(image, det.side, det.bbox, pred))
            knees += 1
    (out / "predictions.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"pipeline processed {len(results)} radiographs, {knees} knees, "
          f"{len(failures)} localisation failures")
    for image, err in failures:
        print(f"  failed {image}: {err}")
    if failures:
        return 1
    return 0


def cmd_evaluate(args):
    out = _prepare_out(args)
    ds = D.load_manifest(args.manifest)
    report_lines = []
    if args.detections:
        dets = parse_detections(args.detections)
        gts = {}
        for rec in ds.records:
            for side, ann in rec.sides.items():
                if args.mask_mode == "roi" and ann.bbox is not None:
                    gts[(rec.image, side)] = ann.bbox
                elif args.mask_mode == "center" and ann.center is not None:
                    cx, cy = ann.center
                    gts[(rec.image, side)] = (int(round(cx)) - 10,
                                              int(round(cy)) - 10, 20, 20)
        boxes = {k: v["bbox"] for k, v in dets.items()}
        rep = M.detection_report(boxes, gts)
        report_lines.append(f"detection report ({args.mask_mode} ground truth)")
        report_lines.append(rep.format())
    if args.predictions:
        rows = parse_predictions(args.predictions)
        by_key = {r.image: r for r in ds.records}
        preds, labels = [], []
        for row in rows:
            rec = by_key.get(row["image"])
            if rec is None or row["side"] not in rec.sides:
                continue
            grade = rec.sides[row["side"]].grade
            if grade is None:
                continue
            preds.append(row["grade_discrete"])
            labels.append(grade)
        rep = M.classification_report(preds, labels)
        report_lines.append("classification report (discrete grades)")
        report_lines.append(rep.format())
        cont = [(row["grade_continuous"], rec.sides[row["side"]].grade)
                for row in rows
                for rec in [by_key.get(row["image"])]
                if rec and row["side"] in rec.sides
                and rec.sides[row["side"]].grade is not None
                and row["grade_continuous"] is not None]
        if cont:
            mse = float(np.mean([(c - g) ** 2 for c, g in cont]))
            report_lines.append(f"continuous-grade MSE: {mse:.4f}")
    if not report_lines:
        raise ValueError("nothing to evaluate: pass --detections or --predictions")
    text = "\n".join(report_lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_gradcheck(args):
    ops = None if args.all or not args.op else args.op
    failures = 0
    for name, dtype, worst, tol, ok in run_suite(ops=ops, seeds=args.seeds):
        print(f"{name:14s} {dtype:8s} max rel err {worst:.3e}  "
              f"tol {tol:.0e}  {'PASS' if ok else 'FAIL'}")
        failures += not ok
    if failures:
        print(f"{failures} gradient check(s) failed")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_rf(args):
    spec = nn.get_preset(args.preset)
    layer = args.layer or nn.last_conv_before_upsample(spec)
    value = nn.receptive_field(spec, layer)
    print(f"{args.preset} {layer}: receptive field {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
