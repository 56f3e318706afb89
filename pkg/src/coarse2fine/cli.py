"""Command line: synth, train, infer, eval, overlay.

Every command accepts ``--config FILE`` (JSON object keyed by option
names); explicit flags override it. The resolved options are printed to
stderr and saved as ``run_config.json`` next to the command's output.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import __version__


_TRAIN_DEFAULTS = {
    "C": 3.0, "eps": 1e-3, "max_iter": 500, "neg_per_image": 2, "jitter_iou": 0.6,
}


def _common(p, seed=True):
    p.add_argument("--config", help="JSON file with option defaults")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None, help="parallel processes (default: available cores)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coarse2fine", description="Coarse-to-fine hierarchy for "
                                 "detection, continuous pose and sub-category recognition.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    ap.subcommands = sub.choices

    p = sub.add_parser("synth", help="render a synthetic train/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200, help="training scenes")
    p.add_argument("--test", type=int, default=100, help="test scenes")
    p.add_argument("--size", type=int, default=128, help="image side in pixels")
    p.add_argument("--bins", type=int, default=8, help="azimuth bins recorded in the manifest")
    _common(p)

    p = sub.add_parser("train", help="train the detector and the hierarchy")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--layers", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--bins", type=int, default=8, help="azimuth bins")
    p.add_argument("--C", type=float, default=_TRAIN_DEFAULTS["C"])
    p.add_argument("--eps", type=float, default=_TRAIN_DEFAULTS["eps"])
    p.add_argument("--max-iter", type=int, default=_TRAIN_DEFAULTS["max_iter"])
    p.add_argument("--neg-per-image", type=int, default=_TRAIN_DEFAULTS["neg_per_image"])
    p.add_argument("--jitter-iou", type=float, default=_TRAIN_DEFAULTS["jitter_iou"],
                   help="proposals overlapping an object this much become extra positives")
    p.add_argument("--no-jitter", action="store_true", help="no jittered positives")
    p.add_argument("--no-mirror", action="store_true", help="no left-right mirrored positives")
    p.add_argument("--samples", type=int, nargs=4, default=(5, 3, 2, 2),
                   metavar=("AZ", "EL", "DIST", "OCC"))
    p.add_argument("--discrete", action="store_true", help="anchor particles only, no contour term")
    _common(p)

    p = sub.add_parser("infer", help="detect objects on a manifest's proposals")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="detections file")
    p.add_argument("--nms", type=float, default=0.5, help="suppression IoU")
    _common(p)

    p = sub.add_parser("eval", help="score detections against a manifest's annotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True, help="report file; a CSV of APs is written alongside")
    p.add_argument("--model", help="model directory, enables confusion and cad-alignment IoU")
    p.add_argument("--bins", type=int, nargs="+", default=(4, 8, 16, 24))
    p.add_argument("--main-bins", type=int, default=8)
    _common(p, seed=False)

    p = sub.add_parser("overlay", help="draw detected CAD outlines and labels onto the images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--top", type=int, default=1, help="detections per image")
    _common(p, seed=False)
    return ap


def parse(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            ap.error(f"cannot read config {args.config}: {exc}")
        sub = ap.subcommands[args.command]
        unknown = [k for k in cfg if not hasattr(args, k.replace("-", "_"))]
        if unknown:
            ap.error(f"unknown config keys {unknown}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = ap.parse_args(argv)
    if getattr(args, "workers", 1) is None:
        from .pipeline import default_workers
        args.workers = default_workers()
    return args


def echo_config(args, where: Path) -> None:
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()}
    text = json.dumps(resolved, indent=1, sort_keys=True)
    print(text, file=sys.stderr)
    where.mkdir(parents=True, exist_ok=True)
    (where / "run_config.json").write_text(text + "\n")


def cmd_synth(args) -> int:
    from .synth import SynthSpec, generate_synthetic

    out = Path(args.out)
    specs = [SynthSpec(n_scenes=args.train, seed=args.seed, split="train", image_size=args.size),
             SynthSpec(n_scenes=args.test, seed=args.seed, split="test", image_size=args.size)]
    echo_config(args, out)
    for spec in specs:
        m = generate_synthetic(spec, out, args.bins)
        print(f"{spec.split}: {len(m.images)} images, {len(m.proposals)} proposals -> "
              f"{out / spec.split / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    from .dataio import load_manifest
    from .pipeline import TrainSettings, fit

    manifest = load_manifest(args.manifest)
    settings = TrainSettings(layers=args.layers, m=args.bins, C=args.C, eps=args.eps, max_iter=args.max_iter,
                             seed=args.seed, neg_per_image=args.neg_per_image,
                             sample_counts=tuple(args.samples), discrete=args.discrete,
                             jitter_iou=None if args.no_jitter else args.jitter_iou, mirror=not args.no_mirror)
    out = Path(args.out)
    echo_config(args, out)
    model, _, _ = fit(manifest, settings, args.workers, log=lambda s: print(s, file=sys.stderr))
    model.save(out)
    st = model.state
    print(f"{'converged' if st.converged else 'stopped'} after {st.iteration} iterations; "
          f"weights -> {out / 'weights.bin'}")
    return 0


def cmd_infer(args) -> int:
    from .dataio import load_manifest, write_detections
    from .pipeline import TrainedModel, detect_dataset

    model = TrainedModel.load(args.model)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    echo_config(args, out.parent)
    recs = detect_dataset(model, manifest, args.seed, args.workers, args.nms)
    write_detections(out, recs)
    print(f"{len(recs)} detections -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .dataio import load_manifest, read_detections
    from .pipeline import TrainedModel, evaluate, format_report, report_csv_rows

    manifest = load_manifest(args.manifest)
    recs = read_detections(args.detections)
    config = registry = None
    if args.model:
        model = TrainedModel.load(args.model)
        config, registry = model.config, model.registry()
    out = Path(args.out)
    echo_config(args, out.parent)
    report = evaluate(recs, manifest, config, registry, tuple(args.bins), args.main_bins)
    text = format_report(report)
    out.write_text(text)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        csv.writer(fh).writerows(report_csv_rows(report))
    print(text, end="")
    return 0


def cmd_overlay(args) -> int:
    from .dataio import load_manifest, read_detections
    from .evaluation import placed_mask
    from .geometry import contour_of
    from .pipeline import TrainedModel

    manifest = load_manifest(args.manifest)
    recs = read_detections(args.detections)
    model = TrainedModel.load(args.model)
    registry = model.registry()
    out = Path(args.out)
    echo_config(args, out)
    by_image = {}
    for r in sorted(recs, key=lambda r: -r.energy):
        by_image.setdefault(r.image_id, []).append(r)
    for iid, rs in by_image.items():
        rec = manifest.images[iid]
        gray = np.clip(manifest.load_image(iid), 0, 255).astype(np.uint8)
        rgb = np.repeat(gray[..., None], 3, axis=2)
        focal = model.config.focal_for(rec.width, rec.height)
        labels = []
        for r in rs[:args.top]:
            cad = registry.finer.get(r.finer) if r.finer else registry.merged.get(r.subcat)
            if cad is None or r.viewpoint is None:
                continue
            outline = contour_of(placed_mask(cad, r.viewpoint, r.box, (rec.width, rec.height), focal))
            rgb[outline] = (255, 0, 0)
            labels.append((r.box, f"{r.finer or r.subcat or 'object'} v{r.v_bin}"))
        im = Image.fromarray(rgb)
        draw = ImageDraw.Draw(im)
        for (x, y, w, h), text in labels:
            draw.text((x, max(0, y - 11)), text, fill=(255, 255, 0))
        im.save(out / f"{iid}.png")
    print(f"{len(by_image)} overlays -> {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "overlay": cmd_overlay}


def main(argv=None) -> int:
    args = parse(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"coarse2fine {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
