"""Dataset-level training, detection and evaluation on top of the per-region modules."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import DatasetManifest, DetectionRecord, read_pgm
from .evaluation import (
    MatchCriterion, confusion_matrix, evaluate_ap, mask_iou, placed_mask, pose_rmse,
    standard_criteria, true_positive_pairs,
)
from .features import FilterBankProvider
from .geometry import load_obj, save_obj
from .inference import Detection, LossSpec, box_iou, detect_bundles
from .learning import CuttingPlaneState, train_detector, train_ssvm
from .model import (
    CadRegistry, HierarchyConfig, TrainingExample, WeightLayout, WeightVector, azimuth_bin,
)
from .potentials import FeatureContext, anchored, detector_from_dict
from .sampling import DistanceReference, anchor_particle, default_sigmas, make_rng

CONTOUR_BLOCKS = ("cnt.2", "cnt.3")


@dataclass(frozen=True)
class TrainSettings:
    layers: int = 3
    m: int = 8
    C: float = 3.0
    eps: float = 1e-3
    max_iter: int = 500
    seed: int = 0
    neg_iou: float = 0.3
    neg_per_image: int = 2
    jitter_iou: float | None = 0.6
    mirror: bool = True
    detector_lambda: float = 1e-2
    sample_counts: tuple = (5, 3, 2, 2)
    occ_factor: float = 0.15
    merge_tau: float = 0.5
    voxel_resolution: int = 32
    losses: tuple = (0.1, 0.3, 0.1)
    discrete: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sample_counts"] = list(self.sample_counts)
        d["losses"] = list(self.losses)
        return d


# ---------------------------------------------------------------------------
# dataset helpers


def load_cads(manifest: DatasetManifest) -> dict:
    return {f: load_obj(manifest.cad_path(f), model_id=f) for f in manifest.cads}


def distance_reference(manifest: DatasetManifest) -> DistanceReference:
    rows = [(a.box[2], a.box[3], a.viewpoint.distance) for a in manifest.annotations
            if a.o == 1 and a.viewpoint is not None]
    return DistanceReference.from_records(rows)


def make_config(manifest: DatasetManifest, s: TrainSettings) -> HierarchyConfig:
    subcats, finer = manifest.hierarchy()
    el = [a.viewpoint.elevation for a in manifest.annotations if a.o == 1 and a.viewpoint is not None]
    _, sigma_e, mu_e, _, _ = default_sigmas(s.m, el)
    return HierarchyConfig(subcats, finer, m=s.m, layers=s.layers, sample_counts=s.sample_counts,
                           sigma_e=sigma_e, mu_e=mu_e, occ_factor=s.occ_factor, C=s.C,
                           merge_tau=s.merge_tau, voxel_resolution=s.voxel_resolution)


def training_examples(manifest: DatasetManifest, neg_iou: float = 0.3, neg_per_image: int = 2,
                      seed: int = 0) -> list:
    """Annotated boxes as positives plus up to ``neg_per_image`` proposals clear of every object."""
    out = []
    for iid in manifest.images:
        anns = manifest.annotations_of(iid)
        for a in anns:
            if a.o == 1:
                out.append(TrainingExample(iid, tuple(a.box), 1, a.viewpoint, a.subcat, a.finer))
            else:
                out.append(TrainingExample(iid, tuple(a.box), 0))
        gts = [a.box for a in anns if a.o == 1]
        negs = [p for p in manifest.proposals_of(iid)
                if all(box_iou(p, g) < neg_iou for g in gts)]
        order = make_rng(seed, "negatives", iid).permutation(len(negs))
        out.extend(TrainingExample(iid, tuple(negs[i]), 0) for i in order[:neg_per_image])
    return out


def augmented_positives(manifest: DatasetManifest, jitter_iou: float | None = 0.6,
                        mirror: bool = True) -> list:
    """Extra positives: proposals overlapping an object by ``jitter_iou`` or more, labelled
    with that object, and every annotated box in the left-right flipped image.

    Mirroring assumes objects are left-right symmetric.
    """
    out = []
    for iid, rec in manifest.images.items():
        pos = [a for a in manifest.annotations_of(iid) if a.o == 1]
        if jitter_iou is not None and pos:
            for p in manifest.proposals_of(iid):
                best = max(pos, key=lambda a: box_iou(p, a.box))
                if tuple(p) != tuple(best.box) and box_iou(p, best.box) >= jitter_iou:
                    out.append(TrainingExample(iid, tuple(p), 1, best.viewpoint, best.subcat, best.finer))
        if mirror:
            for a in pos:
                x, y, w, h = a.box
                out.append(TrainingExample(iid, (rec.width - x - w, y, w, h), 1, a.viewpoint.mirrored(),
                                           a.subcat, a.finer, mirrored=True))
    return out


# ---------------------------------------------------------------------------
# bundles, optionally across worker processes

_WORKER_CTX = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _image_bundles(job):
    path, image_id, regions, seed, mirrored = job
    image = read_pgm(path)
    if mirrored:
        image = np.ascontiguousarray(image[:, ::-1])
        image_id = image_id + MIRROR_SUFFIX
    return [_WORKER_CTX.bundle(image, r, seed, image_id) for r in regions]


MIRROR_SUFFIX = "~mirrored"


def compute_bundles(ctx: FeatureContext, manifest: DatasetManifest, items, seed: int = 0,
                    workers: int = 1) -> list:
    """Bundles for (image_id, region) or (image_id, region, mirrored) items, in input order."""
    items = list(items)
    groups = {}
    for k, (iid, region, *flip) in enumerate(items):
        groups.setdefault((iid, bool(flip and flip[0])), []).append((k, region))
    jobs = [(str(manifest.image_path(iid)), iid, [r for _, r in g], seed, flip)
            for (iid, flip), g in groups.items()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as ex:
            results = list(ex.map(_image_bundles, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        _init_worker(ctx)
        results = [_image_bundles(j) for j in jobs]
    out = [None] * len(items)
    for g, res in zip(groups.values(), results):
        for (k, _), b in zip(g, res):
            out[k] = b
    return out


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# model


@dataclass(eq=False)
class TrainedModel:
    config: HierarchyConfig
    weights: WeightVector
    detector: object
    refs: DistanceReference
    cads: dict
    settings: TrainSettings
    state: CuttingPlaneState | None = None

    def registry(self) -> CadRegistry:
        return CadRegistry.build(self.cads, self.config)

    def context(self, provider=None, registry: CadRegistry | None = None) -> FeatureContext:
        return FeatureContext(self.config, registry or self.registry(), self.refs,
                              provider or FilterBankProvider(), self.detector)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "cads").mkdir(parents=True, exist_ok=True)
        self.weights.save(out / "weights.bin")
        for f, cad in self.cads.items():
            save_obj(cad, out / "cads" / f"{f}.obj")
        meta = {
            "config": self.config.to_dict(),
            "settings": self.settings.to_dict(),
            "detector": self.detector.to_dict(),
            "refs": np.stack([self.refs.widths, self.refs.heights, self.refs.distances], 1).tolist(),
            "cads": {f: f"cads/{f}.obj" for f in self.cads},
        }
        (out / "model.json").write_text(json.dumps(meta, indent=1))
        if self.state is not None:
            with open(out / "trace.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["iteration", "violation", "dual_objective"])
                for k, viol in enumerate(self.state.violations):
                    dual = self.state.trace[k] if k < len(self.state.trace) else ""
                    wr.writerow([k + 1, repr(viol), repr(dual) if dual != "" else ""])

    @classmethod
    def load(cls, model_dir) -> "TrainedModel":
        d = Path(model_dir)
        meta = json.loads((d / "model.json").read_text())
        config = HierarchyConfig.from_dict(meta["config"])
        s = meta["settings"]
        settings = TrainSettings(**{**s, "sample_counts": tuple(s["sample_counts"]),
                                    "losses": tuple(s["losses"])})
        weights = WeightVector.load(d / "weights.bin")
        app_dim = weights.layout.slice("loc.1")[1][-1]
        if weights.layout != WeightLayout.build(config, app_dim):
            raise ValueError(f"{d / 'weights.bin'} does not match the model configuration")
        cads = {f: load_obj(d / p, model_id=f) for f, p in meta["cads"].items()}
        return cls(config, weights, detector_from_dict(meta["detector"]),
                   DistanceReference.from_records(meta["refs"]), cads, settings)


def fit(manifest: DatasetManifest, settings: TrainSettings = TrainSettings(), workers: int = 1,
        log=None, provider=None) -> tuple:
    """Train the detector and the hierarchy; returns (TrainedModel, bundles, truths)."""
    provider = provider or FilterBankProvider()
    config = make_config(manifest, settings)
    refs = distance_reference(manifest)
    cads = load_cads(manifest)
    examples = training_examples(manifest, settings.neg_iou, settings.neg_per_image, settings.seed)
    images = {}

    def app(e):
        if e.image_id not in images:
            images[e.image_id] = manifest.load_image(e.image_id)
        return provider(images[e.image_id], e.region, e.image_id)

    detector = train_detector([app(e) for e in examples if e.o == 1],
                              [app(e) for e in examples if e.o == 0], settings.detector_lambda)
    images.clear()
    model = TrainedModel(config, None, detector, refs, cads, settings)
    ctx = model.context(provider)
    examples += augmented_positives(manifest, settings.jitter_iou, settings.mirror)
    if log:
        log(f"computing potentials for {len(examples)} training regions")
    bundles = compute_bundles(ctx, manifest, [(e.image_id, e.region, e.mirrored) for e in examples],
                              settings.seed, workers)
    truths = [e.assignment(config) for e in examples]
    model.weights, model.state = fit_weights(bundles, truths, config, settings, log=log)
    return model, bundles, truths


def subcat_counts(truths, config: HierarchyConfig) -> tuple:
    counts = [0] * config.n
    for t in truths:
        if t.o == 1 and t.s2 is not None:
            counts[t.s2] += 1
    return tuple(counts)


def fit_weights(bundles, truths, config: HierarchyConfig, settings: TrainSettings, log=None):
    """SSVM weights for ``config`` (any truncation) on precomputed full-depth bundles."""
    truths = [_truncate(t, config) for t in truths]
    if settings.discrete:
        bundles = [anchored(b) for b in bundles]
    d1, d2, d3 = settings.losses
    losses = LossSpec(d1, d2, d3, subcat_counts(truths, config))
    layout = WeightLayout.build(config, len(bundles[0].app))
    state = train_ssvm(bundles, truths, config, layout, losses, settings.C, settings.eps,
                       settings.max_iter, freeze=CONTOUR_BLOCKS if settings.discrete else (), log=log)
    return state.w, state


def _truncate(t, config):
    if t.o == 0:
        return t
    return type(t).foreground(t.v1, t.s2, t.f, config.layers, t.cv2, t.cv3)


# ---------------------------------------------------------------------------
# detection records


def to_record(det: Detection, config: HierarchyConfig, refs: DistanceReference) -> DetectionRecord:
    a = det.assignment
    vp = a.viewpoint
    if vp is None:
        vp = anchor_particle(a.v1, det.region, refs, config)
    s = None if a.s2 is None else config.subcategories[a.s2]
    f = None if a.f is None else config.finer_names[a.f]
    return DetectionRecord(det.image_id, tuple(det.region), det.energy, a.v1, vp, s, f)


def detections_from_bundles(bundles, model: TrainedModel, overlap: float = 0.5, config=None) -> list:
    """Records per image after NMS, all images concatenated."""
    config = config or model.config
    if model.settings.discrete:
        bundles = [anchored(b) for b in bundles]
    by_image = {}
    for b in bundles:
        by_image.setdefault(b.image_id, []).append(b)
    out = []
    for iid, bs in by_image.items():
        out.extend(to_record(d, config, model.refs) for d in detect_bundles(bs, model.weights, config, overlap))
    return out


def proposal_items(manifest: DatasetManifest) -> list:
    return [(p.image_id, tuple(p.box)) for p in manifest.proposals]


def detect_dataset(model: TrainedModel, manifest: DatasetManifest, seed: int = 0, workers: int = 1,
                   overlap: float = 0.5, provider=None) -> list:
    ctx = model.context(provider)
    bundles = compute_bundles(ctx, manifest, proposal_items(manifest), seed, workers)
    return detections_from_bundles(bundles, model, overlap)


# ---------------------------------------------------------------------------
# evaluation


def groundtruth(manifest: DatasetManifest) -> list:
    return [a for a in manifest.annotations if a.o == 1]


def label_accuracies(pairs, bins: int = 8) -> dict:
    """Fraction of box-matched detections with the right azimuth bin, sub-category and finer label.

    ``azimuth`` bins the continuous estimate into ``bins`` sectors; ``azimuth_label``
    compares the discrete viewpoint label the model chose with the annotated one.
    """
    nan = float("nan")
    if not pairs:
        return {"azimuth": nan, "azimuth_label": nan, "subcat": nan, "finer": nan, "n": 0}
    az = np.mean([d.azimuth is not None and azimuth_bin(d.azimuth, bins) == azimuth_bin(g.azimuth, bins)
                  for d, g in pairs])
    labelled = [(d.v_bin, g.v_bin) for d, g in pairs if g.v_bin is not None]
    return {
        "azimuth": float(az),
        "azimuth_label": float(np.mean([p == t for p, t in labelled])) if labelled else nan,
        "subcat": float(np.mean([d.subcat == g.subcat for d, g in pairs])),
        "finer": float(np.mean([d.finer == g.finer for d, g in pairs])),
        "n": len(pairs),
    }


def cad_alignment_ious(pairs, manifest: DatasetManifest, registry: CadRegistry, config: HierarchyConfig,
                       mode: str = "cad-alignment") -> list:
    out = []
    for d, g in pairs:
        rec = manifest.images[d.image_id]
        focal = config.focal_for(rec.width, rec.height)
        size = (rec.width, rec.height)
        cad = registry.finer[d.finer] if d.finer is not None else (
            registry.merged[d.subcat] if d.subcat is not None else None)
        if cad is None:
            # a 1-layer detection has no shape label; fall back to the first merged model
            cad = next(iter(registry.merged.values()))
        pred = placed_mask(cad, d.viewpoint, d.box, size, focal)
        if mode == "cad-alignment":
            ref = placed_mask(registry.finer[g.finer], g.viewpoint, g.box, size, focal)
        else:
            if rec.mask is None:
                raise ValueError(f"image {d.image_id!r} has no mask for 2d-segmentation")
            ref = read_pgm(manifest.root / rec.mask) > 127
        out.append(mask_iou(pred, ref))
    return out


def evaluate(records, manifest: DatasetManifest, config: HierarchyConfig | None = None,
             registry: CadRegistry | None = None, bins=(4, 8, 16, 24), main_bins: int = 8) -> dict:
    gts = groundtruth(manifest)
    report = {"n_detections": len(records), "n_groundtruth": len(gts), "ap": {}, "viewpoint_ap": {}}
    for c in standard_criteria(main_bins):
        report["ap"][c.name] = evaluate_ap(records, gts, c).ap
    for b in bins:
        report["viewpoint_ap"][b] = evaluate_ap(records, gts, MatchCriterion(f"Viewpoint/{b}", b)).ap
    pairs = true_positive_pairs(records, gts)
    report["accuracy"] = label_accuracies(pairs, main_bins)
    vp_pairs = [(d.viewpoint, g.viewpoint) for d, g in pairs if d.viewpoint is not None]
    report["pose_rmse"] = pose_rmse(vp_pairs) if vp_pairs else None
    if config is not None:
        s_idx = {s: i for i, s in enumerate(config.subcategories)}
        report["confusion"] = confusion_matrix(
            [(s_idx.get(g.subcat), s_idx.get(d.subcat)) for d, g in pairs], config.n).tolist()
    if registry is not None and config is not None and pairs:
        ious = cad_alignment_ious(pairs, manifest, registry, config)
        report["segmentation_iou"] = float(np.mean(ious))
    return report


def format_report(report: dict) -> str:
    def f(x):
        return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.1f}"

    lines = [f"detections {report['n_detections']}  ground truths {report['n_groundtruth']}", ""]
    names = list(report["ap"])
    lines.append(" | ".join(names))
    lines.append(" | ".join(f(report["ap"][n]) for n in names))
    lines.append("")
    lines.append("viewpoint AP by bin count: " + ", ".join(
        f"{b}: {f(v)}" for b, v in report["viewpoint_ap"].items()))
    acc = report["accuracy"]
    lines.append(f"accuracy on matched boxes (n={acc['n']}): azimuth {f(acc['azimuth'])}  "
                 f"azimuth label {f(acc['azimuth_label'])}  "
                 f"sub-category {f(acc['subcat'])}  finer {f(acc['finer'])}")
    if report.get("pose_rmse"):
        a, e, d = report["pose_rmse"]
        lines.append(f"pose RMSE: azimuth {a:.2f} deg  elevation {e:.2f} deg  distance {d:.3f}")
    if "segmentation_iou" in report:
        lines.append(f"cad-alignment IoU: {f(report['segmentation_iou'])}")
    if "confusion" in report:
        lines.append("sub-category confusion (rows true, columns predicted):")
        lines.extend("  " + " ".join(f"{c:5d}" for c in row) for row in report["confusion"])
    return "\n".join(lines) + "\n"


def report_csv_rows(report: dict) -> list:
    rows = [("criterion", "ap")]
    rows += [(k, "" if v is None else repr(v)) for k, v in report["ap"].items()]
    rows += [(f"Viewpoint/{b}", "" if v is None else repr(v)) for b, v in report["viewpoint_ap"].items()]
    return rows


# ---------------------------------------------------------------------------
# synthetic experiment


@dataclass
class ExperimentResult:
    reports: dict
    timings: dict
    model: TrainedModel


def run_synthetic_experiment(out_dir, n_train: int = 200, n_test: int = 100, seed: int = 0,
                             settings: TrainSettings | None = None, workers: int = 1,
                             truncations=(1, 2), log=None) -> ExperimentResult:
    """Synthesize, train the full hierarchy plus its ablations, and evaluate each on the test split.

    Report keys: "3-layer", "3-layer discrete", and "<k>-layer" for each
    requested truncation. All variants share the same potentials.
    """
    import time

    from .synth import SynthSpec, generate_synthetic
    from .dataio import load_manifest

    say = log or (lambda msg: None)
    settings = settings or TrainSettings(seed=seed)
    out_dir = Path(out_dir)
    timings = {}
    t0 = time.perf_counter()
    generate_synthetic(SynthSpec(n_scenes=n_train, seed=seed, split="train"), out_dir, settings.m)
    generate_synthetic(SynthSpec(n_scenes=n_test, seed=seed, split="test"), out_dir, settings.m)
    train = load_manifest(out_dir / "train" / "manifest.txt")
    test = load_manifest(out_dir / "test" / "manifest.txt")
    timings["synth"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model, train_bundles, truths = fit(train, settings, workers, log=say)
    timings["train"] = time.perf_counter() - t0
    say(f"trained in {timings['train']:.0f}s ({model.state.iteration} cutting-plane iterations)")

    t0 = time.perf_counter()
    registry = model.registry()
    test_bundles = compute_bundles(model.context(registry=registry), test, proposal_items(test),
                                   settings.seed, workers)
    timings["test_potentials"] = time.perf_counter() - t0

    reports = {}
    t0 = time.perf_counter()
    recs = detections_from_bundles(test_bundles, model)
    reports["3-layer"] = evaluate(recs, test, model.config, registry)

    variants = [("3-layer discrete", dataclasses.replace(settings, discrete=True), model.config)]
    variants += [(f"{k}-layer", settings, model.config.truncated(k)) for k in truncations]
    for name, s, cfg in variants:
        w, state = fit_weights(train_bundles, truths, cfg, s)
        sub = TrainedModel(cfg, w, model.detector, model.refs, model.cads, s, state)
        recs = detections_from_bundles(test_bundles, sub, config=cfg)
        reports[name] = evaluate(recs, test, cfg, registry)
        say(f"{name}: done")
    timings["variants"] = time.perf_counter() - t0
    return ExperimentResult(reports, timings, model)
