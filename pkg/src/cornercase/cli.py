"""Command-line driver: ``cornercase <subcommand> [flags]``.

Every subcommand is a pure function of its input files and flags. Errors
are printed to stderr as a one-line JSON object; validation failures exit 1,
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from . import losses
from .datamodel import (
    Category,
    Dataset,
    DatasetError,
    Modality,
    Source,
    apply_class_split,
    dataset_to_doc,
    dump_json,
    load_class_split,
    load_dataset,
    remap_agnostic,
    split_to_doc,
)
from .evaluation import (
    EvalConfig,
    detection_to_record,
    evaluate_coda,
    evaluate_common,
    read_detections,
)
from .geometry import BBox, InvalidBoxError
from .matching import MatchingError, MatchWeights, ScoredPrediction, hungarian, match_predictions
from .pseudolabel import (
    PseudoLabelConfig,
    generate_pseudo_records,
    labels_from_rgb,
    merge_datasets,
    proposal_to_record,
    read_proposals,
    write_jsonl,
)
from .report import ReportError, fixture_path, load_baselines, render_table, report
from .synth import NoiseModel, SceneConfig, SynthError, generate_scenes, simulate_detector, simulate_teacher

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    pass


def _emit(doc: Any, out: str | None) -> None:
    text = dump_json(doc)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _resolve(path: str) -> Path:
    """A real path, or the name of a bundled fixture (with or without ``.json``)."""
    p = Path(path)
    if p.exists():
        return p
    for name in (path, f"{path}.json"):
        candidate = fixture_path(name)
        if candidate.exists():
            return candidate
    raise FileNotFoundError(path)


# -- subcommands -----------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    if args.out:
        _emit(dataset_to_doc(ds), args.out)
    summary = {
        "images": len(ds.images),
        "annotations": len(ds.annotations),
        "categories": len(ds.categories),
        "dropped": ds.dropped,
    }
    sys.stdout.write(dump_json(summary))
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    split = load_class_split(_resolve(args.split), ds.categories)
    ds = apply_class_split(ds, split)
    if args.remap:
        ds = remap_agnostic(ds, split, args.remap)
    if args.out:
        _emit(dataset_to_doc(ds), args.out)
    counts = {
        "common": sum(1 for c in ds.categories if c.split and c.split.value == "common"),
        "novel": sum(1 for c in ds.categories if c.split and c.split.value == "novel"),
        "agnostic_id": split.agnostic_id,
    }
    sys.stdout.write(dump_json(counts))
    return EXIT_OK


def cmd_pseudo_label(args: argparse.Namespace) -> int:
    views = load_dataset(args.dataset)
    labeled = load_dataset(args.labeled) if args.labeled else None
    cats = labeled.categories if labeled else views.categories
    split = load_class_split(_resolve(args.split), cats)
    geo = [im for im in views.images if im.modality != Modality.RGB]
    start = args.start_id
    if start is None:
        start = max((a.id for a in labeled.annotations), default=0) + 1 if labeled else 1
    if args.use_rgb_labels:
        if labeled is None:
            raise CliError("--use-rgb-labels needs --labeled")
        anns = labels_from_rgb(labeled, geo, start_id=start)
    else:
        if not args.proposals:
            raise CliError("--proposals is required unless --use-rgb-labels is given")
        cfg = PseudoLabelConfig(args.tau, args.nms, args.max_per_image)
        anns = generate_pseudo_records(read_proposals(args.proposals), cfg, split, images=geo, start_id=start)
    categories = list(cats)
    if all(c.id != split.agnostic_id for c in categories):
        categories.append(Category(split.agnostic_id, "object"))
    images = [replace(im, source=Source.PSEUDO) for im in sorted(geo, key=lambda r: r.id)]
    _emit(dataset_to_doc(Dataset(tuple(images), tuple(anns), tuple(categories))), args.out)
    return EXIT_OK


def cmd_merge(args: argparse.Namespace) -> int:
    labeled = load_dataset(args.labeled)
    split = load_class_split(_resolve(args.split), labeled.categories) if args.split else None
    sets = []
    for path in args.pseudo:
        ds = load_dataset(path)
        sets.append((ds.images, ds.annotations))
    merged = merge_datasets(labeled, sets, split)
    _emit(dataset_to_doc(merged), args.out)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    dets = read_detections(args.detections)
    cfg = EvalConfig(max_dets=None if args.max_dets <= 0 else args.max_dets)
    if args.protocol == "bdd":
        split = load_class_split(_resolve(args.split), ds.categories) if args.split else None
        recall, map50 = evaluate_common(dets, ds, cfg, split=split)
        doc = {"recall": recall, "map50": map50}
    else:
        if not args.split:
            raise CliError("--split is required for the coda protocol")
        split = load_class_split(_resolve(args.split), ds.categories)
        ds = apply_class_split(ds, split)
        doc = evaluate_coda(dets, ds, split, cfg).to_doc()
    _emit(doc, args.out)
    return EXIT_OK


def _assignment_doc(a) -> dict[str, Any]:
    return {
        "pairs": [list(p) for p in a.pairs],
        "total_cost": a.total_cost,
        "unmatched_predictions": list(a.unmatched_predictions),
        "unmatched_gts": list(a.unmatched_gts),
    }


def cmd_match(args: argparse.Namespace) -> int:
    if args.cost:
        matrix = json.loads(Path(args.cost).read_text(encoding="utf-8"))
        _emit(_assignment_doc(hungarian(np.asarray(matrix, dtype=float))), args.out)
        return EXIT_OK
    if not (args.dataset and args.predictions):
        raise CliError("match needs --cost, or both --dataset and --predictions")
    ds = load_dataset(args.dataset)
    w = MatchWeights(args.w_cls, args.w_l1, args.w_giou)
    preds: dict[int, list[ScoredPrediction]] = {}
    with open(args.predictions, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                probs = {int(k): float(v) for k, v in rec["class_probs"].items()}
                preds.setdefault(int(rec["image_id"]), []).append(
                    ScoredPrediction(BBox.from_xywh(*rec["bbox"]), probs)
                )
    images = ds.image_map()
    by_image = ds.annotations_by_image()
    out = {}
    for image_id in sorted(preds):
        if image_id not in images:
            raise DatasetError(f"prediction references missing image id {image_id}", ids=[image_id])
        gts = sorted(by_image.get(image_id, []), key=lambda a: a.id)
        a = match_predictions(preds[image_id], gts, w, images[image_id])
        doc = _assignment_doc(a)
        doc["pairs"] = [[i, gts[j].id] for i, j in a.pairs]
        doc["unmatched_gts"] = [gts[j].id for j in a.unmatched_gts]
        out[str(image_id)] = doc
    _emit(out, args.out)
    return EXIT_OK


def cmd_loss_check(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        obj, point = losses.sample_trial(args.loss, rng, min_gap=max(1e-3, 10 * args.eps))
        worst = max(worst, losses.grad_check(obj, point, args.eps))
    ok = worst < args.tol
    sys.stdout.write(
        dump_json({"loss": args.loss, "trials": args.trials, "eps": args.eps, "max_rel_error": worst, "pass": ok})
    )
    return EXIT_OK if ok else EXIT_FAIL


def _noise(spec: Any) -> NoiseModel:
    if spec == "zero":
        return NoiseModel.zero()
    spec = dict(spec)
    if "tp_score" in spec:
        spec["tp_score"] = tuple(spec["tp_score"])
    return NoiseModel(**spec)


def load_synth_config(path: str | Path, seed: int | None = None) -> dict[str, Any]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    scene = dict(doc.get("scene", {}))
    for key in ("image_size", "objects_per_image", "box_size"):
        if key in scene:
            scene[key] = tuple(scene[key])
    if "modalities" in scene:
        scene["modalities"] = tuple(Modality(m) for m in scene["modalities"])
    scene["seed"] = int(doc.get("seed", 0) if seed is None else seed)
    return {
        "scene": SceneConfig(**scene),
        "scenes": int(doc.get("scenes", 10)),
        "detector": _noise(doc.get("detector", {})),
        "teacher": {Modality(m): _noise(v) for m, v in doc.get("teacher", {}).items()},
    }


def cmd_synth(args: argparse.Namespace) -> int:
    conf = load_synth_config(_resolve(args.config), args.seed)
    cfg: SceneConfig = conf["scene"]
    n = conf["scenes"] if args.scenes is None else args.scenes
    full = generate_scenes(cfg, n)
    split = cfg.class_split()
    rgb = [im for im in full.images if im.modality == Modality.RGB]
    views = [im for im in full.images if im.modality != Modality.RGB]
    labeled = Dataset(tuple(rgb), full.annotations, full.categories)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _emit(dataset_to_doc(labeled), out / "dataset.json")
    _emit(dataset_to_doc(Dataset(tuple(views), (), full.categories)), out / "views.json")
    _emit(split_to_doc(split), out / "split.json")
    dets = simulate_detector(labeled, conf["detector"], cfg.seed, agnostic_id=split.agnostic_id)
    write_jsonl((detection_to_record(d) for d in dets), out / "detections.jsonl")
    props = simulate_teacher(full, conf["teacher"], cfg.seed) if conf["teacher"] else []
    write_jsonl((proposal_to_record(p) for p in props), out / "proposals.jsonl")
    sys.stdout.write(
        dump_json(
            {
                "out": str(out),
                "scenes": n,
                "seed": cfg.seed,
                "annotations": len(labeled.annotations),
                "detections": len(dets),
                "proposals": len(props),
            }
        )
    )
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    table = load_baselines(_resolve(args.baselines))
    if args.result:
        result = json.loads(_resolve(args.result).read_text(encoding="utf-8"))
    elif args.method:
        if args.method not in table.rows:
            raise ReportError(f"no row named {args.method!r} in the baseline table")
        result = table.rows[args.method]
    else:
        raise CliError("report needs --result or --method")
    doc = report(result, table)
    if args.out:
        _emit(doc, args.out)
    sys.stdout.write(render_table(doc))
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cornercase", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a COCO-format annotation file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="write the canonical form here")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="apply a common/novel class split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--remap", choices=["all", "novel_only"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pseudo-label", help="teacher proposals -> agnostic pseudo-annotations")
    p.add_argument("--proposals")
    p.add_argument("--dataset", required=True, help="file holding the depth/normal image records")
    p.add_argument("--split", required=True)
    p.add_argument("--labeled", help="labeled RGB dataset (id offset, --use-rgb-labels)")
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--nms", type=float, default=0.5)
    p.add_argument("--max-per-image", type=int, default=100)
    p.add_argument("--start-id", type=int)
    p.add_argument("--use-rgb-labels", action="store_true", help="copy parent RGB labels instead of proposals")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("merge", help="merge a labeled dataset with pseudo-labeled sets")
    p.add_argument("--labeled", required=True)
    p.add_argument("--pseudo", nargs="*", default=[])
    p.add_argument("--split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("evaluate", help="corner-case (coda) or common-object (bdd) metrics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--split")
    p.add_argument("--protocol", choices=["coda", "bdd"], default="coda")
    p.add_argument("--max-dets", type=int, default=100, help="per image and class; <= 0 for no cap")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("match", help="optimal prediction/ground-truth assignment")
    p.add_argument("--cost", help="JSON cost matrix (rows = predictions)")
    p.add_argument("--dataset")
    p.add_argument("--predictions", help="JSONL: image_id, bbox [x,y,w,h], class_probs")
    p.add_argument("--w-cls", type=float, default=2.0)
    p.add_argument("--w-l1", type=float, default=5.0)
    p.add_argument("--w-giou", type=float, default=2.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("loss-check", help="finite-difference check of analytic loss gradients")
    p.add_argument("--loss", required=True, choices=["giou", "l1", "box", "focal", "soft-token", "soft_token"])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_loss_check)

    p = sub.add_parser("synth", help="write a synthetic dataset, detections and teacher proposals")
    p.add_argument("--config", required=True, help="JSON config file or bundled fixture name")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--scenes", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="deltas against a baseline table")
    p.add_argument("--baselines", required=True, help="table file or bundled fixture name")
    p.add_argument("--result", help="EvalResult document")
    p.add_argument("--method", help="use this row of the baseline table as the result")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        CliError,
        DatasetError,
        MatchingError,
        ReportError,
        SynthError,
        InvalidBoxError,
        losses.NonDifferentiableError,
        FileNotFoundError,
        json.JSONDecodeError,
        KeyError,
        ValueError,
    ) as exc:
        err: dict[str, Any] = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, DatasetError):
            if exc.offset is not None:
                err["offset"] = exc.offset
            if exc.ids:
                err["ids"] = sorted(exc.ids)
        sys.stderr.write(json.dumps(err) + "\n")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
