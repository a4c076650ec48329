"""Main application entry point for the cell-level GAN pipeline."""

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .analysis import (
    OneVsRestSVM,
    cell_proportions,
    classify_cells,
    cross_validate,
    extract_discriminator_features,
    pca_project,
    summarize_folds,
)
from .cell_types import CellInstance, FeatureMode, ClassifierMode, class_names
from .config import (
    ConfigError,
    DataError,
    PipelineConfig,
    PipelineError,
    debug_log,
    load_config,
    parse_int_list,
    save_config,
)
from .dataset_io import (
    InputError,
    list_images,
    read_assignments,
    read_cell_classes,
    read_image,
    read_instances,
    read_label_image,
    read_profiles,
    read_slide_labels,
    write_assignments,
    write_cell_classes,
    write_image,
    write_instances,
    write_json,
    write_label_image,
    write_pca,
    write_profiles,
    write_slide_labels,
)
from .metrics import ContingencyTable, aggregate_seg_reports, clustering_summary, iou_match, weighted_prf
from .report import ReportSection, cluster_montages, generate_report_html, generator_montage, z_walk_montage
from .segmentation import SegmentationResult, segment_image, sweep_thresholds
from .synthetic import generate_cell_dataset, generate_cohorts
from .trainer import TrainingRunState, load_checkpoint, train_run

T = TypeVar("T")
R = TypeVar("R")

MONTAGE_ROWS = 8
DEFAULT_SWEEP = "40,60,80,100,120,140,160,180,200"
COLOR_SPACE_HELP = ("Reinhard normalization colour space (default: ruderman, the l-alpha-beta space; "
                    "cielab uses D65 CIELAB). Overrides segmentation.color_space")


def _parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int) -> List[R]:
    """Map preserving input order."""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _warn(message: str) -> None:
    print(f"WARNING: {message}", file=sys.stderr)


def cmd_synth(config: PipelineConfig, out_dir: Path, cells: int = 0) -> bool:
    """Render synthetic cohorts with ground-truth masks, cell classes and slide labels."""
    spec = config.synthetic
    print(f"Rendering {len(spec.cohorts)} cohorts x {spec.slides_per_cohort} slides "
          f"({spec.cells_per_slide} cells each)")
    slides = generate_cohorts(spec)

    classes: Dict[Tuple[str, int], str] = {}
    labels: Dict[str, str] = {}
    for i, slide in enumerate(slides, 1):
        print(f"  [{i}/{len(slides)}] {slide.slide_id} ({slide.cohort})")
        write_image(out_dir / "slides" / f"{slide.slide_id}.png", slide.image)
        write_label_image(out_dir / "masks" / f"{slide.slide_id}.png", slide.labels)
        labels[slide.slide_id] = slide.cohort
        for label, name in slide.cell_classes.items():
            classes[(slide.slide_id, label)] = name
    write_cell_classes(out_dir / "cell_classes.csv", classes)
    write_slide_labels(out_dir / "slide_labels.csv", labels)

    if cells > 0:
        instances = generate_cell_dataset(spec, cells)
        write_instances(instances, out_dir / "cells")
        print(f"Wrote {len(instances)} isolated cells to {out_dir / 'cells'}")

    save_config(config, out_dir / "config.json")
    print(f"\nOutput written to: {out_dir}")
    return True


def _truth_classes(pred: np.ndarray, truth: np.ndarray, slide_id: str,
                   classes: Dict[Tuple[str, int], str]) -> Dict[int, str]:
    """Class of the ground-truth nucleus covering most of each predicted instance."""
    out = {}
    for label in range(1, int(pred.max(initial=0)) + 1):
        under = truth[pred == label]
        under = under[under > 0]
        if under.size == 0:
            continue
        name = classes.get((slide_id, int(np.bincount(under).argmax())))
        if name is not None:
            out[label] = name
    return out


def cmd_segment(config: PipelineConfig, input_dir: Path, out_dir: Path,
                truth_dir: Optional[Path] = None, classes_path: Optional[Path] = None) -> bool:
    """
    Segment every PNG slide in a directory and write the cell instances.

    Raises:
        DataError: If no nuclei are found in any image
    """
    paths = list_images(input_dir)
    if not paths:
        raise InputError(f"No PNG images in {input_dir}")
    classes = read_cell_classes(classes_path) if classes_path else {}
    print(f"Segmenting {len(paths)} images")

    def run(path: Path) -> Tuple[Path, Optional[SegmentationResult], Optional[str]]:
        try:
            return path, segment_image(read_image(path), config.segmentation, path.stem), None
        except DataError as e:
            return path, None, str(e)

    results = _parallel_map(run, paths, config.threads)
    instances: List[CellInstance] = []
    for i, (path, result, error) in enumerate(results, 1):
        if result is None:
            _warn(f"skipping {path.name}: {error}")
            continue
        print(f"  [{i}/{len(results)}] {path.name}: {len(result.instances)} nuclei")
        if truth_dir is not None:
            truth = read_label_image(Path(truth_dir) / path.name)
            names = _truth_classes(result.labels, truth, result.source_id, classes)
            for inst in result.instances:
                inst.cell_class = names.get(inst.label)
        write_label_image(out_dir / "masks" / path.name, result.labels)
        for stage in ("normalized", "hematoxylin", "mask"):
            write_image(out_dir / "debug" / f"{path.stem}_{stage}.png", result.stages[stage])
        instances.extend(result.instances)

    if not instances:
        raise DataError(f"no nuclei found in {len(paths)} image(s)")
    write_instances(instances, out_dir / "instances")
    save_config(config, out_dir / "config.json")
    print(f"\nOutput written to: {out_dir / 'instances'} ({len(instances)} instances)")
    return True


def _purity(state: TrainingRunState, holdout: Sequence[CellInstance], threads: int) -> float:
    cfg = state.config
    assignments = classify_cells(state.networks.auxiliary, holdout, cfg.K, threads=threads)
    table = ContingencyTable.from_labels([a.cluster for a in assignments], class_names(holdout), K=cfg.K)
    return clustering_summary(table)["purity"]


def cmd_train(config: PipelineConfig, instances_dir: Path, out_dir: Path,
              resume: Optional[Path] = None, holdout_dir: Optional[Path] = None) -> bool:
    """
    Train G, D and Q on segmented instances.

    Raises:
        DataError: If there are fewer instances than one batch
    """
    cfg = config.training
    dataset = read_instances(instances_dir)
    if len(dataset) < cfg.batch_size:
        raise DataError(f"training needs at least {cfg.batch_size} instances (one batch), found {len(dataset)}")
    holdout = read_instances(holdout_dir) if holdout_dir else []
    if holdout and any(c is None for c in class_names(holdout)):
        raise DataError(f"holdout instances in {holdout_dir} must all carry a cell_class")
    save_config(config, out_dir / "config.json")
    print(f"Training on {len(dataset)} instances for {cfg.epochs} epochs")

    purity_rows: List[List] = []

    def on_epoch(state: TrainingRunState, epoch: int) -> None:
        G = state.networks.generator
        write_image(out_dir / "montages" / f"epoch_{epoch}.png",
                    generator_montage(G, cfg.K, cfg.dim_z, MONTAGE_ROWS, cfg.seed))
        line = f"  epoch {epoch}/{cfg.epochs} done"
        if holdout:
            value = _purity(state, holdout, config.threads)
            purity_rows.append([epoch, state.iteration, format(value, ".6f")])
            with open(out_dir / "purity.csv", "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["epoch", "iteration", "purity"])
                writer.writerows(purity_rows)
            line += f", held-out purity {value:.3f}"
        print(line)

    def on_iteration(iteration: int, total: int, report) -> None:
        print(f"  [{iteration}/{total}] L_D={report.L_D:.4f} L_G={report.L_G:.4f} L_Q={report.L_Q:.4f} "
              f"|grad|={report.grad_norm_mean:.3f}")

    result = train_run(dataset, cfg, out_dir, resume=resume, epoch_callback=on_epoch, progress=on_iteration)
    G = result.state.networks.generator
    write_image(out_dir / "montages" / "z_walk.png", z_walk_montage(G, cfg.K, cfg.dim_z, seed=cfg.seed))
    print(f"\nCheckpoint written to: {result.checkpoint}")
    print(f"Losses written to: {result.losses}")
    return True


def _load_model(path: Path, config: PipelineConfig) -> TrainingRunState:
    state = load_checkpoint(path)
    if state.config.K != config.analysis.K:
        raise ConfigError(f"checkpoint {path} has K={state.config.K} but the config expects K={config.analysis.K}")
    state.networks.train(False)
    return state


def cmd_cluster(config: PipelineConfig, checkpoint: Path, instances_dir: Path, out_dir: Path,
                labels_path: Optional[Path] = None) -> bool:
    """Assign every instance to a Q cluster and write assignments, profiles and montages."""
    K = config.analysis.K
    state = _load_model(checkpoint, config)
    instances = read_instances(instances_dir)
    if not instances:
        raise DataError(f"no instances in {instances_dir}")
    print(f"Clustering {len(instances)} instances into {K} clusters")
    assignments = classify_cells(state.networks.auxiliary, instances, K, threads=config.threads)
    write_assignments(out_dir / "assignments.csv", assignments, K)

    labels = read_slide_labels(labels_path) if labels_path else {}
    profiles = cell_proportions(assignments, K, slide_ids=sorted(labels) or None, labels=labels)
    write_profiles(out_dir / "profiles.csv", profiles, K)

    sizes = np.bincount([a.cluster for a in assignments], minlength=K)
    section = ReportSection("Clusters", metrics={f"cluster {k} size": int(n) for k, n in enumerate(sizes)})
    montages = cluster_montages(instances, assignments, K, config.analysis.montage_per_cluster, config.seed)
    for k, image in montages.items():
        rel = f"montages/cluster_{k}.png"
        write_image(out_dir / rel, image)
        section.images.append((f"cluster {k}", rel))
        print(f"  cluster {k}: {sizes[k]} cells")

    sections = [section]
    known = class_names(instances)
    if all(c is not None for c in known):
        table = ContingencyTable.from_labels([a.cluster for a in assignments], known, K=K)
        summary = clustering_summary(table)
        write_json(out_dir / "metrics.json", summary)
        sections.append(ReportSection("Cluster quality", metrics=summary))
        print(f"Purity {summary['purity']:.3f}, entropy {summary['entropy']:.3f}, F {summary['fscore']:.3f}")

    generate_report_html("Cell clusters", sections, out_dir / "report.html")
    print(f"\nOutput written to: {out_dir}")
    return True


def _is_assignments(path: Path) -> bool:
    if not Path(path).exists():
        raise InputError(f"File not found: {path}")
    with open(path, newline="") as f:
        header = next(csv.reader(f), [])
    return "cluster" in header


def cmd_classify(config: PipelineConfig, table_path: Path, labels_path: Path, out_dir: Path,
                 mode: str = "svm", repeats: Optional[int] = None) -> bool:
    """
    Image-level classification of cell-proportion profiles under repeated k-fold CV.

    Raises:
        InputError: If profiles reference slides missing from the labels file
    """
    analysis = config.analysis
    labels = read_slide_labels(labels_path)
    if _is_assignments(table_path):
        profiles = cell_proportions(read_assignments(table_path), analysis.K, slide_ids=sorted(labels), labels=labels)
    else:
        profiles = read_profiles(table_path)
    unknown = sorted(p.slide_id for p in profiles if p.slide_id not in labels)
    if unknown:
        raise InputError(f"slides without a label in {labels_path}: {', '.join(unknown)}")

    excluded = [p.slide_id for p in profiles if p.empty]
    for sid in excluded:
        _warn(f"slide {sid} has no cells and is excluded")
    used = [p for p in profiles if not p.empty]
    if not used:
        raise DataError("no slide has any cells")
    slide_ids = [p.slide_id for p in used]
    y = [labels[sid] for sid in slide_ids]
    X = np.stack([p.proportions for p in used])

    repeats = repeats or analysis.repeats
    print(f"Classifying {len(used)} slides with {mode} ({analysis.folds}-fold x {repeats})")
    folds = cross_validate(X, y, mode, folds=analysis.folds, repeats=repeats, seed=config.seed,
                           C=analysis.svm_C, epochs=analysis.svm_epochs, kmeans_iters=analysis.kmeans_max_iters)
    summary = summarize_folds(folds)
    for r in folds:
        print(f"  [repeat {r.repeat} fold {r.fold}] P={r.scores.precision:.3f} "
              f"R={r.scores.recall:.3f} F={r.scores.fscore:.3f}")

    rows = []
    for r in folds:
        if r.repeat == 0:
            rows.extend([slide_ids[i], y[i], pred, r.fold] for i, pred in r.predictions.items())
    rows.sort()
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "predictions.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["slide_id", "label", "predicted", "fold"])
        writer.writerows(rows)

    metrics = dict(summary)
    metrics.update({
        "mode": ClassifierMode(mode).value,
        "repeats": repeats,
        "excluded": excluded,
        "per_fold": [{"repeat": r.repeat, "fold": r.fold, **r.scores._asdict()} for r in folds],
    })
    sections = [ReportSection("Image-level classification", metrics={
        k: summary[k] for k in ("precision", "recall", "fscore", "fscore_std")})]

    if len(used) > analysis.pca_dims:
        pca = pca_project(X, analysis.pca_dims)
        write_pca(out_dir / "pca.csv", slide_ids, pca.projected, y)
        metrics["explained_variance_ratio"] = pca.explained_variance_ratio.tolist()
        sections.append(ReportSection("PCA", table=(
            ["slide_id", "label"] + [f"pc{i + 1}" for i in range(analysis.pca_dims)],
            [[sid, label] + [float(v) for v in point] for sid, label, point in zip(slide_ids, y, pca.projected)],
        )))
    else:
        _warn(f"PCA skipped: {len(used)} slides for {analysis.pca_dims} components")

    write_json(out_dir / "metrics.json", metrics)
    generate_report_html("Image-level classification", sections, out_dir / "report.html")
    print(f"\nWeighted F-score: {summary['fscore']:.3f} +/- {summary['fscore_std']:.3f}")
    print(f"Output written to: {out_dir}")
    return True


def _matched_pairs(pred_dir: Path, truth_dir: Path) -> List[Tuple[Path, Path]]:
    preds = {p.name: p for p in list_images(pred_dir)}
    truths = {p.name: p for p in list_images(truth_dir)}
    missing = sorted(set(preds) ^ set(truths))
    if missing:
        raise InputError(f"masks without a counterpart: {', '.join(missing)}")
    if not preds:
        raise InputError(f"No PNG masks in {pred_dir}")
    return [(preds[name], truths[name]) for name in sorted(preds)]


def cmd_eval_seg(config: PipelineConfig, pred_dir: Path, truth_dir: Path, out_dir: Path,
                 images_dir: Optional[Path] = None, sweep: Optional[str] = None) -> bool:
    """Match predicted against ground-truth instance masks and report IoU and F."""
    pairs = _matched_pairs(pred_dir, truth_dir)
    print(f"Evaluating {len(pairs)} mask pairs")
    reports, per_image = [], []
    for i, (pred_path, truth_path) in enumerate(pairs, 1):
        report = iou_match(read_label_image(pred_path), read_label_image(truth_path))
        reports.append(report)
        per_image.append([pred_path.stem, report.fscore, report.mean_iou, report.objects.fscore])
        print(f"  [{i}/{len(pairs)}] {pred_path.name}: F={report.fscore:.3f} IoU={report.mean_iou:.3f}")
    metrics = aggregate_seg_reports(reports)
    sections = [
        ReportSection("Segmentation", metrics={k: metrics[k] for k in ("precision", "recall", "fscore",
                                                                       "mean_iou", "object_fscore")}),
        ReportSection("Per image", table=(["image", "fscore", "mean_iou", "object_fscore"], per_image)),
    ]

    if sweep is not None:
        if images_dir is None:
            raise ConfigError("--sweep needs --images with the raw slides")
        thresholds = parse_int_list(sweep or DEFAULT_SWEEP, "--sweep")
        images = [read_image(Path(images_dir) / truth.name) for _, truth in pairs]
        truths = [read_label_image(truth) for _, truth in pairs]
        rows = sweep_thresholds(images, truths, thresholds, config.segmentation)
        metrics["sweep"] = rows
        sections.append(ReportSection("Threshold sweep", table=(
            ["threshold", "fscore", "mean_iou", "object_fscore"],
            [[r["threshold"], r["fscore"], r["mean_iou"], r["object_fscore"]] for r in rows],
        )))
        for r in rows:
            print(f"  threshold {r['threshold']}: F={r['fscore']:.3f} IoU={r['mean_iou']:.3f}")

    write_json(out_dir / "metrics.json", metrics)
    generate_report_html("Segmentation evaluation", sections, out_dir / "report.html")
    print(f"\nF-score {metrics['fscore']:.3f}, mean IoU {metrics['mean_iou']:.3f}")
    print(f"Output written to: {out_dir}")
    return True


def cmd_extract_features(config: PipelineConfig, checkpoint: Path, instances_dir: Path, out_dir: Path,
                         mode: str = FeatureMode.MAXPOOL4X4.value) -> bool:
    """Write pooled discriminator features; score a one-vs-rest SVM when cell classes are known."""
    state = _load_model(checkpoint, config)
    instances = read_instances(instances_dir)
    if not instances:
        raise DataError(f"no instances in {instances_dir}")
    extracted = extract_discriminator_features(state.networks.discriminator, instances, mode,
                                               threads=config.threads)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "features.npy", extracted.features)
    with open(out_dir / "features_index.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["row", "instance_id", "cell_class"])
        writer.writerows([i, inst.instance_id, inst.cell_class or ""] for i, inst in enumerate(instances))
    print(f"Extracted {extracted.dim}-dimensional {extracted.mode.value} features for {len(instances)} cells")

    known = class_names(instances)
    if all(c is not None for c in known) and len(set(known)) > 1:
        order = np.random.default_rng([config.seed, 7]).permutation(len(instances))
        cut = max(1, int(round(0.8 * len(order))))
        train, test = order[:cut], order[cut:]
        if len(test) == 0:
            _warn("too few instances for a held-out split; skipping cell classification")
        else:
            model = OneVsRestSVM(config.analysis.svm_C, config.analysis.svm_epochs)
            model.fit(extracted.features[train], [known[i] for i in train])
            scores = weighted_prf([known[i] for i in test], model.predict(extracted.features[test]))
            write_json(out_dir / "metrics.json", {"mode": extracted.mode.value, "dim": extracted.dim,
                                                  "train": len(train), "test": len(test), **scores._asdict()})
            print(f"Cell classification: P={scores.precision:.3f} R={scores.recall:.3f} F={scores.fscore:.3f}")
    print(f"\nOutput written to: {out_dir}")
    return True


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="Override every seed in the configuration")
    common.add_argument("--threads", type=int, help="Worker threads for per-image/per-cell work")
    common.add_argument("-o", "--out", default="output", help="Output directory (default: output)")
    common.add_argument("--debug", action="store_true", help="Enable debug output and NaN checks")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_arguments()
    parser = argparse.ArgumentParser(
        description="Unsupervised cell-level representation learning for histopathology slides",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  Synthetic cohorts, then the full pipeline:
    cell-gan synth --out data
    cell-gan segment data/slides --truth data/masks --classes data/cell_classes.csv --out seg
    cell-gan train seg/instances --out run
    cell-gan cluster run/epoch_10.ckpt seg/instances --labels data/slide_labels.csv --out clusters
    cell-gan classify clusters/assignments.csv --labels data/slide_labels.csv --mode svm --out cls
    cell-gan eval-seg seg/masks data/masks --images data/slides --sweep 60,120,180 --out eval
"""
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Render synthetic cohorts")
    synth.add_argument("--cells", type=int, default=0, help="Also write N isolated 32x32 cells")

    segment = sub.add_parser("segment", parents=[common], help="Segment nuclei into cell instances")
    segment.add_argument("input", help="Directory of PNG slides")
    segment.add_argument("--truth", help="Ground-truth mask directory (propagates cell classes)")
    segment.add_argument("--classes", help="cell_classes.csv matching the --truth masks")
    segment.add_argument("--color-space", choices=["ruderman", "cielab"], help=COLOR_SPACE_HELP)

    train = sub.add_parser("train", parents=[common], help="Train the GAN on cell instances")
    train.add_argument("instances", help="Instances directory (with instances.csv)")
    train.add_argument("--resume", help="Checkpoint to continue from")
    train.add_argument("--holdout", help="Labelled instances for per-epoch purity tracking")

    cluster = sub.add_parser("cluster", parents=[common], help="Cluster cells with the auxiliary network")
    cluster.add_argument("checkpoint")
    cluster.add_argument("instances")
    cluster.add_argument("--labels", help="slide_labels.csv used to tag profiles")

    classify = sub.add_parser("classify", parents=[common], help="Image-level classification")
    classify.add_argument("table", help="assignments.csv or profiles.csv")
    classify.add_argument("--labels", required=True, help="slide_labels.csv")
    classify.add_argument("--mode", choices=[m.value for m in ClassifierMode], default="svm")
    classify.add_argument("--repeats", type=int, help="Repeat cross-validation with new splits")

    eval_seg = sub.add_parser("eval-seg", parents=[common], help="Score predicted masks against ground truth")
    eval_seg.add_argument("pred", help="Predicted label masks")
    eval_seg.add_argument("truth", help="Ground-truth label masks")
    eval_seg.add_argument("--images", help="Raw slides (required by --sweep)")
    eval_seg.add_argument("--sweep", nargs="?", const="", help=f"Threshold sweep (default {DEFAULT_SWEEP})")
    eval_seg.add_argument("--color-space", choices=["ruderman", "cielab"], help=COLOR_SPACE_HELP)

    features = sub.add_parser("extract-features", parents=[common], help="Pooled discriminator features")
    features.add_argument("checkpoint")
    features.add_argument("instances")
    features.add_argument("--mode", choices=[m.value for m in FeatureMode], default=FeatureMode.MAXPOOL4X4.value)

    return parser


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(Path(args.config) if args.config else None)
    if args.seed is not None:
        config.with_seed(args.seed)
    if args.threads is not None:
        config.threads = args.threads
    if getattr(args, "color_space", None):
        config.segmentation.color_space = args.color_space
    return config.validate()


def run(args: argparse.Namespace) -> bool:
    config = _resolve_config(args)
    out = Path(args.out)
    debug_log(f"Running {args.command} with seed {config.seed}, {config.threads} thread(s)")
    if args.command == "synth":
        return cmd_synth(config, out, args.cells)
    if args.command == "segment":
        return cmd_segment(config, Path(args.input), out,
                           Path(args.truth) if args.truth else None, Path(args.classes) if args.classes else None)
    if args.command == "train":
        return cmd_train(config, Path(args.instances), out,
                         Path(args.resume) if args.resume else None, Path(args.holdout) if args.holdout else None)
    if args.command == "cluster":
        return cmd_cluster(config, Path(args.checkpoint), Path(args.instances), out,
                           Path(args.labels) if args.labels else None)
    if args.command == "classify":
        return cmd_classify(config, Path(args.table), Path(args.labels), out, args.mode, args.repeats)
    if args.command == "eval-seg":
        return cmd_eval_seg(config, Path(args.pred), Path(args.truth), out,
                            Path(args.images) if args.images else None, args.sweep)
    return cmd_extract_features(config, Path(args.checkpoint), Path(args.instances), out, args.mode)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)

    # Set debug mode via environment
    if args.debug:
        os.environ['DEBUG'] = 'true'

    try:
        success = run(args)
    except PipelineError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return DataError.exit_code
    except KeyboardInterrupt:
        print("\n\nCancelled.")
        return 0
    return 0 if success else 1


if __name__ == "__main__":
    sys.exit(main())
