"""Reading and writing slides, masks, cell instances and result tables."""

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .analysis import CellAssignment, CellProportionProfile
from .cell_types import CellInstance
from .config import DataError, debug_log

INSTANCE_COLUMNS = ["instance_id", "source_id", "label", "x", "y", "width", "height",
                    "area", "centroid_row", "centroid_col", "cell_class", "path"]


class InputError(DataError):
    """Missing or malformed input files."""
    pass


def _fmt(value: float) -> str:
    return format(float(value), ".10g")


def list_images(directory: Path) -> List[Path]:
    """
    Sorted PNG files in a directory.

    Raises:
        InputError: If the directory does not exist
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"Directory not found: {directory}")
    images = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png" and p.is_file())
    debug_log(f"Found {len(images)} PNG files in {directory}")
    return images


def read_image(path: Path) -> np.ndarray:
    """
    Load an image as (H, W, 3) uint8 RGB.

    Raises:
        InputError: If the file is missing or not a readable image
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"File not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as e:
        raise InputError(f"Cannot read image {path}: {e}")


def write_image(path: Path, image: np.ndarray) -> Path:
    """Write a uint8 RGB or grayscale array as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")
    return path


def read_label_image(path: Path) -> np.ndarray:
    """Load an instance-label PNG as int32, 0 = background."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"File not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img).astype(np.int32)
    except (UnidentifiedImageError, OSError) as e:
        raise InputError(f"Cannot read label image {path}: {e}")


def write_label_image(path: Path, labels: np.ndarray) -> Path:
    """Write instance labels as a 16-bit grayscale PNG."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError(f"labels must fit in 16 bits, got range [{labels.min()}, {labels.max()}]")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")
    return path


def _read_rows(path: Path, required: Sequence[str]) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"File not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)
    debug_log(f"Read {len(rows)} rows from {path}")
    return rows


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_instances(instances: Sequence[CellInstance], out_dir: Path) -> Path:
    """
    Write each instance as ``<source_id>/<instance_id>.png`` plus ``instances.csv``.

    Returns:
        Path: The written instances.csv
    """
    out_dir = Path(out_dir)
    rows = []
    for inst in instances:
        rel = Path(inst.source_id or "cells") / f"{inst.instance_id}.png"
        write_image(out_dir / rel, inst.image)
        x, y, w, h = inst.bbox
        rows.append([inst.instance_id, inst.source_id, inst.label, x, y, w, h, inst.mask_area,
                     _fmt(inst.centroid[0]), _fmt(inst.centroid[1]), inst.cell_class or "", rel.as_posix()])
    return _write_rows(out_dir / "instances.csv", INSTANCE_COLUMNS, rows)


def read_instances(directory: Path) -> List[CellInstance]:
    """
    Load the instances written by write_instances.

    Raises:
        InputError: If instances.csv or a referenced image is missing or malformed
    """
    directory = Path(directory)
    rows = _read_rows(directory / "instances.csv", INSTANCE_COLUMNS)
    instances = []
    for n, row in enumerate(rows, start=2):
        try:
            inst = CellInstance(
                image=read_image(directory / row["path"]),
                source_id=row["source_id"],
                label=int(row["label"]),
                bbox=(int(row["x"]), int(row["y"]), int(row["width"]), int(row["height"])),
                mask_area=int(row["area"]),
                centroid=(float(row["centroid_row"]), float(row["centroid_col"])),
                cell_class=row["cell_class"] or None,
            )
        except ValueError as e:
            raise InputError(f"{directory / 'instances.csv'} line {n}: {e}")
        instances.append(inst)
    return instances


def read_slide_labels(path: Path) -> Dict[str, str]:
    """slide_id -> image-level label."""
    rows = _read_rows(path, ["slide_id", "label"])
    return {row["slide_id"]: row["label"] for row in rows}


def write_slide_labels(path: Path, labels: Dict[str, str]) -> Path:
    return _write_rows(path, ["slide_id", "label"], [[k, labels[k]] for k in sorted(labels)])


def read_cell_classes(path: Path) -> Dict[Tuple[str, int], str]:
    """(slide_id, instance label) -> ground-truth cell class."""
    rows = _read_rows(path, ["slide_id", "label", "cell_class"])
    try:
        return {(row["slide_id"], int(row["label"])): row["cell_class"] for row in rows}
    except ValueError as e:
        raise InputError(f"{path}: {e}")


def write_cell_classes(path: Path, classes: Dict[Tuple[str, int], str]) -> Path:
    rows = [[sid, label, classes[(sid, label)]] for sid, label in sorted(classes)]
    return _write_rows(path, ["slide_id", "label", "cell_class"], rows)


def write_assignments(path: Path, assignments: Sequence[CellAssignment], K: int) -> Path:
    header = ["instance_id", "source_id", "cluster"] + [f"q_{k}" for k in range(K)] + ["cell_class"]
    rows = [
        [a.instance_id, a.source_id, a.cluster] + [_fmt(v) for v in a.posterior] + [a.cell_class or ""]
        for a in assignments
    ]
    return _write_rows(path, header, rows)


def read_assignments(path: Path) -> List[CellAssignment]:
    rows = _read_rows(path, ["instance_id", "source_id", "cluster"])
    assignments = []
    for row in rows:
        keys = sorted((k for k in row if k.startswith("q_")), key=lambda k: int(k[2:]))
        try:
            posterior = np.array([float(row[k]) for k in keys])
            assignments.append(CellAssignment(row["instance_id"], row["source_id"], int(row["cluster"]),
                                              posterior, row.get("cell_class") or None))
        except ValueError as e:
            raise InputError(f"{path}: {e}")
    return assignments


def write_profiles(path: Path, profiles: Sequence[CellProportionProfile], K: int) -> Path:
    header = ["slide_id"] + [f"X_{k}" for k in range(K)] + [f"P_{k}" for k in range(K)] + ["label"]
    rows = [
        [p.slide_id] + [int(x) for x in p.counts] + [_fmt(v) for v in p.proportions] + [p.label or ""]
        for p in profiles
    ]
    return _write_rows(path, header, rows)


def read_profiles(path: Path) -> List[CellProportionProfile]:
    rows = _read_rows(path, ["slide_id"])
    profiles = []
    for row in rows:
        K = sum(1 for k in row if k.startswith("X_"))
        try:
            counts = np.array([int(row[f"X_{k}"]) for k in range(K)], dtype=np.int64)
            proportions = np.array([float(row[f"P_{k}"]) for k in range(K)])
        except (KeyError, ValueError) as e:
            raise InputError(f"{path}: malformed profile row for {row['slide_id']}: {e}")
        profiles.append(CellProportionProfile(row["slide_id"], counts, proportions, row.get("label") or None))
    return profiles


def write_pca(path: Path, slide_ids: Sequence[str], projected: np.ndarray,
              labels: Optional[Sequence[Optional[str]]] = None) -> Path:
    dims = projected.shape[1]
    header = ["slide_id"] + [f"pc{i + 1}" for i in range(dims)] + ["label"]
    labels = labels or [None] * len(slide_ids)
    rows = [[sid] + [_fmt(v) for v in point] + [label or ""]
            for sid, point, label in zip(slide_ids, projected, labels)]
    return _write_rows(path, header, rows)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def write_json(path: Path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return path
