"""
Synthetic H&E cohorts with exact ground truth.

Nuclei are drawn from parametric cell classes (radius range, chromatin
texture, stain darkness, lobe count), composited in optical density with
a two-stain Beer-Lambert model over an eosin-tinted background, and
rendered back to 8-bit RGB.
"""

from dataclasses import dataclass, replace
from math import ceil
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .cell_types import CELL_SIZE, CellInstance
from .config import CellClassSpec, CohortSpec, DataError, SyntheticSpec, debug_log
from .segmentation import extract_cell_instances, od_to_rgb

LOBE_RADIUS = 0.6
LOBE_OFFSET = 0.4
CELL_GAP = 3
TEXTURE_CLIP = 2.0


@dataclass
class PlacedCell:
    center: Tuple[float, float]
    radius: float
    class_index: int
    phase: float


@dataclass
class SyntheticSlide:
    """A rendered slide, its per-pixel instance labels and each instance's class."""
    slide_id: str
    cohort: str
    image: np.ndarray
    labels: np.ndarray
    cell_classes: Dict[int, str]

    @property
    def cell_count(self) -> int:
        return len(self.cell_classes)

    def class_fractions(self, names: Sequence[str]) -> np.ndarray:
        counts = np.array([sum(1 for c in self.cell_classes.values() if c == n) for n in names], dtype=np.float64)
        return counts / counts.sum() if counts.sum() else counts


def _unit(v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def nucleus_mask(shape: Tuple[int, int], center: Tuple[float, float], radius: float,
                 lobes: int = 1, phase: float = 0.0) -> np.ndarray:
    """
    Pixels of one nucleus: a disk, or for lobes > 1 a union of smaller
    disks arranged on a ring. Always contained in the disk of ``radius``.
    """
    rows, cols = np.ogrid[:shape[0], :shape[1]]
    cy, cx = center
    if lobes == 1:
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
    mask = np.zeros(shape, dtype=bool)
    for i in range(lobes):
        angle = phase + 2 * np.pi * i / lobes
        ly = cy + LOBE_OFFSET * radius * np.sin(angle)
        lx = cx + LOBE_OFFSET * radius * np.cos(angle)
        mask |= (rows - ly) ** 2 + (cols - lx) ** 2 <= (LOBE_RADIUS * radius) ** 2
    return mask


def _texture_field(shape: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=1.0)
    std = noise.std()
    return np.clip(noise / std if std > 0 else noise, -TEXTURE_CLIP, TEXTURE_CLIP)


def render(spec: SyntheticSpec, cells: Sequence[PlacedCell], shape: Tuple[int, int],
           rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Composite placed nuclei into an RGB image and an instance label image.

    Returns:
        (image, labels): uint8 (H, W, 3) and int32 (H, W); cell i has label i + 1
    """
    hematoxylin, eosin = _unit(spec.hematoxylin), _unit(spec.eosin)
    texture = _texture_field(shape, rng)
    labels = np.zeros(shape, dtype=np.int32)
    hema = np.zeros(shape)
    for i, cell in enumerate(cells):
        cls: CellClassSpec = spec.classes[cell.class_index]
        mask = nucleus_mask(shape, cell.center, cell.radius, cls.lobes, cell.phase) & (labels == 0)
        labels[mask] = i + 1
        hema[mask] = cls.darkness * (1.0 + cls.texture * texture[mask])
    background = spec.background_eosin * (1.0 + 0.1 * _texture_field(shape, rng))
    eos = np.where(labels > 0, 0.0, background)
    od = hema[..., None] * hematoxylin + eos[..., None] * eosin
    return od_to_rgb(od), labels


def place_cells(spec: SyntheticSpec, class_indices: Sequence[int], shape: Tuple[int, int],
                rng: np.random.Generator, slide_id: str = "") -> List[PlacedCell]:
    """
    Rejection-sample non-overlapping nucleus positions.

    Raises:
        DataError: If a cell cannot be placed within the retry budget
    """
    placed: List[PlacedCell] = []
    height, width = shape
    for n, k in enumerate(class_indices):
        lo, hi = spec.classes[k].radius
        radius = float(rng.uniform(lo, hi))
        margin = radius + 1
        if 2 * margin >= min(height, width):
            raise DataError(f"{slide_id}: nucleus radius {radius:.1f} does not fit a {width}x{height} slide")
        for _ in range(spec.placement_retries):
            center = (float(rng.uniform(margin, height - margin)), float(rng.uniform(margin, width - margin)))
            if all(np.hypot(center[0] - c.center[0], center[1] - c.center[1]) > radius + c.radius + CELL_GAP
                   for c in placed):
                placed.append(PlacedCell(center, radius, int(k), float(rng.uniform(0, 2 * np.pi))))
                break
        else:
            raise DataError(
                f"{slide_id}: could not place cell {n + 1}/{len(class_indices)} after "
                f"{spec.placement_retries} attempts; reduce cells_per_slide or enlarge the slide"
            )
    return placed


def render_slide(spec: SyntheticSpec, cohort: CohortSpec, rng: np.random.Generator,
                 slide_id: str) -> SyntheticSlide:
    """Draw cell classes from the cohort mixture, place and render them."""
    shape = (spec.height, spec.width)
    classes = rng.choice(len(spec.classes), size=spec.cells_per_slide, p=np.asarray(cohort.mixture))
    cells = place_cells(spec, classes, shape, rng, slide_id)
    image, labels = render(spec, cells, shape, rng)
    names = {i + 1: spec.classes[c.class_index].name for i, c in enumerate(cells)}
    return SyntheticSlide(slide_id, cohort.label, image, labels, names)


def _child_rngs(seed: int, count: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def generate_cohorts(spec: SyntheticSpec) -> List[SyntheticSlide]:
    """Every slide of every cohort, seeded independently from spec.seed."""
    spec.validate()
    total = len(spec.cohorts) * spec.slides_per_cohort
    rngs = iter(_child_rngs(spec.seed, total))
    slides = []
    for cohort in spec.cohorts:
        for i in range(spec.slides_per_cohort):
            slide_id = f"{cohort.label}_{i:03d}"
            slides.append(render_slide(spec, cohort, next(rngs), slide_id))
            debug_log(f"rendered {slide_id} ({spec.cells_per_slide} cells)")
    return slides


def generate_cell_dataset(spec: SyntheticSpec, count: int, seed: Optional[int] = None,
                          mixture: Optional[Sequence[float]] = None, source_id: str = "cells",
                          size: int = CELL_SIZE) -> List[CellInstance]:
    """
    Render isolated nuclei and cut them out exactly as segmentation would.

    Instances carry their class name in ``cell_class``.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    spec.validate()
    n_classes = len(spec.classes)
    p = np.full(n_classes, 1.0 / n_classes) if mixture is None else np.asarray(mixture, dtype=np.float64)
    rng = np.random.default_rng([spec.seed if seed is None else seed, 3])
    side = 2 * ceil(max(c.radius[1] for c in spec.classes)) + 2 * CELL_GAP
    instances = []
    for i in range(count):
        k = int(rng.choice(n_classes, p=p))
        lo, hi = spec.classes[k].radius
        cell = PlacedCell((side / 2, side / 2), float(rng.uniform(lo, hi)), k, float(rng.uniform(0, 2 * np.pi)))
        image, labels = render(spec, [cell], (side, side), rng)
        (inst,) = extract_cell_instances(image, labels, source_id, size)
        instances.append(replace(inst, label=i + 1, cell_class=spec.classes[k].name))
    return instances
