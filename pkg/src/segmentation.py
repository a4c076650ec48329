"""
Unsupervised nuclei segmentation.

Stages: Reinhard colour normalization, Macenko stain estimation and
colour deconvolution, global thresholding of the hematoxylin render,
morphological postprocessing, then 32x32 cell-instance extraction.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage import color
from skimage.segmentation import relabel_sequential
from skimage.transform import resize

from .cell_types import CELL_SIZE, CellInstance
from .config import Config, DataError, SegmentationConfig, debug_log
from .metrics import SegMatchReport, aggregate_seg_reports, iou_match

RgbImage = np.ndarray    # (H, W, 3) uint8
LabelImage = np.ndarray  # (H, W) int32, 0 = background

RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
LMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
MAX_CONDITION = 1e6
RANK_TOLERANCE = 1e-8


class StainError(DataError):
    """Stain vectors cannot be estimated or used."""


def rgb_to_lab(img: RgbImage, color_space: str = "ruderman") -> np.ndarray:
    """RGB to the Reinhard working space (Ruderman l-alpha-beta or CIELAB)."""
    rgb = np.asarray(img, dtype=np.float64)
    if color_space == "cielab":
        return color.rgb2lab(rgb / 255.0)
    lms = np.maximum(rgb @ RGB_TO_LMS.T, 1.0)
    return np.log(lms) @ LMS_TO_LAB.T


def lab_to_rgb(lab: np.ndarray, color_space: str = "ruderman") -> np.ndarray:
    """Inverse of rgb_to_lab, returned as float RGB before clamping."""
    if color_space == "cielab":
        return color.lab2rgb(lab) * 255.0
    lms = np.exp(lab @ np.linalg.inv(LMS_TO_LAB).T)
    return lms @ np.linalg.inv(RGB_TO_LMS).T


def _to_uint8(rgb: np.ndarray) -> RgbImage:
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def reinhard_lab(img: RgbImage, target_mean: Sequence[float], target_std: Sequence[float],
                 color_space: str = "ruderman") -> np.ndarray:
    """
    Match per-channel mean and standard deviation in the LAB working space.

    A channel with zero spread is only shifted to the target mean.

    Raises:
        ValueError: If any target standard deviation is not positive
    """
    target_mean = np.asarray(target_mean, dtype=np.float64)
    target_std = np.asarray(target_std, dtype=np.float64)
    if np.any(target_std <= 0):
        raise ValueError(f"target standard deviations must be positive, got {target_std.tolist()}")
    lab = rgb_to_lab(img, color_space)
    flat = lab.reshape(-1, 3)
    mu = flat.mean(axis=0)
    sigma = flat.std(axis=0)
    spread = sigma > 1e-10
    scale = np.where(spread, target_std / np.where(spread, sigma, 1.0), 1.0)
    return (lab - mu) * scale + target_mean


def reinhard_normalize(img: RgbImage, target_mean: Sequence[float] = Config.REINHARD_TARGET_MEAN,
                       target_std: Sequence[float] = Config.REINHARD_TARGET_STD,
                       color_space: str = "ruderman") -> RgbImage:
    """Reinhard colour normalization, clamped back to 8-bit RGB."""
    return _to_uint8(lab_to_rgb(reinhard_lab(img, target_mean, target_std, color_space), color_space))


def od_transform(img: RgbImage) -> np.ndarray:
    """Optical density -log((pixel + 1) / 256) per channel."""
    return -np.log((np.asarray(img, dtype=np.float64) + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> RgbImage:
    """Inverse of od_transform with 8-bit clamping."""
    return _to_uint8(256.0 * np.exp(-od) - 1.0)


@dataclass
class StainMatrix:
    """Unit OD vectors of hematoxylin and eosin."""
    hematoxylin: np.ndarray
    eosin: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([self.hematoxylin, self.eosin], axis=1)

    @classmethod
    def from_vectors(cls, a: np.ndarray, b: np.ndarray) -> "StainMatrix":
        """Order two vectors so hematoxylin has the larger blue OD component."""
        a, b = _unit_nonnegative(a), _unit_nonnegative(b)
        return cls(a, b) if a[2] >= b[2] else cls(b, a)


def _unit_nonnegative(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.sum() < 0:
        v = -v
    v = np.clip(v, 0.0, None)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise StainError("no stain structure: stain vector vanished after sign correction")
    return v / norm


def macenko_stain_vectors(od: np.ndarray, angle_lo: float = Config.MACENKO_ANGLE_LO,
                          angle_hi: float = Config.MACENKO_ANGLE_HI,
                          min_magnitude: float = Config.MACENKO_MIN_MAGNITUDE) -> StainMatrix:
    """
    Estimate stain vectors from angle percentiles in the top-2 principal plane.

    Args:
        od: Optical-density image (H, W, 3) or pixel list (N, 3)
        angle_lo: Lower angle percentile
        angle_hi: Upper angle percentile
        min_magnitude: OD pixels with smaller Euclidean norm are ignored

    Raises:
        StainError: If the filtered OD cloud has no rank-2 structure
    """
    pixels = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    pixels = pixels[np.linalg.norm(pixels, axis=1) >= min_magnitude]
    if len(pixels) < 2:
        raise StainError(f"no stain structure: {len(pixels)} pixels above OD magnitude {min_magnitude:.4f}")
    eigvals, eigvecs = np.linalg.eigh(np.cov(pixels.T))
    if eigvals[2] <= 0 or eigvals[1] <= RANK_TOLERANCE * eigvals[2]:
        raise StainError("no stain structure: optical densities are collinear")

    plane = eigvecs[:, [2, 1]]
    plane = plane * np.where(plane.sum(axis=0) < 0, -1.0, 1.0)
    proj = pixels @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, angle_lo), np.percentile(phi, angle_hi)
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])
    stains = StainMatrix.from_vectors(v_lo, v_hi)
    debug_log(f"Stain vectors H={np.round(stains.hematoxylin, 3)} E={np.round(stains.eosin, 3)}")
    return stains


@dataclass
class Deconvolution:
    hematoxylin: np.ndarray
    eosin: np.ndarray
    hematoxylin_rgb: RgbImage


def color_deconvolve(od: np.ndarray, stains: StainMatrix) -> Deconvolution:
    """
    Per-pixel least squares od ~ M c, concentrations clamped at 0.

    Raises:
        StainError: If the stain matrix condition number exceeds 1e6
    """
    M = stains.matrix
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise StainError(f"stain matrix is ill-conditioned (condition number {cond:.3g})")
    shape = od.shape[:-1]
    conc = np.clip(od.reshape(-1, 3) @ np.linalg.pinv(M).T, 0.0, None)
    hema = conc[:, 0].reshape(shape)
    render = od_to_rgb(hema[..., None] * stains.hematoxylin)
    return Deconvolution(hema, conc[:, 1].reshape(shape), render)


def intensity_threshold(hema_rgb: RgbImage, threshold: int = Config.THRESHOLD) -> np.ndarray:
    """Foreground where the ITU-R 601 luma of the hematoxylin render is below threshold."""
    if not 0 <= threshold <= 255:
        raise ValueError(f"threshold must be in [0, 255], got {threshold}")
    luma = np.asarray(hema_rgb, dtype=np.float64) @ LUMA_WEIGHTS
    return luma < threshold


FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def postprocess(mask: np.ndarray, min_area: int = Config.MIN_AREA,
                opening_kernel: int = Config.OPENING_KERNEL, protrusion_pass: bool = True) -> LabelImage:
    """
    Clean a binary mask and label its nuclei.

    Order: 3x3 cross opening (thin protrusions), square opening (touching
    cells), 4-connected labeling, area filter, contiguous relabeling.
    """
    if opening_kernel < 1 or opening_kernel % 2 == 0:
        raise ValueError(f"opening kernel must be odd and >= 1, got {opening_kernel}")
    mask = np.asarray(mask, dtype=bool)
    if protrusion_pass:
        mask = ndimage.binary_opening(mask, structure=FOUR_CONNECTED)
    if opening_kernel > 1:
        mask = ndimage.binary_opening(mask, structure=np.ones((opening_kernel, opening_kernel), dtype=bool))
    labels, count = ndimage.label(mask, structure=FOUR_CONNECTED)
    if count == 0:
        return labels.astype(np.int32)
    areas = np.bincount(labels.ravel())
    small = areas < min_area
    small[0] = True
    labels[small[labels]] = 0
    relabeled, _, _ = relabel_sequential(labels)
    return relabeled.astype(np.int32)


def _fit_to_cell(crop: RgbImage, size: int) -> RgbImage:
    h, w = crop.shape[:2]
    longest = max(h, w)
    if longest > size:
        scale = size / longest
        new_shape = (max(1, round(h * scale)), max(1, round(w * scale)))
        crop = _to_uint8(resize(crop.astype(np.float64), new_shape + (3,), order=1,
                                preserve_range=True, anti_aliasing=False))
        h, w = new_shape
    canvas = np.full((size, size, 3), 255, dtype=np.uint8)
    top, left = (size - h) // 2, (size - w) // 2
    canvas[top:top + h, left:left + w] = crop
    return canvas


def extract_cell_instances(normalized: RgbImage, labels: LabelImage, source_id: str = "",
                           size: int = CELL_SIZE) -> List[CellInstance]:
    """
    Crop each labelled nucleus's bounding box and centre it on a white canvas.

    Boxes whose longer edge exceeds ``size`` are rescaled bilinearly so the
    longer edge equals ``size``.
    """
    if normalized.shape[:2] != labels.shape:
        raise ValueError(f"label image {labels.shape} does not match image {normalized.shape[:2]}")
    instances = []
    count = int(labels.max(initial=0))
    areas = np.bincount(labels.ravel(), minlength=count + 1)
    centroids = ndimage.center_of_mass(np.ones_like(labels), labels, range(1, count + 1)) if count else []
    for label, slc in enumerate(ndimage.find_objects(labels), start=1):
        if slc is None:
            continue
        rows, cols = slc
        instances.append(CellInstance(
            image=_fit_to_cell(normalized[slc], size),
            source_id=source_id,
            label=label,
            bbox=(cols.start, rows.start, cols.stop - cols.start, rows.stop - rows.start),
            mask_area=int(areas[label]),
            centroid=(float(centroids[label - 1][0]), float(centroids[label - 1][1])),
        ))
    return instances


@dataclass
class SegmentationResult:
    source_id: str
    instances: List[CellInstance]
    labels: LabelImage
    stains: Optional[StainMatrix] = None
    stages: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class _Prepared:
    normalized: RgbImage
    stains: StainMatrix
    deconvolution: Deconvolution


def _prepare(img: RgbImage, cfg: SegmentationConfig) -> _Prepared:
    normalized = reinhard_normalize(img, cfg.target_mean, cfg.target_std, cfg.color_space)
    od = od_transform(normalized)
    stains = macenko_stain_vectors(od, cfg.angle_lo, cfg.angle_hi, cfg.min_magnitude)
    return _Prepared(normalized, stains, color_deconvolve(od, stains))


def segment_image(img: RgbImage, cfg: SegmentationConfig, source_id: str = "") -> SegmentationResult:
    """
    Run every segmentation stage on one slide image.

    Raises:
        StainError: If the image carries no two-stain structure
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"{source_id or 'image'}: expected an RGB image, got shape {img.shape}")
    prepared = _prepare(img, cfg)
    mask = intensity_threshold(prepared.deconvolution.hematoxylin_rgb, cfg.threshold)
    labels = postprocess(mask, cfg.min_area, cfg.opening_kernel, cfg.protrusion_pass)
    instances = extract_cell_instances(prepared.normalized, labels, source_id, cfg.cell_size)
    debug_log(f"{source_id}: {len(instances)} nuclei")
    return SegmentationResult(
        source_id=source_id,
        instances=instances,
        labels=labels,
        stains=prepared.stains,
        stages={
            "normalized": prepared.normalized,
            "hematoxylin": prepared.deconvolution.hematoxylin_rgb,
            "mask": (mask * 255).astype(np.uint8),
            "labels": labels,
        },
    )


def sweep_thresholds(images: Sequence[RgbImage], truths: Sequence[LabelImage], thresholds: Sequence[int],
                     cfg: SegmentationConfig) -> List[Dict]:
    """
    Pooled segmentation metrics for each threshold.

    Normalization and deconvolution run once per image.
    """
    prepared = [_prepare(img, cfg) for img in images]
    rows = []
    for threshold in thresholds:
        reports: List[SegMatchReport] = []
        for prep, truth in zip(prepared, truths):
            mask = intensity_threshold(prep.deconvolution.hematoxylin_rgb, threshold)
            labels = postprocess(mask, cfg.min_area, cfg.opening_kernel, cfg.protrusion_pass)
            reports.append(iou_match(labels, truth))
        summary = aggregate_seg_reports(reports)
        summary["threshold"] = int(threshold)
        rows.append(summary)
        debug_log(f"threshold {threshold}: F={summary['fscore']:.3f} IoU={summary['mean_iou']:.3f}")
    return rows
