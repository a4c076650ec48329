"""Cell-level domain types shared across the pipeline."""

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

CELL_SIZE = 32


class FeatureMode(Enum):
    """Discriminator feature pooling variants."""
    MAXPOOL4X4 = "maxpool4x4"
    MEANPOOL_BLOCK = "meanpool-block"
    MEANPOOL_FINAL = "meanpool-final"


class ClassifierMode(Enum):
    """Image-level classifiers over cell-proportion profiles."""
    KMEANS = "kmeans"
    SVM = "svm"


@dataclass
class CellInstance:
    """A 32x32 RGB cell image with its provenance in the source slide."""
    image: np.ndarray
    source_id: str
    label: int
    bbox: Tuple[int, int, int, int]
    mask_area: int
    centroid: Tuple[float, float]
    rotation: int = 0
    cell_class: Optional[str] = None

    @property
    def instance_id(self) -> str:
        suffix = f"_r{self.rotation}" if self.rotation else ""
        return f"{self.source_id}_{self.label:04d}{suffix}"

    @property
    def is_square(self) -> bool:
        return self.image.ndim == 3 and self.image.shape[0] == self.image.shape[1]

    def to_network_input(self) -> np.ndarray:
        """Pixels scaled to [-1, 1] in CHW layout."""
        return (self.image.astype(np.float64) / 127.5 - 1.0).transpose(2, 0, 1)


def instances_to_batch(instances: Sequence[CellInstance], dtype=np.float64) -> np.ndarray:
    """Stack instances into an (N, 3, 32, 32) network batch."""
    if not instances:
        return np.zeros((0, 3, CELL_SIZE, CELL_SIZE), dtype=dtype)
    return np.stack([inst.to_network_input() for inst in instances]).astype(dtype)


def batch_to_images(batch: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] NCHW batch back to uint8 NHWC images."""
    pixels = np.clip(np.rint((np.asarray(batch) + 1.0) * 127.5), 0, 255)
    return pixels.astype(np.uint8).transpose(0, 2, 3, 1)


def class_names(instances: Sequence[CellInstance]) -> List[Optional[str]]:
    return [inst.cell_class for inst in instances]
