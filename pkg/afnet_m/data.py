"""
Data containers shared by preprocessing, the model and the harness.
"""
from dataclasses import dataclass, field

import numpy as np

from .config import EXPRESSIONS
from .errors import DataError, InputError
from .tensor import Tensor

REGIONS = ("left-eye", "right-eye", "nose", "mouth")


@dataclass
class Scan:
    """A 3D face scan.

    points: P x 3 (x, y, z) in millimeters, y pointing up; colors: P x 3 rgb in [0, 1];
    landmarks: region tag -> K x 2 array of normalized image coordinates (column, row) in [0, 1].
    """
    points: np.ndarray
    colors: np.ndarray
    landmarks: dict
    subject_id: int = 0
    expression: int = 0
    intensity: int = 4

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.landmarks = {tag: np.asarray(pts, dtype=np.float64).reshape(-1, 2)
                          for tag, pts in self.landmarks.items()}

    def validate(self):
        if len(self.points) < 1:
            raise InputError("scan has no points")
        if len(self.points) != len(self.colors):
            raise InputError(f"scan has {len(self.points)} points but {len(self.colors)} colors")
        missing = [r for r in REGIONS if r not in self.landmarks or len(self.landmarks[r]) == 0]
        if missing:
            raise InputError(f"scan is missing landmarks for regions: {', '.join(missing)}")
        if not 0 <= self.expression < len(EXPRESSIONS):
            raise InputError(f"unknown expression class {self.expression}")
        return self


@dataclass
class ModalityPair:
    """Pixel-aligned texture and depth images, each 3 x S x S in [0, 1]."""
    texture: Tensor
    depth: Tensor

    @property
    def size(self):
        return self.texture.shape[-1]


@dataclass
class MaskPyramid:
    """Salient-region masks at S/4 (mask1) and S/8 (mask2), each 1 x h x w in [0, 1]."""
    mask1: Tensor
    mask2: Tensor

    def level(self, k):
        if k == 1:
            return self.mask1
        if k == 2:
            return self.mask2
        raise KeyError(f"no mask for Layer{k}")


@dataclass
class FaceSample:
    label: int
    subject_id: int
    intensity: int = 4
    texture: np.ndarray = None
    depth: np.ndarray = None
    mask1: np.ndarray = None
    mask2: np.ndarray = None
    key: str = ""

    @property
    def masks(self):
        if self.mask1 is None or self.mask2 is None:
            return None
        return MaskPyramid(Tensor(self.mask1), Tensor(self.mask2))


@dataclass
class Batch:
    texture: Tensor = None
    depth: Tensor = None
    masks: MaskPyramid = None
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.labels)


def _stack(samples, attr):
    arrays = [getattr(s, attr) for s in samples]
    if any(a is None for a in arrays):
        raise DataError(f"samples are missing the {attr!r} input this configuration needs")
    return Tensor(np.stack(arrays))


def make_batch(samples, model_config):
    """Stack samples into N-leading tensors, reading only the inputs `model_config` uses."""
    if not samples:
        raise DataError("cannot batch an empty sample list")
    texture = _stack(samples, "texture") if model_config.needs_texture else None
    depth = _stack(samples, "depth") if model_config.needs_depth else None
    masks = None
    if model_config.active_ma_positions:
        mask1 = _stack(samples, "mask1")
        mask2 = _stack(samples, "mask2")
        masks = MaskPyramid(mask1, mask2)
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    return Batch(texture=texture, depth=depth, masks=masks, labels=labels)


def select_samples(samples, intensities=None, subjects=None):
    """Filter by intensity level (the standard protocol keeps levels 3 and 4) and subject ids."""
    out = samples
    if intensities is not None:
        keep = set(int(i) for i in intensities)
        out = [s for s in out if s.intensity in keep]
    if subjects is not None:
        keep = set(int(i) for i in subjects)
        out = [s for s in out if s.subject_id in keep]
    return out
