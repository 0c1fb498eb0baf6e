"""
Scan -> (texture, depth, masks) preprocessing.

1. `project_to_grid`: orthographic max-z binning of the point cloud onto an S x S grid over the
   face bounding box; the winning point of a cell supplies both its color and its depth.
2. `surface_clean`: spike removal (5 x 5 median test), hole filling (neighbor-mean diffusion)
   and noise removal (3 x 3 median filter repeated until it settles) on the depth plane.
3. `rasterize_masks`: dilated convex hulls of the region landmarks at S/4, area-downsampled to S/8.

Samples are written as AFTN tensor files next to an `index.json`.
"""
import json
import warnings
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .data import FaceSample, ModalityPair, MaskPyramid, REGIONS
from .errors import DataError, InputError
from .tensor import Tensor, load_tensor, save_tensor

MIN_GRID = 16
OUTLIER_WINDOW = 5
OUTLIER_SIGMAS = 3.0
# lower bound on the robust std, in normalized depth units
OUTLIER_SIGMA_FLOOR = 0.02
MAD_TO_SIGMA = 1.4826
NOISE_WINDOW = 3
# upper bound on median filter passes, per grid side
MEDIAN_PASSES_PER_SIDE = 4


def _cell_index(coord, lo, extent, size):
    if extent <= 0:
        return np.full(coord.shape, size // 2, dtype=np.int64)
    return np.clip(np.floor((coord - lo) / extent * size).astype(np.int64), 0, size - 1)


def project_to_grid(scan, size):
    """
    :param scan: Scan with P >= 1 points
    :param size: grid side S >= 16
    :return: (ModalityPair with raw 3 x S x S images, S x S boolean hole map)
    """
    if len(scan.points) == 0:
        raise InputError("cannot project an empty scan")
    if size < MIN_GRID:
        raise InputError(f"grid size must be at least {MIN_GRID}, got {size}")
    x, y, z = scan.points.T
    (xmin, ymin), (xmax, ymax) = scan.points[:, :2].min(axis=0), scan.points[:, :2].max(axis=0)
    cols = _cell_index(x, xmin, xmax - xmin, size)
    # rows count downward from the top of the box
    rows = _cell_index(-y, -ymax, ymax - ymin, size)
    cells = rows * size + cols

    # per cell, the first entry after sorting by (cell, -z) is the max-z point
    order = np.lexsort((-z, cells))
    first = np.unique(cells[order], return_index=True)[1]
    winners = order[first]
    hit = cells[winners]

    zw = z[winners]
    zmin, zmax = zw.min(), zw.max()
    normalized = (zw - zmin) / (zmax - zmin) if zmax > zmin else np.zeros_like(zw)

    depth = np.zeros(size * size)
    depth[hit] = normalized
    texture = np.zeros((3, size * size))
    texture[:, hit] = scan.colors[winners].T
    holes = np.ones(size * size, dtype=bool)
    holes[hit] = False

    depth = depth.reshape(size, size)
    pair = ModalityPair(texture=Tensor(texture.reshape(3, size, size)),
                        depth=Tensor(np.broadcast_to(depth, (3, size, size))))
    return pair, holes.reshape(size, size)


def landmark_cells(landmarks, size):
    """Grid (row, col) of each normalized landmark; shared by texture and depth."""
    return {tag: np.clip(np.floor(np.asarray(pts)[:, ::-1] * size).astype(np.int64), 0, size - 1)
            for tag, pts in landmarks.items()}


def fill_holes(image, holes):
    """Iteratively set each hole with at least one valid 8-neighbor to the mean of those neighbors."""
    values = np.where(holes, 0.0, np.asarray(image, dtype=np.float64))
    holes = np.array(holes, dtype=bool)
    if holes.all():
        raise InputError("every cell is a hole; nothing to fill from")
    kernel = np.ones((3, 3))
    kernel[1, 1] = 0
    while holes.any():
        valid = (~holes).astype(np.float64)
        total = ndimage.convolve(values * valid, kernel, mode="constant", cval=0.0)
        count = ndimage.convolve(valid, kernel, mode="constant", cval=0.0)
        front = holes & (count > 0)
        values[front] = total[front] / count[front]
        holes = holes & ~front
    return values


def local_median(image, holes, window=OUTLIER_WINDOW):
    """Median over the valid cells of each window x window neighborhood (NaN where none are valid)."""
    pad = window // 2
    padded = np.pad(np.where(holes, np.nan, image), pad, constant_values=np.nan)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmedian(windows, axis=(-2, -1))


def find_outliers(depth, holes):
    """
    Spikes: valid cells that are a strict extremum among their valid 8-neighbors and deviate from
    their local median by more than OUTLIER_SIGMAS robust stds.
    """
    med = local_median(depth, holes)
    residual = np.abs(depth - med)
    valid = ~holes & np.isfinite(med)
    if not valid.any():
        return np.zeros_like(holes)
    sigma = max(MAD_TO_SIGMA * np.median(residual[valid]), OUTLIER_SIGMA_FLOOR)
    ring = np.ones((3, 3), dtype=bool)
    ring[1, 1] = False
    above = ndimage.maximum_filter(np.where(holes, -np.inf, depth), footprint=ring, mode="constant", cval=-np.inf)
    below = ndimage.minimum_filter(np.where(holes, np.inf, depth), footprint=ring, mode="constant", cval=np.inf)
    spike = (depth > above) | (depth < below)
    return valid & spike & (residual > OUTLIER_SIGMAS * sigma)


def median_root(image, max_passes):
    """Repeat the NOISE_WINDOW median filter until the image stops changing (a root of the filter)."""
    for _ in range(max_passes):
        smoothed = ndimage.median_filter(image, size=NOISE_WINDOW, mode="nearest")
        if np.array_equal(smoothed, image):
            break
        image = smoothed
    return image


def surface_clean(depth, holes):
    """
    The result is a root of the median filter, so it holds no spikes and a second call returns it unchanged.

    :param depth: S x S (or 3 x S x S replicated) depth plane in [0, 1]
    :param holes: S x S boolean map of empty cells
    :return: S x S cleaned depth, finite and in [0, 1]
    """
    depth = np.asarray(depth.data if isinstance(depth, Tensor) else depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[0]
    holes = np.asarray(holes, dtype=bool)
    if holes.all():
        raise InputError("depth plane is all holes")
    holes = holes | find_outliers(depth, holes)
    filled = fill_holes(depth, holes)
    smoothed = median_root(filled, max_passes=MEDIAN_PASSES_PER_SIDE * depth.shape[-1])
    return np.clip(smoothed, 0.0, 1.0)


def _segment_distance(px, py, a, b):
    d = b - a
    length2 = d @ d
    if length2 == 0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / length2, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def region_mask(points, size, radius):
    """Filled convex hull of `points` (canvas pixel units) dilated by `radius`, sampled at pixel centers."""
    centers = np.arange(size) + 0.5
    px, py = np.meshgrid(centers, centers)
    points = np.asarray(points, dtype=np.float64)
    try:
        hull = ConvexHull(points)
    except (QhullError, ValueError):
        hull = None
    if hull is None:
        # collinear or fewer than 3 points: the segment between the two farthest landmarks
        gaps = np.linalg.norm(points[:, None] - points[None], axis=-1)
        i, j = np.unravel_index(np.argmax(gaps), gaps.shape)
        return _segment_distance(px, py, points[i], points[j]) <= radius

    normals, offsets = hull.equations[:, :2], hull.equations[:, 2]
    inside = np.all(px[..., None] * normals[:, 0] + py[..., None] * normals[:, 1] + offsets <= 1e-12, axis=-1)
    ring = np.append(hull.vertices, hull.vertices[0])
    near = np.zeros_like(inside)
    for a, b in zip(ring[:-1], ring[1:]):
        near |= _segment_distance(px, py, points[a], points[b]) <= radius
    return inside | near


def rasterize_masks(landmarks, size):
    """
    :param landmarks: region tag -> K x 2 normalized (u, v) points
    :param size: image side S; masks are S/4 and S/8
    :return: MaskPyramid with binary mask1 and its 2 x 2 area average mask2
    """
    missing = [tag for tag in REGIONS if tag not in landmarks or len(landmarks[tag]) == 0]
    if missing:
        raise InputError(f"landmarks are missing regions: {', '.join(missing)}")
    if size % 8:
        raise InputError(f"mask rasterization needs S divisible by 8, got {size}")
    side = size // 4
    radius = size / 32
    mask1 = np.zeros((side, side))
    for tag in REGIONS:
        pts = np.asarray(landmarks[tag], dtype=np.float64).reshape(-1, 2) * side
        mask1[region_mask(pts, side, radius)] = 1.0
    mask2 = downsample_mask(mask1)
    return MaskPyramid(Tensor(mask1[None]), Tensor(mask2[None]))


def downsample_mask(mask):
    h, w = mask.shape[-2:]
    return mask.reshape(*mask.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def preprocess_scan(scan, size, key=""):
    """Full pipeline for one scan; returns a FaceSample with 3 x S x S images and both masks."""
    scan.validate()
    pair, holes = project_to_grid(scan, size)
    depth = surface_clean(pair.depth, holes)
    texture = np.stack([fill_holes(channel, holes) for channel in pair.texture.data])
    texture = np.clip(texture, 0.0, 1.0)
    masks = rasterize_masks(scan.landmarks, size)
    sample = FaceSample(label=scan.expression, subject_id=scan.subject_id, intensity=scan.intensity,
                        texture=texture, depth=np.repeat(depth[None], 3, axis=0),
                        mask1=masks.mask1.data, mask2=masks.mask2.data, key=key)
    for name in ("texture", "depth", "mask1", "mask2"):
        value = getattr(sample, name)
        assert np.isfinite(value).all(), f"{name} has non-finite values"
        assert value.min() >= 0 and value.max() <= 1, f"{name} leaves [0, 1]"
    return sample


# ---------------------------------------------------------------------------------------------
# sample files

INDEX = "index.json"
INPUTS = ("texture", "depth", "mask1", "mask2")


def save_sample(root, sample):
    folder = Path(root) / "samples" / sample.key
    for name in INPUTS:
        save_tensor(folder / f"{name}.aftn", getattr(sample, name))
    return folder


def save_dataset(root, samples):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        save_sample(root, sample)
    index = [dict(key=s.key, label=s.label, subject_id=s.subject_id, intensity=s.intensity) for s in samples]
    (root / INDEX).write_text(json.dumps(index, indent=1))
    return root / INDEX


def load_dataset(root, model_config=None, intensities=None):
    """Load samples listed in `index.json`, reading only the tensor files `model_config` needs.

    :param model_config: when None, every input file that exists is loaded
    :param intensities: keep only these intensity levels
    """
    root = Path(root)
    if not (root / INDEX).exists():
        raise DataError(f"{root} has no {INDEX}; run `preprocess` first")
    wanted = set(INPUTS)
    required = model_config is not None
    if model_config is not None:
        wanted = set()
        if model_config.needs_texture:
            wanted.add("texture")
        if model_config.needs_depth:
            wanted.add("depth")
        if model_config.active_ma_positions:
            wanted |= {"mask1", "mask2"}
    samples = []
    for entry in json.loads((root / INDEX).read_text()):
        if intensities is not None and entry["intensity"] not in intensities:
            continue
        sample = FaceSample(label=int(entry["label"]), subject_id=int(entry["subject_id"]),
                            intensity=int(entry["intensity"]), key=entry["key"])
        folder = root / "samples" / entry["key"]
        for name in sorted(wanted):
            path = folder / f"{name}.aftn"
            if not path.exists():
                if not required:
                    continue
                raise DataError(f"sample {entry['key']} has no {name} file at {path}")
            setattr(sample, name, load_tensor(path).data)
        samples.append(sample)
    if not samples:
        raise DataError(f"no samples selected from {root}")
    return samples


def preprocess_directory(scan_dir, out_dir, size, progress=None):
    """Preprocess every `*.scan` file under `scan_dir` into a dataset at `out_dir`."""
    from .scan import read_scan

    paths = sorted(Path(scan_dir).glob("*.scan"))
    if not paths:
        raise InputError(f"no .scan files in {scan_dir}")
    samples = []
    for path in (progress(paths) if progress else paths):
        samples.append(preprocess_scan(read_scan(path), size, key=path.stem))
    save_dataset(out_dir, samples)
    return samples


def to_uint8(image):
    """3 x S x S float image in [0, 1] -> S x S x 3 uint8."""
    return (np.clip(np.transpose(np.asarray(image), (1, 2, 0)), 0, 1) * 255).round().astype(np.uint8)
