"""
Synthetic expressive face scans and the scan text format.

A synthetic face is a height field over a regular (x, y) grid: a smooth elliptical bump on a flat
background, with subject-seeded shape jitter. Each expression class displaces a distinct
combination of the eye, nose and mouth regions and tints them, both scaled by intensity / 4.

Scan file layout (whitespace separated, one record per line):

    scan <subject_id> <expression> <intensity>
    <region-tag> <u> <v>          # landmarks, normalized image coords
    <x> <y> <z> <r> <g> <b>       # points, millimeters and [0, 1] colors
"""
import io
from pathlib import Path

import numpy as np

from .config import EXPRESSIONS
from .data import REGIONS, Scan
from .errors import InputError
from .optim import derive_seed, rng

FACE_HALF_WIDTH_MM = 80.0
FACE_HEIGHT_MM = 40.0
POINTS_PER_SIDE = 64
SKIN = np.array([0.80, 0.62, 0.52])
BACKGROUND = np.array([0.15, 0.15, 0.18])

# region centers in the normalized [-1, 1] face frame, y up
REGION_CENTERS = {
    "left-eye": (-0.32, 0.28),
    "right-eye": (0.32, 0.28),
    "nose": (0.0, 0.0),
    "mouth": (0.0, -0.42),
}
# landmark offsets around each center
REGION_OUTLINES = {
    "left-eye": [(-0.1, 0.0), (0.0, 0.05), (0.1, 0.0), (0.0, -0.05)],
    "right-eye": [(-0.1, 0.0), (0.0, 0.05), (0.1, 0.0), (0.0, -0.05)],
    "nose": [(0.0, 0.12), (-0.08, -0.06), (0.08, -0.06)],
    "mouth": [(-0.18, 0.0), (0.0, 0.07), (0.18, 0.0), (0.0, -0.07)],
}
REGION_WIDTH = 0.13

# signed displacement amplitude per (class, region) in the REGIONS order
DISPLACEMENT = np.array([
    [-1.0, -1.0, 0.5, -0.5],  # anger: lowered brows, pressed lips
    [0.0, 0.0, 1.0, -1.0],  # disgust: wrinkled nose
    [1.0, 1.0, -0.5, 0.0],  # fear: raised brows
    [-0.3, -0.3, 0.0, 1.0],  # happiness: raised mouth corners
    [0.5, 0.5, -0.5, -1.0],  # sadness
    [1.0, 1.0, 0.0, 1.0],  # surprise: raised brows, open mouth
])
DISPLACEMENT_SCALE = 0.25  # of the face height at intensity 4
TINTS = np.array([
    [0.20, -0.10, -0.10],
    [-0.05, 0.15, -0.10],
    [-0.10, -0.10, 0.20],
    [0.15, 0.10, -0.05],
    [-0.15, -0.05, 0.10],
    [0.05, 0.15, 0.15],
])


def _check(expression, intensity):
    if not 0 <= int(expression) < len(EXPRESSIONS):
        raise InputError(f"unknown expression class {expression}; expected 0..{len(EXPRESSIONS) - 1}")
    if not 1 <= int(intensity) <= 4:
        raise InputError(f"intensity must be in 1..4, got {intensity}")


def subject_shape(subject_seed):
    """Per-subject face proportions and region centers."""
    r = rng(derive_seed("subject", int(subject_seed)))
    scale = 1.0 + 0.05 * r.standard_normal(3)
    shift = 0.03 * r.standard_normal((len(REGIONS), 2))
    centers = {tag: np.asarray(REGION_CENTERS[tag]) + shift[i] for i, tag in enumerate(REGIONS)}
    return dict(a=0.75 * scale[0], b=0.92 * scale[1], height=scale[2], centers=centers)


def _region_bumps(x, y, centers):
    """len(REGIONS) x P Gaussian weights around each region center."""
    return np.stack([np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * REGION_WIDTH ** 2))
                     for cx, cy in (centers[tag] for tag in REGIONS)])


def displacement_field(expression, subject_seed, intensity, x, y):
    """Expression height offsets (normalized units) at face-frame coordinates x, y."""
    _check(expression, intensity)
    shape = subject_shape(subject_seed)
    bumps = _region_bumps(x, y, shape["centers"])
    return DISPLACEMENT_SCALE * intensity / 4 * (DISPLACEMENT[expression] @ bumps)


def synth_scan(expression, subject_seed, intensity=4, points_per_side=POINTS_PER_SIDE):
    """Deterministic synthetic scan of one subject showing one expression.

    :param expression: class index into EXPRESSIONS
    :param subject_seed: subject id; also seeds the subject's face shape
    :param intensity: expression level 1..4
    :param points_per_side: the grid has points_per_side ** 2 points over the face box
    """
    _check(expression, intensity)
    shape = subject_shape(subject_seed)
    g = np.linspace(-1.0, 1.0, points_per_side)
    x, y = (a.ravel() for a in np.meshgrid(g, g))

    rho2 = (x / shape["a"]) ** 2 + (y / shape["b"]) ** 2
    face = np.where(rho2 < 1, shape["height"] * (1 - rho2) ** 2, 0.0)
    inside = rho2 < 1
    bumps = _region_bumps(x, y, shape["centers"])
    z = face + inside * (DISPLACEMENT_SCALE * intensity / 4 * (DISPLACEMENT[expression] @ bumps))

    tint = intensity / 4 * np.outer(bumps.sum(axis=0), TINTS[expression])
    colors = np.where(inside[:, None], SKIN + tint, BACKGROUND)
    colors = np.clip(colors, 0.0, 1.0)

    landmarks = {}
    for tag in REGIONS:
        pts = shape["centers"][tag] + np.asarray(REGION_OUTLINES[tag])
        # normalized image coords: u to the right, v downward
        landmarks[tag] = np.stack([(pts[:, 0] + 1) / 2, (1 - pts[:, 1]) / 2], axis=1).clip(0, 1)

    points = np.stack([x * FACE_HALF_WIDTH_MM, y * FACE_HALF_WIDTH_MM, z * FACE_HEIGHT_MM], axis=1)
    return Scan(points=points, colors=colors, landmarks=landmarks, subject_id=int(subject_seed),
                expression=int(expression), intensity=int(intensity))


def write_scan(path, scan):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"scan {scan.subject_id} {scan.expression} {scan.intensity}\n")
    for tag in REGIONS:
        for u, v in scan.landmarks[tag]:
            buf.write(f"{tag} {float(u)!r} {float(v)!r}\n")
    np.savetxt(buf, np.hstack([scan.points, scan.colors]), fmt="%.9g")
    path.write_text(buf.getvalue())
    return path


def read_scan(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"File {path} does not exist")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("scan "):
        raise InputError(f"{path}: missing 'scan <subject> <class> <intensity>' header")
    try:
        subject_id, expression, intensity = (int(v) for v in lines[0].split()[1:4])
    except ValueError:
        raise InputError(f"{path} line 1: malformed header {lines[0]!r}") from None

    landmarks = {}
    point_lines = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if not fields:
            continue
        if fields[0] in REGIONS:
            if len(fields) != 3:
                raise InputError(f"{path} line {lineno}: expected '<tag> u v'")
            landmarks.setdefault(fields[0], []).append((float(fields[1]), float(fields[2])))
        elif len(fields) == 6:
            point_lines.append(line)
        else:
            raise InputError(f"{path} line {lineno}: expected a landmark or 'x y z r g b', got {line!r}")
    if not point_lines:
        raise InputError(f"{path}: scan has no points")
    data = np.loadtxt(io.StringIO("\n".join(point_lines)), ndmin=2)
    scan = Scan(points=data[:, :3], colors=data[:, 3:], landmarks=landmarks, subject_id=subject_id,
                expression=expression, intensity=intensity)
    return scan.validate()


def synth_dataset(out_dir, subjects, intensities=(4,), first_subject=0):
    """Write one scan file per (subject, expression, intensity); returns the written paths."""
    out_dir = Path(out_dir)
    paths = []
    for subject in range(first_subject, first_subject + subjects):
        for expression in range(len(EXPRESSIONS)):
            for level in intensities:
                scan = synth_scan(expression, subject, level)
                paths.append(write_scan(out_dir / f"s{subject:03d}_{EXPRESSIONS[expression]}_{level}.scan", scan))
    return paths
