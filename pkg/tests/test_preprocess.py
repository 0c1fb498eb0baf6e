import numpy as np
import pytest
from scipy.spatial import ConvexHull

from afnet_m.config import ModelConfig
from afnet_m.data import REGIONS, Scan
from afnet_m.errors import DataError, InputError
from afnet_m.preprocess import downsample_mask, fill_holes, find_outliers, load_dataset, median_root, \
    preprocess_directory, preprocess_scan, project_to_grid, rasterize_masks, region_mask, save_dataset, surface_clean, \
    to_uint8
from afnet_m.scan import synth_dataset, synth_scan
from conftest import oracle_region_mask, pattern_samples


LANDMARKS = {tag: [(0.3, 0.3), (0.4, 0.3), (0.35, 0.4)] for tag in REGIONS}


def hemisphere(points_per_side):
    g = np.linspace(-1, 1, points_per_side)
    x, y = (a.ravel() for a in np.meshgrid(g, g))
    z = np.sqrt(np.maximum(1 - x ** 2 - y ** 2, 0))
    return Scan(points=np.stack([x, y, z], axis=1), colors=np.full((len(x), 3), 0.5), landmarks=LANDMARKS)


def test_dense_hemisphere_leaves_no_holes():
    pair, holes = project_to_grid(hemisphere(64), 32)
    assert not holes.any()
    depth = pair.depth.data
    assert depth.shape == (3, 32, 32)
    assert depth.min() == 0.0 and depth.max() == 1.0
    assert np.array_equal(depth[0], depth[2])


def test_sparse_scan_leaves_holes():
    _, holes = project_to_grid(hemisphere(20), 32)
    assert holes.any() and not holes.all()


def test_nearest_point_wins_its_cell():
    points = [(0, 0, 1.0), (0.01, 0.01, 5.0), (10, 10, 0.0)]
    colors = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
    pair, holes = project_to_grid(Scan(points=points, colors=colors, landmarks=LANDMARKS), 16)
    # (0, 0) and (0.01, 0.01) share the bottom-left cell
    assert np.array_equal(pair.texture.data[:, 15, 0], [0, 1, 0])
    assert pair.depth.data[0, 15, 0] == 1.0
    assert pair.depth.data[0, 0, 15] == 0.0
    assert holes.sum() == 16 * 16 - 2


def test_single_point_projects_to_the_center():
    pair, holes = project_to_grid(Scan(points=[(3, 4, 5)], colors=[(1, 1, 1)], landmarks=LANDMARKS), 16)
    assert not holes[8, 8] and holes.sum() == 255
    assert pair.depth.data[0, 8, 8] == 0.0


def test_projection_rejects_bad_grids():
    with pytest.raises(InputError):
        project_to_grid(hemisphere(8), 8)
    with pytest.raises(InputError):
        project_to_grid(Scan(points=np.zeros((0, 3)), colors=np.zeros((0, 3)), landmarks=LANDMARKS), 16)


def test_fill_single_hole_with_neighbor_mean():
    image = np.arange(9, dtype=float).reshape(3, 3)
    holes = np.zeros((3, 3), dtype=bool)
    holes[1, 1] = True
    filled = fill_holes(image, holes)
    assert filled[1, 1] == (image.sum() - 4) / 8
    with pytest.raises(InputError):
        fill_holes(image, np.ones((3, 3), dtype=bool))


def test_fill_reaches_large_holes():
    holes = np.ones((10, 10), dtype=bool)
    holes[0, 0] = False
    filled = fill_holes(np.full((10, 10), 0.3), holes)
    assert np.allclose(filled, 0.3)


@pytest.mark.parametrize("plane", ["constant", "step"])
def test_surface_clean_is_idempotent_on_clean_planes(plane):
    depth = np.full((24, 24), 0.4)
    if plane == "step":
        depth[:, 12:] = 0.8
    holes = np.zeros_like(depth, dtype=bool)
    once = surface_clean(depth, holes)
    assert np.array_equal(once, depth)
    assert np.array_equal(surface_clean(once, holes), once)


def test_surface_clean_is_idempotent_on_face_depth():
    no_holes = np.zeros((32, 32), dtype=bool)
    for expression in range(6):
        for subject in range(5):
            clean = preprocess_scan(synth_scan(expression, subject), 32).depth[0]
            again = surface_clean(clean, no_holes)
            assert np.abs(again - clean).max() <= 1e-12, f"expression {expression} subject {subject}"


def test_median_filter_root_has_no_spikes():
    rng = np.random.default_rng(5)
    ramp = np.add.outer(np.linspace(0, 0.5, 20), np.linspace(0, 0.5, 20))
    root = median_root(ramp + rng.uniform(-0.05, 0.05, (20, 20)), max_passes=80)
    assert np.array_equal(median_root(root, max_passes=1), root)
    assert not find_outliers(root, np.zeros((20, 20), dtype=bool)).any()


def test_surface_clean_removes_spikes_and_holes():
    rng = np.random.default_rng(0)
    depth = 0.5 + rng.uniform(-0.01, 0.01, (32, 32))
    depth[16, 16] = 1.0
    depth[5, 7] = 0.0
    holes = np.zeros((32, 32), dtype=bool)
    holes[20:23, 3:6] = True
    clean = surface_clean(depth, holes)
    assert np.abs(clean - 0.5).max() < 0.01
    assert np.isfinite(clean).all()


def test_surface_clean_needs_some_surface():
    with pytest.raises(InputError):
        surface_clean(np.zeros((16, 16)), np.ones((16, 16), dtype=bool))


def test_region_mask_matches_loop_rasterizer():
    rng = np.random.default_rng(3)
    for case in range(20):
        points = rng.uniform(1, 15, (int(rng.integers(3, 7)), 2))
        radius = float(rng.uniform(0.3, 1.5))
        mask = region_mask(points, 16, radius)
        assert np.array_equal(mask, oracle_region_mask(points, 16, radius)), f"case {case}"


def test_corner_landmarks_cover_the_whole_canvas():
    corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    masks = rasterize_masks({tag: corners for tag in REGIONS}, 32)
    side = 8
    hull_fraction = ConvexHull(np.array(corners) * side).volume / side ** 2
    assert masks.mask1.data.mean() == hull_fraction == 1.0
    assert np.array_equal(masks.mask1.data[0], oracle_region_mask(np.array(corners) * side, side, 1.0))
    assert np.array_equal(masks.mask2.data, np.ones((1, 4, 4)))


def test_collinear_landmarks_give_a_thick_segment():
    points = np.array([[2.0, 8.0], [8.0, 8.0], [14.0, 8.0]])
    mask = region_mask(points, 16, 1.0)
    assert mask[7, 2:14].all() and mask[8, 2:14].all()
    assert not mask[4].any() and not mask[11].any()


def test_mask_pyramid_levels():
    masks = rasterize_masks(synth_scan(0, 0).landmarks, 64)
    m1, m2 = masks.mask1.data, masks.mask2.data
    assert m1.shape == (1, 16, 16) and m2.shape == (1, 8, 8)
    assert set(np.unique(m1)) <= {0.0, 1.0}
    assert 0 < m1.mean() < 1
    assert np.array_equal(m2, downsample_mask(m1))
    assert set(np.unique(m2 * 4)) <= {0.0, 1.0, 2.0, 3.0, 4.0}


def test_mask_rasterization_errors():
    landmarks = dict(LANDMARKS)
    del landmarks["nose"]
    with pytest.raises(InputError, match="nose"):
        rasterize_masks(landmarks, 32)
    with pytest.raises(InputError):
        rasterize_masks(LANDMARKS, 36)


def test_preprocess_scan_output():
    sample = preprocess_scan(synth_scan(4, 2, intensity=3), 32, key="x")
    assert sample.texture.shape == sample.depth.shape == (3, 32, 32)
    assert sample.mask1.shape == (1, 8, 8) and sample.mask2.shape == (1, 4, 4)
    assert (sample.label, sample.subject_id, sample.intensity) == (4, 2, 3)
    assert np.array_equal(sample.depth[0], sample.depth[1])
    for image in (sample.texture, sample.depth):
        assert image.min() >= 0 and image.max() <= 1


def test_synthetic_expressions_are_separable_by_nearest_centroid():
    def features(subjects):
        rows, labels = [], []
        for subject in subjects:
            for expression in range(6):
                s = preprocess_scan(synth_scan(expression, subject), 32)
                rows.append(np.concatenate([s.texture.ravel(), s.depth[0].ravel()]))
                labels.append(expression)
        return np.array(rows), np.array(labels)

    x_train, y_train = features(range(8))
    x_test, y_test = features(range(8, 12))
    centroids = np.stack([x_train[y_train == c].mean(axis=0) for c in range(6)])
    predicted = np.argmin(((x_test[:, None] - centroids[None]) ** 2).sum(axis=-1), axis=1)
    assert np.mean(predicted == y_test) > 0.5


def test_dataset_files(tmp_path):
    samples = pattern_samples([0, 1])
    save_dataset(tmp_path, samples)
    assert len(load_dataset(tmp_path)) == 12

    texture_only = ModelConfig.toy(modality="texture", ma_enabled=False)
    loaded = load_dataset(tmp_path, texture_only)
    assert loaded[0].depth is None and loaded[0].mask1 is None
    assert np.array_equal(loaded[3].texture, samples[3].texture)

    (tmp_path / "samples" / samples[0].key / "depth.aftn").unlink()
    with pytest.raises(DataError, match="depth"):
        load_dataset(tmp_path, ModelConfig.toy())
    assert load_dataset(tmp_path)[0].depth is None
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nowhere")


def test_preprocess_directory(tmp_path):
    synth_dataset(tmp_path / "scans", subjects=1)
    samples = preprocess_directory(tmp_path / "scans", tmp_path / "data", 32)
    assert len(samples) == 6
    assert {s.key for s in load_dataset(tmp_path / "data", intensities=(4,))} == {s.key for s in samples}
    with pytest.raises(InputError):
        preprocess_directory(tmp_path / "data", tmp_path / "again", 32)


def test_to_uint8_is_channel_last():
    image = np.zeros((3, 4, 5))
    image[1] = 1.0
    image[2, 0, 0] = 1.5
    pixels = to_uint8(image)
    assert pixels.shape == (4, 5, 3) and pixels.dtype == np.uint8
    assert (pixels[..., 1] == 255).all() and pixels[0, 0, 2] == 255 and (pixels[..., 0] == 0).all()


def test_masks_at_full_resolution():
    masks = rasterize_masks(synth_scan(1, 3).landmarks, 224)
    assert masks.mask1.shape == (1, 56, 56) and masks.mask2.shape == (1, 28, 28)


def test_pipeline_is_total_over_random_scans():
    r = np.random.default_rng(11)
    for case in range(100):
        expression, subject, intensity = int(r.integers(6)), int(r.integers(1000)), int(r.integers(1, 5))
        sample = preprocess_scan(synth_scan(expression, subject, intensity), 32)
        assert sample.texture.shape == (3, 32, 32) and sample.mask2.shape == (1, 4, 4), f"case {case}"
