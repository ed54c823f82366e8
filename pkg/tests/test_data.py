import numpy as np
import pytest

from densefusion.data import (Scene, corrupt_mask, generate_scene, load_scene, make_model,
                              render_scene, save_scene)
from densefusion.exceptions import (DegenerateSize, MalformedFile, ObjectBehindCamera,
                                    UnknownShape)
from densefusion.geometry import (CameraIntrinsics, Pose, backproject_pixels, inverse)
from densefusion.metrics import nearest_distances


def test_sphere_points_lie_on_radius():
    m = make_model("sphere", 0.05, seed=3)
    np.testing.assert_allclose(np.linalg.norm(m.surface_points, axis=1), 0.05, atol=1e-9)
    assert m.symmetric


def test_box_extent():
    m = make_model("box", (0.1, 0.1, 0.1), seed=3)
    assert np.abs(m.surface_points).max() == pytest.approx(0.05, abs=1e-12)
    assert not m.symmetric


@pytest.mark.parametrize("kind,dims", [("box", (0.1, 0.07, 0.05)), ("lshape", (0.12, 0.09, 0.05)),
                                       ("cylinder", (0.04, 0.12)), ("sphere", (0.05,))])
def test_model_invariants_and_determinism(kind, dims):
    a = make_model(kind, dims, seed=11)
    b = make_model(kind, dims, seed=11)
    assert np.array_equal(a.surface_points, b.surface_points)
    assert np.array_equal(a.point_colors, b.point_colors)
    assert a.n_points >= 100
    assert np.abs(a.surface_points.mean(axis=0)).max() < 1e-6
    assert np.all((a.point_colors >= 0) & (a.point_colors <= 1))
    assert a.symmetric == (kind in ("cylinder", "sphere"))


def test_lshape_points_lie_on_its_surface():
    m = make_model("lshape", (0.12, 0.09, 0.06), seed=2, n_points=2000)
    p = m.surface_points + m.offset
    ax, ay, h = m.dims
    t = min(ax, ay) / 3
    in_a = (p[:, 0] <= ax + 1e-12) & (p[:, 1] <= t + 1e-12)
    in_b = (p[:, 0] <= t + 1e-12) & (p[:, 1] <= ay + 1e-12)
    assert np.all(in_a | in_b)
    assert np.all((p[:, 2] >= -1e-12) & (p[:, 2] <= h + 1e-12))
    # every point touches at least one outer face plane
    on_face = (np.isclose(p[:, 2], 0) | np.isclose(p[:, 2], h) | np.isclose(p[:, 0], 0)
               | np.isclose(p[:, 1], 0) | np.isclose(p[:, 0], ax) & (p[:, 1] <= t)
               | np.isclose(p[:, 1], t) & (p[:, 0] >= t) | np.isclose(p[:, 0], t) & (p[:, 1] >= t)
               | np.isclose(p[:, 1], ay) & (p[:, 0] <= t))
    assert np.all(on_face)


def test_make_model_errors():
    with pytest.raises(UnknownShape):
        make_model("torus", (0.1,))
    with pytest.raises(DegenerateSize):
        make_model("box", (0.1, 0.1, 0.5))
    with pytest.raises(DegenerateSize):
        make_model("sphere", (0.001,))


def test_single_sphere_depth_matches_ray_intersection():
    m = make_model("sphere", 0.05, seed=1)
    k = CameraIntrinsics()
    centre = np.array([0.02, -0.01, 0.5])
    s = render_scene([m], [Pose(translation=centre)], k, depth_noise=0.0, dropout=0.0,
                     background_depth=None)
    mask = s.masks[0].astype(bool)
    assert mask.any()
    rows, cols = np.nonzero(mask)
    depth = s.depth[rows, cols]
    # analytic oracle: first intersection of each pixel ray with the sphere
    dirs = np.stack([(cols - k.cx) / k.fx, (rows - k.cy) / k.fy, np.ones(len(rows))], axis=1)
    a = np.sum(dirs * dirs, axis=1)
    b = -2 * dirs @ centre
    c = centre @ centre - 0.05 ** 2
    disc = b * b - 4 * a * c
    hit = disc > 0
    z_ray = (-b[hit] - np.sqrt(disc[hit])) / (2 * a[hit])
    # away from the rim a 2 px lateral shift moves depth by well under 1 cm
    inner = np.sqrt(c + 0.05 ** 2 - (dirs[hit] @ centre) ** 2 / a[hit]) < 0.035
    assert np.abs(depth[hit][inner] - z_ray[inner]).max() < 0.01
    # every masked pixel backprojects within 2 px of the sphere surface
    pts = backproject_pixels(k, np.stack([rows, cols], 1), depth)
    tol = 2 * depth / k.fx
    assert np.all(np.abs(np.linalg.norm(pts - centre, axis=1) - 0.05) < tol)


@pytest.mark.parametrize("kind,dims", [("box", (0.1, 0.07, 0.05)), ("lshape", (0.12, 0.09, 0.05)),
                                       ("cylinder", (0.04, 0.12)), ("sphere", (0.05,))])
def test_normals_are_unit_and_outward(kind, dims):
    m = make_model(kind, dims, seed=5, n_points=2000)
    n = m.normals_at(m.surface_points)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)
    # stepping a little along the normal leaves the solid: distance to the surface grows
    out = m.surface_points + 0.003 * n
    dense = m.sample_surface(40000, np.random.default_rng(1))
    assert np.median(nearest_distances(out, dense)) > 0.002


def test_masked_pixels_have_few_holes_at_half_meter():
    m = make_model("box", (0.1, 0.1, 0.1), seed=1)
    pose = Pose.from_axis_angle([1, 1, 0], 0.5, (0.0, 0.0, 0.5))
    s = render_scene([m], [pose], depth_noise=0.0, dropout=0.0, background_depth=None)
    from scipy import ndimage
    mask = s.masks[0].astype(bool)
    filled = ndimage.binary_fill_holes(mask)
    assert (filled.sum() - mask.sum()) / filled.sum() < 0.05


def test_occluder_hides_requested_fraction():
    m = make_model("box", (0.1, 0.08, 0.06), seed=1)
    pose = Pose.from_axis_angle([0, 1, 0], 0.4, (0.0, 0.0, 0.6))
    full = render_scene([m], [pose], occluder_fraction=0.0, seed=5).masks[0].sum()
    half = render_scene([m], [pose], occluder_fraction=0.5, seed=5).masks[0].sum()
    assert abs(half / full - 0.5) <= 0.10


def test_nearer_object_wins_every_pixel():
    a = make_model("box", (0.1, 0.1, 0.1), seed=1, model_id=0)
    b = make_model("sphere", 0.05, seed=2, model_id=1)
    pa, pb = Pose(translation=(0.0, 0.0, 0.6)), Pose(translation=(0.03, 0.0, 0.8))
    k = CameraIntrinsics()
    s = render_scene([a, b], [pa, pb], k, depth_noise=0.0, dropout=0.0, background_depth=None)
    both = render_scene([a], [pa], k, depth_noise=0.0, dropout=0.0, background_depth=None)
    assert not np.any(s.masks[0].astype(bool) & s.masks[1].astype(bool))
    # wherever the near box renders on its own, it still owns the pixel in the joint render
    assert np.array_equal(s.masks[0], both.masks[0])
    assert s.masks[1].sum() > 0


def test_render_errors_and_determinism():
    m = make_model("sphere", 0.05, seed=1)
    with pytest.raises(ObjectBehindCamera):
        render_scene([m], [Pose(translation=(0, 0, 0.02))])
    s1 = render_scene([m], [Pose(translation=(0, 0, 0.6))], seed=9, occluder_fraction=0.3)
    s2 = render_scene([m], [Pose(translation=(0, 0, 0.6))], seed=9, occluder_fraction=0.3)
    assert np.array_equal(s1.depth, s2.depth) and np.array_equal(s1.rgb, s2.rgb)


def test_masked_depth_backprojects_onto_model_surface():
    models = [make_model("box", (0.1, 0.07, 0.05), 1, 0), make_model("cylinder", (0.04, 0.1), 2, 1)]
    s = generate_scene(models, seed=4)
    for i, m in enumerate(models):
        mask = s.masks[i].astype(bool) & (s.depth > 0)
        rows, cols = np.nonzero(mask)
        pts = backproject_pixels(s.intrinsics, np.stack([rows, cols], 1), s.depth[rows, cols])
        local = inverse(s.gt_poses[i]).apply(pts)
        dense = m.sample_surface(20000, np.random.default_rng(0))
        d = nearest_distances(local, dense)
        # 2 px reprojection at the object's depth plus 3 sigma of depth noise
        tol = 2 * s.gt_poses[i].translation[2] / s.intrinsics.fx + 0.003
        assert np.quantile(d, 0.99) < tol


def test_corrupt_mask_identity_and_dilation():
    mask = np.zeros((20, 20), dtype=np.uint8)
    mask[5:12, 6:10] = 1
    assert np.array_equal(corrupt_mask(mask, 0, 0.0, seed=1), mask)
    grown = corrupt_mask(mask, 2, 0.0, seed=1)
    assert np.all(grown[mask.astype(bool)])
    assert grown.sum() == (7 + 4) * (4 + 4)


def test_corrupt_mask_leak_count():
    mask = np.zeros((40, 40), dtype=bool)
    mask[10:30, 12:28] = True
    ring = 22 * 18 - 20 * 16
    out = corrupt_mask(mask, 0, 0.3, seed=3)
    flipped = int(out.sum() - mask.sum())
    assert abs(flipped - 0.3 * ring) <= 0.05 * 0.3 * ring
    assert np.array_equal(out, corrupt_mask(mask, 0, 0.3, seed=3))


def test_scene_round_trip(tmp_path):
    models = [make_model("box", (0.1, 0.07, 0.05), 1, 0), make_model("sphere", 0.04, 2, 1)]
    s = generate_scene(models, seed=8, occluder_fraction=0.2)
    path = tmp_path / "s.dfsc"
    save_scene(s, path)
    t = load_scene(path)
    assert np.array_equal(s.rgb, t.rgb) and np.array_equal(s.depth, t.depth)
    assert np.array_equal(s.masks, t.masks)
    assert t.object_ids == s.object_ids and t.symmetric == s.symmetric
    assert all(a == b for a, b in zip(s.gt_poses, t.gt_poses))
    assert t.meta["occluder_fraction"] == pytest.approx(0.2)
    assert path.read_bytes()[:4] == b"DFSC"


def test_truncated_scene_file(tmp_path):
    models = [make_model("sphere", 0.04, 2, 1)]
    path = tmp_path / "s.dfsc"
    save_scene(generate_scene(models, seed=1), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(MalformedFile) as err:
        load_scene(path)
    assert err.value.offset is not None
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MalformedFile):
        load_scene(path)


def test_header_only_scene_is_empty(tmp_path):
    import json
    import struct
    meta = json.dumps({"intrinsics": CameraIntrinsics().to_dict(), "object_ids": [], "poses": [],
                       "arrays": []}).encode()
    path = tmp_path / "empty.dfsc"
    path.write_bytes(b"DFSC" + struct.pack("<HI", 1, len(meta)) + meta)
    s = load_scene(path)
    assert isinstance(s, Scene) and s.n_objects == 0
    assert s.depth.shape == (120, 160)
