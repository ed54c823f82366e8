import numpy as np
import pytest

from densefusion.autodiff import Tensor, check_gradients, ops
from densefusion.data import generate_scene, make_model
from densefusion.exceptions import (EmptyCloud, EmptyMask, EmptyPredictionList, IndexOutOfBounds,
                                    NoValidDepth, ShapeMismatch)
from densefusion.geometry import Pose
from densefusion.network import (NetworkConfig, PerPixelPrediction, embed_color, embed_geometry,
                                 estimate, forward, fuse, init_params, predict, prepare_inputs,
                                 select_best)
from micro import MICRO, micro_instance

SMALL = NetworkConfig(d_rgb=8, d_geo=8, d_glob=16, fuse_hidden=16, head_hidden=(16,), n_points=32,
                      encoder_channels=(4, 8), geo_hidden=(8, 16))


@pytest.fixture(scope="module")
def params():
    return init_params(SMALL)


def test_embed_color_shape_default_width():
    out = embed_color(init_params(NetworkConfig()), np.zeros((16, 16, 3)) + 0.1)
    assert out.shape == (16, 16, 128)


@pytest.mark.parametrize("h,w", [(7, 5), (1, 1), (9, 12)])
def test_embed_color_preserves_odd_sizes(params, h, w):
    assert embed_color(params, np.ones((h, w, 3))).shape == (h, w, 8)


def test_embed_color_responds_to_one_pixel(params, rng):
    crop = rng.uniform(-0.5, 0.5, size=(10, 10, 3))
    other = crop.copy()
    other[4, 4, 1] += 0.3
    assert not np.allclose(embed_color(params, crop).data, embed_color(params, other).data)
    with pytest.raises(ShapeMismatch):
        embed_color(params, np.zeros((0, 4, 3)))


def test_embed_color_input_gradient(rng):
    p = init_params(MICRO)
    crop = Tensor(rng.uniform(-0.5, 0.5, size=(6, 6, 3)), requires_grad=True)
    assert check_gradients(lambda: ops.sum(embed_color(p, crop)), [crop]) < 1e-4


def test_embed_geometry_permutation_and_single_point(params, rng):
    pts = rng.normal(size=(20, 3))
    perm = rng.permutation(20)
    a, pa = embed_geometry(params, pts, return_pooled=True)
    b, pb = embed_geometry(params, pts[perm], return_pooled=True)
    np.testing.assert_allclose(b.data, a.data[perm], atol=1e-12)
    np.testing.assert_allclose(pa.data, pb.data, atol=1e-12)
    one = pts[:1]
    from densefusion.network import mlp
    _, pooled = embed_geometry(params, one, return_pooled=True)
    np.testing.assert_allclose(pooled.data, mlp(params, "geo.point", Tensor(one), 2, True).data[0])
    with pytest.raises(EmptyCloud):
        embed_geometry(params, np.zeros((0, 3)))


def test_embed_geometry_gradient(rng):
    p = init_params(MICRO)
    pts = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    assert check_gradients(lambda: ops.sum(embed_geometry(p, pts)), [pts]) < 1e-4


def test_fuse_layout_and_permutation(params, rng):
    cmap = Tensor(rng.normal(size=(6, 7, 8)))
    geo = Tensor(rng.normal(size=(10, 8)))
    idx = np.stack([rng.integers(0, 6, 10), rng.integers(0, 7, 10)], axis=1)
    per_pixel, glob = fuse(params, cmap, geo, idx)
    assert per_pixel.shape == (10, 32) and glob.shape == (16,)
    np.testing.assert_array_equal(per_pixel.data[3, :8], cmap.data[idx[3, 0], idx[3, 1]])
    np.testing.assert_array_equal(per_pixel.data[3, 8:16], geo.data[3])
    np.testing.assert_array_equal(per_pixel.data[3, 16:], glob.data)
    perm = rng.permutation(10)
    shuffled, glob2 = fuse(params, cmap, Tensor(geo.data[perm]), idx[perm])
    np.testing.assert_allclose(shuffled.data, per_pixel.data[perm], atol=1e-12)
    np.testing.assert_allclose(glob2.data, glob.data, atol=1e-12)
    with pytest.raises(IndexOutOfBounds):
        fuse(params, cmap, geo, idx + [6, 0])


def test_fuse_single_pair_global_is_mlp_output(params, rng):
    from densefusion.network import mlp
    cmap = Tensor(rng.normal(size=(3, 3, 8)))
    geo = Tensor(rng.normal(size=(1, 8)))
    _, glob = fuse(params, cmap, geo, [[1, 2]])
    pair = Tensor(np.concatenate([cmap.data[1, 2], geo.data[0]])[None])
    np.testing.assert_allclose(glob.data, mlp(params, "fuse", pair, 2, True).data[0], atol=1e-15)


def test_fuse_gradient(rng):
    p = init_params(MICRO)
    cmap = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
    geo = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    idx = np.stack([rng.integers(0, 4, 6), rng.integers(0, 4, 6)], axis=1)
    assert check_gradients(lambda: ops.sum(fuse(p, cmap, geo, idx)[0]), [cmap, geo]) < 1e-4


def test_predict_invariants(params, rng):
    feat = rng.normal(size=(5, 32))
    feat[4] = feat[1]
    preds = predict(params, feat)
    assert len(preds) == 5
    for p in preds:
        assert abs(np.linalg.norm(p.rotation) - 1) < 1e-9 and 0 < p.confidence <= 1
    assert np.array_equal(preds[1].rotation, preds[4].rotation)
    assert preds[1].confidence == preds[4].confidence


def test_head_gradient(rng):
    from densefusion.network import pose_heads
    p = init_params(MICRO)
    feat = Tensor(rng.normal(size=(3, 14)), requires_grad=True)

    def fn():
        q, t, c = pose_heads(p, feat)
        return ops.add(ops.add(ops.sum(ops.mul(q, Tensor(rng_w(q.shape)))), ops.sum(t)), ops.sum(c))
    assert check_gradients(fn, [feat]) < 1e-4


def rng_w(shape):
    return np.random.default_rng(5).normal(size=shape)


def test_select_best_rules():
    def pred(c, x):
        return PerPixelPrediction(np.array([1.0, 0, 0, 0]), np.array([x, 0.0, 0.0]), c)
    assert select_best([pred(0.1, 0), pred(0.9, 1), pred(0.3, 2)]).translation[0] == 1
    assert select_best([pred(0.5, 7)]).translation[0] == 7
    assert select_best([pred(0.5, 0), pred(0.5, 1)]).translation[0] == 0
    with pytest.raises(EmptyPredictionList):
        select_best([])


def test_end_to_end_gradient_on_micro_instance():
    params, loss_fn = micro_instance()
    assert check_gradients(loss_fn, list(params.values())) < 1e-4


@pytest.fixture(scope="module")
def scene():
    models = [make_model("box", (0.1, 0.07, 0.05), 1, 0), make_model("cylinder", (0.04, 0.1), 2, 1)]
    return generate_scene(models, seed=2)


def test_estimate_smoke_and_errors(scene, params):
    pose, preds, cmap, inputs = estimate(scene, 0, scene.masks[0], params, SMALL,
                                         np.random.default_rng(0))
    assert isinstance(pose, Pose) and len(preds) == SMALL.n_points
    assert cmap.shape[:2] == inputs.crop.shape[:2]
    with pytest.raises(EmptyMask):
        estimate(scene, 0, np.zeros_like(scene.masks[0]), params, SMALL)
    s2 = generate_scene([make_model("box", (0.1, 0.07, 0.05), 1, 0)], seed=2)
    s2.depth[:] = 0.0
    with pytest.raises(NoValidDepth):
        estimate(s2, 0, s2.masks[0], params, SMALL)


def test_sampling_with_and_without_replacement(scene):
    mask = scene.masks[0].astype(bool) & (scene.depth > 0)
    n = int(mask.sum())
    a = prepare_inputs(scene, scene.masks[0], n, np.random.default_rng(0))
    assert len({tuple(r) for r in a.cloud.pixel_index}) == n
    b = prepare_inputs(scene, scene.masks[0], n + 50, np.random.default_rng(0))
    assert len(b.cloud.points) == n + 50


def test_permuting_points_permutes_predictions(scene, params, rng):
    inputs = prepare_inputs(scene, scene.masks[0], SMALL.n_points, np.random.default_rng(1))
    perm = rng.permutation(SMALL.n_points)
    a = forward(params, SMALL, inputs.crop, inputs.cloud.points, inputs.cloud.pixel_index)
    b = forward(params, SMALL, inputs.crop, inputs.cloud.points[perm], inputs.cloud.pixel_index[perm])
    np.testing.assert_allclose(b["quat"].data, a["quat"].data[perm], atol=1e-12)
    np.testing.assert_allclose(b["global"].data, a["global"].data, atol=1e-12)
    np.testing.assert_allclose(b["conf"].data, a["conf"].data[perm], atol=1e-12)


@pytest.mark.parametrize("mode", ["single", "global"])
def test_single_output_modes(scene, mode):
    cfg = NetworkConfig(**{**SMALL.to_dict(), "mode": mode})
    pose, preds, _, _ = estimate(scene, 0, scene.masks[0], init_params(cfg), cfg, np.random.default_rng(0))
    assert len(preds) == 1 and abs(np.linalg.norm(pose.rotation) - 1) < 1e-9


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        NetworkConfig(d_rgb=0)
    with pytest.raises(ValueError):
        NetworkConfig(n_points=10, n_loss=20)
    with pytest.raises(ValueError):
        NetworkConfig(mode="dense")
    assert NetworkConfig.from_dict(SMALL.to_dict()) == SMALL
