import numpy as np
import pytest

from densefusion.autodiff import (AdamState, Tape, Tensor, adam_step, backward, check_gradients,
                                  load_checkpoint, ops, save_checkpoint, sgd_step)
from densefusion.exceptions import (DisconnectedGraph, MalformedFile, MissingCheckpoint,
                                    NonScalarLoss, ShapeMismatch)

TOL = 1e-4


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def weighted_sum(x, seed=0):
    """Scalar probe with random weights so every output element matters."""
    w = np.random.default_rng(seed).normal(size=x.shape)
    return ops.sum(ops.mul(x, Tensor(w)))


def test_relu_forward_and_gradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.relu(x)
        loss = ops.sum(y)
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_mean_over_rows_forward_and_gradient():
    x = Tensor([[1.0, 3.0], [3.0, 5.0]], requires_grad=True)
    with Tape() as tape:
        y = ops.mean_over_rows(x)
        loss = ops.sum(y)
    np.testing.assert_array_equal(y.data, [2.0, 4.0])
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 0.5))


def test_sum_gradient_is_ones(rng):
    x = leaf(rng, 3, 4)
    with Tape() as tape:
        loss = ops.sum(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_linear_bias_gradient_counts_rows(rng):
    x, W, b = leaf(rng, 5, 3), leaf(rng, 3, 2), leaf(rng, 2)
    with Tape() as tape:
        loss = ops.sum(ops.linear(x, W, b))
    backward(loss, tape)
    np.testing.assert_array_equal(b.grad, [5.0, 5.0])


OP_CASES = {
    "add": lambda r: ((a := leaf(r, 4, 3), b := leaf(r, 3)), lambda: weighted_sum(ops.add(a, b))),
    "sub": lambda r: ((a := leaf(r, 4, 3), b := leaf(r, 4, 3)), lambda: weighted_sum(ops.sub(a, b))),
    "mul": lambda r: ((a := leaf(r, 4, 3), b := leaf(r, 4, 3)), lambda: weighted_sum(ops.mul(a, b))),
    "scale": lambda r: ((a := leaf(r, 4, 3),), lambda: weighted_sum(ops.scale(a, -2.5))),
    "matmul": lambda r: ((a := leaf(r, 4, 3), b := leaf(r, 3, 5)), lambda: weighted_sum(ops.matmul(a, b))),
    "matmul_batched": lambda r: ((a := leaf(r, 2, 4, 3), b := leaf(r, 2, 3, 5)),
                                 lambda: weighted_sum(ops.matmul(a, b))),
    "linear": lambda r: ((x := leaf(r, 6, 4), W := leaf(r, 4, 3), b := leaf(r, 3)),
                         lambda: weighted_sum(ops.linear(x, W, b))),
    "relu": lambda r: ((a := leaf(r, 5, 4),), lambda: weighted_sum(ops.relu(a))),
    "sigmoid": lambda r: ((a := leaf(r, 5, 4, scale=3.0),), lambda: weighted_sum(ops.sigmoid(a))),
    "clamp_min": lambda r: ((a := leaf(r, 5, 4),), lambda: weighted_sum(ops.clamp_min(a, 0.1))),
    "log": lambda r: ((a := Tensor(r.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True),),
                      lambda: weighted_sum(ops.log(a))),
    "concat": lambda r: ((a := leaf(r, 4, 2), b := leaf(r, 4, 3)),
                         lambda: weighted_sum(ops.concat([a, b], axis=1))),
    "mean_over_rows": lambda r: ((a := leaf(r, 6, 3),), lambda: weighted_sum(ops.mean_over_rows(a))),
    "repeat_rows": lambda r: ((a := leaf(r, 3),), lambda: weighted_sum(ops.repeat_rows(a, 4))),
    "sum_axis": lambda r: ((a := leaf(r, 3, 4, 2),), lambda: weighted_sum(ops.sum(a, axis=1))),
    "mean_axis": lambda r: ((a := leaf(r, 3, 4),), lambda: weighted_sum(ops.mean(a, axis=0))),
    "reshape": lambda r: ((a := leaf(r, 3, 4),), lambda: weighted_sum(ops.reshape(a, (2, 6)))),
    "gather_rows": lambda r: ((a := leaf(r, 5, 3),), lambda: weighted_sum(ops.gather_rows(a, [0, 2, 2, 4]))),
    "gather_pixels": lambda r: ((a := leaf(r, 4, 5, 3),),
                                lambda: weighted_sum(ops.gather_pixels(a, [[0, 0], [3, 4], [3, 4], [1, 2]]))),
    "crop2d": lambda r: ((a := leaf(r, 5, 6, 2),), lambda: weighted_sum(ops.crop2d(a, 4, 5))),
    "conv2d": lambda r: ((x := leaf(r, 5, 6, 2), k := leaf(r, 3, 3, 2, 3)),
                         lambda: weighted_sum(ops.conv2d(x, k))),
    "conv2d_stride2": lambda r: ((x := leaf(r, 5, 6, 2), k := leaf(r, 3, 3, 2, 3)),
                                 lambda: weighted_sum(ops.conv2d(x, k, stride=2))),
    "upsample_nearest": lambda r: ((a := leaf(r, 3, 2, 2),), lambda: weighted_sum(ops.upsample_nearest(a, 2))),
    "normalize_quaternion": lambda r: ((a := leaf(r, 5, 4),),
                                       lambda: weighted_sum(ops.normalize_quaternion(a))),
    "quat_to_rotmat": lambda r: ((a := leaf(r, 4, 4),), lambda: weighted_sum(ops.quat_to_rotmat(a))),
    "rigid_transform": lambda r: ((R := leaf(r, 3, 3, 3), t := leaf(r, 3, 3), X := leaf(r, 5, 3)),
                                  lambda: weighted_sum(ops.rigid_transform(R, t, X))),
    "rigid_transform_batched": lambda r: ((R := leaf(r, 2, 3, 3), t := leaf(r, 2, 3), X := leaf(r, 2, 4, 3)),
                                          lambda: weighted_sum(ops.rigid_transform(R, t, X))),
    "norm_last": lambda r: ((a := leaf(r, 4, 5, 3),), lambda: weighted_sum(ops.norm_last(a))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 32)
    tensors, fn = OP_CASES[name](rng)
    assert check_gradients(fn, tensors) < TOL


def test_every_registered_op_is_gradient_checked():
    covered = {n.split("_batched")[0].replace("_axis", "").replace("_stride2", "") for n in OP_CASES}
    assert set(ops.REGISTERED_OPS) <= covered | {"sum", "mean"}


def test_normalize_quaternion_unit_norm(rng):
    y = ops.normalize_quaternion(Tensor(rng.normal(size=(100, 4)) * 10))
    assert np.max(np.abs(np.linalg.norm(y.data, axis=1) - 1.0)) < 1e-12


def test_normalize_quaternion_jvp_matches_finite_difference(rng):
    x = rng.normal(size=(3, 4))
    v = rng.normal(size=(3, 4))
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        y = ops.normalize_quaternion(xt)
    # J^T applied to each basis gives J; contract with v for the JVP
    J = np.zeros((12, 12))
    for i in range(12):
        xt.grad = None
        g = np.zeros(12)
        g[i] = 1.0
        J[i] = y.backward_fn(g.reshape(3, 4))[0].ravel()
    jvp = J @ v.ravel()
    eps = 1e-6
    fd = (ops.normalize_quaternion(Tensor(x + eps * v)).data
          - ops.normalize_quaternion(Tensor(x - eps * v)).data) / (2 * eps)
    np.testing.assert_allclose(jvp, fd.ravel(), atol=1e-8)


def test_conv_rejects_even_kernels_and_bad_channels(rng):
    with pytest.raises(ShapeMismatch):
        ops.conv2d(Tensor(rng.normal(size=(4, 4, 2))), Tensor(rng.normal(size=(2, 2, 2, 1))))
    with pytest.raises(ShapeMismatch):
        ops.conv2d(Tensor(rng.normal(size=(4, 4, 2))), Tensor(rng.normal(size=(3, 3, 3, 1))))


def test_conv_same_padding_shapes(rng):
    x = Tensor(rng.normal(size=(7, 5, 3)))
    k = Tensor(rng.normal(size=(3, 3, 3, 4)))
    assert ops.conv2d(x, k).shape == (7, 5, 4)
    assert ops.conv2d(x, k, stride=2).shape == (4, 3, 4)


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(4, 5, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    out = ops.conv2d(Tensor(x), Tensor(k)).data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((4, 5, 3))
    for i in range(4):
        for j in range(5):
            ref[i, j] = np.einsum("abc,abcd->d", xp[i:i + 3, j:j + 3], k)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_shape_mismatch_reports_shapes(rng):
    with pytest.raises(ShapeMismatch, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeMismatch):
        ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))), Tensor(np.zeros(5)))
    with pytest.raises(ShapeMismatch):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_backward_errors(rng):
    x = leaf(rng, 3)
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(NonScalarLoss):
        backward(y, tape)
    with Tape() as tape:
        loss = ops.sum(x)
    backward(loss, tape)
    with pytest.raises(RuntimeError):
        backward(loss, tape)
    other = Tape()
    with pytest.raises(DisconnectedGraph):
        backward(loss, other)
    with pytest.raises(DisconnectedGraph):
        backward(Tensor(1.0), Tape())


def test_tape_records_in_topological_order(rng):
    x = leaf(rng, 3)
    with Tape() as tape:
        a = ops.relu(x)
        b = ops.scale(a, 3.0)
        ops.sum(b)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node.parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(node)]


def test_no_tape_means_no_graph(rng):
    x = leaf(rng, 3)
    y = ops.relu(x)
    assert y.is_leaf and not y.requires_grad


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(6, 5, 3))
    k = rng.normal(size=(3, 3, 3, 4))
    a = ops.conv2d(Tensor(x), Tensor(k)).data
    b = ops.conv2d(Tensor(x), Tensor(k)).data
    assert np.array_equal(a, b)


def test_sgd_one_step():
    params = {"x": Tensor(np.array(1.0), requires_grad=True)}
    sgd_step(params, {"x": np.array(2.0)}, lr=0.1)     # d/dx x^2 = 2x
    assert params["x"].data == pytest.approx(0.8)


def test_zero_gradient_leaves_parameters(rng):
    params = {"w": Tensor(rng.normal(size=(3, 2)), requires_grad=True)}
    before = params["w"].data.copy()
    sgd_step(params, {"w": np.zeros((3, 2))}, lr=0.5)
    adam_step(params, {"w": np.zeros((3, 2))}, AdamState(), lr=0.5)
    np.testing.assert_array_equal(params["w"].data, before)


def test_adam_converges_on_quadratic():
    params = {"x": Tensor(np.array(1.0), requires_grad=True)}
    state = AdamState()
    for _ in range(500):
        adam_step(params, {"x": 2 * params["x"].data}, state, lr=0.05)
    assert abs(float(params["x"].data)) < 1e-3
    assert state.step == 500


def test_optimizer_shape_mismatch():
    params = {"x": Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(ShapeMismatch):
        sgd_step(params, {"x": np.zeros(4)}, 0.1)
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"x": np.zeros(2)}, AdamState())


def test_checkpoint_round_trip(tmp_path, rng):
    sections = {"main": {"a.W": rng.normal(size=(3, 2)), "a.b": np.zeros(2)},
                "refiner": {"r.W": rng.normal(size=(2, 2, 2))}}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, sections, config={"d": 3})
    loaded, config = load_checkpoint(path)
    assert config == {"d": 3}
    assert list(loaded) == ["main", "refiner"]
    for s in sections:
        assert list(loaded[s]) == list(sections[s])
        for k, v in sections[s].items():
            assert np.array_equal(loaded[s][k].data, v)


def test_checkpoint_header_is_text_and_data_little_endian(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"main": {"w": np.array([1.5, -2.0])}})
    raw = path.read_bytes()
    header, _, data = raw.partition(b"end\n")
    assert header.decode("ascii").splitlines() == ["DFCKPT 1", "section main", "param w 2"]
    assert np.frombuffer(data, dtype="<f8").tolist() == [1.5, -2.0]


def test_checkpoint_errors(tmp_path):
    with pytest.raises(MissingCheckpoint):
        load_checkpoint(tmp_path / "nope.ckpt")
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"main": {"w": np.ones(10)}})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(MalformedFile):
        load_checkpoint(path)
