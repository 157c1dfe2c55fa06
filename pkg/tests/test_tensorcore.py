import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lungdet import tensorcore as tc
from lungdet.verify import TOLERANCE, check_layers

from oracles import conv3d_loops


def T(a, grad=True):
    return tc.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_conv_pointwise_scaling(rng):
    x = T(rng.normal(size=(1, 1, 3, 4, 5)))
    out = tc.conv3d(x, T(np.full((1, 1, 1, 1, 1), 2.0)), T([0.0]))
    assert np.array_equal(out.data, 2 * x.data)


def test_conv_counting():
    out = tc.conv3d(T(np.ones((1, 1, 5, 5, 5))), T(np.ones((1, 1, 3, 3, 3))))
    assert out.shape == (1, 1, 3, 3, 3) and np.all(out.data == 27)


@given(st.integers(0, 2 ** 31), st.sampled_from([1, 2]), st.sampled_from([0, 1]))
def test_conv_matches_loop_oracle(seed, stride, pad):
    r = np.random.default_rng(seed)
    c, k = int(r.integers(1, 5)), int(r.integers(1, 5))
    shape = tuple(int(v) for v in r.integers(3, 9, 3))
    x = r.normal(size=(1, c) + shape)
    w = r.normal(size=(k, c, 3, 3, 3))
    b = r.normal(size=k)
    out = tc.conv3d(T(x), T(w), T(b), stride, pad).data
    assert np.max(np.abs(out - conv3d_loops(x, w, b, stride, pad))) < 1e-10


def test_conv_shape_error():
    with pytest.raises(tc.ShapeError):
        tc.conv3d(T(np.ones((1, 2, 4, 4, 4))), T(np.ones((1, 3, 3, 3, 3))))
    with pytest.raises(tc.ShapeError):
        tc.conv3d(T(np.ones((1, 1, 2, 2, 2))), T(np.ones((1, 1, 3, 3, 3))))


def test_maxpool_constant_routes_to_first():
    x = T(np.ones((1, 1, 2, 2, 2)))
    y = tc.maxpool3d(x)
    tc.sum_all(y).backward()
    g = np.zeros((1, 1, 2, 2, 2))
    g[0, 0, 0, 0, 0] = 1
    assert np.array_equal(x.grad, g)


def test_maxpool_ramp_and_divisibility():
    x = T(np.arange(64.0).reshape(1, 1, 4, 4, 4))
    y = tc.maxpool3d(x).data
    assert np.array_equal(y, x.data[:, :, 1::2, 1::2, 1::2])
    with pytest.raises(tc.ShapeError):
        tc.maxpool3d(T(np.ones((1, 1, 3, 4, 4))))


def test_upsample_replication_and_adjoint():
    x = T(np.full((1, 1, 1, 1, 1), 3.0))
    assert np.array_equal(tc.upsample_nearest3d(x).data, np.full((1, 1, 2, 2, 2), 3.0))
    x = T(np.ones((1, 2, 2, 3, 2)))
    tc.sum_all(tc.upsample_nearest3d(x, 2)).backward()
    assert np.all(x.grad == 8)
    up = tc.upsample_nearest3d(T(np.full((1, 1, 2, 2, 2), 5.0)), 2)
    assert np.array_equal(tc.maxpool3d(up).data, np.full((1, 1, 2, 2, 2), 5.0))


def test_rrelu_examples():
    x = T(np.array([2.0, -48.0]))
    assert list(tc.rrelu(x).data) == [2.0, -11.0]
    assert tc.rrelu(x, training=True, rng=np.random.default_rng(0)).data[0] == 2.0
    with pytest.raises(ValueError):
        tc.rrelu(x, 0.5, 0.2)


def test_rrelu_train_slopes():
    x = T(-np.ones(100000))
    y = tc.rrelu(x, training=True, rng=np.random.default_rng(5)).data
    slope = y / x.data
    assert slope.min() >= 1 / 8 and slope.max() <= 1 / 3
    assert abs(slope.mean() - 11 / 48) < 1e-2


def test_rrelu_train_reproducible():
    x = T(np.random.default_rng(0).normal(size=50))
    a = tc.rrelu(x, training=True, rng=np.random.default_rng(9)).data
    b = tc.rrelu(x, training=True, rng=np.random.default_rng(9)).data
    assert np.array_equal(a, b)


def test_batchnorm_identity_and_constant(rng):
    x = rng.normal(size=(4, 2, 3, 3, 3))
    x = (x - x.mean(axis=(0, 2, 3, 4), keepdims=True)) / x.std(axis=(0, 2, 3, 4), keepdims=True)
    out = tc.batchnorm3d(T(x), T(np.ones(2)), T(np.zeros(2)), np.zeros(2), np.ones(2), True)
    # unit variance is scaled by 1/sqrt(1 + eps) with eps = 1e-5
    assert np.max(np.abs(out.data - x / np.sqrt(1 + 1e-5))) < 1e-12
    assert np.all(np.abs(out.data - x) <= 5.1e-6 * np.abs(x))
    const = tc.batchnorm3d(T(np.full((2, 1, 2, 2, 2), 7.0)), T([1.0]), T([0.25]), np.zeros(1), np.ones(1), True)
    assert np.allclose(const.data, 0.25)


def test_batchnorm_running_stats_update():
    rm, rv = np.zeros(1), np.ones(1)
    x = np.arange(16.0).reshape(2, 1, 2, 2, 2)
    tc.batchnorm3d(T(x), T([1.0]), T([0.0]), rm, rv, True)
    assert np.isclose(rm[0], 0.1 * x.mean())
    assert np.isclose(rv[0], 0.9 + 0.1 * x.var(ddof=1))
    with pytest.raises(tc.ShapeError):
        tc.batchnorm3d(T(x), T([1.0, 1.0]), T([0.0, 0.0]), rm, rv, True)


def test_add_concat():
    a, b = T(np.ones((1, 2, 2, 2, 2))), T(np.zeros((1, 3, 2, 2, 2)))
    assert np.array_equal(tc.add(a, T(np.zeros((1, 2, 2, 2, 2)))).data, a.data)
    assert tc.concat_channels(a, b).shape == (1, 5, 2, 2, 2)
    with pytest.raises(tc.ShapeError):
        tc.add(a, b)


def test_bce_examples():
    assert math.isclose(tc.bce_with_logits(T([0.0]), [1.0]).item(), math.log(2), rel_tol=1e-12)
    assert tc.bce_with_logits(T([800.0]), [1.0]).item() == 0.0
    z = np.linspace(-10, 10, 41)
    y = (np.arange(41) % 2).astype(float)
    naive = np.mean(-(y * np.log(1 / (1 + np.exp(-z))) + (1 - y) * np.log(1 - 1 / (1 + np.exp(-z)))))
    assert abs(tc.bce_with_logits(T(z), y).item() - naive) < 1e-9


def test_smooth_l1_examples():
    for u, want in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)]:
        assert tc.smooth_l1(T([[u]]), [[0.0]]).item() == want
    with pytest.raises(tc.ShapeError):
        tc.smooth_l1(T([[1.0, 2.0]]), [[1.0]])


def test_fan_out_accumulates(rng):
    x = T(rng.normal(size=(3, 2)))
    tc.sum_all(tc.add(tc.mul_scalar(x, 2.0), tc.mul_scalar(x, 3.0))).backward()
    assert np.allclose(x.grad, 5.0)


def test_sgd_vanilla_and_momentum():
    p = tc.Parameter(np.array([1.0, 2.0]))
    p.grad = np.array([0.5, -1.0])
    tc.sgd_step([p], 0.1, momentum=0.0, weight_decay=0.0)
    assert np.allclose(p.data, [0.95, 2.1]) and p.grad is None
    p = tc.Parameter(np.array([0.0]))
    for _ in range(2):
        p.grad = np.array([1.0])
        tc.sgd_step([p], 0.01, momentum=0.9, weight_decay=0.0)
    assert np.isclose(p.data[0], -0.01 * (1 + 1.9))
    p = tc.Parameter(np.array([3.0]))
    p.grad = np.zeros(1)
    tc.sgd_step([p], 0.1, momentum=0.9, weight_decay=0.0)
    assert p.data[0] == 3.0
    with pytest.raises(tc.StateError):
        tc.sgd_step([tc.Parameter(np.zeros(1))], 0.1)


def test_grad_check_linear(rng):
    x = T(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 3))
    assert tc.grad_check(lambda: tc.dot_const(x, w), [x]) < 1e-9


def test_grad_check_refines_step_at_kinks():
    # rectifier with the kink 5e-6 above the evaluation point: a 1e-5 step straddles it
    x = T(np.array([-5e-6]))

    def fn():
        return tc.dot_const(tc.rrelu(x, 0.25, 0.25), np.ones(1))

    assert tc.grad_check(fn, [x], eps=1e-5) > 0.1
    assert tc.grad_check(fn, [x], eps=1e-5, refine=2) < 1e-9


def test_grad_check_refinement_still_catches_wrong_gradients():
    x = T(np.array([0.3, -0.7]))

    def fn():
        y = tc.dot_const(x, np.ones(2))
        # forward is 1.5 * sum(x) but the backward claims sum(x)
        return tc.Tensor(1.5 * y.data, _parents=(y,), _backward=lambda g: (g,))

    assert tc.grad_check(fn, [x], refine=3) > 0.3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_layer_passes_grad_check(seed):
    errs = check_layers(seed)
    assert max(errs.values()) < TOLERANCE, errs


def test_checkpoint_byte_exact_roundtrip(tmp_path, rng):
    arrays = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4).astype(np.float32),
              "c": np.arange(5, dtype=np.int64)}
    tc.save_checkpoint(tmp_path / "x.ckpt", arrays, {"k": 1}, {"e": [1, 2]})
    back, config, extra = tc.load_checkpoint(tmp_path / "x.ckpt")
    assert config == {"k": 1} and extra == {"e": [1, 2]}
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])
    tc.save_checkpoint(tmp_path / "y.ckpt", back, config, extra)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    (tmp_path / "z.ckpt").write_bytes(b"garbage")
    with pytest.raises(tc.CheckpointError):
        tc.load_checkpoint(tmp_path / "z.ckpt")
