"""Gradient verification suites for the layer library and the micro detector (64-bit)."""
from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .anchorgeom import assign_targets, grid_anchor_boxes
from .detnet import ResidualBlock, build_detector, micro_config
from .sampler import detection_loss

TOLERANCE = 1e-4


def _t(rng, shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        # keep entries clear of the rectifier kink
        x = np.sign(x) * (np.abs(x) + 0.05)
    return tc.Tensor(x, requires_grad=True)


def _distinct(rng, shape):
    """Entries with pairwise gaps of at least 0.01, so pooling argmaxes are stable."""
    n = int(np.prod(shape))
    return tc.Tensor((rng.permutation(n) * 0.01 - n * 0.005).reshape(shape), requires_grad=True)


def layer_cases(seed: int) -> dict:
    """``name -> (fn, inputs)`` for one random instance of every layer type."""
    rng = np.random.default_rng(seed)
    cases = {}

    def proj(shape):
        return rng.normal(size=shape)

    x = _t(rng, (2, 3, 5, 4, 6))
    w = _t(rng, (4, 3, 3, 3, 3))
    b = _t(rng, (4,))
    c1 = proj(tc.conv3d(x, w, b, 1, 1).shape)
    cases["conv3d_s1"] = (lambda: tc.dot_const(tc.conv3d(x, w, b, 1, 1), c1), [x, w, b])
    x2 = _t(rng, (1, 2, 6, 5, 7))
    w2 = _t(rng, (3, 2, 3, 3, 3))
    c2 = proj(tc.conv3d(x2, w2, None, 2, 1).shape)
    cases["conv3d_s2"] = (lambda: tc.dot_const(tc.conv3d(x2, w2, None, 2, 1), c2), [x2, w2])
    w3 = _t(rng, (5, 3, 1, 1, 1))
    c3 = proj(tc.conv3d(x, w3, None, 1, 0).shape)
    cases["conv3d_1x1"] = (lambda: tc.dot_const(tc.conv3d(x, w3, None, 1, 0), c3), [x, w3])

    xb = _t(rng, (2, 3, 3, 4, 2))
    gamma = _t(rng, (3,))
    beta = _t(rng, (3,))
    cb = proj(xb.shape)
    rm, rv = np.zeros(3), np.ones(3)
    cases["batchnorm_train"] = (
        lambda: tc.dot_const(tc.batchnorm3d(xb, gamma, beta, rm.copy(), rv.copy(), True), cb), [xb, gamma, beta])
    rm2, rv2 = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    cases["batchnorm_eval"] = (
        lambda: tc.dot_const(tc.batchnorm3d(xb, gamma, beta, rm2, rv2, False), cb), [xb, gamma, beta])

    xr = _t(rng, (2, 2, 3, 3, 3), away_from_zero=True)
    cr = proj(xr.shape)
    rseed = int(rng.integers(2 ** 31))
    cases["rrelu_train"] = (
        lambda: tc.dot_const(tc.rrelu(xr, training=True, rng=np.random.default_rng(rseed)), cr), [xr])
    cases["rrelu_eval"] = (lambda: tc.dot_const(tc.rrelu(xr, training=False), cr), [xr])

    xp = _distinct(rng, (1, 2, 4, 4, 6))
    cp = proj((1, 2, 2, 2, 3))
    cases["maxpool3d"] = (lambda: tc.dot_const(tc.maxpool3d(xp, 2, 2), cp), [xp])
    xu = _t(rng, (1, 2, 2, 3, 2))
    cu = proj((1, 2, 4, 6, 4))
    cases["upsample_nearest3d"] = (lambda: tc.dot_const(tc.upsample_nearest3d(xu, 2), cu), [xu])

    ya, yb = _t(rng, (2, 3, 2, 2, 2)), _t(rng, (2, 3, 2, 2, 2))
    cy = proj(ya.shape)
    cases["add"] = (lambda: tc.dot_const(tc.add(ya, yb), cy), [ya, yb])
    cc = proj((2, 6, 2, 2, 2))
    cases["concat_channels"] = (lambda: tc.dot_const(tc.concat_channels(ya, yb), cc), [ya, yb])
    ct = proj((2, 2, 2, 2, 3))
    cases["transpose_reshape"] = (
        lambda: tc.dot_const(tc.reshape(tc.transpose(ya, (0, 2, 3, 4, 1)), (2, 2, 2, 2, 3)), ct), [ya])
    m = _t(rng, (7, 5))
    rows = np.array([0, 3, 3, 6])
    cases["take"] = (lambda: tc.sum_all(tc.mul_scalar(tc.take(m, (rows, 0)), 1.5)), [m])
    cases["mean_all"] = (lambda: tc.mean_all(tc.take(m, (rows[:, None], np.arange(1, 5)[None, :]))), [m])

    z = _t(rng, (9,))
    yl = (rng.random(9) < 0.5).astype(float)
    cases["bce_with_logits"] = (lambda: tc.bce_with_logits(z, yl), [z])
    p = _t(rng, (6, 4))
    # targets offset from the predictions so no residual sits on the |u| = 1 kink
    tgt = p.data + np.where(rng.random((6, 4)) < 0.5, 0.4, 2.0) * rng.choice([-1, 1], size=(6, 4))
    cases["smooth_l1"] = (lambda: tc.smooth_l1(p, tgt), [p])

    blk = ResidualBlock(2, 3, lambda: _EvalAct(), rng, np.float64, norm=True)
    xbk = _t(rng, (2, 2, 4, 4, 4))
    cbk = proj((2, 3, 4, 4, 4))
    cases["residual_block"] = (lambda: tc.dot_const(blk(xbk), cbk), [xbk] + blk.parameters())
    return cases


class _EvalAct:
    """Deterministic rectifier (midpoint slope) for the block check."""

    def __call__(self, x):
        return tc.rrelu(x, training=False)


def check_layers(seed: int, eps: float = 1e-5) -> dict:
    return {name: tc.grad_check(fn, inputs, eps=eps) for name, (fn, inputs) in layer_cases(seed).items()}


def check_detector(seed: int, patch_size: int = 32, max_entries: int = 3, eps: float = 1e-6) -> float:
    """Gradient check of a float64 micro detector through the detection loss.

    Training mode is used (batch statistics, random rectifier slopes drawn
    from a generator re-seeded on every evaluation).  ``max_entries`` entries
    of every parameter tensor, plus the input, are checked.  The step is
    smaller than for single layers: with ~10^5 rectifier and pooling
    decisions in the network, a 1e-5 perturbation of an early weight flips
    some of them and the difference quotient straddles a kink.  Entries whose
    one-sided quotients still disagree are re-measured with smaller steps.
    """
    cfg = micro_config(patch_size)
    model = build_detector(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = tc.Tensor(rng.random((1, 1, patch_size, patch_size, patch_size)), requires_grad=True)
    table = grid_anchor_boxes(patch_size, cfg.head_strides, cfg.anchors)
    centre = rng.uniform(8, patch_size - 8, size=3)
    ta = assign_targets(table, [[*centre, rng.uniform(4, 12)]])
    grids = model.forward(x, training=True, rng=np.random.default_rng(seed))
    weights = [rng.normal(size=g.grid.shape) * 0.1 for g in grids]
    act_seed = seed + 1

    def objective():
        gs = model.forward(x, training=True, rng=np.random.default_rng(act_seed))
        loss, _ = detection_loss(gs, [ta], k=5)
        for g, wgt in zip(gs, weights):
            loss = tc.add(loss, tc.dot_const(g.grid, wgt))
        return loss

    return tc.grad_check(objective, [x] + model.parameters(), eps=eps, max_entries=max_entries,
                         rng=np.random.default_rng(seed), refine=2)


def run_suite(seeds=range(20), detector_seeds=None, max_entries: int = 3) -> dict:
    """Run the layer checks for every seed and the detector check for ``detector_seeds``."""
    seeds = list(seeds)
    detector_seeds = seeds if detector_seeds is None else list(detector_seeds)
    layer_worst: dict = {}
    for s in seeds:
        for name, err in check_layers(s).items():
            layer_worst[name] = max(layer_worst.get(name, 0.0), err)
    det = {s: check_detector(s, max_entries=max_entries) for s in detector_seeds}
    worst = max(list(layer_worst.values()) + list(det.values()))
    return {"layers": layer_worst, "detector": det, "max_rel_err": worst, "passed": worst < TOLERANCE}
