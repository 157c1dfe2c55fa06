import numpy as np
import pytest
from hypothesis import given, strategies as st

from lungdet.anchorgeom import iou_matrix
from lungdet.detnet import ConfigError, build_detector, micro_config
from lungdet.infer import (
    decode_proposals, detect_volume, extract_patch, patch_corner_world, from_detection_list, nms, read_detections_csv, soft_nms,
    tile_grid, tile_starts, to_detection_list, write_detections_csv,
)
from lungdet.volio import Volume

from oracles import nms_reference


def test_tile_examples():
    assert tile_starts(64, 64, 32) == [0]
    assert tile_starts(2 * 64 - 32, 64, 32) == [0, 32]
    with pytest.raises(ValueError):
        tile_starts(100, 64, 64)


@given(st.integers(1, 300), st.sampled_from([16, 32, 64]), st.integers(0, 15))
def test_tiles_cover_every_voxel(n, gamma, overlap):
    starts = tile_starts(n, gamma, overlap)
    covered = np.zeros(n, bool)
    for s in starts:
        covered[max(s, 0):max(0, min(s + gamma, n))] = True
    assert covered.all()
    assert all(b - a <= gamma - overlap for a, b in zip(starts, starts[1:]))


def test_tile_grid_product():
    assert len(tile_grid((40, 100, 64), 64, 32)) == 1 * 3 * 1


def test_decode_examples():
    g, anchors = 16, (5.0,)
    grid = np.zeros((4, 4, 4, 1, 5))
    grid[..., 0] = -30
    grid[1, 2, 3, 0, 0] = 0.0
    dets = decode_proposals([(4, grid)], (100.0, 200.0, 300.0), g, anchors, score_threshold=0.1)
    assert dets.shape == (1, 5)
    assert dets[0, 0] == 0.5
    # t = 0 gives the anchor box of cell (x3, y2, z1)
    assert np.allclose(dets[0, 1:], [100 + 14, 200 + 10, 300 + 6, 5.0])


def test_nms_examples():
    assert nms(np.zeros((0, 5))).shape == (0, 5)
    out = nms([[0.8, 0, 0, 0, 5], [0.9, 0, 0, 0, 5]])
    assert out.tolist() == [[0.9, 0, 0, 0, 5]]


def test_nms_matches_reference():
    r = np.random.default_rng(0)
    for _ in range(100):
        n = int(r.integers(0, 40))
        dets = np.column_stack([np.round(r.random(n), 2), r.uniform(0, 30, (n, 3)), r.uniform(2, 12, n)])
        thr = float(r.choice([0.0, 0.1, 0.3, 0.5]))
        got = nms(dets, thr)
        assert np.array_equal(got, nms_reference(dets, thr))
        if len(got) > 1:
            ious = iou_matrix(got[:, 1:], got[:, 1:])
            assert np.all(ious[np.triu_indices(len(got), 1)] <= thr)


def test_soft_nms_examples():
    sep = np.array([[0.9, 0, 0, 0, 4], [0.7, 50, 0, 0, 4]])
    assert np.array_equal(soft_nms(sep), sep)
    dup = np.array([[0.9, 0, 0, 0, 4], [0.8, 0, 0, 0, 4]])
    out = soft_nms(dup, sigma=0.5, score_floor=0.0)
    assert np.isclose(out[1, 0], 0.8 * np.exp(-1 / 0.5))
    with pytest.raises(ValueError):
        soft_nms(dup, sigma=0)


def test_soft_nms_small_sigma_matches_hard_nms():
    r = np.random.default_rng(1)
    centres = np.array([[0, 0, 0], [40, 0, 0], [0, 40, 0]], float)
    rows = []
    for c in centres:
        for _ in range(4):
            rows.append([r.uniform(0.3, 1), *(c + r.uniform(-1, 1, 3)), 8.0])
    dets = np.asarray(rows)
    hard = nms(dets, 0.1)
    soft = soft_nms(dets, sigma=1e-3, score_floor=0.05)
    assert np.array_equal(soft, hard)


def _hot_grids(target, origin, gamma=16, strides=(4, 8), n_anchors=3):
    """Head grids with one confident cell (stride 4, anchor 1) covering ``target``."""
    out = []
    for s in strides:
        n = gamma // s
        grid = np.full((n, n, n, n_anchors, 5), 0.0)
        grid[..., 0] = -10
        local = np.asarray(target) - origin
        cell = np.floor(local / s).astype(int)
        if s == strides[0] and np.all((cell >= 0) & (cell < n)):
            grid[cell[2], cell[1], cell[0], 1, 0] = 10
            grid[cell[2], cell[1], cell[0], 1, 1:4] = (local - (cell + 0.5) * s) / 10.0
        out.append((s, grid))
    return out


def test_duplicates_from_overlapping_patches_merge():
    v = Volume(np.zeros((24, 24, 24), np.float32))
    target = (12.0, 12.0, 12.0)
    raw = []
    for start in tile_grid(v.shape, 16, 8):
        origin = patch_corner_world(v, start)
        raw.append(decode_proposals(_hot_grids(target, origin), origin, 16, (5.0, 10.0, 22.0), 0.5))
    raw = np.concatenate(raw)
    assert len(raw) > 1
    merged = nms(raw, 0.1)
    assert len(merged) == 1 and np.allclose(merged[0, 1:4], target, atol=1e-9)


def test_detect_volume_threshold_and_determinism():
    m = build_detector(micro_config(32), seed=0)
    v = Volume(np.random.default_rng(0).random((40, 36, 33)).astype(np.float32))
    a = detect_volume(m, v, score_threshold=0.0, overlap=8)
    b = detect_volume(m, v, score_threshold=0.0, overlap=8)
    assert np.array_equal(a, b) and len(a) > 0
    assert detect_volume(m, v, score_threshold=1.0, overlap=8).shape == (0, 5)
    with pytest.raises(ConfigError):
        detect_volume(m, Volume(v.data, (2, 2, 2)))


def test_extract_patch_padding():
    data = np.arange(27.0).reshape(3, 3, 3)
    p = extract_patch(data, (-1, -1, -1), 3)
    assert p[0].sum() == 0 and p[1, 1, 1] == data[0, 0, 0]
    assert extract_patch(data, (10, 10, 10), 2).sum() == 0


def test_detections_csv_roundtrip(tmp_path, rng):
    dets = {"a": np.column_stack([rng.random(3), rng.normal(size=(3, 3)), rng.uniform(1, 9, 3)]),
            "b": np.zeros((0, 5))}
    write_detections_csv(tmp_path / "d.csv", dets)
    back = read_detections_csv(tmp_path / "d.csv")
    assert np.array_equal(back["a"], dets["a"]) and "b" not in back
    assert np.array_equal(from_detection_list(to_detection_list(dets["a"])), dets["a"])
