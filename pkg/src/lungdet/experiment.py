"""Synthetic end-to-end experiment: phantoms -> preprocessing -> training -> detection -> FROC.

Runs the anchor-updating schedule and, optionally, the fixed-anchor ablation on
the same split and seed.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, micro_run_config
from .detnet import build_detector
from .froc import (
    LUNA_RATES, NEW_RATES, build_truths, evaluate, froc_luna, froc_new, sensitivity_at, write_curve_csv,
)
from .infer import detect_volume, write_detections_csv
from .lungseg import preprocess
from .synth import fold_assignment, generate_phantom, phantom_uid
from .trainer import TrainScan, train

log = logging.getLogger(__name__)


@dataclass
class Split:
    train: list       # TrainScan
    test: list        # TrainScan
    info: dict


def build_split(cfg: RunConfig, test_fold: int = 0) -> Split:
    """Render ``cfg.synth.n_scans`` phantoms and preprocess them; fold ``test_fold`` is held out."""
    n = cfg.synth.n_scans
    children = np.random.SeedSequence(cfg.synth.seed).spawn(n)
    folds = fold_assignment(n, cfg.synth.seed)
    pp = cfg.preprocess
    train_scans, test_scans, fallbacks = [], [], []
    for i, child in enumerate(children):
        uid = phantom_uid(i)
        ph = generate_phantom(cfg.synth.phantom, child, uid)
        res = preprocess(ph.volume, pp.spacing_mm, pp.hu_cutoff, pp.closing_radius, pp.volume_range_l,
                         pp.margin_mm, pp.allow_fallback)
        if res.fallback:
            fallbacks.append(uid)
        scan = TrainScan(uid, res.volume, ph.truth.nodules)
        (test_scans if folds[i] == test_fold else train_scans).append(scan)
    info = {"n_train": len(train_scans), "n_test": len(test_scans), "fallbacks": fallbacks,
            "train_nodules": int(sum(len(s.gts) for s in train_scans)),
            "test_nodules": int(sum(len(s.gts) for s in test_scans))}
    return Split(train_scans, test_scans, info)


def detect_all(model, scans, cfg: RunConfig) -> dict:
    ic = cfg.infer
    return {s.uid: detect_volume(model, s.volume, ic.score_threshold, ic.merge, ic.nms_iou, ic.overlap,
                                 ic.soft_sigma, max_candidates=ic.max_candidates) for s in scans}


def score_detections(dets: dict, scans, cfg: RunConfig):
    truths = build_truths([s.uid for s in scans], {s.uid: s.gts for s in scans})
    curve, _ = evaluate(dets, truths, cfg.eval.ignore_irrelevant)
    metrics = {
        "froc_luna": froc_luna(curve),
        "froc_new": froc_new(curve),
        "sensitivity": {str(r): sensitivity_at(curve, r) for r in sorted(set(LUNA_RATES) | set(NEW_RATES))},
        "max_sensitivity": float(curve.sensitivity.max()),
        "n_scans": curve.n_scans,
        "n_nodules": curve.n_nodules,
    }
    return curve, metrics


def run_arm(split: Split, cfg: RunConfig, fixed_anchors: bool, out_dir=None) -> dict:
    """Train one model on ``split.train`` and score it on ``split.test``."""
    t0 = time.perf_counter()
    cfg.train.fixed_anchors = fixed_anchors
    dtype = np.float64 if cfg.runtime.dtype == "float64" else np.float32
    model = build_detector(cfg.detector, cfg.runtime.model_seed, dtype)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    model, state, records = train(model, split.train, cfg.train, out)
    t_train = time.perf_counter() - t0
    dets = detect_all(model, split.test, cfg)
    curve, metrics = score_detections(dets, split.test, cfg)
    if out is not None:
        write_detections_csv(out / "detections.csv", dets)
        write_curve_csv(out / "froc_curve.csv", curve)
    metrics.update({
        "fixed_anchors": fixed_anchors,
        "anchor_counts": [r["anchors"] for r in records],
        "losses": [r["loss"] for r in records],
        "final_lr": state.lr,
        "train_seconds": round(t_train, 1),
        "total_seconds": round(time.perf_counter() - t0, 1),
    })
    return metrics


def run_experiment(cfg: RunConfig | None = None, out_dir=None, arms=("updating", "fixed")) -> dict:
    cfg = cfg or micro_run_config()
    t0 = time.perf_counter()
    split = build_split(cfg)
    log.info("split: %s", split.info)
    results = {"split": split.info, "config": cfg.to_dict()}
    for arm in arms:
        sub = None if out_dir is None else Path(out_dir) / arm
        arm_cfg = RunConfig.from_dict(cfg.to_dict())
        results[arm] = run_arm(split, arm_cfg, fixed_anchors=(arm == "fixed"), out_dir=sub)
        log.info("%s: FROC[new] %.4f  FROC[luna] %.4f  sens@4 %.4f", arm, results[arm]["froc_new"],
                 results[arm]["froc_luna"], results[arm]["sensitivity"]["4.0"])
    results["wall_seconds"] = round(time.perf_counter() - t0, 1)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


def main(argv=None):
    import argparse

    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/synthetic_e2e")
    ap.add_argument("--config", help="RunConfig JSON (defaults to the micro preset)")
    ap.add_argument("--arms", nargs="+", default=["updating", "fixed"], choices=["updating", "fixed"])
    ap.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = RunConfig.load(args.config) if args.config else micro_run_config()
    cfg = cfg.with_overrides(args.set)
    res = run_experiment(cfg, args.out, tuple(args.arms))
    for arm in args.arms:
        m = res[arm]
        print(f"{arm}: FROC[new]={m['froc_new']:.4f} FROC[luna]={m['froc_luna']:.4f} "
              f"sens@4={m['sensitivity']['4.0']:.4f}")


if __name__ == "__main__":
    main()
