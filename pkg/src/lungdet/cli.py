"""Command-line front end: ``lungdet <synth|preprocess|train|infer|eval|gradcheck|benchmark>``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 data error,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("lungdet")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _limit_threads(n: int | None) -> None:
    # effective only before numpy's BLAS initialises, hence the lazy imports below
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


def _load_config(args):
    from .config import RunConfig, micro_run_config

    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "preset", "micro") == "micro":
        cfg = micro_run_config()
    else:
        cfg = RunConfig().validate()
    cfg = cfg.with_overrides(getattr(args, "set", None) or [])
    if getattr(args, "threads", None):
        cfg.runtime.threads = args.threads
    return cfg


def _save_config(cfg, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")


def _volume_paths(data_dir: Path) -> list:
    return sorted(p for p in data_dir.glob("*.mhd") if not p.name.endswith("_lung.mhd"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import generate_dataset

    cfg = _load_config(args)
    n = args.n_scans if args.n_scans is not None else cfg.synth.n_scans
    seed = args.seed if args.seed is not None else cfg.synth.seed
    cfg.synth.n_scans, cfg.synth.seed = n, seed
    out = Path(args.out)
    info = generate_dataset(out, n, cfg.synth.phantom, seed)
    _save_config(cfg, out)
    print(f"wrote {n} phantoms ({sum(len(a) for a in info['annotations'].values())} nodules) to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    import numpy as np

    from .lungseg import preprocess
    from .volio import Volume, read_metaimage, write_metaimage

    cfg = _load_config(args)
    pp = cfg.preprocess
    src, out = Path(args.data), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _volume_paths(src)
    if not paths:
        raise FileNotFoundError(f"no .mhd volumes in {src}")
    for p in paths:
        res = preprocess(read_metaimage(p), pp.spacing_mm, pp.hu_cutoff, pp.closing_radius, pp.volume_range_l,
                         pp.margin_mm, pp.allow_fallback)
        uid = p.stem
        write_metaimage(res.volume, out / f"{uid}.mhd")
        sidecar = {"crop": res.crop.to_dict(), "fallback": res.fallback}
        (out / f"{uid}.crop.json").write_text(json.dumps(sidecar, indent=2))
        if args.save_masks and res.mask is not None:
            iso = res.crop.parent_volume()
            m = Volume(res.mask.astype(np.uint8), iso.spacing, iso.origin, iso.direction)
            write_metaimage(m, out / f"{uid}_lung.mhd", element_type="MET_UCHAR")
        print(f"{uid}: {res.volume.shape}{'  (fallback: whole volume)' if res.fallback else ''}")
    _save_config(cfg, out)
    return EXIT_OK


def _load_scans(data_dir: Path, annotations_csv, uids=None):
    import numpy as np

    from .froc import read_annotations_csv
    from .trainer import TrainScan
    from .volio import read_metaimage

    ann = read_annotations_csv(annotations_csv) if annotations_csv else {}
    scans = []
    for p in _volume_paths(data_dir):
        if uids is not None and p.stem not in uids:
            continue
        scans.append(TrainScan(p.stem, read_metaimage(p), ann.get(p.stem, np.zeros((0, 4)))))
    if not scans:
        raise FileNotFoundError(f"no usable volumes in {data_dir}")
    return scans


def _split_uids(folds_csv, test_fold, train: bool):
    if folds_csv is None:
        return None
    from .synth import read_folds_csv

    folds = read_folds_csv(folds_csv)
    return {u for u, f in folds.items() if (f != test_fold) == train}


def cmd_train(args) -> int:
    import numpy as np

    from .detnet import build_detector
    from .trainer import load_training_checkpoint, save_training_checkpoint, train

    cfg = _load_config(args)
    if args.fixed_anchors:
        cfg.train.fixed_anchors = True
    out = Path(args.out)
    _save_config(cfg, out)
    uids = _split_uids(args.folds, args.test_fold, train=True)
    scans = _load_scans(Path(args.data), args.annotations, uids)
    dtype = np.float64 if cfg.runtime.dtype == "float64" else np.float32
    model = build_detector(cfg.detector, cfg.runtime.model_seed, dtype)
    state = None
    if args.resume:
        state, _ = load_training_checkpoint(args.resume, model)
    model, state, records = train(model, scans, cfg.train, out, state=state)
    save_training_checkpoint(out / "model.ckpt", model, state, cfg.train)
    last = records[-1] if records else {}
    print(f"trained {state.epoch} epochs over {len(scans)} scans; final loss {last.get('loss', float('nan')):.4f}; "
          f"anchors {len(state.anchors)}")
    return EXIT_OK


def _model_from_checkpoint(path):
    import numpy as np

    from . import tensorcore as tc
    from .detnet import DetectorConfig, build_detector

    arrays, config, extra = tc.load_checkpoint(path)
    det_cfg = DetectorConfig.from_dict(config["detector"])
    model = build_detector(det_cfg, 0, np.dtype(extra.get("dtype", "float32")))
    model.load_state_arrays(arrays)
    return model


def cmd_infer(args) -> int:
    from .infer import detect_volume, write_detections_csv

    cfg = _load_config(args)
    model = _model_from_checkpoint(args.checkpoint)
    uids = _split_uids(args.folds, args.test_fold, train=False)
    scans = _load_scans(Path(args.data), None, uids)
    ic = cfg.infer
    dets = {}
    for s in scans:
        t0 = time.perf_counter()
        dets[s.uid] = detect_volume(model, s.volume, ic.score_threshold, ic.merge, ic.nms_iou, ic.overlap,
                                    ic.soft_sigma, max_candidates=ic.max_candidates)
        print(f"{s.uid}: {len(dets[s.uid])} detections in {time.perf_counter() - t0:.1f}s")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_detections_csv(out, dets)
    _save_config(cfg, out.parent)
    return EXIT_OK


def _eval_operating_points(path) -> int:
    from .froc import LUNA_RATES, froc_scores_from_sensitivities

    doc = json.loads(Path(path).read_text())
    rates = doc.get("rates", list(LUNA_RATES))
    print(f"{'row':<26}{'FROC[luna]':>11}{'FROC[new]':>11}{'reference':>20}")
    for row in doc["rows"]:
        scores = froc_scores_from_sensitivities(row["sensitivities"], rates)
        ref = ""
        if "froc_luna" in row and "froc_new" in row:
            ok = (abs(scores["froc_luna"] - row["froc_luna"]) <= 5e-5
                  and abs(scores["froc_new"] - row["froc_new"]) <= 5e-5)
            ref = f"{row['froc_luna']:.4f} / {row['froc_new']:.4f} {'ok' if ok else 'MISMATCH'}"
        print(f"{row['name']:<26}{scores['froc_luna']:>11.4f}{scores['froc_new']:>11.4f}   {ref}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.operating_points:
        return _eval_operating_points(args.operating_points)
    if not (args.detections and args.annotations):
        from .detnet import ConfigError

        raise ConfigError("eval needs --detections and --annotations (or --operating-points)")
    from .froc import build_truths, evaluate, read_annotations_csv, summary_text, write_curve_csv
    from .infer import read_detections_csv

    cfg = _load_config(args)
    dets = read_detections_csv(args.detections)
    ann = read_annotations_csv(args.annotations)
    irr = read_annotations_csv(args.irrelevant) if args.irrelevant else {}
    if args.uids:
        uids = [u.strip() for u in Path(args.uids).read_text().split() if u.strip()]
    elif args.folds is not None:
        uids = sorted(_split_uids(args.folds, args.test_fold, train=False))
    else:
        uids = sorted(set(dets) | set(ann))
    truths = build_truths(uids, ann, irr)
    curve, _ = evaluate(dets, truths, cfg.eval.ignore_irrelevant)
    text = summary_text(curve)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_curve_csv(out / "froc_curve.csv", curve)
        (out / "froc_summary.txt").write_text(text + "\n")
        _save_config(cfg, out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import TOLERANCE, run_suite

    t0 = time.perf_counter()
    res = run_suite(range(args.seeds), range(args.detector_seeds if args.detector_seeds is not None else args.seeds),
                    max_entries=args.max_entries)
    for name, err in sorted(res["layers"].items()):
        print(f"  {name:<22} max rel err {err:.3e}")
    print(f"  {'micro detector':<22} max rel err {max(res['detector'].values()):.3e} "
          f"over {len(res['detector'])} seeds")
    verdict = "PASS" if res["passed"] else "FAIL"
    print(f"{verdict}: max relative error {res['max_rel_err']:.3e} (tolerance {TOLERANCE:g}) "
          f"in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if res["passed"] else EXIT_CHECK_FAILED


def cmd_benchmark(args) -> int:
    import numpy as np

    from . import tensorcore as tc
    from .anchorgeom import assign_targets, grid_anchor_boxes
    from .detnet import build_detector
    from .infer import detect_volume
    from .lungseg import preprocess
    from .sampler import detection_loss
    from .synth import generate_phantom

    cfg = _load_config(args)
    rows = []

    def timed(name, fn, repeat=1):
        t0 = time.perf_counter()
        for _ in range(repeat):
            value = fn()
        rows.append((name, (time.perf_counter() - t0) / repeat))
        return value

    ph = timed("synthesise phantom", lambda: generate_phantom(cfg.synth.phantom, cfg.synth.seed))
    pp = cfg.preprocess
    res = timed("preprocess", lambda: preprocess(ph.volume, pp.spacing_mm, pp.hu_cutoff, pp.closing_radius,
                                                 pp.volume_range_l, pp.margin_mm, pp.allow_fallback))
    model = build_detector(cfg.detector, cfg.runtime.model_seed,
                           np.float64 if cfg.runtime.dtype == "float64" else np.float32)
    g = cfg.detector.patch_size
    rng = np.random.default_rng(0)
    x = rng.random((1, 1, g, g, g)).astype(model.dtype)
    model.eval()
    timed("forward (eval, one patch)", lambda: model.forward(x), repeat=args.repeat)
    table = grid_anchor_boxes(g, cfg.detector.head_strides, cfg.detector.anchors)
    ta = assign_targets(table, [[g / 2, g / 2, g / 2, 10.0]])

    def step():
        grids = model.forward(tc.Tensor(x), training=True, rng=rng)
        loss, _ = detection_loss(grids, [ta])
        loss.backward()
        tc.sgd_step(model.parameters(), 1e-4)

    timed("training step", step, repeat=args.repeat)
    ic = cfg.infer
    timed("full-volume detection", lambda: detect_volume(model, res.volume, ic.score_threshold, ic.merge,
                                                         ic.nms_iou, ic.overlap, ic.soft_sigma))
    print(f"{'stage':<30}{'seconds':>10}")
    for name, sec in rows:
        print(f"{name:<30}{sec:>10.3f}")
    print(f"{'end-to-end (synth excluded)':<30}{sum(s for n, s in rows if n in ('preprocess', 'full-volume detection')):>10.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--preset", choices=["micro", "paper"], default="micro",
                        help="defaults when no --config is given (default: micro)")
    common.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE",
                        help="override config values, e.g. train.lr=0.001")
    common.add_argument("--threads", type=int, help="bound intra-run parallelism")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="lungdet", description="Single-stage volumetric nodule detection.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scans", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="segment, crop and normalise volumes")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-masks", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train a detector on preprocessed volumes")
    p.add_argument("--data", required=True, help="directory of preprocessed volumes")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", help="fold CSV; the test fold is excluded from training")
    p.add_argument("--test-fold", type=int, default=0)
    p.add_argument("--fixed-anchors", action="store_true", help="never update the sampling anchors")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="detect nodules in preprocessed volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="detections CSV")
    p.add_argument("--folds")
    p.add_argument("--test-fold", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="FROC analysis")
    p.add_argument("--detections")
    p.add_argument("--annotations")
    p.add_argument("--irrelevant")
    p.add_argument("--uids", help="file listing the scans to score (default: all in detections/annotations)")
    p.add_argument("--folds")
    p.add_argument("--test-fold", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--operating-points", help="JSON of per-rate sensitivities; prints FROC[luna]/FROC[new] per row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--detector-seeds", type=int)
    p.add_argument("--max-entries", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("benchmark", parents=[common], help="per-stage timings")
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(func=cmd_benchmark)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .detnet import ConfigError
    from .froc import InputError
    from .lungseg import SegmentationError
    from .synth import PlacementError
    from .tensorcore import CheckpointError
    from .trainer import DivergenceError
    from .volio import FormatError, OrientationError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, OrientationError, SegmentationError, InputError, PlacementError, CheckpointError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
