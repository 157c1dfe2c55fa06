"""Round-based training with anchor-based patch sampling and false-positive mining."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .anchorgeom import assign_targets, grid_anchor_boxes
from .detnet import PAPER_ANCHORS, ConfigError
from .infer import detect_volume
from .sampler import (
    FALSE_POSITIVE, GROUND_TRUTH, SamplingAnchorSet, augment, crop_patch, detection_loss,
    update_sampling_anchors,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    patch_size: int = 96
    pos_iou: float = 0.3
    neg_iou: float = 0.001
    hard_negatives: int = 5
    epochs_per_round: int = 100
    total_epochs: int = 500
    lr: float = 1e-3
    lr_decay: float = 0.1
    max_decays: int = 3
    plateau_patience: int = 20
    plateau_min_improvement: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    anchors: tuple = PAPER_ANCHORS
    jitter_mm: float = 16.0
    augment: bool = True
    reg_weight: float = 1.0
    fp_score_threshold: float = 0.3
    fp_cap: int = 20
    anchor_merge_mm: float = 1.0
    fixed_anchors: bool = False
    infer_overlap: int = 32
    nms_iou: float = 0.1

    def __post_init__(self):
        self.anchors = tuple(float(a) for a in self.anchors)

    def validate(self):
        if self.epochs_per_round < 1 or self.total_epochs < 1:
            raise ConfigError("epoch counts must be positive")
        if not (0 <= self.neg_iou < self.pos_iou <= 1):
            raise ConfigError("IOU thresholds must satisfy 0 <= neg < pos <= 1")
        if self.hard_negatives < 1 or self.batch_size < 1:
            raise ConfigError("hard_negatives and batch_size must be >= 1")
        return self

    def to_dict(self):
        d = asdict(self)
        d["anchors"] = list(self.anchors)
        return d


@dataclass
class TrainScan:
    uid: str
    volume: object            # preprocessed Volume
    gts: np.ndarray           # (k, 4) world boxes x y z d


@dataclass
class TrainState:
    epoch: int = 0
    round: int = 0
    lr: float = 1e-3
    decays: int = 0
    best_loss: float = math.inf
    wait: int = 0
    anchors: SamplingAnchorSet = field(default_factory=SamplingAnchorSet)
    loss_history: list = field(default_factory=list)
    rng_state: dict | None = None

    def to_dict(self):
        return {"epoch": self.epoch, "round": self.round, "lr": self.lr, "decays": self.decays,
                "best_loss": self.best_loss if math.isfinite(self.best_loss) else None,
                "wait": self.wait, "anchors": self.anchors.to_list(),
                "loss_history": self.loss_history, "rng_state": self.rng_state}

    @classmethod
    def from_dict(cls, d):
        return cls(d["epoch"], d["round"], d["lr"], d["decays"],
                   math.inf if d["best_loss"] is None else d["best_loss"], d["wait"],
                   SamplingAnchorSet.from_list(d["anchors"]), list(d["loss_history"]), d["rng_state"])


def lr_schedule_step(state: TrainState, latest_loss: float, cfg: TrainConfig) -> float:
    """Decay the learning rate by ``lr_decay`` when the epoch loss plateaus.

    A plateau is ``plateau_patience`` consecutive epochs without beating the
    best loss by more than ``plateau_min_improvement`` (relative).  At most
    ``max_decays`` decays happen.
    """
    if not math.isfinite(latest_loss):
        raise DivergenceError(f"non-finite loss {latest_loss}")
    if latest_loss < state.best_loss * (1 - cfg.plateau_min_improvement) or not math.isfinite(state.best_loss):
        state.best_loss = latest_loss
        state.wait = 0
        return state.lr
    state.wait += 1
    if state.wait >= cfg.plateau_patience and state.decays < cfg.max_decays:
        state.lr *= cfg.lr_decay
        state.decays += 1
        state.wait = 0
        state.best_loss = latest_loss
    return state.lr


def mine_false_positives(model, volume, gts, score_threshold: float = 0.3, cap: int = 20,
                         overlap: int = 32, nms_iou: float = 0.1) -> np.ndarray:
    """Centres of detections scoring ``>= score_threshold`` that hit no ground truth.

    A detection hits a gt when its centre is closer than the gt radius.  At most
    ``cap`` points are returned, highest score first.
    """
    dets = detect_volume(model, volume, score_threshold=score_threshold, overlap=overlap, nms_iou=nms_iou)
    return filter_false_positives(dets, gts, cap)


def filter_false_positives(dets, gts, cap: int = 20) -> np.ndarray:
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 5)
    dets = dets[np.argsort(-dets[:, 0], kind="stable")]
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if gts.shape[0]:
        dist = np.linalg.norm(dets[:, None, 1:4] - gts[None, :, :3], axis=2)
        miss = np.all(dist >= gts[None, :, 3] / 2, axis=1)
        dets = dets[miss]
    return dets[:cap, 1:4]


def initial_anchors(dataset) -> SamplingAnchorSet:
    gt = [(i, tuple(b[:3])) for i, scan in enumerate(dataset) for b in np.asarray(scan.gts).reshape(-1, 4)]
    return update_sampling_anchors(gt, [], 0)


def _rng_from_state(state: TrainState, seed: int):
    rng = np.random.default_rng(seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    return rng


def save_training_checkpoint(path, model, state: TrainState, cfg: TrainConfig):
    tc.save_checkpoint(path, model.state_arrays(), config={"detector": model.cfg.to_dict(), "train": cfg.to_dict()},
                       extra={"state": state.to_dict(), "dtype": model.dtype.name})


def load_training_checkpoint(path, model):
    arrays, config, extra = tc.load_checkpoint(path)
    model.load_state_arrays(arrays)
    return TrainState.from_dict(extra["state"]), config


def train(model, dataset, cfg: TrainConfig, out_dir=None, state: TrainState | None = None, mine_fn=None,
          stop_after_round: int | None = None):
    """Train ``model`` in rounds of ``epochs_per_round`` epochs.

    After every round except the last, false positives mined from all training
    volumes replace the previous round's: ``anchors = S_gt ∪ S_fp``.  Writes a
    JSON-lines log and per-round checkpoints when ``out_dir`` is given.
    ``mine_fn(model, scan_index, scan)`` overrides the mining step.
    Returns ``(model, state, records)``.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("empty training set")
    if model.cfg.patch_size != cfg.patch_size or tuple(model.cfg.anchors) != tuple(cfg.anchors):
        raise ConfigError("detector patch size / anchors differ from the training configuration")
    if state is None:
        state = TrainState(lr=cfg.lr, anchors=initial_anchors(dataset))
    if len(state.anchors) == 0:
        raise tc.StateError("sampling anchor set is empty")
    rng = _rng_from_state(state, cfg.seed)
    gamma = cfg.patch_size
    table = grid_anchor_boxes(gamma, model.cfg.head_strides, model.cfg.anchors)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a")
    records = []
    gt_anchor_list = [(a.scan, a.point) for a in state.anchors if a.source == GROUND_TRUTH]

    try:
        while state.epoch < cfg.total_epochs:
            t0 = time.perf_counter()
            model.train()
            order = rng.permutation(len(state.anchors))
            sums = {"loss": 0.0, "cls": 0.0, "reg": 0.0}
            steps = 0
            for b0 in range(0, len(order), cfg.batch_size):
                batch = [state.anchors.anchors[i] for i in order[b0:b0 + cfg.batch_size]]
                samples = []
                for anchor in batch:
                    scan = dataset[anchor.scan]
                    s = crop_patch(scan.volume, anchor.point, gamma, cfg.jitter_mm, rng, scan.gts)
                    if cfg.augment:
                        s = augment(s, rng)
                    samples.append(s)
                x = np.stack([s.patch for s in samples])[:, None].astype(model.dtype, copy=False)
                tas = [assign_targets(table, s.gts, cfg.pos_iou, cfg.neg_iou) for s in samples]
                grids = model.forward(tc.Tensor(x), training=True, rng=rng)
                loss, parts = detection_loss(grids, tas, cfg.hard_negatives, cfg.reg_weight)
                if not np.isfinite(parts["loss"]):
                    _dump_divergence(out_dir, state, batch, samples, parts)
                    raise DivergenceError(f"non-finite loss at epoch {state.epoch}: {parts}")
                loss.backward()
                tc.sgd_step(model.parameters(), state.lr, cfg.momentum, cfg.weight_decay)
                for key in sums:
                    sums[key] += parts[key]
                steps += 1
            means = {k: v / steps for k, v in sums.items()}
            lr_used = state.lr
            lr_schedule_step(state, means["loss"], cfg)
            state.epoch += 1
            rec = {"epoch": state.epoch, "round": state.round, "lr": lr_used, "loss": means["loss"],
                   "cls": means["cls"], "reg": means["reg"], "anchors": len(state.anchors),
                   "fp_anchors": state.anchors.count(FALSE_POSITIVE),
                   "wall_time": round(time.perf_counter() - t0, 3)}
            state.loss_history.append(means["loss"])
            records.append(rec)
            log.info("epoch %d round %d lr %.2e loss %.4f (cls %.4f reg %.4f) anchors %d", rec["epoch"],
                     rec["round"], lr_used, rec["loss"], rec["cls"], rec["reg"], rec["anchors"])
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()

            round_done = state.epoch % cfg.epochs_per_round == 0 or state.epoch == cfg.total_epochs
            if not round_done:
                continue
            finished_round = state.round
            if state.epoch < cfg.total_epochs:
                if not cfg.fixed_anchors:
                    fps = []
                    for i, scan in enumerate(dataset):
                        if mine_fn is not None:
                            pts = mine_fn(model, i, scan)
                        else:
                            pts = mine_false_positives(model, scan.volume, scan.gts, cfg.fp_score_threshold,
                                                       cfg.fp_cap, cfg.infer_overlap, cfg.nms_iou)
                        fps += [(i, tuple(p)) for p in np.asarray(pts).reshape(-1, 3)]
                    state.anchors = update_sampling_anchors(gt_anchor_list, fps, state.round + 1,
                                                            cfg.anchor_merge_mm)
                state.round += 1
            state.rng_state = rng.bit_generator.state
            if out_dir is not None:
                save_training_checkpoint(out_dir / "checkpoints" / f"round_{finished_round:03d}.ckpt",
                                         model, state, cfg)
            if stop_after_round is not None and finished_round >= stop_after_round:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    state.rng_state = rng.bit_generator.state
    return model, state, records


def _dump_divergence(out_dir, state, batch, samples, parts):
    if out_dir is None:
        return
    dump = {"epoch": state.epoch, "round": state.round, "lr": state.lr, "parts": parts,
            "anchors": [a.to_dict() for a in batch], "records": [s.record for s in samples]}
    (out_dir / "divergence.json").write_text(json.dumps(dump, indent=2, default=str))
