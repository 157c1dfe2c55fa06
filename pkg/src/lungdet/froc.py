"""FROC analysis: detection/ground-truth matching, curve sweep and summary scores."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

LUNA_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
NEW_RATES = (1.0, 2.0, 4.0)

TP, FP, IGNORED = 1, 0, -1


class InputError(ValueError):
    pass


@dataclass
class ScanTruth:
    uid: str
    nodules: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))     # x y z d
    irrelevant: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        self.nodules = np.asarray(self.nodules, dtype=np.float64).reshape(-1, 4)
        self.irrelevant = np.asarray(self.irrelevant, dtype=np.float64).reshape(-1, 4)
        if np.any(self.nodules[:, 3] <= 0) or np.any(self.irrelevant[:, 3] <= 0):
            raise InputError(f"{self.uid}: diameters must be positive")


def build_truths(uids, annotations: dict | None = None, irrelevant: dict | None = None) -> dict:
    """One :class:`ScanTruth` per uid; duplicate uids are rejected."""
    uids = list(uids)
    if len(set(uids)) != len(uids):
        raise InputError("duplicate scan ids")
    annotations = annotations or {}
    irrelevant = irrelevant or {}
    return {u: ScanTruth(u, annotations.get(u, np.zeros((0, 4))), irrelevant.get(u, np.zeros((0, 4))))
            for u in uids}


@dataclass
class ScanMatch:
    uid: str
    scores: np.ndarray     # detections in descending score order
    labels: np.ndarray     # TP / FP / IGNORED per detection
    gt_index: np.ndarray   # matched gt for TP, else -1
    hit: np.ndarray        # per gt: credited by some detection

    @property
    def n_nodules(self) -> int:
        return int(self.hit.size)


def match_scan(dets, truth: ScanTruth, ignore_irrelevant: bool = True) -> ScanMatch:
    """Label detections of one scan.

    A detection hits a nodule when its centre lies closer than the nodule
    radius.  Each nodule is credited once, to its highest-scoring hit; later
    hits on a credited nodule are ignored, as are detections on irrelevant
    findings.  Everything else is a false positive.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 5)
    dets = dets[np.argsort(-dets[:, 0], kind="stable")]
    n = dets.shape[0]
    gts = truth.nodules
    labels = np.full(n, FP, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    hit = np.zeros(gts.shape[0], dtype=bool)
    if n:
        dist = np.linalg.norm(dets[:, None, 1:4] - gts[None, :, :3], axis=2) if gts.size else np.zeros((n, 0))
        inside = dist < gts[None, :, 3] / 2 if gts.size else np.zeros((n, 0), dtype=bool)
        irr = truth.irrelevant
        if ignore_irrelevant and irr.size:
            d_irr = np.linalg.norm(dets[:, None, 1:4] - irr[None, :, :3], axis=2)
            on_irr = np.any(d_irr < irr[None, :, 3] / 2, axis=1)
        else:
            on_irr = np.zeros(n, dtype=bool)
        for i in range(n):
            cands = np.flatnonzero(inside[i])
            if cands.size:
                fresh = cands[~hit[cands]]
                if fresh.size:
                    g = fresh[np.argmin(dist[i, fresh])]
                    hit[g] = True
                    labels[i] = TP
                    gt_index[i] = g
                else:
                    labels[i] = IGNORED
            elif on_irr[i]:
                labels[i] = IGNORED
    return ScanMatch(truth.uid, dets[:, 0].copy(), labels, gt_index, hit)


@dataclass
class FrocCurve:
    thresholds: np.ndarray
    fp_per_scan: np.ndarray
    sensitivity: np.ndarray
    n_scans: int
    n_nodules: int

    @property
    def points(self) -> list:
        return list(zip(self.fp_per_scan.tolist(), self.sensitivity.tolist()))


def build_curve(matches) -> FrocCurve:
    """Sweep the score threshold over all distinct detection scores.

    The first point (threshold +inf) is always ``(0, 0)``.
    """
    matches = list(matches)
    if not matches:
        raise InputError("need at least one scan")
    n_nodules = sum(m.n_nodules for m in matches)
    if n_nodules == 0:
        raise InputError("sensitivity undefined without ground-truth nodules")
    scores = np.concatenate([m.scores for m in matches]) if matches else np.zeros(0)
    labels = np.concatenate([m.labels for m in matches]).astype(np.int64)
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    tp = np.cumsum(labels == TP)
    fp = np.cumsum(labels == FP)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True)) if scores.size else np.zeros(0, int)
    n_scans = len(matches)
    thresholds = np.concatenate([[np.inf], scores[ends]])
    fps = np.concatenate([[0.0], fp[ends] / n_scans])
    sens = np.concatenate([[0.0], tp[ends] / n_nodules])
    return FrocCurve(thresholds, fps, sens, n_scans, n_nodules)


def sensitivity_at(curve: FrocCurve, fp_rate: float) -> float:
    """Linear interpolation between adjacent sweep points; clamps beyond the last one.

    At an FP rate shared by several sweep points the highest sensitivity is
    used; between two rates the top of the lower run is joined to the bottom
    of the upper run.
    """
    if fp_rate <= 0:
        raise ValueError("fp_rate must be positive")
    fps, sens = np.asarray(curve.fp_per_scan, float), np.asarray(curve.sensitivity, float)
    if fps[0] > 0:
        fps = np.concatenate([[0.0], fps])
        sens = np.concatenate([[0.0], sens])
    i = int(np.searchsorted(fps, fp_rate, side="right")) - 1
    if i == fps.size - 1 or fps[i] == fp_rate:
        return float(sens[i])
    w = (fp_rate - fps[i]) / (fps[i + 1] - fps[i])
    return float(sens[i] + w * (sens[i + 1] - sens[i]))


def mean_sensitivity(curve: FrocCurve, rates) -> float:
    return float(np.mean([sensitivity_at(curve, r) for r in rates]))


def froc_luna(curve: FrocCurve) -> float:
    return mean_sensitivity(curve, LUNA_RATES)


def froc_new(curve: FrocCurve) -> float:
    return mean_sensitivity(curve, NEW_RATES)


def froc_scores_from_sensitivities(sensitivities, rates=LUNA_RATES) -> dict:
    """FROC summaries from sensitivities already read off at ``rates``."""
    table = dict(zip((float(r) for r in rates), (float(s) for s in sensitivities)))
    if len(table) != len(sensitivities):
        raise InputError("one sensitivity per rate expected")
    out = {}
    if all(r in table for r in LUNA_RATES):
        out["froc_luna"] = float(np.mean([table[r] for r in LUNA_RATES]))
    if all(r in table for r in NEW_RATES):
        out["froc_new"] = float(np.mean([table[r] for r in NEW_RATES]))
    return out


def evaluate(detections: dict, truths: dict, ignore_irrelevant: bool = True):
    """Match every scan in ``truths`` (scans without detections included)."""
    matches = [match_scan(detections.get(uid, np.zeros((0, 5))), truths[uid], ignore_irrelevant)
               for uid in sorted(truths)]
    curve = build_curve(matches)
    return curve, matches


def summary_text(curve: FrocCurve) -> str:
    lines = [f"scans: {curve.n_scans}  nodules: {curve.n_nodules}"]
    for r in LUNA_RATES:
        lines.append(f"  sensitivity @ {r:g} FP/scan: {sensitivity_at(curve, r):.4f}")
    lines.append(f"FROC[luna] (mean over {', '.join(f'{r:g}' for r in LUNA_RATES)}): {froc_luna(curve):.4f}")
    lines.append(f"FROC[new]  (mean over {', '.join(f'{r:g}' for r in NEW_RATES)}): {froc_new(curve):.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def read_annotations_csv(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["seriesuid"], []).append(
                [float(row["coordX"]), float(row["coordY"]), float(row["coordZ"]), float(row["diameter_mm"])])
    return {k: np.asarray(v).reshape(-1, 4) for k, v in out.items()}


def write_annotations_csv(path, per_scan: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"])
        for uid in sorted(per_scan):
            for x, y, z, d in np.asarray(per_scan[uid]).reshape(-1, 4):
                w.writerow([uid, repr(float(x)), repr(float(y)), repr(float(z)), repr(float(d))])


def write_curve_csv(path, curve: FrocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fp_per_scan", "sensitivity"])
        for t, f, s in zip(curve.thresholds, curve.fp_per_scan, curve.sensitivity):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(s))])
