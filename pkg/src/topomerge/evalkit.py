"""Localization and mapping metrics: Recall/Precision@1, pose-threshold precision, AUC, ATE."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.stats import rankdata

from . import se3
from .errors import DegenerateLabels, TooFewPoses
from .se3 import Pose


@dataclass(frozen=True)
class ToleranceSpec:
    translation: float = 7.5
    rotation: float = 75.0

    def __post_init__(self):
        if not (self.translation > 0 and self.rotation > 0):
            raise ValueError("tolerances must be positive")


PLACE_TOLERANCE = ToleranceSpec(7.5, 75.0)
METRIC_TOLERANCE = ToleranceSpec(1.0, 10.0)


def within(pose_a: Pose, pose_b: Pose, tol: ToleranceSpec) -> bool:
    dt, dr = se3.pose_error(pose_a, pose_b)
    return dt <= tol.translation and dr <= tol.rotation


def valid_matches(query_ids, ref_ids, poses: Mapping[int, Pose], tol: ToleranceSpec = PLACE_TOLERANCE):
    """For each query, the set of reference ids whose true pose lies within ``tol``."""
    ref_ids = list(ref_ids)
    if not ref_ids:
        return {q: set() for q in query_ids}
    ref_t = np.array([poses[r].t for r in ref_ids])
    out = {}
    for q in query_ids:
        near = np.linalg.norm(ref_t - poses[q].t, axis=1) <= tol.translation
        out[q] = {r for r, ok in zip(ref_ids, near) if ok and within(poses[q], poses[r], tol)}
    return out


def recall_precision_at_1(predictions: Mapping, ground_truth: Mapping):
    """(recall, precision, average) of top-1 answers.

    ``predictions`` maps query id to the predicted reference id (or None
    when the system gives no answer); ``ground_truth`` maps every query id
    to its set of valid reference ids (empty when none exists). Undefined
    ratios are returned as None rather than 0.
    """
    has_valid = [q for q, refs in ground_truth.items() if refs]
    answered = [q for q, r in predictions.items() if r is not None]
    correct = [q for q in answered if predictions[q] in ground_truth.get(q, ())]
    recall = len([q for q in correct if ground_truth[q]]) / len(has_valid) if has_valid else None
    precision = len(correct) / len(answered) if answered else None
    average = None if recall is None or precision is None else 0.5 * (recall + precision)
    return recall, precision, average


def precision_at_threshold(pose_errors: Iterable, tol: ToleranceSpec = METRIC_TOLERANCE):
    """Fraction of (translation m, rotation deg) errors inside ``tol`` (boundary inclusive)."""
    errs = np.asarray(list(pose_errors), dtype=float).reshape(-1, 2)
    if errs.shape[0] == 0:
        return None
    ok = (errs[:, 0] <= tol.translation) & (errs[:, 1] <= tol.rotation)
    return float(np.mean(ok))


def auc(predictions: Iterable) -> float:
    """ROC area by the rank-sum formulation; tied confidences count one half."""
    data = list(predictions)
    conf = np.array([float(c) for c, _ in data])
    label = np.array([bool(y) for _, y in data])
    n_pos = int(label.sum())
    n_neg = label.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs at least one positive and one negative")
    if not np.all(np.isfinite(conf)):
        raise ValueError("confidences must be finite")
    ranks = rankdata(conf)
    return float((ranks[label].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def align_rigid(src: np.ndarray, dst: np.ndarray, weights=None) -> Pose:
    """Rigid transform G minimizing sum w ||dst - G(src)||^2 (Kabsch, no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    H = (src - mu_s).T @ ((dst - mu_d) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ S @ U.T
    return Pose.from_rt(R, mu_d - R @ mu_s)


def ate_rmse(estimated: Mapping[int, Pose], ground_truth: Mapping[int, Pose], align=True):
    """(translational RMSE in m, rotational RMSE in deg) after rigid alignment.

    Poses are associated by id; ids missing from either side are ignored.
    """
    ids = sorted(set(estimated) & set(ground_truth))
    if len(ids) < 3:
        raise TooFewPoses(f"ATE needs at least 3 associated poses, got {len(ids)}")
    est_t = np.array([estimated[i].t for i in ids])
    gt_t = np.array([ground_truth[i].t for i in ids])
    G = align_rigid(est_t, gt_t) if align else Pose.identity()
    t_err = np.empty(len(ids))
    r_err = np.empty(len(ids))
    for k, i in enumerate(ids):
        t_err[k], r_err[k] = se3.pose_error(G @ estimated[i], ground_truth[i])
    return float(np.sqrt(np.mean(t_err**2))), float(np.sqrt(np.mean(r_err**2)))


def write_metrics_csv(path, rows: Iterable[Mapping]):
    rows = list(rows)
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})


def read_errors_csv(path):
    """Read ``translation,rotation`` rows (header optional) as a list of pairs."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                out.append((float(row[0]), float(row[1])))
            except ValueError:
                continue
    return out
