"""Evaluation suites for the three tasks.

Binary change: Rec / Pre / OA / F1 / IoU / KC from a pixel confusion.
Semantic change: OA / F1 / mIoU / SeK from a (K+1)x(K+1) confusion over
{no-change 0} plus semantic classes, built from change-masked label maps.
Damage assessment: localization F1, one-vs-rest per-level F1, their harmonic
mean, and the 0.3/0.7 overall blend.

0/0 ratios resolve to 0 throughout, so degenerate maps stay scorable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


@dataclass
class BinaryConfusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def add(self, other: "BinaryConfusion"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.tn += other.tn


def binary_confusion(pred: np.ndarray, gt: np.ndarray) -> BinaryConfusion:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"binary_confusion: {pred.shape} vs {gt.shape}")
    return BinaryConfusion(
        tp=int(np.sum(pred & gt)),
        fp=int(np.sum(pred & ~gt)),
        fn=int(np.sum(~pred & gt)),
        tn=int(np.sum(~pred & ~gt)),
    )


def bcd_metrics(conf: BinaryConfusion) -> dict[str, float]:
    n = conf.total
    if n == 0:
        raise ValueError("bcd_metrics: empty confusion")
    rec = _ratio(conf.tp, conf.tp + conf.fn)
    pre = _ratio(conf.tp, conf.tp + conf.fp)
    oa = (conf.tp + conf.tn) / n
    f1 = _ratio(2.0 * pre * rec, pre + rec)
    iou = _ratio(conf.tp, conf.tp + conf.fp + conf.fn)
    pe = (
        (conf.tp + conf.fp) * (conf.tp + conf.fn)
        + (conf.fn + conf.tn) * (conf.fp + conf.tn)
    ) / (n * n)
    kc = _ratio(oa - pe, 1.0 - pe) if pe < 1.0 else 0.0
    return {"rec": rec, "pre": pre, "oa": oa, "f1": f1, "iou": iou, "kc": kc}


def masked_label_map(labels: np.ndarray, change: np.ndarray) -> np.ndarray:
    """Zero out labels where the change map is 0; class 0 means no change."""
    return np.where(np.asarray(change) != 0, labels, 0)


def semantic_confusion(gt_masked: np.ndarray, pred_masked: np.ndarray, num_classes: int) -> np.ndarray:
    """(K+1)x(K+1) counts over {no-change 0} + classes; rows GT, columns prediction."""
    k1 = num_classes + 1
    a = np.asarray(gt_masked).astype(np.int64).reshape(-1)
    b = np.asarray(pred_masked).astype(np.int64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("semantic_confusion: shape mismatch")
    if a.min() < 0 or a.max() >= k1 or b.min() < 0 or b.max() >= k1:
        raise ValueError(f"semantic_confusion: labels outside [0, {k1})")
    return np.bincount(a * k1 + b, minlength=k1 * k1).reshape(k1, k1)


class SekUndefined(ValueError):
    """Raised when neither GT nor prediction contains any change."""


def scd_metrics(q: np.ndarray) -> dict[str, float]:
    """OA, semantic-change F1, mIoU and separated kappa from the confusion Q.

    mIoU averages the no-change IoU with the changed IoU
    sum_i>=1 q_ii / (sum Q - q00). SeK is kappa on Q with the q00 cell zeroed,
    scaled by exp(IoU_c - 1). F1 is the harmonic mean of precision/recall of
    change detection with the correct semantic label.
    """
    q = np.asarray(q, dtype=np.float64)
    total = q.sum()
    if total <= 0:
        raise ValueError("scd_metrics: empty confusion")
    oa = np.trace(q) / total

    row0, col0, q00 = q[0].sum(), q[:, 0].sum(), q[0, 0]
    iou_nc = _ratio(q00, row0 + col0 - q00)
    diag_c = np.trace(q) - q00
    iou_c = _ratio(diag_c, total - q00)
    miou = 0.5 * (iou_nc + iou_c)

    qhat = q.copy()
    qhat[0, 0] = 0.0
    s = qhat.sum()
    if s <= 0:
        raise SekUndefined("scd_metrics: SeK undefined, no change in GT or prediction")
    rho = np.trace(qhat) / s
    eta = float(qhat.sum(axis=1) @ qhat.sum(axis=0)) / (s * s)
    kappa = _ratio(rho - eta, 1.0 - eta) if eta < 1.0 else 0.0
    sek = float(np.exp(iou_c - 1.0) * kappa)

    pred_changed = total - col0
    gt_changed = total - row0
    p_scd = _ratio(diag_c, pred_changed)
    r_scd = _ratio(diag_c, gt_changed)
    f1 = _ratio(2.0 * p_scd * r_scd, p_scd + r_scd)
    return {"oa": oa, "f1": f1, "miou": miou, "sek": sek}


def bda_metrics(loc_conf: BinaryConfusion, level_confs: list[BinaryConfusion]) -> dict[str, float]:
    """Localization F1, per-level F1, harmonic-mean classification F1, and the
    0.3 * loc + 0.7 * clf overall blend. Any zero level F1 pins clf F1 to 0."""
    f1_loc = bcd_metrics(loc_conf)["f1"]
    levels = [bcd_metrics(c)["f1"] for c in level_confs]
    if any(f == 0.0 for f in levels):
        f1_clf = 0.0
    else:
        f1_clf = len(levels) / sum(1.0 / f for f in levels)
    out = {"f1_loc": f1_loc, "f1_clf": f1_clf, "f1_overall": 0.3 * f1_loc + 0.7 * f1_clf}
    for i, f in enumerate(levels, start=1):
        out[f"f1_level{i}"] = f
    return out


def format_report(sections: dict[str, dict[str, float]]) -> str:
    """Serialize as one `section.metric=value` per line, 6 decimal places."""
    lines = []
    for section in sections:
        for key in sections[section]:
            lines.append(f"{section}.{key}={sections[section][key]:.6f}")
    return "\n".join(lines) + "\n"
