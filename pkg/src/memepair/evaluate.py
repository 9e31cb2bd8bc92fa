"""ROC / AUROC / accuracy, deep-ensemble averaging and prediction files."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ._kernels import K
from .data import atomic_write_text
from .errors import InputError


@dataclass
class Predictions:
    ids: list[str]
    proba: np.ndarray
    labels: np.ndarray | None = None  # int 0/1

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.proba = np.asarray(self.proba, dtype=np.float64).reshape(-1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape != self.proba.shape:
                raise InputError("Predictions: labels and probabilities differ in length")
            if not np.isin(self.labels, (0, 1)).all():
                raise InputError("Predictions: labels must be 0 or 1")
        if len(self.ids) != self.proba.size:
            raise InputError("Predictions: ids and probabilities differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("Predictions: duplicate ids")
        if not np.isfinite(self.proba).all() or (self.proba < 0).any() or (self.proba > 1).any():
            raise InputError("Predictions: probabilities must lie in [0,1]")

    def __len__(self) -> int:
        return len(self.ids)

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise InputError("predictions carry no labels")
        return self.labels


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending, first is +inf
    tpr: np.ndarray
    fpr: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.tpr.tolist(), self.fpr.tolist()))

    def to_csv(self) -> str:
        rows = ["threshold,fpr,tpr"]
        for t, tp, fp in zip(self.thresholds, self.tpr, self.fpr):
            ts = "inf" if math.isinf(t) else f"{t:.6f}"
            rows.append(f"{ts},{fp:.6f},{tp:.6f}")
        return "\n".join(rows) + "\n"


@dataclass
class EvalReport:
    auroc: float
    accuracy: float
    n: int
    positives: int
    negatives: int
    nll: float
    curve: RocCurve | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("curve")
        return d

    def summary(self) -> str:
        return (f"AUROC {self.auroc:.4f}  accuracy {self.accuracy:.4f}  NLL {self.nll:.4f}  "
                f"n={self.n} (+{self.positives} / -{self.negatives})")


def _scored(preds: Predictions) -> tuple[np.ndarray, np.ndarray]:
    y = preds.require_labels()
    npos = int(y.sum())
    if npos == 0 or npos == y.size:
        raise InputError("ROC is undefined: predictions contain a single class")
    return preds.proba, y


def roc_curve(preds: Predictions) -> RocCurve:
    """Threshold sweep over unique scores (descending); equal scores cross together."""
    p, y = _scored(preds)
    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    last_of_group = np.r_[ps[1:] != ps[:-1], True]
    tp = np.cumsum(ys)[last_of_group]
    fp = np.cumsum(1 - ys)[last_of_group]
    npos, nneg = tp[-1], fp[-1]
    return RocCurve(
        thresholds=np.r_[np.inf, ps[last_of_group]],
        tpr=np.r_[0.0, tp / npos],
        fpr=np.r_[0.0, fp / nneg],
    )


def _trapezoid(c: RocCurve) -> float:
    return float(np.sum(np.diff(c.fpr) * (c.tpr[1:] + c.tpr[:-1]) * 0.5))


def auroc(preds: Predictions) -> float:
    """Trapezoidal area under :func:`roc_curve`."""
    return _trapezoid(roc_curve(preds))


def auroc_pairwise(preds: Predictions) -> float:
    """Mann-Whitney statistic: fraction of (positive, negative) pairs ranked correctly, ties 1/2."""
    p, y = _scored(preds)
    pos = np.ascontiguousarray(p[y == 1])
    neg = np.ascontiguousarray(p[y == 0])
    return K.pairwise_wins(pos, neg) / (pos.size * neg.size)


def accuracy(preds: Predictions, threshold: float = 0.5) -> float:
    """Fraction with ``(p >= threshold) == y``."""
    y = preds.require_labels()
    if y.size == 0:
        raise InputError("accuracy of an empty prediction set")
    return float(np.mean((preds.proba >= threshold).astype(np.int64) == y))


def nll(preds: Predictions, clip: float = 1e-15) -> float:
    """Mean negative log-likelihood of the true labels."""
    y = preds.require_labels()
    p = np.clip(preds.proba, clip, 1.0 - clip)
    return float(-np.mean(np.where(y == 1, np.log(p), np.log1p(-p))))


def ensemble_average(runs: Sequence[Predictions]) -> Predictions:
    """Per-id arithmetic mean of probabilities; output follows the first run's id order."""
    if not runs:
        raise InputError("ensemble_average needs at least one run")
    first = runs[0]
    ref = set(first.ids)
    for i, r in enumerate(runs[1:], start=1):
        other = set(r.ids)
        if other != ref:
            diff = sorted(ref ^ other)
            raise InputError(f"ensemble_average: run {i} id set differs from run 0 "
                             f"({len(diff)} ids in symmetric difference, first: {diff[:10]})")
    total = np.zeros(len(first))
    for r in runs:
        pos = {k: j for j, k in enumerate(r.ids)}
        total = total + r.proba[[pos[k] for k in first.ids]]
    return Predictions(first.ids, total / len(runs),
                       None if first.labels is None else first.labels.copy())


def evaluate(preds: Predictions, threshold: float = 0.5) -> EvalReport:
    y = preds.require_labels()
    curve = roc_curve(preds)
    area = _trapezoid(curve)
    pos = int(y.sum())
    return EvalReport(auroc=area, accuracy=accuracy(preds, threshold), n=len(preds),
                      positives=pos, negatives=len(preds) - pos, nll=nll(preds), curve=curve)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def dumps_predictions(preds: Predictions) -> str:
    lines = []
    for j, rid in enumerate(preds.ids):
        row: dict = {"id": rid, "proba": float(preds.proba[j])}
        if preds.labels is not None:
            row["label"] = int(preds.labels[j])
        lines.append(json.dumps(row))
    return "".join(line + "\n" for line in lines)


def save_predictions(preds: Predictions, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_predictions(preds))


def load_predictions(path: str | os.PathLike) -> Predictions:
    ids, proba, labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ids.append(str(obj["id"]))
                proba.append(float(obj["proba"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}: line {lineno}: bad prediction row ({exc})") from None
            labels.append(obj.get("label"))
    have = [lab is not None for lab in labels]
    if any(have) and not all(have):
        raise InputError(f"{path}: label present on some rows only")
    return Predictions(ids, np.array(proba), np.array(labels, dtype=np.int64) if have and all(have) else None)


def save_roc_csv(curve: RocCurve, path: str | os.PathLike) -> None:
    atomic_write_text(path, curve.to_csv())
