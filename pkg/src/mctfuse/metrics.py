"""Multi-label average precision, the known/new evaluation protocol and score baselines."""
from __future__ import annotations

import csv
import json
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.rng import stream_generator

EVAL_SPLITS = ("known_val", "new_val", "known_test", "new_test")
REPORT_ROWS = ("known_val", "new_val", "mean_val", "known_test", "new_test", "mean_test")
BASELINES = ("random", "all-ones")


class NoPositivesError(ValueError):
    pass


def average_precision(scores, labels) -> float:
    """Step-wise AP, ``sum_k (R_k - R_{k-1}) P_k`` over the distinct score thresholds.

    Samples with equal scores form one threshold (they enter the ranking
    together), so the value does not depend on the input order. The sum is
    accumulated as an exact rational and rounded once.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositivesError("average precision is undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order].astype(np.int64)
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    total = Fraction(0)
    prev_tp = 0
    for t, n in zip(tp.tolist(), seen.tolist()):
        if t != prev_tp:
            total += Fraction((t - prev_tp) * t, n)
        prev_tp = t
    return float(total / n_pos)


@dataclass
class ClassAPs:
    ap: list[float | None]

    @property
    def skipped(self) -> list[int]:
        return [c for c, v in enumerate(self.ap) if v is None]


def per_class_ap(scores: np.ndarray, labels: np.ndarray) -> ClassAPs:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal [N, K] arrays")
    return ClassAPs([average_precision(scores[:, c], labels[:, c]) if labels[:, c].any() else None
                     for c in range(labels.shape[1])])


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro mean of per-class AP over classes with at least one positive."""
    aps = [v for v in per_class_ap(scores, labels).ap if v is not None]
    if not aps:
        raise NoPositivesError("no class has a positive label")
    return math.fsum(aps) / len(aps)


@dataclass
class ProtocolReport:
    known_val: float
    new_val: float
    mean_val: float
    known_test: float
    new_test: float
    mean_test: float
    per_class: dict[str, list[float | None]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float]]:
        out = [(name, "mAP", getattr(self, name)) for name in REPORT_ROWS]
        for split in EVAL_SPLITS:
            out += [(split, f"ap.{c}", v) for c, v in enumerate(self.per_class.get(split, [])) if v is not None]
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "metric", "value"])
            for split, metric, value in self.rows():
                w.writerow([split, metric, repr(float(value))])

    def to_dict(self) -> dict:
        return {**{name: getattr(self, name) for name in REPORT_ROWS},
                "per_class": self.per_class, "meta": self.meta}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def save(self, csv_path) -> None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        self.to_csv(csv_path)
        self.to_json(csv_path.with_suffix(".json"))

    @classmethod
    def from_csv(cls, path) -> "ProtocolReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        main = {r["split"]: float(r["value"]) for r in rows if r["metric"] == "mAP"}
        per_class: dict[str, list[float | None]] = {}
        for r in rows:
            if r["metric"].startswith("ap."):
                c = int(r["metric"][3:])
                lst = per_class.setdefault(r["split"], [])
                lst.extend([None] * (c + 1 - len(lst)))
                lst[c] = float(r["value"])
        return cls(**{name: main[name] for name in REPORT_ROWS}, per_class=per_class)


def protocol_evaluate(scores: np.ndarray, labels: np.ndarray, split_tags, meta: dict | None = None,
                      num_labels: int | None = None) -> ProtocolReport:
    """mAP on each of the four evaluation splits plus the known/new means."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    tags = np.asarray(split_tags)
    if scores.shape != labels.shape or len(tags) != len(scores):
        raise ValueError(f"score/label/tag counts disagree: {scores.shape}, {labels.shape}, {len(tags)}")
    if num_labels is not None and scores.shape[1] != num_labels:
        raise ValueError(f"expected {num_labels} label scores per sample, got {scores.shape[1]}")
    values, per_class = {}, {}
    for split in EVAL_SPLITS:
        idx = np.nonzero(tags == split)[0]
        if len(idx) == 0:
            raise ValueError(f"split {split!r} has no samples")
        aps = per_class_ap(scores[idx], labels[idx])
        per_class[split] = aps.ap
        values[split] = mean_average_precision(scores[idx], labels[idx])
    return ProtocolReport(
        values["known_val"], values["new_val"], (values["known_val"] + values["new_val"]) / 2,
        values["known_test"], values["new_test"], (values["known_test"] + values["new_test"]) / 2,
        per_class, dict(meta or {}),
    )


def baseline_predict(kind: str, num_samples: int, num_labels: int = 20, seed: int = 0) -> np.ndarray:
    """Scores of a data-independent baseline: i.i.d. uniform, or 1.0 everywhere."""
    if kind == "random":
        return stream_generator(seed, "baseline/random", 0).random((num_samples, num_labels))
    if kind == "all-ones":
        return np.ones((num_samples, num_labels))
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
