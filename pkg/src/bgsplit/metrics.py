"""Mean F1 under hard (N+1)-way labels and per-class average precision."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidInputError, UndefinedMetricError
from .trainer import predict_batch

log = logging.getLogger(__name__)

CSV_FIELDS = ("class_id", "AP", "F1", "precision", "recall", "support")


@dataclass(frozen=True)
class PredictionSet:
    ids: tuple[str, ...]
    hard_label: np.ndarray      # (n,) in 0..N
    confidences: np.ndarray     # (n, N): p(y = n | x) for n = 1..N


def hard_predictions(params, manifest, config) -> PredictionSet:
    """Argmax over [background, foreground...]; ties resolve to the background."""
    if params.n_foreground != manifest.N:
        raise ConfigurationError(
            f"model predicts {params.n_foreground} foreground classes, manifest has {manifest.N}")
    if params.input_dim != manifest.d:
        raise ConfigurationError(
            f"model expects {params.input_dim}-d features, manifest has {manifest.d}")
    fg, bg, _ = predict_batch(params, manifest.X, config.use_thresholding)
    slots = np.column_stack([bg, fg])
    return PredictionSet(tuple(manifest.ids), slots.argmax(axis=1), fg)


def f1_per_class(predicted, truth, N: int):
    """Precision, recall and F1 for foreground classes 1..N (0/0 counts as 0).

    Returns three arrays of length ``N`` (index 0 is class 1).
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    precision = np.zeros(N)
    recall = np.zeros(N)
    f1 = np.zeros(N)
    for n in range(1, N + 1):
        tp = np.count_nonzero((predicted == n) & (truth == n))
        fp = np.count_nonzero((predicted == n) & (truth != n))
        fn = np.count_nonzero((predicted != n) & (truth == n))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precision[n - 1], recall[n - 1] = p, r
        f1[n - 1] = 2 * p * r / (p + r) if p + r else 0.0
    return precision, recall, f1


def average_precision_rows(confidences, positives, ids=None) -> np.ndarray:
    """Average precision of every row of ``(m, n)`` confidence/positive matrices.

    Each row is ranked by descending confidence, ties going to the smaller id
    (column position when ``ids`` is omitted). AP is the mean of precision@r
    over the ranks r of the positives, accumulated left to right in rank order.
    """
    conf = np.asarray(confidences, dtype=float)
    pos = np.asarray(positives, dtype=bool)
    if conf.shape != pos.shape or conf.ndim != 2:
        raise InvalidInputError("confidences and positives must be equal-shape (m, n) arrays")
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        raise UndefinedMetricError("average precision is undefined without positives")
    tie = np.broadcast_to(np.arange(conf.shape[1]) if ids is None else np.asarray(ids), conf.shape)
    order = np.lexsort((tie, -conf), axis=-1)
    hits = np.take_along_axis(pos, order, axis=1)
    ranks = np.arange(1, conf.shape[1] + 1)
    terms = np.where(hits, np.cumsum(hits, axis=1) / ranks, 0.0)
    return np.cumsum(terms, axis=1)[:, -1] / n_pos


def average_precision(confidences, positives, ids=None) -> float:
    """AP of one ranked list; see :func:`average_precision_rows`."""
    conf = np.asarray(confidences, dtype=float)
    pos = np.asarray(positives, dtype=bool)
    if conf.shape != pos.shape or conf.ndim != 1:
        raise InvalidInputError("confidences and positives must be equal-length vectors")
    ids = None if ids is None else np.asarray(ids)[None, :]
    return float(average_precision_rows(conf[None, :], pos[None, :], ids)[0])


@dataclass(frozen=True)
class ClassMetrics:
    class_id: str
    AP: float
    F1: float
    precision: float
    recall: float
    support: int


@dataclass
class EvalReport:
    classes: list[ClassMetrics]
    config: dict = field(default_factory=dict)

    @property
    def mAP(self) -> float:
        return float(np.mean([c.AP for c in self.classes])) if self.classes else 0.0

    @property
    def meanF1(self) -> float:
        return float(np.mean([c.F1 for c in self.classes])) if self.classes else 0.0

    def aggregate(self, name: str) -> float:
        return float(np.mean([getattr(c, name) for c in self.classes])) if self.classes else 0.0

    def to_dict(self) -> dict:
        return {"config": self.config,
                "classes": [asdict(c) for c in self.classes],
                "aggregates": {"mAP": self.mAP, "meanF1": self.meanF1,
                               "precision": self.aggregate("precision"),
                               "recall": self.aggregate("recall")}}

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls([ClassMetrics(**c) for c in d["classes"]], d.get("config", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for c in self.classes:
            writer.writerow([c.class_id, f"{c.AP:.6f}", f"{c.F1:.6f}", f"{c.precision:.6f}",
                             f"{c.recall:.6f}", c.support])
        return buf.getvalue()


def evaluate(params, manifest, config, skip_empty: bool = False) -> EvalReport:
    """Per-class AP from confidences and F1 from hard labels on the test split."""
    test = manifest.select("test")
    preds = hard_predictions(params, test, config)
    precision, recall, f1 = f1_per_class(preds.hard_label, test.y, test.N)
    names = list(test.foreground_categories) or [str(n) for n in range(1, test.N + 1)]
    rows = []
    for n in range(1, test.N + 1):
        positives = test.y == n
        if not positives.any():
            msg = f"class {names[n - 1]!r} has no test positives"
            if not skip_empty:
                raise ConfigurationError(msg)
            log.warning("%s; excluded from the report", msg)
            continue
        ap = average_precision(preds.confidences[:, n - 1], positives, test.ids)
        rows.append(ClassMetrics(names[n - 1], ap, float(f1[n - 1]), float(precision[n - 1]),
                                 float(recall[n - 1]), int(positives.sum())))
    cfg = config.to_dict() if hasattr(config, "to_dict") else {}
    return EvalReport(rows, cfg)


def average_reports(reports) -> EvalReport:
    """Concatenate per-class rows of reports over disjoint class sets."""
    reports = list(reports)
    if not reports:
        raise ConfigurationError("no reports to average")
    rows, seen = [], set()
    for rep in reports:
        for c in rep.classes:
            if c.class_id in seen:
                raise ConfigurationError(f"class {c.class_id!r} appears in more than one report")
            seen.add(c.class_id)
            rows.append(c)
    return EvalReport(rows, reports[0].config if len(reports) == 1 else {})


def write_report(report: EvalReport, out_dir, stem: str = "report") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (out_dir / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
