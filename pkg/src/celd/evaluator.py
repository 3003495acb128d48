"""Confusion matrices, per-class metrics and clean-vs-perturbed reports."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datahub import ImageRecord, LabelSpace, load_image
from .nnmodel import DenseNetClassifier, predict_proba
from .perturb import KINDS, PerturbationSpec, apply

METRICS_HEADER = ["perturbation", "class", "precision", "recall", "f1", "accuracy_overall"]


class DegenerateMetricWarning(UserWarning):
    """A metric had a zero denominator and was reported as 0."""


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    counts: np.ndarray
    labelspace: LabelSpace

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "labelspace": list(self.labelspace.classes)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(np.array(d["counts"], dtype=np.int64), LabelSpace(d["labelspace"]))


def confusion(preds: Sequence[str], truth: Sequence[str], space: LabelSpace) -> ConfusionMatrix:
    if len(preds) != len(truth):
        raise ValueError(f"{len(preds)} predictions for {len(truth)} labels")
    k = len(space)
    counts = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(preds, truth):
        if p not in space or t not in space:
            raise ValueError(f"label outside {list(space.classes)}: {t!r} -> {p!r}")
        counts[space.index(t), space.index(p)] += 1
    return ConfusionMatrix(counts, space)


def _ratio(num: int, den: int, what: str, cls: str) -> float:
    if den == 0:
        warnings.warn(f"{what} of class {cls!r} has a zero denominator; reporting 0", DegenerateMetricWarning, 2)
        return 0.0
    return num / den


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def per_class_metrics(cm: ConfusionMatrix) -> dict[str, tuple[float, float, float]]:
    """One-vs-rest ``(precision, recall, f1)`` for every class."""
    c = cm.counts
    out = {}
    for i, name in enumerate(cm.labelspace):
        tp = int(c[i, i])
        fp = int(c[:, i].sum()) - tp
        fn = int(c[i, :].sum()) - tp
        precision = _ratio(tp, tp + fp, "precision", name)
        recall = _ratio(tp, tp + fn, "recall", name)
        if precision + recall == 0:
            warnings.warn(f"F1 of class {name!r} is undefined; reporting 0", DegenerateMetricWarning, 2)
        out[name] = (precision, recall, f1_score(precision, recall))
    return out


def accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / total


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    per_class: dict[str, tuple[float, float, float]]
    accuracy: float
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, spec: PerturbationSpec | None = None) -> "EvalReport":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateMetricWarning)
            metrics = per_class_metrics(cm)
        return cls(cm, metrics, accuracy(cm), spec or PerturbationSpec())

    def recall(self, cls_name: str) -> float:
        return self.per_class[cls_name][1]

    def f1(self, cls_name: str) -> float:
        return self.per_class[cls_name][2]

    def to_dict(self) -> dict:
        return {
            "perturbation": self.perturbation.to_dict(),
            "confusion": self.confusion.to_dict(),
            "per_class": {k: list(v) for k, v in self.per_class.items()},
            "accuracy": self.accuracy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            ConfusionMatrix.from_dict(d["confusion"]),
            {k: tuple(v) for k, v in d["per_class"].items()},
            d["accuracy"],
            PerturbationSpec.from_dict(d["perturbation"]),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def predict_labels(
    model: DenseNetClassifier,
    records: Sequence[ImageRecord],
    spec: PerturbationSpec | None = None,
    batch_size: int = 32,
    images=None,
) -> list[str]:
    """Load, perturb and classify records.  Image ``i`` uses seed ``spec.seed + i``.

    ``images`` may hold already-loaded tensors aligned with ``records``.
    """
    spec = spec or PerturbationSpec()
    side = model.config.input_side
    names = model.labelspace.classes
    preds: list[str] = []
    for start in range(0, len(records), batch_size):
        batch = []
        for i in range(start, min(start + batch_size, len(records))):
            img = images[i] if images is not None else load_image(records[i], side)
            batch.append(apply(spec, img, seed=spec.seed + i).pixels)
        probs = predict_proba(model, np.stack(batch))
        preds.extend(names[j] for j in torch.argmax(probs, dim=1).tolist())
    return preds


def evaluate(
    model: DenseNetClassifier,
    test: Sequence[ImageRecord],
    spec: PerturbationSpec | None = None,
    images=None,
) -> EvalReport:
    truth = [r.label for r in test]
    for t in truth:
        if t not in model.labelspace:
            raise ValueError(f"test label {t!r} outside the model's label space")
    preds = predict_labels(model, test, spec, images=images)
    return EvalReport.from_confusion(confusion(preds, truth, model.labelspace), spec)


def kind_rank(report: EvalReport) -> int:
    return KINDS.index(report.perturbation.kind)


def order_reports(reports: Sequence[EvalReport]) -> list[EvalReport]:
    """Stable sort into NONE, RG, RGR, RC, GN, ES, ODC order."""
    return sorted(reports, key=kind_rank)


def panel_names(reports: Sequence[EvalReport]) -> list[str]:
    """``cm_<kind>`` stems, numbered when a kind repeats."""
    seen: dict[str, int] = {}
    names = []
    for r in reports:
        k = r.perturbation.kind
        seen[k] = seen.get(k, 0) + 1
        names.append(f"cm_{k}" if seen[k] == 1 else f"cm_{k}_{seen[k]}")
    return names


def write_metrics_csv(reports: Sequence[EvalReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in reports:
            for cls_name, (p, rc, f1) in r.per_class.items():
                w.writerow([r.perturbation.label(), cls_name, repr(p), repr(rc), repr(f1), repr(r.accuracy)])
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in METRICS_HEADER[2:]:
            row[k] = float(row[k])
    return rows


def comparison_report(reports: Sequence[EvalReport], out_dir, formats=("png",)) -> dict[str, list[Path]]:
    """Write ``metrics.csv``, one confusion panel per report, a panel grid and bar charts."""
    from . import plotting

    if not reports:
        raise ValueError("no reports to compare")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = order_reports(reports)
    files: dict[str, list[Path]] = {"csv": [write_metrics_csv(ordered, out_dir / "metrics.csv")], "panels": []}
    for report, stem in zip(ordered, panel_names(ordered)):
        for fmt in formats:
            files["panels"].append(plotting.save_confusion_panel(report, out_dir / f"{stem}.{fmt}"))
    files["figures"] = []
    for fmt in formats:
        files["figures"].append(plotting.save_confusion_grid(ordered, out_dir / f"confusion_grid.{fmt}"))
        files["figures"].append(plotting.save_metric_bars(ordered, out_dir / f"metrics_bars.{fmt}"))
    return files
