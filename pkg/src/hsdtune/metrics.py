"""Per-class precision/recall/F1 and macro-F1 reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import CLASSES


class LengthMismatch(ValueError):
    pass


class UnknownLabel(ValueError):
    pass


@dataclass
class EvalReport:
    per_class: dict  # class -> {"precision", "recall", "f1", "support"}
    macro_f1: float
    fold: Optional[int] = None
    folds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"per_class": self.per_class, "macro_f1": self.macro_f1}
        if self.fold is not None:
            d["fold"] = self.fold
        if self.folds:
            d["k"] = len(self.folds)
            d["folds"] = [f.to_dict() for f in self.folds]
            d["mean_macro_f1"] = self.macro_f1
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_rows(self):
        reports = self.folds or [self]
        for r in reports:
            tag = "all" if r.fold is None else r.fold
            for c in CLASSES:
                s = r.per_class[c]
                yield [tag, c, s["precision"], s["recall"], s["f1"], r.macro_f1]
        if self.folds:
            for c in CLASSES:
                s = self.per_class[c]
                yield ["mean", c, s["precision"], s["recall"], s["f1"], self.macro_f1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "class", "precision", "recall", "f1", "macro_f1"])
        for row in self.csv_rows():
            w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in row])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        folds = [cls.from_dict(f) for f in d.get("folds", [])]
        return cls(d["per_class"], d["macro_f1"], d.get("fold"), folds)


def _safe_div(a, b):
    return a / b if b else 0.0


def evaluate(predictions: Sequence[str], truth: Sequence[str], classes=CLASSES) -> EvalReport:
    """Per-class scores and their unweighted mean.

    A class with no predicted or no true members scores F1 = 0.
    """
    if len(predictions) != len(truth):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truth)} labels")
    index = {c: i for i, c in enumerate(classes)}
    try:
        p = np.array([index[x] for x in predictions], dtype=np.int64)
        t = np.array([index[x] for x in truth], dtype=np.int64)
    except KeyError as exc:
        raise UnknownLabel(f"unknown label {exc.args[0]!r}") from None
    K = len(classes)
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    per_class = {}
    for i, c in enumerate(classes):
        tp = int(cm[i, i])
        fp = int(cm[:, i].sum()) - tp
        fn = int(cm[i, :].sum()) - tp
        prec = _safe_div(tp, tp + fp)
        rec = _safe_div(tp, tp + fn)
        f1 = 0.0 if tp == 0 else 2 * prec * rec / (prec + rec)
        per_class[c] = {"precision": prec, "recall": rec, "f1": f1, "support": tp + fn}
    macro = sum(per_class[c]["f1"] for c in classes) / K
    return EvalReport(per_class, macro)


def mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    """Average per-class scores and macro-F1 over folds."""
    per_class = {}
    for c in CLASSES:
        per_class[c] = {k: float(np.mean([r.per_class[c][k] for r in reports]))
                        for k in ("precision", "recall", "f1")}
        per_class[c]["support"] = int(sum(r.per_class[c]["support"] for r in reports))
    return EvalReport(per_class, float(np.mean([r.macro_f1 for r in reports])), folds=list(reports))
