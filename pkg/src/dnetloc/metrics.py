"""ROC-AUC per label, report aggregation and run comparison."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .labelspace import DATASETS, LOCATION_KINDS, LabelSpace

REPORT_COLUMNS = ("label", "dataset", "kind", "n_pos", "n_neg", "auc")


def roc_auc(scores, truths) -> float:
    """Mann-Whitney AUC with midranks for tied scores.

    Returns NaN when ``truths`` holds a single class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths) != 0
    n_pos = int(truths.sum())
    n_neg = truths.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    u = ranks[truths].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pairwise_auc(scores, truths) -> float:
    """O(n^2) reference: P(pos > neg) + 0.5 P(pos == neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths) != 0
    pos, neg = scores[truths], scores[~truths]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    count = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                count += 1.0
            elif p == q:
                count += 0.5
    return count / (len(pos) * len(neg))


@dataclass
class LabelAuc:
    label: str
    dataset: str
    kind: str
    n_pos: int
    n_neg: int
    auc: float
    located: bool = False

    @property
    def defined(self) -> bool:
        return not math.isnan(self.auc)


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


@dataclass
class AucReport:
    rows: list[LabelAuc]
    test_hash: str = ""
    meta: dict = field(default_factory=dict)

    def _defined(self, pred) -> list[float]:
        return [r.auc for r in self.rows if pred(r) and r.defined]

    @property
    def mean(self) -> float:
        """Mean over defined pathology labels of both datasets."""
        return _mean(self._defined(lambda r: r.kind == "pathology"))

    def dataset_mean(self, dataset: str) -> float:
        return _mean(self._defined(lambda r: r.kind == "pathology" and r.dataset == dataset))

    @property
    def located_mean(self) -> float:
        return _mean(self._defined(lambda r: r.located))

    @property
    def location_mean(self) -> float:
        return _mean(self._defined(lambda r: r.kind in LOCATION_KINDS))

    @property
    def n_undefined(self) -> int:
        return sum(not r.defined for r in self.rows)

    def summary(self) -> dict:
        out = {"mean": self.mean, "located_mean": self.located_mean, "location_mean": self.location_mean}
        for ds in DATASETS:
            out[f"mean_{ds}"] = self.dataset_mean(ds)
        out["n_undefined"] = self.n_undefined
        return out

    def to_json(self) -> str:
        doc = {
            "test_hash": self.test_hash,
            "meta": self.meta,
            "summary": self.summary(),
            "rows": [asdict(r) for r in self.rows],
        }
        return json.dumps(doc, indent=2, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "AucReport":
        doc = json.loads(text)
        return cls([LabelAuc(**r) for r in doc["rows"]], doc.get("test_hash", ""), doc.get("meta", {}))

    def write_csv(self, path):
        """Columns: label, dataset, kind, n_pos, n_neg, auc (empty when undefined)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.label, r.dataset, r.kind, r.n_pos, r.n_neg, "" if not r.defined else f"{r.auc:.6f}"])


def image_set_hash(image_ids: Sequence[str]) -> str:
    h = hashlib.sha256()
    for i in sorted(image_ids):
        h.update(i.encode())
        h.update(b"\n")
    return h.hexdigest()


def evaluate_scores(scores, labels, masks, space: LabelSpace, image_ids: Sequence[str] = ()) -> AucReport:
    """Per-label AUC over the samples whose mask includes that label."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    masks = np.asarray(masks) != 0
    rows = []
    for n, d in enumerate(space.labels):
        sel = masks[:, n]
        t = labels[sel, n]
        n_pos = int((t != 0).sum())
        rows.append(LabelAuc(d.name, d.dataset, d.kind, n_pos, int(t.size - n_pos), roc_auc(scores[sel, n], t), d.located))
    return AucReport(rows, image_set_hash(image_ids) if len(image_ids) else "")


def evaluate(model, images, labels, masks, space: LabelSpace, image_ids: Sequence[str] = (), chunk: int = 256) -> AucReport:
    return evaluate_scores(model.predict(images, chunk), labels, masks, space, image_ids)


@dataclass
class DeltaRow:
    label: str
    dataset: str
    auc_a: float
    auc_b: float
    delta: float
    located: bool


@dataclass
class DeltaTable:
    rows: list[DeltaRow]
    summary: dict[str, tuple[float, float, float]]  # name -> (a, b, b - a)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "dataset", "located", "auc_a", "auc_b", "delta"])
            for r in self.rows:
                w.writerow([r.label, r.dataset, int(r.located), _fmt(r.auc_a), _fmt(r.auc_b), _fmt(r.delta)])
            for name, (a, b, d) in self.summary.items():
                w.writerow([name, "", "", _fmt(a), _fmt(b), _fmt(d)])

    def render(self) -> str:
        lines = [f"{'label':32s} {'a':>8s} {'b':>8s} {'delta':>8s}"]
        for r in self.rows:
            mark = "*" if r.located else " "
            lines.append(f"{mark}{r.dataset + ':' + r.label:31s} {_fmt(r.auc_a):>8s} {_fmt(r.auc_b):>8s} {_fmt(r.delta, True):>8s}")
        for name, (a, b, d) in self.summary.items():
            lines.append(f"{name:32s} {_fmt(a):>8s} {_fmt(b):>8s} {_fmt(d, True):>8s}")
        return "\n".join(lines)


def _fmt(v: float, signed: bool = False) -> str:
    if v is None or math.isnan(v):
        return ""
    return f"{v:+.4f}" if signed else f"{v:.4f}"


class ReportMismatch(ValueError):
    pass


def compare_runs(a: AucReport, b: AucReport) -> DeltaTable:
    """Per-label and summary deltas ``b - a``; located rows are starred."""
    if a.test_hash != b.test_hash:
        raise ReportMismatch("reports were computed on different test sets")
    if [(r.dataset, r.label) for r in a.rows] != [(r.dataset, r.label) for r in b.rows]:
        raise ReportMismatch("reports use different label spaces")
    rows = [
        DeltaRow(ra.label, ra.dataset, ra.auc, rb.auc, rb.auc - ra.auc, ra.located)
        for ra, rb in zip(a.rows, b.rows)
        if ra.kind == "pathology"
    ]
    sa, sb = a.summary(), b.summary()
    summary = {k: (sa[k], sb[k], sb[k] - sa[k]) for k in ("located_mean", "mean", "mean_CXR14", "mean_PLCO")}
    return DeltaTable(rows, summary)


def write_svg(report: AucReport, dataset: str, path, width: int = 640):
    """Horizontal bar chart of the dataset's pathology AUCs."""
    rows = [r for r in report.rows if r.dataset == dataset and r.kind == "pathology"]
    bar_h, left, top = 18, 200, 30
    height = top + bar_h * (len(rows) + 2)
    scale = width - left - 60
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
        f'<text x="{left}" y="18">{dataset} AUC (mean {_fmt(report.dataset_mean(dataset))})</text>',
    ]
    for i, r in enumerate(rows):
        y = top + i * bar_h
        w = 0 if not r.defined else r.auc * scale
        weight = "bold" if r.located else "normal"
        parts.append(f'<text x="{left - 6}" y="{y + 13}" text-anchor="end" font-weight="{weight}">{_esc(r.label)}</text>')
        parts.append(f'<rect x="{left}" y="{y + 2}" width="{w:.1f}" height="{bar_h - 4}" fill="#4a7ab5"/>')
        parts.append(f'<text x="{left + w + 4:.1f}" y="{y + 13}">{_fmt(r.auc) or "n/a"}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
