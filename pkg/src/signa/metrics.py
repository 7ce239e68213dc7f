"""Example-based and label-based precision / recall / F-beta.

Zero-denominator conventions: precision with no predicted positives is 1
when the reference is also empty and 0 otherwise; recall with no reference
positives is 1 when nothing was predicted and 0 otherwise.  F-beta is 0
when precision and recall are both 0.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BETAS = (1, 2)


def _check(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    for name, m in (("pred", pred), ("target", target)):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} must be binary")
    return pred.astype(bool), target.astype(bool)


def _ratio(tp: np.ndarray, other: np.ndarray, vacuous: np.ndarray) -> np.ndarray:
    den = tp + other
    out = np.where(vacuous, 1.0, 0.0)
    np.divide(tp, den, out=out, where=den > 0)
    return out


def _precision_recall(tp, fp, fn):
    # no predictions: perfect only if nothing was there to find; and mirrored
    p = _ratio(tp, fp, fn == 0)
    r = _ratio(tp, fn, fp == 0)
    return p, r


def f_beta(p: float, r: float, beta: float) -> float:
    if beta not in BETAS:
        raise ValueError(f"beta must be one of {BETAS}, got {beta}")
    b2 = beta * beta
    den = b2 * p + r
    return 0.0 if den == 0 else (1 + b2) * p * r / den


def example_based_scores(pred, target, beta: int = 1) -> tuple[float, float, float]:
    pred, target = _check(pred, target)
    tp = (pred & target).sum(axis=1)
    fp = (pred & ~target).sum(axis=1)
    fn = (~pred & target).sum(axis=1)
    p, r = _precision_recall(tp, fp, fn)
    P, R = float(p.mean()), float(r.mean())
    return P, R, f_beta(P, R, beta)


def per_class_precision_recall(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred, target = _check(pred, target)
    tp = (pred & target).sum(axis=0)
    fp = (pred & ~target).sum(axis=0)
    fn = (~pred & target).sum(axis=0)
    return _precision_recall(tp, fp, fn)


def label_based_scores(pred, target, beta: int = 1) -> tuple[float, float, float]:
    p, r = per_class_precision_recall(pred, target)
    P, R = float(p.mean()), float(r.mean())
    return P, R, f_beta(P, R, beta)


@dataclass
class MetricReport:
    P_e: float
    R_e: float
    F1_e: float
    F2_e: float
    P_l: float
    R_l: float
    F1_l: float
    F2_l: float
    per_class: list[tuple[str, float, float, float]] = field(default_factory=list)  # (label, F1, P, R)
    n: int = 0
    c: int = 0

    def aggregates(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("P_e", "R_e", "F1_e", "F2_e", "P_l", "R_l", "F1_l", "F2_l")}

    def to_dict(self) -> dict:
        d = self.aggregates()
        d.update(n=self.n, c=self.c, per_class=[list(r) for r in self.per_class])
        return d


def per_class_report(pred, target, vocabulary: Sequence[str]) -> list[tuple[str, float, float, float]]:
    p, r = per_class_precision_recall(pred, target)
    if len(vocabulary) != p.size:
        raise ValueError(f"vocabulary has {len(vocabulary)} entries for {p.size} classes")
    return [(name, f_beta(pi, ri, 1), float(pi), float(ri)) for name, pi, ri in zip(vocabulary, p, r)]


def evaluate(pred, target, vocabulary: Sequence[str]) -> MetricReport:
    P_e, R_e, F1_e = example_based_scores(pred, target, 1)
    P_l, R_l, F1_l = label_based_scores(pred, target, 1)
    n, c = np.shape(pred)
    return MetricReport(
        P_e, R_e, F1_e, f_beta(P_e, R_e, 2),
        P_l, R_l, F1_l, f_beta(P_l, R_l, 2),
        per_class_report(pred, target, vocabulary), n, c,
    )


def write_report_csv(path, report: MetricReport, baseline: MetricReport | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["label", "F1", "P", "R"]
        if baseline is not None:
            head += ["baseline_F1", "baseline_P", "baseline_R"]
        w.writerow(head)
        for i, (name, f1, p, r) in enumerate(report.per_class):
            row = [name, f"{100 * f1:.2f}", f"{100 * p:.2f}", f"{100 * r:.2f}"]
            if baseline is not None:
                _, bf, bp, br = baseline.per_class[i]
                row += [f"{100 * bf:.2f}", f"{100 * bp:.2f}", f"{100 * br:.2f}"]
            w.writerow(row)


def report_markdown(report: MetricReport, baseline: MetricReport | None = None) -> str:
    if baseline is None:
        lines = ["| label | F1 | P | R |", "|---|---|---|---|"]
    else:
        lines = ["| label | F1 | P | R | baseline F1 | baseline P | baseline R |", "|---|---|---|---|---|---|---|"]
    for i, (name, f1, p, r) in enumerate(report.per_class):
        cells = [name, f"{100 * f1:.2f}", f"{100 * p:.2f}", f"{100 * r:.2f}"]
        if baseline is not None:
            _, bf, bp, br = baseline.per_class[i]
            cells += [f"{100 * bf:.2f}", f"{100 * bp:.2f}", f"{100 * br:.2f}"]
        lines.append("| " + " | ".join(cells) + " |")
    agg = report.aggregates()
    lines.append("")
    lines.append(" ".join(f"{k}={100 * v:.2f}" for k, v in agg.items()))
    return "\n".join(lines) + "\n"


def write_report(out_dir, report: MetricReport, baseline: MetricReport | None = None) -> list[Path]:
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "per_class.csv", out / "report.md", out / "metrics.json"]
    write_report_csv(paths[0], report, baseline)
    paths[1].write_text(report_markdown(report, baseline))
    paths[2].write_text(json.dumps(report.to_dict(), indent=2))
    return paths
