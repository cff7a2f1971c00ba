"""Confusion matrices, mIoU, ablation sweeps and report rendering."""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data_synth import IGNORE_ID
from .errors import ContractError, SweepError, UndefinedMetricError

log = logging.getLogger(__name__)

SWEEP_AXES = ("tau_out", "lambda_out", "prompt_subset", "teacher_source", "n_unlabeled_out")
# categorical axes keep this canonical order instead of lexicographic
CATEGORY_ORDER = {
    "prompt_subset": ("targets_only", "half", "full"),
    "teacher_source": ("ovs", "self"),
}


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, n_classes, counts=None):
        self.n_classes = int(n_classes)
        if counts is None:
            counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (self.n_classes, self.n_classes) or (self.counts < 0).any():
            raise ContractError("confusion matrix must be a non-negative n x n array")

    def update(self, pred, gt, ignore_id=IGNORE_ID):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        valid = gt != ignore_id
        p = pred[valid].astype(np.int64)
        g = gt[valid].astype(np.int64)
        n = self.n_classes
        if p.size and (p.min() < 0 or p.max() >= n or g.min() < 0 or g.max() >= n):
            raise ContractError(f"label id outside [0, {n})")
        self.counts += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
        return self

    def __add__(self, other):
        if other.n_classes != self.n_classes:
            raise ContractError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Return a new matrix with the (pred, gt) pixels added."""
    return ConfusionMatrix(cm.n_classes, cm.counts.copy()).update(pred, gt)


def miou(cm: ConfusionMatrix):
    """Per-class IoU (NaN for classes absent from both prediction and truth) and their mean."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.sum() == 0:
        raise UndefinedMetricError("mIoU of an empty confusion matrix")
    inter = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    # exact rationals from the integer counts, rounded once
    fracs = [Fraction(int(i), int(u)) if u > 0 else None for i, u in zip(inter, union)]
    present = [f for f in fracs if f is not None]
    iou = [float(f) if f is not None else math.nan for f in fracs]
    return iou, float(sum(present) / len(present))


def evaluate_labels(preds, gts, n_classes) -> ConfusionMatrix:
    cm = ConfusionMatrix(n_classes)
    for p, g in zip(preds, gts):
        cm.update(p, g)
    return cm


# ---------------------------------------------------------------------- sweeps

@dataclass
class RunRecord:
    seed: int
    miou: float
    per_class_iou: list[float]
    loss_trace: dict[str, list[float]]


@dataclass
class SweepEntry:
    setting: object
    runs: list[RunRecord] = field(default_factory=list)

    @property
    def mious(self):
        return [r.miou for r in self.runs]

    @property
    def median(self):
        return statistics.median(self.mious)

    @property
    def mean(self):
        return statistics.fmean(self.mious)


@dataclass
class SweepResult:
    axis: str
    entries: list[SweepEntry] = field(default_factory=list)
    class_names: tuple[str, ...] = ()

    @property
    def settings(self):
        return [e.setting for e in self.entries]

    def entry(self, setting):
        for e in self.entries:
            if e.setting == setting:
                return e
        raise KeyError(setting)


def sort_settings(axis, grid):
    grid = list(grid)
    if len(set(map(str, grid))) != len(grid):
        raise ValueError(f"duplicate settings in grid {grid}")
    if axis in CATEGORY_ORDER:
        order = CATEGORY_ORDER[axis]
        unknown = [g for g in grid if g not in order]
        if unknown:
            raise ValueError(f"unknown {axis} setting(s) {unknown}; expected {order}")
        return sorted(grid, key=order.index)
    return sorted(grid)


def run_sweep(axis, grid, run_one: Callable[[object, int], RunRecord], seeds: Sequence[int] = (0, 1, 2),
              class_names=()) -> SweepResult:
    """Train and evaluate once per (setting, seed).

    ``run_one(setting, seed)`` performs one full train + evaluation from
    scratch and returns a :class:`RunRecord`.  A failing run aborts the sweep
    with :class:`SweepError` whose ``partial`` holds the finished cells.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not grid:
        raise ValueError("sweep grid is empty")
    result = SweepResult(axis, class_names=tuple(class_names))
    for setting in sort_settings(axis, grid):
        entry = SweepEntry(setting)
        result.entries.append(entry)
        for seed in seeds:
            try:
                entry.runs.append(run_one(setting, seed))
            except Exception as exc:
                if not entry.runs:
                    result.entries.pop()
                raise SweepError(f"{axis}={setting!r} seed={seed} failed: {exc}", partial=result) from exc
            log.info("%s=%s seed=%d mIoU=%.4f", axis, setting, seed, entry.runs[-1].miou)
    return result


# ---------------------------------------------------------------------- report

def _fmt(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def results_csv_text(results: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = max((len(r.per_class_iou) for e in results.entries for r in e.runs), default=0)
    names = list(results.class_names) or [str(i) for i in range(n)]
    w.writerow(["axis", "setting", "seed", "mIoU"] + [f"iou_{c}" for c in names[:n]])
    for e in results.entries:
        for r in e.runs:
            w.writerow([results.axis, e.setting, r.seed, _fmt(r.miou)] + [_fmt(v) for v in r.per_class_iou])
    return buf.getvalue()


def summary_csv_text(results: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "setting", "n_runs", "median_mIoU", "mean_mIoU"])
    for e in results.entries:
        w.writerow([results.axis, e.setting, len(e.runs), _fmt(e.median), _fmt(e.mean)])
    return buf.getvalue()


def render_report(results: SweepResult, out_dir) -> list[Path]:
    """Write ``results.csv``, ``summary.csv`` and two PNG plots; returns the paths."""
    if results is None or not results.entries or not any(e.runs for e in results.entries):
        raise ValueError("nothing to report: results are empty")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    p = out_dir / "results.csv"
    p.write_text(results_csv_text(results), encoding="utf-8")
    written.append(p)
    p = out_dir / "summary.csv"
    p.write_text(summary_csv_text(results), encoding="utf-8")
    written.append(p)

    labels = [str(e.setting) for e in results.entries]
    xs = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for e_i, e in enumerate(results.entries):
        ax.scatter([e_i] * len(e.runs), e.mious, color="0.6", s=12)
    ax.plot(xs, [e.median for e in results.entries], marker="o", label="median")
    ax.plot(xs, [e.mean for e in results.entries], marker="s", linestyle="--", label="mean")
    ax.set_xticks(xs, labels)
    ax.set_xlabel(results.axis)
    ax.set_ylabel("mIoU")
    ax.legend()
    fig.tight_layout()
    p = out_dir / f"miou_vs_{results.axis}.png"
    fig.savefig(p, metadata={"Software": None})
    plt.close(fig)
    written.append(p)

    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2), sharex=True)
    for name, ax in zip(("l_s", "l_u_in", "l_u_out"), axes):
        for e in results.entries:
            traces = [r.loss_trace.get(name, []) for r in e.runs if r.loss_trace.get(name)]
            if traces:
                length = min(map(len, traces))
                ax.plot(np.mean([t[:length] for t in traces], axis=0), label=str(e.setting))
        ax.set_title(name)
        ax.set_xlabel("epoch")
    axes[0].legend(title=results.axis, fontsize=7)
    fig.tight_layout()
    p = out_dir / f"loss_curves_{results.axis}.png"
    fig.savefig(p, metadata={"Software": None})
    plt.close(fig)
    written.append(p)
    return written
