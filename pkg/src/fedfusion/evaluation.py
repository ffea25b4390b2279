"""Ranking metrics, Welch significance tests, and seed-sweep reports.

AUROC is the Mann-Whitney statistic (ties count half); AUPRC is average
precision with tied scores collapsed into single threshold blocks. Reports
aggregate per-seed samples into mean +/- sample SD per (method, client) cell
and attach pairwise fused-vs-baseline significance tests.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import stdtr
from scipy.stats import rankdata

from .errors import MetricError, ReportError

# Method tags: the three baselines plus the loss-fusion model under test.
FUSED_METHOD = "fused"
BASELINE_METHODS = ("localized", "hfl", "centralized")
METHODS = BASELINE_METHODS + (FUSED_METHOD,)
METRICS = ("auroc", "auprc")

# Smallest reported p-value; guards the constant-unequal convention and
# underflow for extreme statistics while keeping p in (0, 1].
P_FLOOR = 1e-300


def _check_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise MetricError(
            f"scores shape {scores.shape} vs labels shape {labels.shape}"
        )
    if scores.size == 0:
        raise MetricError("empty metric input")
    if not np.all((labels == 0) | (labels == 1)):
        raise MetricError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def auroc(scores, labels):
    """Probability a random positive outranks a random negative (ties half)."""
    scores, y = _check_scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(
            f"auroc needs both classes, got {n_pos} positives / {n_neg} negatives"
        )
    ranks = rankdata(scores)  # average ranks handle ties
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels):
    """Average precision over descending-score threshold blocks."""
    scores, y = _check_scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("auprc needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, yy = scores[order], y[order]
    # one block per distinct score: indices where the score changes
    block_end = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(yy)[block_end]
    seen = block_end + 1.0
    recall = tp / n_pos
    precision = tp / seen
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def _check_welch_inputs(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size < 2 or b.size < 2:
        raise MetricError("welch test needs two 1-d samples of size >= 2")
    return a, b


def welch_components(a, b):
    """Welch t statistic and Satterthwaite degrees of freedom."""
    a, b = _check_welch_inputs(a, b)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if va + vb == 0.0:
        raise MetricError("both samples constant; statistic undefined")
    t = (a.mean() - b.mean()) / np.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(t), float(df)


def welch_t_test(a, b):
    """Two-sided Welch test; returns (t, p) with p in (0, 1].

    Conventions for degenerate input: two constant equal samples give
    (0.0, 1.0); constant unequal samples give an infinite statistic with the
    p-value floored at P_FLOOR.
    """
    a, b = _check_welch_inputs(a, b)
    if a.var(ddof=1) == 0.0 and b.var(ddof=1) == 0.0:
        if a.mean() == b.mean():
            return (0.0, 1.0)
        return (float(np.copysign(np.inf, a.mean() - b.mean())), P_FLOOR)
    t, df = welch_components(a, b)
    p = 2.0 * float(stdtr(df, -abs(t)))
    return (t, float(min(max(p, P_FLOOR), 1.0)))


@dataclass
class MetricSample:
    method: str
    client_id: str
    seed: int
    auroc: float
    auprc: float

    def __post_init__(self):
        if self.method not in METHODS:
            raise MetricError(f"unknown method {self.method!r}")
        for name in METRICS:
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise MetricError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class MetricReport:
    samples: list
    seeds: list
    aggregates: dict  # (method, client_id) -> {metric_mean, metric_sd, ...}
    comparisons: dict  # (client_id, baseline, metric) -> {"t", "p"}


def aggregate_report(samples):
    """Collapse per-seed samples into a MetricReport.

    Requires a complete grid: every (method, client) cell must be present for
    every seed. Comparisons test the fused method against each baseline that
    shares the client, per metric, and are omitted for single-seed sweeps.
    """
    if not samples:
        raise ReportError("no samples to aggregate")
    by_key = {}
    for s in samples:
        key = (s.method, s.client_id, s.seed)
        if key in by_key:
            raise ReportError(f"duplicate sample for {key}")
        by_key[key] = s
    seeds = sorted({s.seed for s in samples})
    cells = sorted({(s.method, s.client_id) for s in samples})
    gaps = [
        f"method={m} client={c} seed={seed}"
        for (m, c) in cells
        for seed in seeds
        if (m, c, seed) not in by_key
    ]
    if gaps:
        raise ReportError(f"incomplete sweep, missing: {'; '.join(gaps)}")

    single_seed = len(seeds) == 1
    aggregates = {}
    for m, c in cells:
        entry = {"n_seeds": len(seeds), "single_seed": single_seed}
        for metric in METRICS:
            vals = np.array([getattr(by_key[(m, c, seed)], metric) for seed in seeds])
            entry[f"{metric}_mean"] = float(vals.mean())
            entry[f"{metric}_sd"] = 0.0 if single_seed else float(vals.std(ddof=1))
        aggregates[(m, c)] = entry

    comparisons = {}
    if not single_seed:
        for c in sorted({c for (m, c) in cells if m == FUSED_METHOD}):
            for baseline in BASELINE_METHODS:
                if (baseline, c) not in aggregates:
                    continue
                for metric in METRICS:
                    fused = [getattr(by_key[(FUSED_METHOD, c, seed)], metric) for seed in seeds]
                    base = [getattr(by_key[(baseline, c, seed)], metric) for seed in seeds]
                    t, p = welch_t_test(fused, base)
                    comparisons[(c, baseline, metric)] = {"t": t, "p": p}

    ordered = sorted(samples, key=lambda s: (s.method, s.client_id, s.seed))
    return MetricReport(
        samples=ordered, seeds=seeds, aggregates=aggregates, comparisons=comparisons
    )


def save_samples_csv(samples, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "client_id", "seed", "auroc", "auprc"])
        for s in sorted(samples, key=lambda s: (s.method, s.client_id, s.seed)):
            writer.writerow([s.method, s.client_id, s.seed, repr(s.auroc), repr(s.auprc)])


def load_samples_csv(path):
    samples = []
    try:
        f = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot read samples file: {exc}") from None
    with f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["method", "client_id", "seed", "auroc", "auprc"]:
            raise ReportError(f"{path}: unexpected header {header}")
        for rownum, rec in enumerate(reader, start=1):
            try:
                samples.append(
                    MetricSample(rec[0], rec[1], int(rec[2]), float(rec[3]), float(rec[4]))
                )
            except (IndexError, ValueError, MetricError) as exc:
                raise ReportError(f"{path}: row {rownum}: {exc}") from None
    return samples


def report_to_dict(report):
    """JSON-ready view of a MetricReport with stable ordering."""
    aggregates = [
        {"method": m, "client_id": c, **vals}
        for (m, c), vals in sorted(report.aggregates.items())
    ]
    comparisons = [
        {"client_id": c, "baseline": baseline, "metric": metric, **vals}
        for (c, baseline, metric), vals in sorted(report.comparisons.items())
    ]
    return {
        "seeds": list(report.seeds),
        "aggregates": aggregates,
        "comparisons": comparisons,
    }


def save_report_json(report, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report_to_dict(report), f, indent=2, sort_keys=True)
        f.write("\n")
