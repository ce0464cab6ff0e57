"""Evaluation metrics, stratified reports and their export.

Conventions: a higher score means "more likely positive"; a record is
predicted positive when ``score >= threshold``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import ContractError, UndefinedMetricError
from .signal import AttributeVector


def _prep(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores vs {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ContractError("labels must be 0 or 1")
    if np.any(np.isnan(s)):
        raise ContractError("scores contain NaN")
    return s, y.astype(bool)


def _need_both(y: np.ndarray) -> None:
    if y.all() or not y.any():
        raise UndefinedMetricError("metric needs both positive and negative examples")


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(pos > neg) + P(pos == neg) / 2."""
    s, y = _prep(scores, labels)
    _need_both(y)
    ranks = stats.rankdata(s)  # average ranks handle ties
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _sweep(s: np.ndarray, y: np.ndarray):
    """Counts at every distinct threshold, highest first (``score >= t``)."""
    thresholds = np.unique(s)[::-1]
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp_cum = np.cumsum(y_sorted)
    fp_cum = np.cumsum(~y_sorted)
    # last index holding each threshold value
    last = np.searchsorted(-s_sorted, -thresholds, side="right") - 1
    return thresholds, tp_cum[last], fp_cum[last]


def operating_point(scores, labels) -> tuple[float, float, float]:
    """(threshold, sensitivity, specificity) maximising Youden's J.

    Ties in J go to the higher specificity, then to the higher threshold.
    Besides every distinct score, ``+inf`` (predict nothing positive) is a
    candidate.
    """
    s, y = _prep(scores, labels)
    _need_both(y)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    thr, tp, fp = _sweep(s, y)
    thr = np.concatenate(([np.inf], thr))
    sens = np.concatenate(([0.0], tp / n_pos))
    spec = np.concatenate(([1.0], 1.0 - fp / n_neg))
    j = sens + spec - 1.0
    best = np.flatnonzero(np.isclose(j, j.max(), rtol=0.0, atol=1e-12))
    pick = best[np.argmax(spec[best])]  # thresholds descend, so argmax keeps the highest
    return float(thr[pick]), float(sens[pick]), float(spec[pick])


def rates_at(scores, labels, threshold: float) -> tuple[float, float]:
    s, y = _prep(scores, labels)
    _need_both(y)
    pred = s >= threshold
    return float((pred & y).sum() / y.sum()), float((~pred & ~y).sum() / (~y).sum())


def pre_at_recall(scores, labels, recall: float = 0.9, min_positives: int = 10) -> tuple[float, float, float]:
    """(precision, F1, threshold) at the largest threshold whose recall reaches ``recall``."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos < min_positives:
        raise UndefinedMetricError(f"need >= {min_positives} positives for precision at recall, got {n_pos}")
    thr, tp, fp = _sweep(s, y)
    rec = tp / n_pos
    i = int(np.argmax(rec >= recall - 1e-12))  # first (largest) threshold reaching the target
    precision = tp[i] / (tp[i] + fp[i])
    f1 = 2 * precision * rec[i] / (precision + rec[i])
    return float(precision), float(f1), float(thr[i])


def dice(pred_mask, true_mask) -> float:
    a = np.asarray(pred_mask).astype(bool).ravel()
    b = np.asarray(true_mask).astype(bool).ravel()
    if a.shape != b.shape:
        raise ContractError(f"mask lengths differ: {a.size} vs {b.size}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (a & b).sum() / denom)


def dice_counts(pred_mask, true_mask) -> tuple[int, int]:
    """(2|A&B|, |A|+|B|): add these over records for a pooled Dice."""
    a = np.asarray(pred_mask).astype(bool).ravel()
    b = np.asarray(true_mask).astype(bool).ravel()
    if a.shape != b.shape:
        raise ContractError(f"mask lengths differ: {a.size} vs {b.size}")
    return int(2 * (a & b).sum()), int(a.sum() + b.sum())


def mcnemar(correct_a, correct_b, exact_below: int = 25) -> float:
    """Two-sided p-value on the discordant pairs of two paired classifiers."""
    a = np.asarray(correct_a).astype(bool).ravel()
    b_ = np.asarray(correct_b).astype(bool).ravel()
    if a.shape != b_.shape:
        raise ContractError("paired vectors must have equal length")
    b = int((a & ~b_).sum())
    c = int((~a & b_).sum())
    n = b + c
    if n == 0:
        return 1.0
    if n < exact_below:
        return float(min(1.0, 2.0 * stats.binom.cdf(min(b, c), n, 0.5)))
    chi2 = (abs(b - c) - 1.0) ** 2 / n
    return float(stats.chi2.sf(chi2, df=1))


def macro_auroc(y_true, probs, classes: Sequence[int] | None = None) -> tuple[float, np.ndarray]:
    """Macro mean over ``classes`` (default all) of per-class AUROC.

    Classes without both labels in ``y_true`` get NaN and are left out of the
    mean; if none is defined an :class:`UndefinedMetricError` is raised.
    """
    y = np.asarray(y_true)
    p = np.asarray(probs, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 2:
        raise ContractError(f"label matrix {y.shape} and probability matrix {p.shape} must match")
    per = np.full(y.shape[1], np.nan)
    for k in range(y.shape[1]):
        if y[:, k].any() and not y[:, k].all():
            per[k] = auroc(p[:, k], y[:, k])
    sel = list(range(y.shape[1])) if classes is None else list(classes)
    vals = per[sel]
    if not len(vals) or np.all(np.isnan(vals)):
        raise UndefinedMetricError("no class with both labels present")
    return float(np.nanmean(vals)), per


# -- reports --------------------------------------------------------------------------

@dataclass
class MetricReport:
    auroc: float
    sensitivity: float
    specificity: float
    f1: float
    pre_at_90: float
    n_pos: int
    n_neg: int
    operating_threshold: float
    dice: float | None = None
    stratum_key: str | None = None
    undefined: str = ""  # reason when a metric could not be computed

    def __post_init__(self):
        for name in ("auroc", "sensitivity", "specificity", "f1", "pre_at_90"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ContractError(f"{name}={v} outside [0, 1]")

    @property
    def n(self) -> int:
        return self.n_pos + self.n_neg


def make_report(scores, labels, threshold: float | None = None, dice_value: float | None = None,
                stratum: str | None = None, recall: float = 0.9) -> MetricReport:
    """All detection metrics for one score/label set.

    ``threshold`` fixes the sensitivity/specificity operating point (e.g. one
    chosen on validation data); by default the Youden point of this set is
    used.  Undefined metrics are NaN and the reason is kept in ``undefined``.
    """
    s, y = _prep(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    nan = float("nan")
    reasons = []
    try:
        auc = auroc(s, y)
        if threshold is None:
            thr, sens, spec = operating_point(s, y)
        else:
            thr = float(threshold)
            sens, spec = rates_at(s, y, thr)
    except UndefinedMetricError as exc:
        auc = sens = spec = nan
        thr = nan if threshold is None else float(threshold)
        reasons.append(str(exc))
    try:
        pre, f1, _ = pre_at_recall(s, y, recall)
    except UndefinedMetricError as exc:
        pre = f1 = nan
        reasons.append(str(exc))
    return MetricReport(auc, sens, spec, f1, pre, n_pos, n_neg, thr, dice_value, stratum, "; ".join(reasons))


def bootstrap_ci(metric: Callable[..., float], *arrays, n_boot: int = 1000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile interval of ``metric`` over record-level resamples.

    Replicate ``i`` draws from its own spawned RNG stream, so results do not
    depend on evaluation order.  Replicates where the metric is undefined are
    skipped.
    """
    arrays = [np.asarray(a) for a in arrays]
    n = len(arrays[0])
    streams = np.random.SeedSequence(seed).spawn(n_boot)
    vals = []
    for ss in streams:
        idx = np.random.default_rng(ss).integers(0, n, size=n)
        try:
            vals.append(metric(*(a[idx] for a in arrays)))
        except UndefinedMetricError:
            continue
    if not vals:
        raise UndefinedMetricError("metric undefined on every bootstrap replicate")
    lo, hi = np.quantile(vals, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


def age_decade(age: float | None) -> str:
    """Ten-year bin label, e.g. 59 -> '50-59'."""
    if age is None or (isinstance(age, float) and math.isnan(age)):
        return "unknown"
    lo = int(math.floor(age / 10.0)) * 10
    return f"{lo}-{lo + 9}"


def sex_stratum(sex: float | None) -> str:
    if sex is None or (isinstance(sex, float) and math.isnan(sex)):
        return "unknown"
    return "female" if sex == 1 else "male"


STRATIFIERS: dict[str, Callable[[AttributeVector], str]] = {
    "sex": lambda a: sex_stratum(a.sex),
    "age": lambda a: age_decade(a.age),
}


def stratify(attributes: Sequence[AttributeVector], scores, labels, by: str = "sex",
             threshold: float | None = None) -> list[MetricReport]:
    """One report per stratum, in sorted stratum order; single-class strata are flagged."""
    if by not in STRATIFIERS:
        raise ContractError(f"unknown stratifier {by!r}; expected one of {sorted(STRATIFIERS)}")
    s, y = _prep(scores, labels)
    if len(attributes) != s.size:
        raise ContractError("one attribute vector per record required")
    keys = np.array([STRATIFIERS[by](a) for a in attributes])
    return [make_report(s[keys == k], y[keys == k], threshold, stratum=f"{by}={k}") for k in sorted(set(keys))]


def fairness_gap(reports: Sequence[MetricReport]) -> float:
    """max - min AUROC over strata where it is defined."""
    vals = [r.auroc for r in reports if not math.isnan(r.auroc)]
    if len(vals) < 2:
        raise UndefinedMetricError("need two strata with a defined AUROC")
    return float(max(vals) - min(vals))


REPORT_COLUMNS = tuple(f.name for f in fields(MetricReport))


def write_reports_csv(reports: Sequence[MetricReport], path, names: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("name",) + REPORT_COLUMNS)
        for i, r in enumerate(reports):
            d = asdict(r)
            w.writerow([names[i] if names else (r.stratum_key or f"report{i}")]
                       + [_cell(d[c]) for c in REPORT_COLUMNS])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_table(reports: Sequence[MetricReport], names: Sequence[str] | None = None) -> str:
    cols = ("auroc", "sensitivity", "specificity", "f1", "pre_at_90", "n_pos", "n_neg")
    rows = [[names[i] if names else (r.stratum_key or f"report{i}")] + [
        f"{getattr(r, c):.4f}" if isinstance(getattr(r, c), float) else str(getattr(r, c)) for c in cols
    ] for i, r in enumerate(reports)]
    header = ["name", *cols]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    out = [line(header), line(["-" * w for w in widths])] + [line(r) for r in rows]
    return "\n".join(out) + "\n"


def write_fairness_svg(reports: Sequence[MetricReport], path, width: int = 640, height: int = 320) -> None:
    """Grouped bars (AUROC, sensitivity, specificity) per stratum."""
    metrics_ = ("auroc", "sensitivity", "specificity")
    colours = ("#2c7bb6", "#fdae61", "#abd9e9")
    pad_l, pad_b, pad_t = 40, 40, 20
    plot_w, plot_h = width - pad_l - 10, height - pad_b - pad_t
    group_w = plot_w / max(len(reports), 1)
    bar_w = group_w * 0.8 / len(metrics_)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad_l}" y1="{pad_t + plot_h}" x2="{width - 10}" y2="{pad_t + plot_h}" stroke="black"/>',
    ]
    for tick in (0.0, 0.5, 1.0):
        y = pad_t + plot_h * (1 - tick)
        parts.append(f'<text x="4" y="{y + 3:.1f}" font-size="10" font-family="sans-serif">{tick:.1f}</text>')
    for g, r in enumerate(reports):
        x0 = pad_l + g * group_w + group_w * 0.1
        for j, (m, col) in enumerate(zip(metrics_, colours)):
            v = getattr(r, m)
            h = 0.0 if math.isnan(v) else v * plot_h
            parts.append(f'<rect x="{x0 + j * bar_w:.1f}" y="{pad_t + plot_h - h:.1f}" width="{bar_w:.1f}" '
                         f'height="{h:.1f}" fill="{col}"><title>{m}={v:.4f}</title></rect>')
        label = r.stratum_key or f"group{g}"
        parts.append(f'<text x="{x0:.1f}" y="{height - pad_b / 2:.1f}" font-size="10" '
                     f'font-family="sans-serif">{label}</text>')
    for j, (m, col) in enumerate(zip(metrics_, colours)):
        parts.append(f'<rect x="{pad_l + j * 110}" y="4" width="10" height="10" fill="{col}"/>'
                     f'<text x="{pad_l + j * 110 + 14}" y="13" font-size="10" font-family="sans-serif">{m}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
