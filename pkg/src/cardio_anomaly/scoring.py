"""Test-time anomaly score maps.

For a record with global signal ``x`` and beats ``x_l,m`` placed at
``origin_m``::

    S_g = (x - x_hat)^2 / sigma_g + (x - x_hat_t)^2
    S_l = sum_m I_m * (x_l,m - x_hat_l,m)^2 / sigma_l,m
    S   = S_g + S_l,   A = mean(S)

``I_m`` places beat m's window in the frame; overlapping windows add up.
Inputs are never masked at test time.  The global reconstruction comes from
one fused pass whose local partner is the beat closest to the frame centre
(ties to the earlier origin); it is shared by every beat, so ``S_g`` does
not depend on beat order.
"""
from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import ContractError
from .model import RestorationModel
from .signal import PreparedRecord


@dataclass(frozen=True, eq=False)
class ScoreMap:
    record_id: str
    values: np.ndarray
    global_part: np.ndarray
    local_part: np.ndarray
    anomaly_score: float
    beat_count: int
    unsegmented: bool = False
    class_probs: np.ndarray | None = None

    def __post_init__(self):
        if self.values.shape != self.global_part.shape or self.values.shape != self.local_part.shape:
            raise ContractError("score map parts must share one shape")


class UnsegmentedRecordWarning(UserWarning):
    """No R-peaks were found; the record was scored with the global branch only."""


def _check_sigma(sigma: np.ndarray) -> None:
    if np.any(~(sigma > 0)):
        raise ContractError("uncertainty sigma must be strictly positive")


def score_global(x, x_hat, sigma_g, x_hat_t=None) -> np.ndarray:
    x, x_hat, sigma_g = (np.asarray(a, dtype=np.float64) for a in (x, x_hat, sigma_g))
    if not (x.shape == x_hat.shape == sigma_g.shape):
        raise ContractError(f"shape mismatch: {x.shape}, {x_hat.shape}, {sigma_g.shape}")
    _check_sigma(sigma_g)
    s = (x - x_hat) ** 2 / sigma_g
    if x_hat_t is not None:
        x_hat_t = np.asarray(x_hat_t, dtype=np.float64)
        if x_hat_t.shape != x.shape:
            raise ContractError(f"trend reconstruction shape {x_hat_t.shape} != {x.shape}")
        s = s + (x - x_hat_t) ** 2
    return s


def score_local(beats: Iterable[tuple], length: int) -> np.ndarray:
    """Sum of per-beat uncertainty-weighted errors placed at their origins.

    ``beats`` yields ``(x_l, x_hat_l, sigma_l, origin)``.  A window may hang
    over either frame edge (edge beats are zero-padded), but it must overlap
    the frame.
    """
    out = np.zeros(length)
    for x_l, xh_l, s_l, origin in beats:
        x_l, xh_l, s_l = (np.asarray(a, dtype=np.float64) for a in (x_l, xh_l, s_l))
        if not (x_l.shape == xh_l.shape == s_l.shape) or x_l.ndim != 1:
            raise ContractError("beat, reconstruction and sigma must be equal-length vectors")
        _check_sigma(s_l)
        d = x_l.size
        origin = int(origin)
        if origin + d <= 0 or origin >= length:
            raise ContractError(f"beat origin {origin} puts the window outside a {length}-sample frame")
        lo, hi = max(origin, 0), min(origin + d, length)
        out[lo:hi] += ((x_l - xh_l) ** 2 / s_l)[lo - origin : hi - origin]
    return out


def restore(model: RestorationModel, rec: PreparedRecord, with_classes: bool = False) -> dict[str, np.ndarray]:
    """Unmasked restoration of one record: global, trend and per-beat outputs."""
    cfg = model.cfg
    with no_grad():
        g = Tensor(rec.global_signal[None, :])
        gfeat = model.encode_global(g)
        tfeat = model.encode_trend(Tensor(rec.trend[None, :])) if cfg.use_trend else None
        out: dict[str, np.ndarray] = {}
        if cfg.use_local and rec.beats:
            beats = rec.beat_matrix()
            lfeat = model.encode_local(Tensor(beats))
            gtile = Tensor(np.repeat(gfeat.data, len(beats), axis=0))
            fused = model.fuse(gtile, lfeat)
            origins = np.array([b.origin_index for b in rec.beats])
            centre = rec.global_signal.size / 2 - beats.shape[1] / 2
            k = int(np.lexsort((origins, np.abs(origins - centre)))[0])
            xg, sg, _, _ = model.decode(fused[k : k + 1, : model.n_global_tokens, :])
            xl, sl = model.decode_local(fused)
            out["local_recon"], out["sigma_l"] = xl.data, sl.data
        else:
            xg, sg, _, _ = model.decode(model.fuse(gfeat, None))
        out["global_recon"], out["sigma_g"] = xg.data[0], sg.data[0]
        if tfeat is not None:
            out["trend_recon"] = model.trend_autoencode(None, gfeat, tfeat).data[0]
        if with_classes:
            out["class_probs"] = model.classify(model.diagnostic_features(gfeat, tfeat)).data[0]
    return out


def assemble(rec: PreparedRecord, model: RestorationModel, with_classes: bool = False) -> ScoreMap:
    x = rec.global_signal
    r = restore(model, rec, with_classes)
    s_g = score_global(x, r["global_recon"], r["sigma_g"], r.get("trend_recon"))
    unsegmented = not rec.beats
    if unsegmented:
        warnings.warn(f"{rec.record_id}: no beats found, local score is zero", UnsegmentedRecordWarning)
    if "local_recon" in r:
        items = zip(rec.beat_matrix(), r["local_recon"], r["sigma_l"], (b.origin_index for b in rec.beats))
        s_l = score_local(items, x.size)
    else:
        s_l = np.zeros(x.size)
    s = s_g + s_l
    return ScoreMap(
        record_id=rec.record_id,
        values=s,
        global_part=s_g,
        local_part=s_l,
        anomaly_score=float(np.mean(s)),
        beat_count=len(rec.beats),
        unsegmented=unsegmented,
        class_probs=r.get("class_probs"),
    )


def assemble_many(records: Sequence[PreparedRecord], model: RestorationModel, jobs: int = 1,
                  with_classes: bool = False) -> list[ScoreMap]:
    """Score records in input order, optionally on ``jobs`` threads."""
    if jobs <= 1:
        return [assemble(r, model, with_classes) for r in records]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda r: assemble(r, model, with_classes), records))


def binarize(score: ScoreMap | np.ndarray, threshold: float) -> np.ndarray:
    values = score.values if isinstance(score, ScoreMap) else np.asarray(score)
    if not np.isfinite(threshold):
        raise ContractError(f"threshold must be finite, got {threshold}")
    return (values >= threshold).astype(np.uint8)


def localization_threshold(maps: Sequence[ScoreMap], n_std: float = 2.0) -> float:
    """mean + n_std * std of all score values pooled over (normal) records."""
    if not maps:
        raise ContractError("need at least one score map")
    pooled = np.concatenate([m.values for m in maps])
    return float(pooled.mean() + n_std * pooled.std())


def top_decile_enrichment(values: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of the top-10% scores inside the mask, over the mask's share of the frame.

    1.0 means no better than placing the top decile uniformly at random.
    """
    values = np.asarray(values)
    mask = np.asarray(mask).astype(bool)
    if values.shape != mask.shape:
        raise ContractError("score and mask lengths differ")
    share = mask.mean()
    if share == 0:
        raise ContractError("empty mask: enrichment undefined")
    k = max(int(np.ceil(0.1 * values.size)), 1)
    top = np.argsort(-values, kind="stable")[:k]
    return float(mask[top].mean() / share)


# -- export --------------------------------------------------------------------------

def write_csv(score: ScoreMap, path, mask: np.ndarray | None = None) -> None:
    n = score.values.size
    mask = np.zeros(n, dtype=np.uint8) if mask is None else np.asarray(mask)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "S", "S_g", "S_l", "mask"])
        for i in range(n):
            w.writerow([i, repr(float(score.values[i])), repr(float(score.global_part[i])),
                        repr(float(score.local_part[i])), int(mask[i])])


def read_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1], data[:, 2], data[:, 3], data[:, 4].astype(np.uint8)


def _polyline(y: np.ndarray, x0: float, y0: float, w: float, h: float) -> str:
    lo, hi = float(np.min(y)), float(np.max(y))
    span = hi - lo or 1.0
    xs = x0 + np.linspace(0.0, w, y.size)
    ys = y0 + h - (y - lo) / span * h
    return " ".join(f"{a:.1f},{b:.2f}" for a, b in zip(xs, ys))


def write_svg(score: ScoreMap, signal: np.ndarray, path, mask: np.ndarray | None = None,
              width: int = 1000, height: int = 300, max_points: int = 2500) -> None:
    """Signal (top) and score map (bottom) with shaded ground-truth spans."""
    step = max(1, signal.size // max_points)
    sig, s = np.asarray(signal)[::step], score.values[::step]
    pad, panel = 10, (height - 3 * 10) / 2
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if mask is not None:
        m = np.asarray(mask).astype(np.int8)
        edges = np.flatnonzero(np.diff(np.concatenate(([0], m, [0]))))
        scale = (width - 2 * pad) / m.size
        for a, b in zip(edges[::2], edges[1::2]):
            parts.append(f'<rect x="{pad + a * scale:.1f}" y="0" width="{(b - a) * scale:.1f}" '
                         f'height="{height}" fill="#f4c7c3" opacity="0.6"/>')
    parts.append(f'<polyline fill="none" stroke="black" stroke-width="0.8" '
                 f'points="{_polyline(sig, pad, pad, width - 2 * pad, panel)}"/>')
    parts.append(f'<polyline fill="none" stroke="#c0392b" stroke-width="0.8" '
                 f'points="{_polyline(s, pad, 2 * pad + panel, width - 2 * pad, panel)}"/>')
    parts.append(f'<text x="{pad}" y="{height - 2}" font-size="10" font-family="sans-serif">'
                 f'{score.record_id}  A={score.anomaly_score:.4g}  beats={score.beat_count}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
