"""Desk-scale synthetic cohorts.

Three kinds of cohorts are built from :mod:`synth`:

* normal records with physiological variability (rate, intervals, wave
  amplitudes, noise, baseline wander, sex, age);
* anomalous records: a normal record plus one injected anomaly kind;
* a labeled, long-tailed multi-label cohort whose classes are ``normal``
  and the anomaly kinds, with class frequencies decaying geometrically.

Each record gets its own seed drawn from the cohort seed, so cohorts are
reproducible and any record can be regenerated on its own.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .signal import EcgRecord
from .synth import ANOMALY_KINDS, AnomalySpec, SynthesisSpec, synthesize_ecg

CLASS_NAMES = ("normal",) + ANOMALY_KINDS

NORMAL_SPEC = SynthesisSpec(
    heart_rate=(55.0, 95.0),
    hr_jitter=(0.0, 0.03),
    p_amp=(0.1, 0.2),
    q_amp=(-0.15, -0.08),
    r_amp=(0.8, 1.3),
    s_amp=(-0.3, -0.15),
    t_amp=(0.2, 0.4),
    pr_ms=(130.0, 190.0),
    qrs_ms=(75.0, 105.0),
    qtc_ms=(380.0, 440.0),
    noise_std=(0.005, 0.02),
    wander_amp=(0.0, 0.1),
)

# per-kind injection settings for anomalous cohort members: conduction and
# ST changes persist over every beat, pauses and artefacts are episodic
ANOMALY_PRESETS = {
    "pr_prolong": AnomalySpec("pr_prolong", beats="all", magnitude=(80.0, 120.0)),
    "qrs_widen": AnomalySpec("qrs_widen", beats="all", magnitude=(1.8, 2.4)),
    "st_shift": AnomalySpec("st_shift", beats="all", magnitude=(0.2, 0.35)),
    "dropped_beat": AnomalySpec("dropped_beat", count=1),
    "noise_burst": AnomalySpec("noise_burst", magnitude=(0.1, 0.2), duration_s=(0.8, 1.5)),
}


def _record_seeds(seed: int, count: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)


def _demographics(rng: np.random.Generator, sex_ratio: float = 0.5) -> dict:
    return {"sex": float(rng.random() < sex_ratio), "age": float(rng.uniform(20.0, 80.0))}


def make_record(seed: int, kinds: Sequence[str] = (), record_id: str | None = None,
                base: SynthesisSpec = NORMAL_SPEC) -> EcgRecord:
    """One cohort member carrying the given anomaly kinds (none = normal)."""
    for k in kinds:
        if k not in ANOMALY_PRESETS:
            raise ConfigError(f"unknown anomaly kind {k!r}")
    rng = np.random.default_rng([seed, 1])
    spec = replace(base, **_demographics(rng), anomalies=tuple(ANOMALY_PRESETS[k] for k in kinds))
    return synthesize_ecg(spec, int(seed), record_id=record_id)


def normal_cohort(count: int, seed: int, prefix: str = "n") -> list[EcgRecord]:
    return [make_record(int(s), (), f"{prefix}{i:05d}") for i, s in enumerate(_record_seeds(seed, count))]


def anomalous_cohort(count: int, seed: int, prefix: str = "a",
                     kinds: Sequence[str] = ANOMALY_KINDS) -> list[EcgRecord]:
    """``count`` records, anomaly kinds assigned round-robin."""
    seeds = _record_seeds(seed, count)
    return [make_record(int(s), (kinds[i % len(kinds)],), f"{prefix}{i:05d}") for i, s in enumerate(seeds)]


def detection_benchmark(seed: int = 0, n_train: int = 800, n_test_normal: int = 200,
                        n_test_anomalous: int = 200) -> dict[str, list[EcgRecord]]:
    """Normal-only training set and a mixed test set; test labels are 1 = anomalous."""
    s = np.random.default_rng(seed).integers(0, 2**31 - 1, size=3)
    return {
        "train": normal_cohort(n_train, int(s[0]), "tr"),
        "test_normal": normal_cohort(n_test_normal, int(s[1]), "tn"),
        "test_anomalous": anomalous_cohort(n_test_anomalous, int(s[2]), "ta"),
    }


def long_tail_counts(n_records: int, n_classes: int = len(CLASS_NAMES), decay: float = 0.45,
                     head_share: float = 0.5) -> np.ndarray:
    """Expected records per class: the head class takes ``head_share``, the rest decays geometrically."""
    tail = decay ** np.arange(n_classes - 1)
    tail = tail / tail.sum() * (1.0 - head_share)
    return np.round(np.concatenate(([head_share], tail)) * n_records).astype(int)


def labeled_cohort(counts: Sequence[int], seed: int, prefix: str = "l",
                   multi_label_rate: float = 0.15, kind_order: Sequence[str] | None = None) -> list[EcgRecord]:
    """Multi-label cohort with ``counts[0]`` normals and ``counts[j]`` records of the j-th kind.

    ``kind_order`` fixes which kind gets which count (default: shuffled by
    ``seed``).  A fraction ``multi_label_rate`` of abnormal records also gets
    a second kind, drawn in proportion to ``counts``.
    """
    rng = np.random.default_rng(seed)
    kinds = list(kind_order) if kind_order is not None else [str(k) for k in rng.permutation(ANOMALY_KINDS)]
    if len(counts) != 1 + len(kinds):
        raise ConfigError(f"need {1 + len(kinds)} class counts, got {len(counts)}")
    primary: list[tuple[str, ...]] = [()] * int(counts[0])
    for k, c in zip(kinds, counts[1:]):
        primary += [(k,)] * int(c)
    tail = np.asarray(counts[1:], dtype=float)
    weights = tail / tail.sum() if tail.sum() else np.full(len(kinds), 1.0 / len(kinds))
    seeds = rng.integers(0, 2**31 - 1, size=len(primary))
    out = []
    for i, (kind_set, s) in enumerate(zip(primary, seeds)):
        if kind_set and rng.random() < multi_label_rate:
            extra = kinds[int(rng.choice(len(kinds), p=weights))]
            if extra not in kind_set:
                kind_set = kind_set + (extra,)
        out.append(make_record(int(s), kind_set, f"{prefix}{i:05d}"))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def long_tail_benchmark(seed: int = 0, n_train: int = 300, n_test_per_class: int = 40,
                        decay: float = 0.45) -> dict:
    """Long-tailed labeled training set plus a class-balanced test set sharing one kind order."""
    rng = np.random.default_rng(seed)
    kinds = [str(k) for k in rng.permutation(ANOMALY_KINDS)]
    s = rng.integers(0, 2**31 - 1, size=2)
    train = labeled_cohort(long_tail_counts(n_train, 1 + len(kinds), decay), int(s[0]), "lt", kind_order=kinds)
    test = labeled_cohort([n_test_per_class] * (1 + len(kinds)), int(s[1]), "le", kind_order=kinds)
    return {"train": train, "test": test, "kind_order": kinds}
