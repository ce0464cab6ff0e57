"""Synthetic single-lead ECG with injectable, annotated anomalies.

Each beat is a sum of five Gaussian waves (P, Q, R, S, T) placed from the
PR, QRS and QT intervals.  Anomalies edit individual beats or add a noise
burst, and every injected change is marked sample by sample in the record's
``anomaly_mask``.

A :class:`SynthesisSpec` may hold ranges (``lo..hi``) instead of numbers;
these are drawn uniformly from the record seed, so one spec file describes a
whole cohort.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import ConfigError
from .signal import AttributeVector, EcgRecord

ANOMALY_KINDS = ("pr_prolong", "qrs_widen", "st_shift", "dropped_beat", "noise_burst")

# magnitude meaning per kind: extra PR ms, QRS width factor, ST offset mV,
# unused, noise RMS mV
_DEFAULT_MAGNITUDE = {
    "pr_prolong": 100.0,
    "qrs_widen": 2.0,
    "st_shift": 0.25,
    "dropped_beat": 0.0,
    "noise_burst": 0.15,
}


class SpecError(ConfigError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


Number = float | tuple[float, float]


def _draw(value: Number, rng: np.random.Generator) -> float:
    if isinstance(value, tuple):
        lo, hi = value
        return float(rng.uniform(lo, hi))
    return float(value)


def _parse_number(key: str, text: str) -> Number:
    try:
        if ".." in text:
            lo, hi = (float(t) for t in text.split("..", 1))
            if hi < lo:
                raise SpecError(f"{key}: empty range {text!r}")
            return (lo, hi)
        return float(text)
    except ValueError:
        raise SpecError(f"{key}: not a number or range: {text!r}") from None


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    beats: tuple[int, int] | str | None = None  # inclusive beat index range, "all", or None = random
    count: int = 1  # beats affected when ``beats`` is drawn at random
    magnitude: Number | None = None
    start_s: Number | None = None  # noise_burst only
    duration_s: Number = 1.0  # noise_burst only

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise SpecError(f"unknown anomaly kind {self.kind!r}; expected one of {ANOMALY_KINDS}")
        if isinstance(self.beats, str) and self.beats != "all":
            raise SpecError(f"beats must be a range, 'all' or random, got {self.beats!r}")


@dataclass(frozen=True)
class SynthesisSpec:
    duration_s: float = 10.0
    fs: float = 500.0
    heart_rate: Number = 70.0
    hr_jitter: Number = 0.02
    p_amp: Number = 0.15
    q_amp: Number = -0.12
    r_amp: Number = 1.0
    s_amp: Number = -0.25
    t_amp: Number = 0.3
    pr_ms: Number = 160.0
    qrs_ms: Number = 90.0
    qtc_ms: Number = 410.0
    noise_std: Number = 0.01
    wander_amp: Number = 0.05
    powerline_amp: Number = 0.0
    sex: Number | None = None
    age: Number | None = None
    first_beat_s: Number | None = None
    anomalies: tuple[AnomalySpec, ...] = field(default_factory=tuple)

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "SynthesisSpec":
        scalars: dict[str, object] = {}
        anomalies: dict[int, dict[str, str]] = {}
        names = {f.name for f in fields(cls)} - {"anomalies"}
        for key, text in values.items():
            if key.startswith("anomaly."):
                parts = key.split(".")
                if len(parts) != 3 or not parts[1].isdigit():
                    raise SpecError(f"bad anomaly key {key!r}; use anomaly.<n>.<field>")
                anomalies.setdefault(int(parts[1]), {})[parts[2]] = text
            elif key in names:
                scalars[key] = _parse_number(key, text)
            else:
                raise SpecError(f"unknown synthesis key {key!r}")
        for key in ("duration_s", "fs"):
            if isinstance(scalars.get(key), tuple):
                raise SpecError(f"{key} must be a fixed number")
        return cls(**scalars, anomalies=tuple(_anomaly_from_kv(i, anomalies[i]) for i in sorted(anomalies)))

    @classmethod
    def from_file(cls, path) -> "SynthesisSpec":
        return cls.from_kv(parse_kv(Path(path).read_text()))

    def to_kv(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for f in fields(self):
            if f.name == "anomalies":
                continue
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = _fmt(v)
        for i, a in enumerate(self.anomalies):
            out[f"anomaly.{i}.kind"] = a.kind
            out[f"anomaly.{i}.beats"] = (
                "random" if a.beats is None else a.beats if a.beats == "all" else f"{a.beats[0]}-{a.beats[1]}"
            )
            out[f"anomaly.{i}.count"] = str(a.count)
            if a.magnitude is not None:
                out[f"anomaly.{i}.magnitude"] = _fmt(a.magnitude)
            if a.start_s is not None:
                out[f"anomaly.{i}.start_s"] = _fmt(a.start_s)
            out[f"anomaly.{i}.duration_s"] = _fmt(a.duration_s)
        return out


def _fmt(v) -> str:
    return f"{v[0]!r}..{v[1]!r}" if isinstance(v, tuple) else repr(float(v))


def _anomaly_from_kv(index: int, values: dict[str, str]) -> AnomalySpec:
    key = f"anomaly.{index}"
    if "kind" not in values:
        raise SpecError(f"{key}.kind missing")
    unknown = set(values) - {"kind", "beats", "count", "magnitude", "start_s", "duration_s"}
    if unknown:
        raise SpecError(f"{key}: unknown fields {sorted(unknown)}")
    beats = None
    text = values.get("beats", "random")
    if text == "all":
        beats = "all"
    elif text != "random":
        try:
            lo, _, hi = text.partition("-")
            beats = (int(lo), int(hi or lo))
        except ValueError:
            raise SpecError(f"{key}.beats: expected 'i', 'i-j', 'all' or 'random', got {text!r}") from None
        if beats[1] < beats[0] or beats[0] < 0:
            raise SpecError(f"{key}.beats: bad range {text!r}")
    return AnomalySpec(
        kind=values["kind"],
        beats=beats,
        count=int(values.get("count", "1")),
        magnitude=_parse_number(f"{key}.magnitude", values["magnitude"]) if "magnitude" in values else None,
        start_s=_parse_number(f"{key}.start_s", values["start_s"]) if "start_s" in values else None,
        duration_s=_parse_number(f"{key}.duration_s", values.get("duration_s", "1.0")),
    )


# -- waveform model ------------------------------------------------------------

@dataclass
class _Beat:
    r: float  # seconds
    pr: float  # seconds
    qrs: float
    qt: float
    dropped: bool = False
    st_offset: float = 0.0

    @property
    def qrs_on(self) -> float:
        return self.r - 0.5 * self.qrs

    @property
    def qrs_off(self) -> float:
        return self.r + 0.5 * self.qrs

    @property
    def p_on(self) -> float:
        return self.qrs_on - self.pr

    @property
    def t_end(self) -> float:
        return self.qrs_on + self.qt


_P_DURATION = 0.10


def _gauss(t: np.ndarray, centre: float, width: float, amp: float) -> np.ndarray:
    lo = np.searchsorted(t, centre - 5 * width)
    hi = np.searchsorted(t, centre + 5 * width)
    out = np.zeros_like(t)
    out[lo:hi] = amp * np.exp(-0.5 * ((t[lo:hi] - centre) / width) ** 2)
    return out


def _render_beat(t: np.ndarray, b: _Beat, amps: dict[str, float]) -> np.ndarray:
    if b.dropped:
        return np.zeros_like(t)
    w = 0.1 * b.qrs
    p_centre = b.p_on + 0.5 * _P_DURATION
    t_width = 0.1 * b.qt
    t_centre = b.t_end - 2.5 * t_width
    y = _gauss(t, p_centre, 0.2 * _P_DURATION, amps["p"])
    y += _gauss(t, b.r - 0.3 * b.qrs, w, amps["q"])
    y += _gauss(t, b.r, w, amps["r"])
    y += _gauss(t, b.r + 0.3 * b.qrs, w, amps["s"])
    y += _gauss(t, t_centre, t_width, amps["t"])
    if b.st_offset:
        y += b.st_offset * _plateau(t, b.qrs_off, b.t_end, 0.02)
    return y


def _plateau(t: np.ndarray, start: float, stop: float, ramp: float) -> np.ndarray:
    """1 on [start, stop) with raised-cosine ramps of ``ramp`` seconds inside the span."""
    out = np.zeros_like(t)
    inside = (t >= start) & (t < stop)
    out[inside] = 1.0
    up = (t >= start) & (t < start + ramp)
    out[up] = 0.5 - 0.5 * np.cos(np.pi * (t[up] - start) / ramp)
    down = (t >= stop - ramp) & (t < stop)
    out[down] = np.minimum(out[down], 0.5 - 0.5 * np.cos(np.pi * (stop - t[down]) / ramp))
    return out


def _span_mask(mask: np.ndarray, fs: float, start: float, stop: float) -> None:
    lo = max(int(math.floor(start * fs)), 0)
    hi = min(int(math.ceil(stop * fs)), mask.size)
    if hi > lo:
        mask[lo:hi] = 1


def synthesize_ecg(spec: SynthesisSpec, seed: int, record_id: str | None = None) -> EcgRecord:
    """Render one record. Deterministic for a fixed ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    fs = float(spec.fs)
    n = int(round(spec.duration_s * fs))
    if n <= 0:
        raise SpecError("duration_s * fs must be positive")
    t = np.arange(n) / fs

    hr = _draw(spec.heart_rate, rng)
    jitter = _draw(spec.hr_jitter, rng)
    sex = None if spec.sex is None else float(round(_draw(spec.sex, rng)))
    age = None if spec.age is None else _draw(spec.age, rng)
    age_scale = 1.0 if age is None else 1.0 - 0.004 * (age - 50.0)
    amps = {k: _draw(getattr(spec, f"{k}_amp"), rng) * age_scale for k in "pqrst"}
    pr = _draw(spec.pr_ms, rng) / 1000.0
    qrs = _draw(spec.qrs_ms, rng) / 1000.0
    qtc = _draw(spec.qtc_ms, rng) / 1000.0 + (0.012 if sex == 1.0 else 0.0)
    noise_std = _draw(spec.noise_std, rng)
    wander = _draw(spec.wander_amp, rng)
    powerline = _draw(spec.powerline_amp, rng)

    if not 20.0 <= hr <= 250.0:
        raise SpecError(f"heart rate {hr:.1f} bpm outside [20, 250]")
    rr = 60.0 / hr
    qt = qtc * math.sqrt(rr)
    if pr + qrs >= rr:
        raise SpecError(f"PR ({pr*1e3:.0f} ms) + QRS ({qrs*1e3:.0f} ms) does not fit in RR ({rr*1e3:.0f} ms)")
    if qt >= rr:
        raise SpecError(f"QT ({qt*1e3:.0f} ms) does not fit in RR ({rr*1e3:.0f} ms)")

    first = _draw(spec.first_beat_s, rng) if spec.first_beat_s is not None else rng.uniform(0.3, 0.3 + 0.4 * rr)
    rr_seq = rr * (1.0 + jitter * rng.standard_normal(int(spec.duration_s / rr) + 4))
    r_times = first - rr + np.concatenate(([0.0], np.cumsum(rr_seq)))
    beats = [_Beat(r, pr, qrs, qt) for r in r_times if r < spec.duration_s + rr]
    in_frame = [i for i, b in enumerate(beats) if 0.0 <= b.r < spec.duration_s]

    mask = np.zeros(n, dtype=np.uint8)
    burst = np.zeros(n)
    labels: list[str] = []
    for a in spec.anomalies:
        mag = _draw(a.magnitude if a.magnitude is not None else _DEFAULT_MAGNITUDE[a.kind], rng)
        if a.kind == "noise_burst":
            dur = _draw(a.duration_s, rng)
            start = _draw(a.start_s, rng) if a.start_s is not None else rng.uniform(0.0, max(spec.duration_s - dur, 0.0))
            burst += _noise_burst(t, start, dur, mag, fs, rng)
            _span_mask(mask, fs, start, start + dur)
        else:
            lo, hi = _pick_beats(a, len(in_frame), rng)
            for k in range(lo, hi + 1):
                b = beats[in_frame[k]]
                _apply(a.kind, b, mag)
                _mask_beat(a.kind, b, mask, fs)
        if a.kind not in labels:
            labels.append(a.kind)

    x = np.zeros(n)
    for b in beats:
        x += _render_beat(t, b, amps)
    x += noise_std * rng.standard_normal(n)
    x += wander * np.sin(2 * np.pi * 0.25 * t + rng.uniform(0, 2 * np.pi))
    x += powerline * np.sin(2 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi))
    x += burst

    r_peaks = np.array(
        [int(round(beats[i].r * fs)) for i in in_frame if not beats[i].dropped and round(beats[i].r * fs) < n],
        dtype=np.int64,
    )
    mean_rr = float(np.mean(np.diff(r_times))) if len(r_times) > 1 else rr
    attrs = AttributeVector(
        sex=sex,
        age=age,
        heart_rate=60.0 / mean_rr,
        pr_ms=pr * 1000.0,
        qt_ms=qt * 1000.0,
        qtc_ms=qtc * 1000.0,
        qrs_ms=qrs * 1000.0,
    )
    return EcgRecord(
        record_id=record_id or f"syn{seed:08d}",
        channels=x[None, :],
        fs=fs,
        attributes=attrs,
        labels=tuple(labels) if labels else ("normal",),
        anomaly_mask=mask,
        r_peaks=r_peaks,
    )


def _pick_beats(a: AnomalySpec, n_beats: int, rng: np.random.Generator) -> tuple[int, int]:
    if n_beats == 0:
        raise SpecError("record has no beats to modify")
    if a.beats == "all":
        return 0, n_beats - 1
    if a.beats is not None:
        lo, hi = a.beats
        if hi >= n_beats:
            raise SpecError(f"{a.kind}: beats {lo}-{hi} out of range, record has {n_beats} beats")
        return lo, hi
    count = min(max(a.count, 1), n_beats)
    # keep random edits off the first and last beat when there is room
    lo_min, hi_max = (1, n_beats - 2) if n_beats - 2 >= count else (0, n_beats - 1)
    lo = int(rng.integers(lo_min, hi_max - count + 2))
    return lo, lo + count - 1


def _apply(kind: str, b: _Beat, mag: float) -> None:
    if kind == "pr_prolong":
        b.pr += mag / 1000.0
    elif kind == "qrs_widen":
        b.qrs *= mag
    elif kind == "st_shift":
        b.st_offset = mag
    elif kind == "dropped_beat":
        b.dropped = True


def _mask_beat(kind: str, b: _Beat, mask: np.ndarray, fs: float) -> None:
    if kind == "pr_prolong":
        _span_mask(mask, fs, b.p_on, b.qrs_on)
    elif kind == "qrs_widen":
        _span_mask(mask, fs, b.qrs_on, b.qrs_off)
    elif kind == "st_shift":
        _span_mask(mask, fs, b.qrs_off, b.t_end)
    elif kind == "dropped_beat":
        _span_mask(mask, fs, b.p_on, b.t_end)


def _noise_burst(t, start, dur, rms, fs, rng) -> np.ndarray:
    out = np.zeros_like(t)
    sel = (t >= start) & (t < start + dur)
    k = int(sel.sum())
    if k == 0:
        return out
    sos = sps.butter(4, [5.0, min(35.0, 0.45 * fs)], btype="bandpass", fs=fs, output="sos")
    raw = sps.sosfilt(sos, rng.standard_normal(k + int(fs)))[int(fs):]
    raw *= rms / (np.std(raw) + 1e-12)
    out[sel] = raw * np.hanning(k + 2)[1:-1] ** 0.25
    return out
