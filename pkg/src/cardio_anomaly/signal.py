"""ECG record types and preprocessing: filtering, R-peaks, beats, trend."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import signal as sps
from scipy.ndimage import maximum_filter1d, uniform_filter1d

from .errors import ConfigError, ContractError

GLOBAL_LEN = 5000
BEAT_LEN = 500

ATTRIBUTE_NAMES = ("sex", "age", "heart_rate", "pr_ms", "qt_ms", "qtc_ms", "qrs_ms")


@dataclass(frozen=True)
class AttributeVector:
    """Patient and interval attributes. Missing values are ``None``.

    ``sex`` is 0 (male) or 1 (female); intervals are in milliseconds.
    """

    sex: float | None = None
    age: float | None = None
    heart_rate: float | None = None
    pr_ms: float | None = None
    qt_ms: float | None = None
    qtc_ms: float | None = None
    qrs_ms: float | None = None

    def as_array(self, names: Sequence[str] = ATTRIBUTE_NAMES) -> np.ndarray:
        """Raw values in ``names`` order, NaN where missing."""
        return np.array([np.nan if getattr(self, n) is None else float(getattr(self, n)) for n in names])

    @classmethod
    def from_mapping(cls, values: dict) -> "AttributeVector":
        clean = {}
        for name in ATTRIBUTE_NAMES:
            v = values.get(name)
            clean[name] = None if v is None or v == "" or (isinstance(v, float) and np.isnan(v)) else float(v)
        return cls(**clean)

    def to_mapping(self) -> dict[str, float | None]:
        return {n: getattr(self, n) for n in ATTRIBUTE_NAMES}


@dataclass(frozen=True, eq=False)
class EcgRecord:
    record_id: str
    channels: np.ndarray  # (n_channels, n_samples), mV
    fs: float
    attributes: AttributeVector = field(default_factory=AttributeVector)
    labels: tuple[str, ...] = ()
    anomaly_mask: np.ndarray | None = None
    r_peaks: np.ndarray | None = None  # generator ground truth, synthetic records only

    def __post_init__(self):
        ch = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))
        object.__setattr__(self, "channels", ch)
        if not self.fs > 0:
            raise ContractError(f"{self.record_id}: sampling rate must be positive, got {self.fs}")
        if self.anomaly_mask is not None:
            mask = np.asarray(self.anomaly_mask, dtype=np.uint8)
            if mask.shape != (ch.shape[1],):
                raise ContractError(
                    f"{self.record_id}: anomaly mask length {mask.shape} != {ch.shape[1]} samples"
                )
            object.__setattr__(self, "anomaly_mask", mask)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    def global_signal(self, length: int = GLOBAL_LEN) -> "GlobalSignal":
        """Channel 0 cut or zero-padded to ``length`` samples."""
        x = self.channels[0]
        out = np.zeros(length)
        n = min(length, x.size)
        out[:n] = x[:n]
        return GlobalSignal(out, self.fs)

    def with_channels(self, channels: np.ndarray) -> "EcgRecord":
        return replace(self, channels=channels)


@dataclass(frozen=True, eq=False)
class GlobalSignal:
    values: np.ndarray
    fs: float

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class LocalBeat:
    """One beat window.

    ``origin_index`` is the frame position of ``values[0]``.  For beats close
    to the record edges it can lie up to half a window outside ``[0, D - d]``;
    the part of the window outside the frame holds zeros.
    """

    values: np.ndarray
    origin_index: int

    def __len__(self) -> int:
        return self.values.size

    def frame_slices(self, frame_len: int) -> tuple[slice, slice]:
        """(frame slice, window slice) of the part of the window inside the frame."""
        lo = max(self.origin_index, 0)
        hi = min(self.origin_index + self.values.size, frame_len)
        return slice(lo, hi), slice(lo - self.origin_index, hi - self.origin_index)


@dataclass(frozen=True, eq=False)
class TrendSignal:
    values: np.ndarray


# -- filtering -----------------------------------------------------------------

def filter_signal(
    x: np.ndarray,
    fs: float,
    low_hz: float = 0.5,
    high_hz: float = 40.0,
    notch_hz: float | None = 50.0,
    order: int = 4,
    notch_q: float = 30.0,
) -> np.ndarray:
    """Zero-phase Butterworth band-pass followed by a zero-phase notch.

    Works along the last axis, so ``x`` may be one channel or a channel stack.
    """
    if not low_hz < high_hz:
        raise ConfigError(f"band-pass cutoffs out of order: low={low_hz} high={high_hz}")
    if not fs > 2 * high_hz:
        raise ConfigError(f"sampling rate {fs} Hz too low for a {high_hz} Hz cutoff")
    x = np.asarray(x, dtype=np.float64)
    sos = sps.butter(order, [low_hz, high_hz], btype="bandpass", fs=fs, output="sos")
    y = sps.sosfiltfilt(sos, x, axis=-1)
    if notch_hz:
        b, a = sps.iirnotch(notch_hz, notch_q, fs=fs)
        y = sps.filtfilt(b, a, y, axis=-1)
    return y


def bandpass_filter(
    record: EcgRecord,
    low_hz: float = 0.5,
    high_hz: float = 40.0,
    notch_hz: float | None = 50.0,
    order: int = 4,
    notch_q: float = 30.0,
) -> EcgRecord:
    return record.with_channels(
        filter_signal(record.channels, record.fs, low_hz, high_hz, notch_hz, order, notch_q)
    )


# -- R-peaks ---------------------------------------------------------------------

def detect_r_peaks(
    x,
    fs: float | None = None,
    refractory_s: float = 0.2,
    window_s: float = 2.0,
    ratio: float = 0.5,
    envelope_s: float = 0.08,
    floor_ratio: float = 0.15,
    edge_s: float = 0.1,
) -> np.ndarray:
    """Adaptive-threshold R-peak detector.

    Squared first derivative, smoothed by a moving average, is compared to
    ``ratio`` times its rolling maximum over ``window_s`` seconds (never less
    than ``floor_ratio`` times the median rolling maximum, which keeps long
    pauses from pulling the threshold into the noise).  Each supra-threshold
    run contributes the signal maximum inside it; peaks closer than the
    refractory period keep the taller one.
    """
    if isinstance(x, GlobalSignal):
        fs = x.fs if fs is None else fs
        x = x.values
    if fs is None:
        raise ContractError("sampling rate required")
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 3:
        return np.array([], dtype=np.int64)

    energy = np.gradient(x) ** 2
    env = uniform_filter1d(energy, size=max(int(envelope_s * fs), 1), mode="nearest")
    if not np.max(env) > 0:
        return np.array([], dtype=np.int64)
    # filter transients at the record edges must not set the threshold
    edge = min(int(edge_s * fs), n // 4)
    inner = env.copy()
    if edge:
        inner[:edge] = 0.0
        inner[-edge:] = 0.0
    roll = maximum_filter1d(inner, size=max(int(window_s * fs), 1), mode="nearest")
    thr = np.maximum(ratio * roll, floor_ratio * np.median(roll))
    above = env > thr

    edges = np.flatnonzero(np.diff(np.concatenate(([0], above.astype(np.int8), [0]))))
    pad = int(0.05 * fs)
    regions = [(max(a - pad, 0), min(b + pad, n)) for a, b in zip(edges[::2], edges[1::2])]
    if not regions:
        return np.array([], dtype=np.int64)
    # polarity by majority vote over the candidate complexes
    upright = sum(np.max(x[lo:hi]) >= -np.min(x[lo:hi]) for lo, hi in regions)
    sig = x if 2 * upright >= len(regions) else -x

    refractory = int(round(refractory_s * fs))
    peaks: list[int] = []
    for lo, hi in regions:
        p = lo + int(np.argmax(sig[lo:hi]))
        if p == 0 or p == n - 1:
            continue  # maximum lies outside the record
        if peaks and p - peaks[-1] < refractory:
            if sig[p] > sig[peaks[-1]]:
                peaks[-1] = p
            continue
        if peaks and p <= peaks[-1]:
            continue
        peaks.append(p)
    return np.asarray(peaks, dtype=np.int64)


# -- segmentation and trend --------------------------------------------------------

def segment_beats(x, r_peaks: Sequence[int], beat_len: int = BEAT_LEN) -> list[LocalBeat]:
    """One window of ``beat_len`` samples centred on each R-peak, zero-padded at the edges."""
    values = x.values if isinstance(x, GlobalSignal) else np.asarray(x, dtype=np.float64)
    n = values.size
    half = beat_len // 2
    beats = []
    for p in r_peaks:
        origin = int(p) - half
        window = np.zeros(beat_len)
        lo, hi = max(origin, 0), min(origin + beat_len, n)
        if hi > lo:
            window[lo - origin : hi - origin] = values[lo:hi]
        beats.append(LocalBeat(window, origin))
    return beats


def extract_trend(x, avg_window: int = 25, diff_window: int = 1) -> TrendSignal:
    """Moving average (edge-replicated, same length) followed by a lagged difference.

    The first ``diff_window`` positions, which have no lagged partner, repeat
    the first computed difference so the output keeps the input length.
    """
    values = x.values if isinstance(x, GlobalSignal) else np.asarray(x, dtype=np.float64)
    n = values.size
    if not 1 <= avg_window < n or not 1 <= diff_window < n:
        raise ConfigError(f"trend windows ({avg_window}, {diff_window}) must lie in [1, {n})")
    smooth = _moving_average(values, avg_window)
    diff = smooth[diff_window:] - smooth[:-diff_window]
    return TrendSignal(np.concatenate((np.full(diff_window, diff[0]), diff)))


def _moving_average(values: np.ndarray, window: int) -> np.ndarray:
    left = (window - 1) // 2
    right = window - 1 - left
    padded = np.pad(values, (left, right), mode="edge")
    c = np.cumsum(np.concatenate(([0.0], padded)))
    return (c[window:] - c[:-window]) / window


def trend_batch(x: np.ndarray, avg_window: int = 25, diff_window: int = 1) -> np.ndarray:
    """:func:`extract_trend` applied to each row of a 2-D array."""
    return np.stack([extract_trend(row, avg_window, diff_window).values for row in np.atleast_2d(x)])


# -- record -> model inputs ----------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    low_hz: float = 0.5
    high_hz: float = 40.0
    notch_hz: float | None = 50.0
    order: int = 4
    notch_q: float = 30.0
    global_len: int = GLOBAL_LEN
    beat_len: int = BEAT_LEN
    avg_window: int = 25
    diff_window: int = 1
    refractory_s: float = 0.2
    peak_window_s: float = 2.0
    peak_ratio: float = 0.5

    def to_kv(self) -> dict[str, str]:
        return {f"preprocess.{k}": str(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "PreprocessConfig":
        kwargs: dict = {}
        for name, default in cls().__dict__.items():
            text = values.get(f"preprocess.{name}")
            if text is None:
                continue
            if name == "notch_hz":
                kwargs[name] = None if text.strip().lower() in ("", "none", "0") else float(text)
            else:
                kwargs[name] = type(default)(float(text)) if isinstance(default, int) else float(text)
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class PreparedRecord:
    """Filtered global signal with its beats, trend and raw attributes."""

    record_id: str
    global_signal: np.ndarray
    beats: tuple[LocalBeat, ...]
    trend: np.ndarray
    attributes: AttributeVector
    labels: tuple[str, ...] = ()
    anomaly_mask: np.ndarray | None = None

    @property
    def r_peaks(self) -> np.ndarray:
        half = self.beats[0].values.size // 2 if self.beats else 0
        return np.array([b.origin_index + half for b in self.beats], dtype=np.int64)

    def beat_matrix(self) -> np.ndarray:
        return np.stack([b.values for b in self.beats]) if self.beats else np.zeros((0, 0))


def prepare_record(record: EcgRecord, cfg: PreprocessConfig = PreprocessConfig()) -> PreparedRecord:
    """Filter channel 0, fit it to the global length, detect and cut beats, extract the trend."""
    x = filter_signal(record.channels[0], record.fs, cfg.low_hz, cfg.high_hz, cfg.notch_hz, cfg.order, cfg.notch_q)
    g = np.zeros(cfg.global_len)
    n = min(cfg.global_len, x.size)
    g[:n] = x[:n]
    peaks = detect_r_peaks(g, record.fs, cfg.refractory_s, cfg.peak_window_s, cfg.peak_ratio)
    beats = tuple(segment_beats(g, peaks, cfg.beat_len))
    mask = None
    if record.anomaly_mask is not None:
        mask = np.zeros(cfg.global_len, dtype=np.uint8)
        mask[:n] = record.anomaly_mask[:n]
    return PreparedRecord(
        record_id=record.record_id,
        global_signal=g,
        beats=beats,
        trend=extract_trend(g, cfg.avg_window, cfg.diff_window).values,
        attributes=record.attributes,
        labels=record.labels,
        anomaly_mask=mask,
    )
