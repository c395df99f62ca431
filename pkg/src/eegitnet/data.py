"""Trial containers, preprocessing, and the synthetic signal generator.

An :class:`EpochSet` holds fixed-length labeled multi-channel trials plus
the metadata needed downstream (channel names and scalp coordinates for
topographic rendering, class names, sampling rate).  Sets round-trip
through the ``EEGEPOCH`` binary container bit-exactly.

The synthetic generator plants band-limited sources with known mixing
columns so that classifier accuracy and the explainability outputs can be
checked against ground truth.
"""
from __future__ import annotations

import struct
from collections import namedtuple
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import filtfilt

from .errors import FormatError
from .fileio import atomic_write, pack_string, read_exact, read_string

EPOCH_MAGIC = b"EEGEPOCH"
EPOCH_VERSION = 1
_MAX_ELEMENTS = 2 ** 31  # sanity bound on declared payload size


# ----------------------------------------------------------------------
# containers

@dataclass(frozen=True)
class EpochSet:
    """Labeled trials: (n_trials, n_channels, n_samples) float32 data.

    ``channel_xy`` are unit-disc scalp coordinates (x toward the right ear,
    y toward the nose), one row per channel.
    """

    trials: np.ndarray
    labels: np.ndarray
    class_names: tuple
    channel_names: tuple
    channel_xy: np.ndarray
    fs: float

    def __post_init__(self):
        trials = np.asarray(self.trials, dtype=np.float32)
        if trials.ndim != 3:
            raise ValueError(f"trials must be 3-D (trial, channel, sample), got {trials.ndim}-D")
        labels = np.asarray(self.labels)
        if labels.shape != (trials.shape[0],):
            raise ValueError(f"need one label per trial: {labels.shape} vs {trials.shape[0]} trials")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise ValueError(f"labels must lie in [0, {len(self.class_names)})")
        xy = np.asarray(self.channel_xy, dtype=np.float32)
        if xy.shape != (trials.shape[1], 2):
            raise ValueError(
                f"channel_xy must be ({trials.shape[1]}, 2), got {tuple(xy.shape)}")
        if len(self.channel_names) != trials.shape[1]:
            raise ValueError(
                f"{len(self.channel_names)} channel names for {trials.shape[1]} channels")
        if not self.fs > 0:
            raise ValueError("fs must be positive")
        object.__setattr__(self, "trials", trials)
        object.__setattr__(self, "labels", labels.astype(np.uint32))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        object.__setattr__(self, "channel_xy", xy)
        object.__setattr__(self, "fs", float(self.fs))

    @property
    def n_trials(self):
        return self.trials.shape[0]

    @property
    def n_channels(self):
        return self.trials.shape[1]

    @property
    def n_samples(self):
        return self.trials.shape[2]

    @property
    def n_classes(self):
        return len(self.class_names)

    def subset(self, indices):
        """A new set holding only the given trial indices (metadata shared)."""
        indices = np.asarray(indices)
        return replace(self, trials=self.trials[indices], labels=self.labels[indices])


def concat_epochs(sets):
    """Stack several sets recorded with identical metadata into one."""
    sets = list(sets)
    if not sets:
        raise ValueError("no sets to concatenate")
    first = sets[0]
    for other in sets[1:]:
        if other.class_names != first.class_names:
            raise ValueError(
                f"label-space mismatch: {other.class_names} vs {first.class_names}")
        if other.channel_names != first.channel_names:
            raise ValueError("channel names differ between sets")
        if other.fs != first.fs:
            raise ValueError(f"sampling rates differ: {other.fs} vs {first.fs}")
        if other.n_samples != first.n_samples:
            raise ValueError(f"trial lengths differ: {other.n_samples} vs {first.n_samples}")
    return replace(first,
                   trials=np.concatenate([s.trials for s in sets]),
                   labels=np.concatenate([s.labels for s in sets]))


# ----------------------------------------------------------------------
# EEGEPOCH container format

def save_epochs(epochs: EpochSet, path):
    parts = [EPOCH_MAGIC,
             struct.pack("<IIIII", EPOCH_VERSION, epochs.n_trials, epochs.n_channels,
                         epochs.n_samples, epochs.n_classes),
             struct.pack("<f", epochs.fs)]
    for name, (x, y) in zip(epochs.channel_names, epochs.channel_xy):
        parts.append(pack_string(name))
        parts.append(struct.pack("<ff", x, y))
    for name in epochs.class_names:
        parts.append(pack_string(name))
    parts.append(np.ascontiguousarray(epochs.labels, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(epochs.trials, dtype="<f4").tobytes())
    atomic_write(path, b"".join(parts))


def load_epochs(path) -> EpochSet:
    with open(path, "rb") as f:
        magic = f.read(len(EPOCH_MAGIC))
        if magic != EPOCH_MAGIC:
            raise FormatError("bad_magic", f"not an epoch container: magic {magic!r}")
        version, n_trials, n_channels, n_samples, n_classes = struct.unpack(
            "<IIIII", read_exact(f, 20, "the header"))
        if version != EPOCH_VERSION:
            raise FormatError("bad_value", f"unsupported container version {version}")
        if n_channels < 1 or n_samples < 1 or n_classes < 1:
            raise FormatError("bad_value", "channel, sample, and class counts must be >= 1")
        if n_trials * n_channels * n_samples > _MAX_ELEMENTS:
            raise FormatError("extent_overflow",
                              f"declared payload of {n_trials}x{n_channels}x{n_samples} "
                              "samples exceeds the format limit")
        fs, = struct.unpack("<f", read_exact(f, 4, "the sampling rate"))
        channel_names, xy = [], []
        for i in range(n_channels):
            channel_names.append(read_string(f, f"channel {i} name"))
            xy.append(struct.unpack("<ff", read_exact(f, 8, f"channel {i} coordinates")))
        class_names = [read_string(f, f"class {i} name") for i in range(n_classes)]
        labels = np.frombuffer(read_exact(f, 4 * n_trials, "the labels"), dtype="<u4")
        if labels.size and labels.max() >= n_classes:
            raise FormatError("bad_value",
                              f"label {labels.max()} out of range for {n_classes} classes")
        raw = read_exact(f, 4 * n_trials * n_channels * n_samples, "the trial data")
        trials = np.frombuffer(raw, dtype="<f4").reshape(n_trials, n_channels, n_samples)
    return EpochSet(trials.copy(), labels.copy(), class_names, channel_names,
                    np.asarray(xy, dtype=np.float32).reshape(n_channels, 2), fs)


# ----------------------------------------------------------------------
# preprocessing

def _lowpass_fir(cutoff_norm, taps=63):
    """Hamming-windowed sinc low-pass with unit DC gain.

    ``cutoff_norm`` is in cycles per sample (Nyquist = 0.5).
    """
    mid = (taps - 1) / 2.0
    n = np.arange(taps) - mid
    h = 2.0 * cutoff_norm * np.sinc(2.0 * cutoff_norm * n)
    h *= np.hamming(taps)
    return h / h.sum()


def decimate(signal, factor):
    """Anti-aliased downsampling along the last axis.

    A 63-tap windowed-sinc low-pass at 0.45 of the new sampling rate is
    applied forward and backward (zero phase), then every ``factor``-th
    sample is kept; output length is floor(n / factor).  ``factor=1``
    returns the signal unchanged.
    """
    signal = np.asarray(signal)
    n = signal.shape[-1]
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor > n:
        raise ValueError(f"factor {factor} exceeds signal length {n}")
    if factor == 1:
        return signal.copy()
    h = _lowpass_fir(0.45 / factor)
    smoothed = filtfilt(h, [1.0], signal, axis=-1, padlen=min(3 * len(h), n - 1))
    out = smoothed[..., : (n // factor) * factor : factor]
    if np.issubdtype(signal.dtype, np.floating):
        out = out.astype(signal.dtype, copy=False)
    return np.ascontiguousarray(out)


ChannelStats = namedtuple("ChannelStats", ["mean", "std"])


def standardize(train: EpochSet, *others: EpochSet):
    """Shift/scale every channel to zero mean, unit variance on the training
    set, applying the same transform to any further sets.

    Returns ``(sets, stats)`` where ``sets`` is (train', others'...) and
    ``stats`` holds the per-channel mean/std the transform used.  Only the
    training trials contribute to the statistics.
    """
    x = train.trials.astype(np.float64)
    if x.size == 0:
        raise ValueError("training set is empty")
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    flat = np.nonzero(std == 0.0)[0]
    if flat.size:
        names = ", ".join(train.channel_names[i] for i in flat)
        raise ValueError(f"zero-variance channel(s): {names}")
    stats = ChannelStats(mean, std)
    out = tuple(apply_standardize(s, stats) for s in (train, *others))
    return out, stats


def apply_standardize(epochs: EpochSet, stats: ChannelStats) -> EpochSet:
    z = (epochs.trials.astype(np.float64) - stats.mean[:, None]) / stats.std[:, None]
    return replace(epochs, trials=z.astype(np.float32))


def window_samples(fs, duration_s):
    """Number of samples in a fixed window, e.g. 3 s at 125 Hz -> 375."""
    return int(round(fs * duration_s))


def extract_epochs(continuous, onsets, n_samples):
    """Cut fixed-length windows starting at each onset sample from a
    (channels, time) record."""
    continuous = np.asarray(continuous)
    total = continuous.shape[-1]
    for onset in onsets:
        if onset < 0 or onset + n_samples > total:
            raise ValueError(f"window [{onset}, {onset + n_samples}) leaves the record of "
                             f"length {total}")
    return np.stack([continuous[:, o:o + n_samples] for o in onsets]).astype(np.float32)


# ----------------------------------------------------------------------
# electrode layouts

_MONTAGE_22 = (
    ("Fz", 0.0, 0.60),
    ("FC3", -0.50, 0.30), ("FC1", -0.25, 0.30), ("FCz", 0.0, 0.30),
    ("FC2", 0.25, 0.30), ("FC4", 0.50, 0.30),
    ("C5", -0.75, 0.0), ("C3", -0.50, 0.0), ("C1", -0.25, 0.0), ("Cz", 0.0, 0.0),
    ("C2", 0.25, 0.0), ("C4", 0.50, 0.0), ("C6", 0.75, 0.0),
    ("CP3", -0.50, -0.30), ("CP1", -0.25, -0.30), ("CPz", 0.0, -0.30),
    ("CP2", 0.25, -0.30), ("CP4", 0.50, -0.30),
    ("P1", -0.25, -0.60), ("Pz", 0.0, -0.60), ("P2", 0.25, -0.60),
    ("POz", 0.0, -0.80),
)


def montage_22():
    """The default 22-electrode motor-cortex montage: (names, xy array)."""
    names = tuple(name for name, _, _ in _MONTAGE_22)
    xy = np.array([(x, y) for _, x, y in _MONTAGE_22], dtype=np.float32)
    return names, xy


def ring_layout(n):
    """Generic scalp coordinates for n channels: evenly spaced on a ring."""
    if n == 1:
        return np.zeros((1, 2), dtype=np.float32)
    angles = np.pi / 2 - 2 * np.pi * np.arange(n) / n
    return (0.8 * np.stack([np.cos(angles), np.sin(angles)], axis=1)).astype(np.float32)


# ----------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True)
class SourceSpec:
    """One planted source: a band-limited carrier spread over the channels
    by a fixed unit-norm mixing column."""

    center_freq: float
    bandwidth: float
    amplitude: float
    mixing: tuple

    def __post_init__(self):
        mixing = np.asarray(self.mixing, dtype=np.float64)
        norm = float(np.linalg.norm(mixing))
        if norm == 0.0:
            raise ValueError("mixing column must be nonzero")
        object.__setattr__(self, "mixing", tuple((mixing / norm).tolist()))
        if self.center_freq <= 0:
            raise ValueError("center_freq must be positive")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")

    @property
    def mixing_array(self):
        return np.asarray(self.mixing, dtype=np.float64)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic cohort: per-class source lists plus noise."""

    n_trials: int
    n_channels: int
    n_classes: int
    fs: float
    duration_s: float
    sources: tuple  # one tuple of SourceSpec per class
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sources",
                           tuple(tuple(class_sources) for class_sources in self.sources))
        if self.n_trials < 1 or self.n_channels < 1:
            raise ValueError("n_trials and n_channels must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if len(self.sources) != self.n_classes:
            raise ValueError(
                f"need one source list per class: {len(self.sources)} for {self.n_classes}")
        if self.n_trials % self.n_classes != 0:
            raise ValueError("n_trials must divide evenly across classes")
        for ci, class_sources in enumerate(self.sources):
            for src in class_sources:
                if len(src.mixing) != self.n_channels:
                    raise ValueError(
                        f"class {ci}: mixing column has {len(src.mixing)} weights "
                        f"for {self.n_channels} channels")
                if src.center_freq >= self.fs / 2:
                    raise ValueError(
                        f"class {ci}: center_freq {src.center_freq} Hz is not below "
                        f"the Nyquist rate {self.fs / 2} Hz")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")


def _band_noise(rng, n_samples, freqs, lo, hi):
    """Unit-RMS noise whose spectrum is confined to [lo, hi] Hz."""
    mask = (freqs >= lo) & (freqs <= hi)
    if not mask.any():
        raise ValueError(f"band [{lo:g}, {hi:g}] Hz misses every frequency-grid point")
    spectrum = np.fft.rfft(rng.standard_normal(n_samples))
    spectrum[~mask] = 0.0
    carrier = np.fft.irfft(spectrum, n=n_samples)
    return carrier / np.sqrt(np.mean(carrier * carrier))


def synth_generate(spec: SynthSpec) -> EpochSet:
    """Build a balanced labeled cohort from the recipe, bit-reproducible per
    seed: each trial sums its class's band-limited sources (carrier times
    mixing column times amplitude) plus white channel noise."""
    rng = np.random.default_rng(spec.seed)
    n_samples = window_samples(spec.fs, spec.duration_s)
    freqs = np.fft.rfftfreq(n_samples, 1.0 / spec.fs)
    labels = np.repeat(np.arange(spec.n_classes, dtype=np.uint32),
                       spec.n_trials // spec.n_classes)
    rng.shuffle(labels)
    trials = np.zeros((spec.n_trials, spec.n_channels, n_samples))
    for t, label in enumerate(labels):
        x = trials[t]
        for src in spec.sources[label]:
            lo = max(src.center_freq - src.bandwidth / 2.0, 0.0)
            hi = min(src.center_freq + src.bandwidth / 2.0, spec.fs / 2.0)
            carrier = _band_noise(rng, n_samples, freqs, lo, hi)
            x += src.amplitude * np.outer(src.mixing_array, carrier)
        if spec.noise_sigma > 0:
            x += spec.noise_sigma * rng.standard_normal((spec.n_channels, n_samples))
    if spec.n_channels == 22:
        channel_names, xy = montage_22()
    else:
        channel_names = tuple(f"ch{i + 1:02d}" for i in range(spec.n_channels))
        xy = ring_layout(spec.n_channels)
    class_names = tuple(f"class{i}" for i in range(spec.n_classes))
    return EpochSet(trials, labels, class_names, channel_names, xy, spec.fs)
