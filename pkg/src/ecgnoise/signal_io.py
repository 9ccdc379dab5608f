"""ECG window containers, the ECGW binary / CSV file formats, windowing,
per-window normalization and seeded train/val/test splitting."""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"ECGW"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIf")  # magic, version, reserved, count, window_len, rate


class FormatError(ValueError):
    """Raised when a dataset or model file cannot be parsed."""


class Level(enum.IntEnum):
    UNKNOWN = 0
    LEVEL1 = 1
    LEVEL2 = 2
    LEVEL3 = 3


@dataclass(frozen=True)
class SignalWindow:
    """One fixed-length single-lead segment.

    Samples are held as float32 so that the binary format round-trips
    bit-exactly.
    """

    samples: np.ndarray
    sample_rate: float
    label: Level = Level.UNKNOWN
    source_id: str = field(default="", compare=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.samples, dtype=np.float32)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"window samples must be a nonempty 1-D vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("window contains non-finite samples")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "label", Level(int(self.label)))

    def __eq__(self, other):
        if not isinstance(other, SignalWindow):
            return NotImplemented
        return (
            self.label == other.label
            and np.float32(self.sample_rate) == np.float32(other.sample_rate)
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Dataset:
    windows: tuple[SignalWindow, ...]
    window_len: int
    sample_rate: float

    def __post_init__(self):
        windows = tuple(self.windows)
        if not windows:
            raise ValueError("empty dataset")
        for i, w in enumerate(windows):
            if w.samples.size != self.window_len:
                raise ValueError(
                    f"window {i} has length {w.samples.size}, expected {self.window_len}"
                )
            if np.float32(w.sample_rate) != np.float32(self.sample_rate):
                raise ValueError(
                    f"window {i} has sample rate {w.sample_rate}, expected {self.sample_rate}"
                )
        object.__setattr__(self, "windows", windows)

    @classmethod
    def from_array(
        cls,
        samples: np.ndarray,
        sample_rate: float,
        labels: Level | int | Sequence[int] = Level.UNKNOWN,
        source: str = "",
    ) -> "Dataset":
        samples = np.asarray(samples)
        if samples.ndim != 2:
            raise ValueError(f"expected (n, W) array, got shape {samples.shape}")
        n = samples.shape[0]
        if np.ndim(labels) == 0:
            labels = [int(labels)] * n
        windows = tuple(
            SignalWindow(samples[i], sample_rate, Level(int(labels[i])), f"{source}:{i}")
            for i in range(n)
        )
        return cls(windows, samples.shape[1], sample_rate)

    def __len__(self) -> int:
        return len(self.windows)

    def matrix(self) -> np.ndarray:
        """All windows stacked as an (n, W) float64 array."""
        return np.stack([w.samples for w in self.windows]).astype(np.float64)

    def labels(self) -> np.ndarray:
        return np.array([int(w.label) for w in self.windows], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.windows[i] for i in indices), self.window_len, self.sample_rate)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ValueError(f"split fractions must lie in [0, 1], got {fracs}")
        if abs(math.fsum(fracs) - 1.0) > 1e-12:
            raise ValueError(f"split fractions must sum to 1, got {math.fsum(fracs)}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


# -- file formats -----------------------------------------------------------


def save_dataset(dataset: Dataset, path: str | Path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        parts = [
            _HEADER.pack(MAGIC, VERSION, 0, len(dataset), dataset.window_len, dataset.sample_rate)
        ]
        for w in dataset.windows:
            parts.append(struct.pack("<B", int(w.label)))
            parts.append(w.samples.astype("<f4").tobytes())
        path.write_bytes(b"".join(parts))
    elif format == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label"] + [f"s{i}" for i in range(dataset.window_len)])
            for w in dataset.windows:
                # repr of a float32 widened to float64 parses back to the same float32
                writer.writerow([int(w.label)] + [repr(float(v)) for v in w.samples])
    else:
        raise ValueError(f"unknown dataset format {format!r}")


def load_dataset(path: str | Path, format: str = "binary", sample_rate: float = 256.0) -> Dataset:
    """Read an ECGW binary or CSV dataset.

    CSV files carry no sample rate, so it is taken from ``sample_rate``.
    """
    path = Path(path)
    if format == "binary":
        return _load_binary(path)
    if format == "csv":
        return _load_csv(path, sample_rate)
    raise ValueError(f"unknown dataset format {format!r}")


def _load_binary(path: Path) -> Dataset:
    raw = path.read_bytes()
    if len(raw) == 0:
        raise FormatError(f"{path}: empty dataset")
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"{path}: truncated header at byte {len(raw)} (need {_HEADER.size} bytes)"
        )
    magic, version, _reserved, count, wlen, rate = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if count == 0:
        raise FormatError(f"{path}: empty dataset")
    if wlen == 0:
        raise FormatError(f"{path}: window_len 0 at byte 12")
    if not (math.isfinite(rate) and rate > 0):
        raise FormatError(f"{path}: invalid sample rate {rate} at byte 16")
    record = 1 + 4 * wlen
    expected = _HEADER.size + count * record
    if len(raw) != expected:
        raise FormatError(
            f"{path}: inconsistent window length: file has {len(raw)} bytes, "
            f"header implies {expected} ({count} windows of {wlen} samples)"
        )
    windows = []
    for i in range(count):
        off = _HEADER.size + i * record
        label = raw[off]
        if label > 3:
            raise FormatError(f"{path}: invalid label {label} at byte {off}")
        samples = np.frombuffer(raw, dtype="<f4", count=wlen, offset=off + 1)
        bad = np.flatnonzero(~np.isfinite(samples))
        if bad.size:
            raise FormatError(f"{path}: non-finite sample at byte {off + 1 + 4 * int(bad[0])}")
        windows.append(SignalWindow(samples.astype(np.float32), rate, Level(label), f"{path.stem}:{i}"))
    return Dataset(tuple(windows), wlen, rate)


def _load_csv(path: Path, sample_rate: float) -> Dataset:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty dataset")
    header = rows[0]
    wlen = len(header) - 1
    if wlen < 1 or header[0] != "label" or header[1:] != [f"s{i}" for i in range(wlen)]:
        raise FormatError(f"{path}: malformed header at line 1")
    windows = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != wlen + 1:
            raise FormatError(
                f"{path}: inconsistent window length at line {lineno}: "
                f"{len(row) - 1} samples, expected {wlen}"
            )
        try:
            label = Level(int(row[0]))
            samples = np.array([float(v) for v in row[1:]], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}: parse error at line {lineno}: {exc}") from None
        if not np.all(np.isfinite(samples)):
            raise FormatError(f"{path}: non-finite sample at line {lineno}")
        windows.append(SignalWindow(samples, sample_rate, label, f"{path.stem}:{lineno - 2}"))
    if not windows:
        raise FormatError(f"{path}: empty dataset")
    return Dataset(tuple(windows), wlen, sample_rate)


# -- preprocessing ------------------------------------------------------------


def window_signal(signal: np.ndarray, window_len: int, hop: int) -> list[np.ndarray]:
    if window_len < 1 or hop < 1:
        raise ValueError("window_len and hop must be >= 1")
    signal = np.asarray(signal)
    n = signal.shape[0]
    if n < window_len:
        return []
    count = (n - window_len) // hop + 1
    return [signal[k * hop : k * hop + window_len].copy() for k in range(count)]


def normalize_window(samples: np.ndarray) -> np.ndarray:
    """Z-score a window with the population std; near-constant windows map to zeros."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ValueError("normalize_window needs at least 2 samples")
    std = x.std()
    if std < 1e-8:
        return np.zeros_like(x)
    return (x - x.mean()) / std


def normalize_dataset(dataset: Dataset) -> Dataset:
    windows = tuple(
        SignalWindow(normalize_window(w.samples), w.sample_rate, w.label, w.source_id)
        for w in dataset.windows
    )
    return Dataset(windows, dataset.window_len, dataset.sample_rate)


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    # guard against e.g. 100 * 0.29 == 28.999999999999996
    a = math.floor(n * spec.train_frac + 1e-9)
    b = math.floor(n * (spec.train_frac + spec.val_frac) + 1e-9)
    b = min(max(b, a), n)
    return a, b - a, n - b


def split_dataset(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset | None, Dataset | None, Dataset | None]:
    """Seeded shuffle, then contiguous train/val/test partition.

    A part with zero windows is returned as ``None`` since a Dataset is never empty.
    """
    n = len(dataset)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train, n_val, _ = split_sizes(n, spec)
    cuts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple(dataset.subset(idx.tolist()) if idx.size else None for idx in cuts)  # type: ignore[return-value]
