"""Series data model, ingestion, windowing and the synthetic motif corpus."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binio
from .errors import FormatError, IOFailure

logger = logging.getLogger(__name__)

STD_EPS = 1e-8
DEFAULT_T = 512
DEFAULT_L = 64


@dataclass
class Series:
    id: str
    values: np.ndarray
    source_tag: str = ""
    # position of values[0] in the parent series; split segments keep the
    # parent's coordinates so origins stay comparable across splits
    offset: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError(f"series {self.id!r} must be a non-empty 1-D vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"series {self.id!r} contains non-finite values")

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class WindowStats:
    mean: float
    std: float


@dataclass
class TimeSeriesPair:
    context: np.ndarray
    horizon: np.ndarray
    origin: tuple[str, int]
    norm_stats: WindowStats


@dataclass
class GlobalScaler:
    """Dataset-level standardisation, fitted on the training split only."""

    mean: float
    std: float
    fitted_on: str = "train"

    @classmethod
    def fit(cls, segments: Sequence[Series], split_name: str = "train") -> "GlobalScaler":
        if split_name != "train":
            raise ValueError("the global scaler may only be fitted on training data")
        values = np.concatenate([s.values for s in segments])
        stats = window_stats(values)
        return cls(stats.mean, stats.std, split_name)

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fracs):
            raise ValueError(f"split fractions must be non-negative, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")


# ---------------------------------------------------------------------------
# ingestion


def _parse_float(text: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    return float(text)


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise IOFailure(f"no such file: {path}")
    try:
        with path.open(newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: zero usable rows")
    return rows[0], rows[1:]


def _column_values(path, header, rows, col: int) -> tuple[np.ndarray, int]:
    out = []
    for lineno, row in enumerate(rows, start=2):
        if col >= len(row):
            out.append(math.nan)
            continue
        try:
            out.append(_parse_float(row[col]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: cannot parse {row[col]!r} as a real") from exc
    values = np.asarray(out, dtype=np.float64)
    keep = np.isfinite(values)
    return values[keep], int((~keep).sum())


def load_csv(path, column: str) -> Series:
    """Read one value column of a headed CSV file as a univariate series.

    Rows whose value is missing or not finite are dropped; the number dropped
    is reported through :mod:`warnings`.
    """
    header, rows = _read_rows(path)
    names = [h.strip() for h in header]
    if column not in names:
        raise FormatError(f"{path}: column {column!r} not found (have {names})")
    values, dropped = _column_values(path, header, rows, names.index(column))
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} non-finite row(s) in column {column!r}", stacklevel=2)
    if values.size == 0:
        raise FormatError(f"{path}: zero usable rows")
    stem = Path(path).stem
    return Series(id=f"{stem}:{column}", values=values, source_tag=stem)


def value_columns(path) -> list[str]:
    """Columns of a CSV file that hold values (the leading timestamp column is skipped)."""
    header, rows = _read_rows(path)
    names = [h.strip() for h in header]
    if not rows:
        raise FormatError(f"{path}: zero usable rows")
    first = rows[0]
    try:
        _parse_float(first[0])
        start = 1 if names[0].lower() in {"date", "time", "timestamp", "datetime"} else 0
    except ValueError:
        start = 1
    return names[start:]


def load_csv_channels(path) -> list[Series]:
    """Ingest every value column as an independent univariate series."""
    return [load_csv(path, name) for name in value_columns(path)]


# ---------------------------------------------------------------------------
# normalisation


def window_stats(x) -> WindowStats:
    x = np.asarray(x, dtype=np.float64)
    return WindowStats(float(x.mean()), max(float(x.std()), STD_EPS))


def zscore(window, stats: WindowStats) -> np.ndarray:
    return (np.asarray(window, dtype=np.float64) - stats.mean) / stats.std


def denormalize(window, stats: WindowStats) -> np.ndarray:
    return np.asarray(window, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# windowing and splitting


def make_pairs(series: Series, T: int = DEFAULT_T, L: int = DEFAULT_L, stride: int = 64) -> list[TimeSeriesPair]:
    """Cut a series into contiguous (context, horizon) pairs.

    Windows start at 0, stride, 2*stride, ... while the full T+L span fits.
    Each pair's origin is expressed in the coordinates of the parent series.
    """
    if T < 1 or L < 1 or stride < 1:
        raise ValueError("T, L and stride must be positive")
    n = len(series)
    if n < T + L:
        warnings.warn(f"series {series.id!r} (len {n}) shorter than T+L={T + L}; no pairs", stacklevel=2)
        return []
    pairs = []
    v = series.values
    for start in range(0, n - T - L + 1, stride):
        ctx = v[start:start + T].copy()
        pairs.append(
            TimeSeriesPair(
                context=ctx,
                horizon=v[start + T:start + T + L].copy(),
                origin=(series.id, series.offset + start),
                norm_stats=window_stats(ctx),
            )
        )
    return pairs


def split(series: Series, spec: SplitSpec, min_len: int | None = None) -> tuple[Series, Series, Series]:
    """Chronological train/val/test segments (no shuffling)."""
    n = len(series)
    n_train = int(math.floor(n * spec.train_frac + 1e-9))
    n_val = int(math.floor(n * spec.val_frac + 1e-9))
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n)]
    segments = []
    for name, (a, b) in zip(("train", "val", "test"), bounds):
        if min_len is not None and b - a < min_len:
            warnings.warn(f"{series.id}: {name} segment of length {b - a} cannot hold a pair of length {min_len}", stacklevel=2)
        if b <= a:
            # keep a placeholder so callers can still unpack three segments
            segments.append(None)
            continue
        segments.append(Series(series.id, series.values[a:b], series.source_tag, series.offset + a))
    return tuple(segments)


def stack_pairs(pairs: Sequence[TimeSeriesPair]) -> tuple[np.ndarray, np.ndarray]:
    """Raw contexts and horizons as (n, T) and (n, L) arrays."""
    if not pairs:
        return np.zeros((0, 0)), np.zeros((0, 0))
    return np.stack([p.context for p in pairs]), np.stack([p.horizon for p in pairs])


def normalized_arrays(pairs: Sequence[TimeSeriesPair]) -> tuple[np.ndarray, np.ndarray]:
    """Contexts and horizons both z-scored by their own context statistics."""
    X, Y = stack_pairs(pairs)
    if not len(pairs):
        return X, Y
    mu = np.array([p.norm_stats.mean for p in pairs])[:, None]
    sd = np.array([p.norm_stats.std for p in pairs])[:, None]
    return (X - mu) / sd, (Y - mu) / sd


# ---------------------------------------------------------------------------
# synthetic motif corpus

MOTIF_KINDS = ("sine", "sawtooth", "trend")


@dataclass(frozen=True)
class Motif:
    kind: str
    period: int
    # relative amplitude of the shape before per-series scaling
    amplitude: float = 1.0

    def shape(self, t: np.ndarray, phase: float, length: int) -> np.ndarray:
        if self.kind == "sine":
            return self.amplitude * np.sin(2.0 * np.pi * (t + phase) / self.period)
        if self.kind == "sawtooth":
            frac = np.mod(t + phase, self.period) / self.period
            return self.amplitude * (2.0 * frac - 1.0)
        if self.kind == "trend":
            # phase doubles as the sign/steepness draw for a trend
            return self.amplitude * (phase / self.period - 0.5) * 4.0 * t / max(length, 1)
        raise ValueError(f"unknown motif kind {self.kind!r}")


@dataclass
class MotifBank:
    motifs: list[Motif] = field(default_factory=list)
    name: str = "bank"

    def __len__(self):
        return len(self.motifs)

    def __add__(self, other: "MotifBank") -> "MotifBank":
        return MotifBank(self.motifs + other.motifs, f"{self.name}+{other.name}")


def make_motif_bank(
    seed: int,
    size: int,
    kinds: Sequence[str] = MOTIF_KINDS,
    period_range: tuple[int, int] = (12, 160),
    period_scale: float = 1.0,
    amplitude_scale: float = 1.0,
    exclude: MotifBank | None = None,
    name: str = "bank",
) -> MotifBank:
    """Draw ``size`` distinct motifs. ``exclude`` guarantees a disjoint bank."""
    rng = np.random.default_rng([seed, 7])
    taken = {(m.kind, m.period) for m in exclude.motifs} if exclude else set()
    motifs: list[Motif] = []
    attempts = 0
    while len(motifs) < size:
        attempts += 1
        if attempts > 100 * size + 1000:
            raise ValueError("could not draw enough distinct motifs; widen period_range")
        kind = str(kinds[rng.integers(len(kinds))])
        period = max(2, int(round(rng.integers(period_range[0], period_range[1] + 1) * period_scale)))
        key = (kind, period)
        if key in taken:
            continue
        taken.add(key)
        motifs.append(Motif(kind, period, amplitude_scale * float(rng.uniform(0.5, 1.5))))
    return MotifBank(motifs, name)


def generate_motif_corpus(
    seed: int,
    n_series: int,
    length: int,
    motif_bank_size: int = 8,
    noise_std: float = 0.1,
    *,
    bank: MotifBank | None = None,
    max_motifs: int = 3,
    kinds: Sequence[str] = MOTIF_KINDS,
    tag: str = "motif",
) -> list[Series]:
    """Random convex mixtures of 1..max_motifs bank motifs plus Gaussian noise.

    The output depends only on the arguments: identical seeds give identical
    corpora.
    """
    if n_series <= 0:
        return []
    if length < 1 or motif_bank_size < 1 or max_motifs < 1:
        raise ValueError("length, motif_bank_size and max_motifs must be positive")
    if bank is None:
        bank = make_motif_bank(seed, motif_bank_size, kinds=kinds, name=tag)
    rng = np.random.default_rng([seed, 11])
    t = np.arange(length, dtype=np.float64)
    out = []
    for i in range(n_series):
        m = int(rng.integers(1, min(max_motifs, len(bank)) + 1))
        chosen = rng.choice(len(bank), size=m, replace=False)
        weights = rng.dirichlet(np.ones(m)) if m > 1 else np.ones(1)
        level = float(rng.normal(0.0, 2.0))
        scale = float(rng.uniform(0.5, 3.0))
        values = np.full(length, level)
        for w, j in zip(weights, chosen):
            motif = bank.motifs[int(j)]
            phase = float(rng.uniform(0.0, motif.period))
            values = values + scale * w * motif.shape(t, phase, length)
        if noise_std > 0:
            values = values + rng.normal(0.0, noise_std * scale, size=length)
        out.append(Series(f"{tag}-{i:04d}", values, tag))
    return out


# ---------------------------------------------------------------------------
# series store

STORE_MAGIC = b"TSRS"
STORE_VERSION = 1


def store_to_bytes(series: Sequence[Series]) -> bytes:
    w = binio.Writer(STORE_MAGIC, STORE_VERSION)
    w.u64(len(series))
    for s in series:
        w.string(s.id)
        w.string(s.source_tag)
        w.u64(s.offset)
        w.array(s.values)
    return w.getvalue()


def store_from_bytes(data: bytes) -> list[Series]:
    r = binio.Reader(data, STORE_MAGIC, STORE_VERSION, "series store")
    out = []
    for _ in range(r.u64()):
        sid, tag, offset = r.string(), r.string(), r.u64()
        values = r.array()
        try:
            out.append(Series(sid, values.copy(), tag, int(offset)))
        except ValueError as exc:
            raise FormatError(f"series store: {exc}") from exc
    r.finish()
    return out


def save_store(series: Sequence[Series], path) -> None:
    binio.write_bytes(path, store_to_bytes(series))


def load_store(path) -> list[Series]:
    return store_from_bytes(binio.read_bytes(path))
