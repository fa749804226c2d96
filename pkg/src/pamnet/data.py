"""Series loading, chronological splits, standardization, windows, corruption and synthetic data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .engine import ConfigError


class LoadError(ValueError):
    pass


class WindowingError(ValueError):
    pass


@dataclass
class SeriesFrame:
    names: list
    values: np.ndarray  # T×N float64
    origin: str = "synthetic"

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def channel(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown channel {name!r}; channels are {self.names}") from None


def load_csv(path) -> SeriesFrame:
    """Read a header + numeric-cells CSV.  A leading ``date`` column is dropped.

    Rows and columns in error messages are 1-based, counting the header as
    row 1 and including any date column.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise LoadError(f"{path}: empty file, expected a header row") from None
        skip = 1 if header and header[0].lower() == "date" else 0
        names = header[skip:]
        if not names:
            raise LoadError(f"{path}: no data columns")
        rows = []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise LoadError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
            vals = []
            for c in range(skip, len(row)):
                cell = row[c].strip()
                try:
                    x = float(cell)
                except ValueError:
                    raise LoadError(f"{path}: unparseable value {cell!r} at row {r}, column {c + 1}") from None
                if not math.isfinite(x):
                    raise LoadError(f"{path}: non-finite value {cell!r} at row {r}, column {c + 1}")
                vals.append(x)
            rows.append(vals)
    if not rows:
        raise LoadError(f"{path}: no data rows")
    return SeriesFrame(names=names, values=np.array(rows, dtype=np.float64), origin=str(path))


def write_csv(frame: SeriesFrame, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(frame.names)
        for row in frame.values:
            w.writerow([repr(float(x)) for x in row])


# -------------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    fractions: tuple = (0.7, 0.1, 0.2)
    counts: Optional[tuple] = None  # explicit (train, val, test) steps; overrides fractions

    def __post_init__(self) -> None:
        if self.counts is None:
            if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
                raise ConfigError(f"split fractions must be three non-negative numbers, got {self.fractions}")
            if abs(sum(self.fractions) - 1) > 1e-9:
                raise ConfigError(f"split fractions must sum to 1, got {self.fractions}")


@dataclass
class Splits:
    """Chronological split boundaries.

    ``targets[k]`` is the half-open row range whose values split k may
    forecast; ``rows[k]`` additionally reaches back ``lookback`` rows into the
    previous split for inputs.
    """

    targets: tuple
    rows: tuple
    lookback: int

    @property
    def train(self):
        return self.rows[0]

    @property
    def val(self):
        return self.rows[1]

    @property
    def test(self):
        return self.rows[2]


def split_chronological(frame: SeriesFrame, spec: SplitSpec, lookback: int, horizon: int = 1) -> Splits:
    T = frame.T
    if spec.counts is not None:
        n_train, n_val, n_test = (int(x) for x in spec.counts)
        if n_train + n_val + n_test > T:
            raise ConfigError(f"split counts {spec.counts} exceed series length {T}")
        b1, b2, end = n_train, n_train + n_val, n_train + n_val + n_test
    else:
        f_train, f_val, _ = spec.fractions
        b1 = int(math.floor(T * f_train + 1e-9))
        b2 = int(math.floor(T * (f_train + f_val) + 1e-9))
        end = T
    targets = ((lookback, b1), (b1, b2), (b2, end))
    rows = ((0, b1), (max(b1 - lookback, 0), b2), (max(b2 - lookback, 0), end))
    for name, (lo, hi), (tlo, _) in zip(("train", "val", "test"), rows, targets):
        first_target = max(lo + lookback, tlo)
        if hi - first_target < horizon:
            raise ConfigError(f"{name} split {lo}:{hi} holds no window of L={lookback}, H={horizon}")
    return Splits(targets=targets, rows=rows, lookback=lookback)


# ------------------------------------------------------------ standardization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def standardize(frame: SeriesFrame, train_range) -> tuple[SeriesFrame, NormStats]:
    """Z-score every row with mean/std (divisor n) of the train rows only."""
    lo, hi = train_range
    if hi <= lo:
        raise ConfigError("standardize: empty train range")
    train = frame.values[lo:hi]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    for i, s in enumerate(std):
        if not s > 0:
            raise ConfigError(f"channel {frame.names[i]!r} has zero variance on the train split")
    stats = NormStats(mean=mean, std=std)
    return SeriesFrame(list(frame.names), stats.transform(frame.values), frame.origin), stats


# ------------------------------------------------------------------- windows


@dataclass
class WindowBatch:
    """Stacked windows: X (B×L×N), Y (B×H×N), tau_end (B,)."""

    X: np.ndarray
    Y: np.ndarray
    tau_end: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i):
        return self.X[i], self.Y[i], int(self.tau_end[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "WindowBatch":
        return WindowBatch(self.X[idx], self.Y[idx], self.tau_end[idx])


def make_windows(frame: SeriesFrame, rows, lookback: int, horizon: int, stride: int = 1) -> WindowBatch:
    """All windows X=rows[s:s+L], Y=rows[s+L:s+L+H] lying inside ``rows``.

    Windows are anchored so the last one's target ends exactly at the range
    end; ``tau_end`` is the absolute row of each window's last input step.
    """
    lo, hi = rows
    span = lookback + horizon
    if hi - lo < span:
        raise WindowingError(f"range {lo}:{hi} has {hi - lo} rows, a window needs L+H={span}")
    if stride < 1:
        raise WindowingError("stride must be >= 1")
    last = hi - span
    starts = np.arange(last, lo - 1, -stride)[::-1]
    v = frame.values
    X = np.stack([v[s : s + lookback] for s in starts])
    Y = np.stack([v[s + lookback : s + span] for s in starts])
    return WindowBatch(X=X, Y=Y, tau_end=starts + lookback - 1)


def split_windows(frame: SeriesFrame, splits: Splits, horizon: int, stride: int = 1) -> tuple:
    return tuple(make_windows(frame, r, splits.lookback, horizon, stride) for r in splits.rows)


# ---------------------------------------------------------------- corruption


@dataclass
class CorruptionSpec:
    p: float = 0.0
    mode: str = "zeros"  # zeros | noise
    per_row: bool = False  # mask whole timesteps instead of single entries
    apply_to_test: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.p < 1:
            raise ConfigError(f"corruption probability must lie in [0, 1), got {self.p}")
        if self.mode not in ("zeros", "noise"):
            raise ConfigError(f"unknown corruption mode {self.mode!r}")


def corrupt(batch: WindowBatch, spec: CorruptionSpec, rng: np.random.Generator) -> WindowBatch:
    """Mask input entries with probability p; targets are left untouched."""
    if spec.p == 0:
        return batch
    X = batch.X.copy()
    B, L, N = X.shape
    if spec.per_row:
        mask = np.broadcast_to(rng.random((B, L, 1)) < spec.p, X.shape)
    else:
        mask = rng.random(X.shape) < spec.p
    if spec.mode == "zeros":
        X[mask] = 0.0
    else:
        sigma = batch.X.reshape(B, -1).std(axis=1)[:, None, None]
        noise = rng.standard_normal(X.shape) * sigma
        X[mask] = noise[mask]
    return WindowBatch(X=X, Y=batch.Y, tau_end=batch.tau_end)


# ----------------------------------------------------------------- synthetic


@dataclass
class SynthSpec:
    T: int = 6000
    N: int = 4
    cycle_len: int = 24
    drift_cycles: float = 7.0  # amplitude envelope period, in cycles
    drift_depth: float = 0.5
    mean_depth: float = 0.5
    noise_std: float = 0.1
    seed: int = 0
    phases: Optional[Sequence[float]] = None  # per-channel base phase; default 2πi/N
    mean_profile: Optional[np.ndarray] = field(default=None, repr=False)  # c×N override

    def __post_init__(self) -> None:
        if self.cycle_len < 2:
            raise ConfigError("synthetic cycle length must be >= 2")
        if not 0 <= self.drift_depth < 1:
            raise ConfigError("drift depth must lie in [0, 1) so the amplitude stays positive")
        if self.T < 1 or self.N < 1:
            raise ConfigError("T and N must be >= 1")


def synth_generate(spec: SynthSpec) -> SeriesFrame:
    """x_i(τ) = A(τ)·sin(2π(τ mod c)/c + φ_i) + m_i(τ mod c) + ε, A(τ) = 1 + depth·sin(2πτ/(k·c)).

    Both the per-cycle-position mean (through m_i) and the spread across
    cycles (through A) are periodic, so cycle-position statistics drift in
    a structured rather than random way.
    """
    c, N = spec.cycle_len, spec.N
    tau = np.arange(spec.T)[:, None]
    pos = tau % c
    phases = np.asarray(spec.phases if spec.phases is not None else 2 * np.pi * np.arange(N) / N, dtype=np.float64)
    if phases.shape != (N,):
        raise ConfigError(f"need {N} channel phases, got {phases.shape}")
    if spec.mean_profile is not None:
        profile = np.asarray(spec.mean_profile, dtype=np.float64)
        if profile.shape != (c, N):
            raise ConfigError(f"mean profile must be {c}×{N}, got {profile.shape}")
    else:
        profile = spec.mean_depth * np.sin(4 * np.pi * np.arange(c)[:, None] / c + phases[None, :] / 2)
    amp = 1 + spec.drift_depth * np.sin(2 * np.pi * tau / (spec.drift_cycles * c))
    values = amp * np.sin(2 * np.pi * pos / c + phases[None, :]) + profile[pos[:, 0]]
    if spec.noise_std > 0:
        values = values + np.random.default_rng(spec.seed).normal(0.0, spec.noise_std, size=values.shape)
    return SeriesFrame(names=[f"ch{i}" for i in range(N)], values=values, origin="synthetic")
