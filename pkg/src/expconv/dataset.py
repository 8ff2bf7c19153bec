"""Plant-run ingestion, normalization, windowing, synthetic tasks.

Runs are whitespace-delimited numeric text files named d{NN}.dat (train)
and d{NN}_te.dat (test), NN being the fault id with 00 for normal
operation. Each run measures 52 process variables; faulty training runs
hold 480 samples and test runs 960, with the fault appearing at sample
160 of a test run. Windows cut from a test run are labeled by where they
sit relative to that onset; windows that contain the onset are dropped.

The synthetic task generator builds two-class window datasets whose
classes differ in a power-law energy feature with a known exponent, so a
trained exponent can be checked against the value that generated the
data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng, signed_pow

N_VARIABLES = 52
FAULTY_TRAIN_ROWS = 480
TEST_ROWS = 960
FAULT_ONSET = 160  # 0-based sample index of the first faulty sample
MAX_FAULT_ID = 21

DEFAULT_WIN_LEN = 40
DEFAULT_STRIDE = 10

SPLITS = ("train", "test")


@dataclass
class RawRun:
    matrix: np.ndarray  # (samples, N_VARIABLES)
    fault_id: int
    split: str

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != N_VARIABLES:
            raise ValueError(
                f"run matrix must be (samples, {N_VARIABLES}), "
                f"got {self.matrix.shape}")
        if not 0 <= self.fault_id <= MAX_FAULT_ID:
            raise ValueError(f"fault_id must be in [0, {MAX_FAULT_ID}]")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Per-column mean and population std, fit on training data only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be matching 1-D vectors")
        if np.any(self.std <= 0):
            raise ValueError("std entries must be positive")


@dataclass
class WindowedDataset:
    """Parallel arrays of windows (n, win_len, channels) and int labels (n,)."""

    windows: np.ndarray
    labels: np.ndarray
    win_len: int
    stride: int

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.windows.ndim != 3:
            raise ValueError("windows must be (n, win_len, channels)")
        if self.labels.shape != (self.windows.shape[0],):
            raise ValueError("labels must align with windows")
        if self.windows.shape[0] and self.windows.shape[1] != self.win_len:
            raise ValueError("window length mismatch")

    def __len__(self) -> int:
        return self.windows.shape[0]

    def __getitem__(self, i):
        return self.windows[i], int(self.labels[i])

    @property
    def channels(self) -> int:
        return self.windows.shape[2]


@dataclass
class SyntheticTask:
    """Two-class windows separable by a signed power-energy feature.

    The generating exponent, threshold and margin are recorded so the
    labeling rule can be re-evaluated on the emitted windows.
    """

    windows: np.ndarray  # (count, win_len, channels)
    labels: np.ndarray  # (count,)
    exponent: float
    noise: float
    seed: int
    threshold: float
    margin: float
    win_len: int = field(init=False)
    channels: int = field(init=False)

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.win_len = int(self.windows.shape[1]) if self.windows.size else 0
        self.channels = int(self.windows.shape[2]) if self.windows.size else 0

    def __len__(self) -> int:
        return self.windows.shape[0]

    def as_windowed(self) -> WindowedDataset:
        win_len = self.windows.shape[1] if len(self) else 1
        return WindowedDataset(self.windows, self.labels,
                               win_len=win_len, stride=win_len)


# --------------------------------------------------------------------------
# File ingestion

def run_filename(fault_id: int, split: str) -> str:
    if split == "train":
        return f"d{fault_id:02d}.dat"
    return f"d{fault_id:02d}_te.dat"


def load_run(path, fault_id: int, split: str) -> RawRun:
    """Parse a whitespace-delimited run file and validate its shape.

    Files stored variables-by-samples (52 x N) are transposed. Faulty
    training runs must have 480 rows and test runs 960; a normal-condition
    training run may have any length.
    """
    try:
        matrix = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"could not parse {path}: {exc}") from exc
    if matrix.shape[1] != N_VARIABLES:
        if matrix.shape[0] == N_VARIABLES and matrix.shape[1] > N_VARIABLES:
            matrix = matrix.T
        else:
            raise ValueError(
                f"{path}: neither dimension fits {N_VARIABLES} variables "
                f"(shape {matrix.shape})")
    rows = matrix.shape[0]
    if split == "test" and rows != TEST_ROWS:
        raise ValueError(
            f"{path}: test run must have {TEST_ROWS} rows, got {rows}")
    if split == "train" and fault_id > 0 and rows != FAULTY_TRAIN_ROWS:
        raise ValueError(
            f"{path}: faulty training run must have {FAULTY_TRAIN_ROWS} "
            f"rows, got {rows}")
    return RawRun(matrix, fault_id=fault_id, split=split)


def save_run_text(run: RawRun, path) -> None:
    """Write the matrix in the whitespace-delimited text format.

    17 significant digits, so reloading reproduces the float64 values
    bit for bit.
    """
    np.savetxt(path, run.matrix, fmt="%.17g")


# --------------------------------------------------------------------------
# Normalization

def fit_normalize(runs) -> NormStats:
    """Column mean/std over the concatenated training runs (population std)."""
    mats = [r.matrix for r in runs]
    if not mats:
        raise ValueError("need at least one training run")
    stacked = np.concatenate(mats, axis=0)
    if stacked.shape[0] < 2:
        raise ValueError("need at least 2 training rows to fit normalization")
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)  # ddof=0
    bad = np.flatnonzero(std <= 0)
    if bad.size:
        raise ValueError(f"zero-variance columns: {bad.tolist()}")
    return NormStats(mean, std)


def apply_normalize(run: RawRun, stats: NormStats) -> RawRun:
    if stats.mean.shape[0] != run.matrix.shape[1]:
        raise ValueError("normalization stats do not match run width")
    return RawRun((run.matrix - stats.mean) / stats.std,
                  fault_id=run.fault_id, split=run.split)


# --------------------------------------------------------------------------
# Windowing

def make_windows(run: RawRun, win_len: int = DEFAULT_WIN_LEN,
                 stride: int = DEFAULT_STRIDE) -> WindowedDataset:
    """Slide a win_len window over the run and label each position.

    Training windows inherit the run's fault id. Test windows are labeled
    normal when they end before the fault onset, with the fault id when
    they start at or after it, and are dropped when they contain the
    onset itself.
    """
    if win_len < 1 or stride < 1:
        raise ValueError("win_len and stride must be >= 1")
    if win_len > run.rows:
        raise ValueError(
            f"win_len {win_len} exceeds run length {run.rows}")
    windows = []
    labels = []
    for start in range(0, run.rows - win_len + 1, stride):
        end = start + win_len  # exclusive
        if run.split == "test":
            if end <= FAULT_ONSET:
                label = 0
            elif start >= FAULT_ONSET:
                label = run.fault_id
            else:
                continue  # straddles the onset
        else:
            label = run.fault_id
        windows.append(run.matrix[start:end])
        labels.append(label)
    if windows:
        stacked = np.stack(windows)
    else:
        stacked = np.zeros((0, win_len, run.matrix.shape[1]))
    return WindowedDataset(stacked, np.asarray(labels, dtype=np.int64),
                           win_len=win_len, stride=stride)


def merge_windows(datasets) -> WindowedDataset:
    datasets = list(datasets)
    if not datasets:
        raise ValueError("nothing to merge")
    win_len = datasets[0].win_len
    stride = datasets[0].stride
    if any(d.win_len != win_len for d in datasets):
        raise ValueError("window lengths differ")
    return WindowedDataset(
        np.concatenate([d.windows for d in datasets], axis=0),
        np.concatenate([d.labels for d in datasets], axis=0),
        win_len=win_len, stride=stride)


# --------------------------------------------------------------------------
# Synthetic task generation

ENERGY_REJECT_BUDGET = 1000  # draw attempts allowed per emitted window


def energy_feature(window, exponent: float) -> float:
    """Sum of signed powers over every entry of the window."""
    return float(np.sum(signed_pow(window, exponent)))


def _draw_window(rng: np.random.Generator, win_len: int, channels: int,
                 mag_lo: float, mag_hi: float) -> np.ndarray:
    mags = np.exp(rng.uniform(np.log(mag_lo), np.log(mag_hi),
                              size=(win_len, channels)))
    signs = np.where(rng.uniform(size=(win_len, channels)) < 0.5, -1.0, 1.0)
    return signs * mags


def gen_synthetic(win_len: int = 8, channels: int = 4, exponent: float = 2.0,
                  noise: float = 0.05, count: int = 200, seed: int = 0,
                  margin_scale: float = 0.25, mag_lo: float = 0.2,
                  mag_hi: float = 3.0) -> SyntheticTask:
    """Emit a balanced two-class dataset split by a power-energy feature.

    Windows have log-uniform magnitudes and random signs. A pilot sample
    sets the class threshold (median feature) and margin; each emitted
    window is rejection-sampled until its feature clears the margin on
    the side its class requires. Noise is added after labeling, so with
    noise=0 the labeling rule holds exactly on the emitted windows.
    """
    if not count >= 0:
        raise ValueError("count must be >= 0")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    if not 0 < mag_lo < mag_hi:
        raise ValueError("need 0 < mag_lo < mag_hi")
    rng = make_rng(seed)
    pilot = np.array([
        energy_feature(_draw_window(rng, win_len, channels, mag_lo, mag_hi),
                       exponent)
        for _ in range(256)])
    threshold = float(np.median(pilot))
    margin = float(margin_scale * pilot.std())
    if margin <= 0:
        raise ValueError("degenerate feature distribution (zero spread)")

    windows = np.zeros((count, win_len, channels))
    labels = np.zeros(count, dtype=np.int64)
    for i in range(count):
        target = i % 2
        for _ in range(ENERGY_REJECT_BUDGET):
            cand = _draw_window(rng, win_len, channels, mag_lo, mag_hi)
            f = energy_feature(cand, exponent)
            if target == 0 and f <= threshold - margin:
                break
            if target == 1 and f >= threshold + margin:
                break
        else:
            raise RuntimeError(
                f"rejection budget exhausted for class {target}; "
                "margin_scale too aggressive for these task parameters")
        windows[i] = cand
        labels[i] = target
    if noise > 0 and count > 0:
        windows = windows + noise * rng.standard_normal(windows.shape)
    return SyntheticTask(windows, labels, exponent=float(exponent),
                         noise=float(noise), seed=int(seed),
                         threshold=threshold, margin=margin)


# --------------------------------------------------------------------------
# CSV cache for windowed datasets

def save_windows_csv(dataset: WindowedDataset, path) -> None:
    """Cache a windowed dataset: shape comment, header, one window per row."""
    n, win_len, channels = dataset.windows.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"# win_len={win_len} channels={channels} "
                 f"stride={dataset.stride}\n")
        writer = csv.writer(fh)
        names = [f"v{i}" for i in range(win_len * channels)]
        writer.writerow(["label"] + names)
        for i in range(n):
            flat = dataset.windows[i].reshape(-1)
            writer.writerow([int(dataset.labels[i])]
                            + [repr(float(v)) for v in flat])


def load_windows_csv(path) -> WindowedDataset:
    with open(path, newline="") as fh:
        shape_line = fh.readline()
        if not shape_line.startswith("#"):
            raise ValueError(f"{path}: missing shape comment line")
        fields = dict(part.split("=") for part in shape_line[1:].split())
        win_len = int(fields["win_len"])
        channels = int(fields["channels"])
        stride = int(fields["stride"])
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "label" or len(header) != 1 + win_len * channels:
            raise ValueError(f"{path}: header does not match shape line")
        labels = []
        rows = []
        for row in reader:
            labels.append(int(row[0]))
            rows.append(np.array([float(v) for v in row[1:]]))
    if rows:
        windows = np.stack(rows).reshape(len(rows), win_len, channels)
    else:
        windows = np.zeros((0, win_len, channels))
    return WindowedDataset(windows, np.asarray(labels, dtype=np.int64),
                           win_len=win_len, stride=stride)
