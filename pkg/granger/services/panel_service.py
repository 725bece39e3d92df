"""
Panel I/O and the transforms between a raw panel and model-ready samples.

Readers raise FormatError with the offending line/row and column. Lagging
is done per replicate so no window ever spans two replicates.
"""

import logging
import math
from typing import Optional

import numpy as np
import pandas as pd

from granger.core.errors import FormatError, UsageError
from granger.core.seeding import rng_stream
from granger.models.panel import LaggedDataset, ScalerStats, TimeSeriesPanel
from granger.services import storage_service

logger = logging.getLogger(__name__)

SCALE_EPS = 1e-12


# ---------------------------------------------------------------------------
# Lagging
# ---------------------------------------------------------------------------


def make_lagged(panel: TimeSeriesPanel, max_lag: int) -> LaggedDataset:
    """
    Turn a panel into (K, p) windows and next-step targets.

    Every replicate of length T_r contributes T_r - K samples; window row k
    holds x_{t-k-1}.

    Raises:
        UsageError: If no replicate is longer than ``max_lag``.
    """
    if max_lag < 1:
        raise UsageError(f"max_lag must be >= 1, got {max_lag}")
    inputs, targets = [], []
    offset = 0
    for length in panel.replicates:
        block = panel.data[offset : offset + length]
        offset += length
        n = length - max_lag
        if n <= 0:
            logger.warning("Replicate of length %d is too short for lag %d; skipped", length, max_lag)
            continue
        window = np.empty((n, max_lag, panel.num_series))
        for k in range(max_lag):
            window[:, k, :] = block[max_lag - 1 - k : length - 1 - k]
        inputs.append(window)
        targets.append(block[max_lag:])
    if not inputs:
        raise UsageError(f"panel with replicates {panel.replicates} is too short for lag {max_lag}")
    return LaggedDataset(np.concatenate(inputs), np.concatenate(targets), list(panel.series_names))


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


def _moments(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    if values.shape[0] < 2:
        sd = np.zeros_like(mean)
    else:
        sd = values.std(axis=0, ddof=1)
    degenerate = ~(sd >= SCALE_EPS)
    return np.where(degenerate, 0.0, mean), np.where(degenerate, 1.0, sd)


def fit_scaler(dataset: LaggedDataset) -> ScalerStats:
    """
    Per (lag, series) mean and sample sd, plus per-series target moments.

    Coordinates with sd below 1e-12 get mean 0 and sd 1, i.e. pass through.
    """
    if len(dataset) == 0:
        raise UsageError("cannot fit scaling statistics on an empty subset")
    input_mean, input_sd = _moments(dataset.inputs)
    target_mean, target_sd = _moments(dataset.targets)
    return ScalerStats(input_mean, input_sd, target_mean, target_sd)


def apply_scaler(dataset: LaggedDataset, stats: ScalerStats) -> LaggedDataset:
    inputs = (dataset.inputs - stats.input_mean) / stats.input_sd
    targets = (dataset.targets - stats.target_mean) / stats.target_sd
    return LaggedDataset(inputs, targets, list(dataset.series_names))


def standard_scale(
    dataset: LaggedDataset, stats_from: Optional[LaggedDataset] = None
) -> tuple[LaggedDataset, ScalerStats]:
    """Scale ``dataset`` with statistics from ``stats_from`` (default: itself)."""
    stats = fit_scaler(dataset if stats_from is None else stats_from)
    return apply_scaler(dataset, stats), stats


# ---------------------------------------------------------------------------
# Splits and windows
# ---------------------------------------------------------------------------


def train_val_split(dataset: LaggedDataset, val_fraction: float, seed: int) -> tuple[LaggedDataset, LaggedDataset]:
    """
    Seeded uniform partition into ceil(N * val_fraction) validation samples and the rest.

    Raises:
        UsageError: If the fraction is outside (0, 1) or either side is empty.
    """
    if not 0.0 < val_fraction < 1.0:
        raise UsageError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(dataset)
    n_val = math.ceil(round(n * val_fraction, 9))
    if n_val == 0 or n_val >= n:
        raise UsageError(f"split of {n} samples at {val_fraction} leaves an empty side")
    order = rng_stream(seed, "split").permutation(n)
    val_idx = np.sort(order[:n_val])
    train_idx = np.sort(order[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


def chronological_split(dataset: LaggedDataset, train_fraction: float) -> tuple[LaggedDataset, LaggedDataset]:
    """First floor(N * train_fraction) samples for training, the rest held out."""
    if not 0.0 < train_fraction < 1.0:
        raise UsageError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = math.floor(round(n * train_fraction, 9))
    if n_train == 0 or n_train >= n:
        raise UsageError(f"chronological split of {n} samples at {train_fraction} leaves an empty side")
    return dataset.subset(np.arange(n_train)), dataset.subset(np.arange(n_train, n))


def window_stride(window_len: int, overlap: float) -> int:
    return int(math.floor(round(window_len * (1.0 - overlap), 9)))


def sliding_windows(panel: TimeSeriesPanel, window_len: int, overlap: float) -> list[TimeSeriesPanel]:
    """
    Cut a continuous recording into windows at stride window_len * (1 - overlap).

    A trailing partial window is dropped. Each window carries its absolute
    ``start_sample`` (and seconds through ``sampling_rate``).

    Raises:
        UsageError: If window_len > T, overlap is outside [0, 1), or the panel is replicated.
    """
    if not 0.0 <= overlap < 1.0:
        raise UsageError(f"overlap must lie in [0, 1), got {overlap}")
    if window_len < 1 or window_len > panel.num_steps:
        raise UsageError(f"window length {window_len} does not fit a panel of {panel.num_steps} steps")
    if len(panel.replicates) > 1:
        raise UsageError("sliding windows need a single continuous recording")
    stride = window_stride(window_len, overlap)
    if stride < 1:
        raise UsageError(f"window {window_len} at overlap {overlap} gives a zero stride")

    count = (panel.num_steps - window_len) // stride + 1
    windows = []
    for w in range(count):
        start = w * stride
        windows.append(
            TimeSeriesPanel(
                data=panel.data[start : start + window_len],
                series_names=list(panel.series_names),
                truth=panel.truth,
                truth_lags=panel.truth_lags,
                start_sample=panel.start_sample + start,
                sampling_rate=panel.sampling_rate,
                metadata={**panel.metadata, "window": w},
            )
        )
    logger.info("Cut %d windows of %d steps at stride %d", count, window_len, stride)
    return windows


# ---------------------------------------------------------------------------
# CSV panels
# ---------------------------------------------------------------------------


def read_panel_csv(path: str, sampling_rate: Optional[float] = None) -> TimeSeriesPanel:
    """
    Read a panel CSV: header of series names, one row per time step.

    Raises:
        FormatError: On an empty file or a non-numeric cell (row = file line).
    """
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise FormatError(f"{path}: empty panel file", line=1) from None
    if raw.empty:
        raise FormatError(f"{path}: panel has a header but no rows", line=2)
    for column in raw.columns:
        numeric = pd.to_numeric(raw[column].str.strip(), errors="coerce")
        bad = ~np.isfinite(numeric.to_numpy(dtype=np.float64))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise FormatError(
                f"{path}: non-numeric cell {raw[column].iloc[row]!r}", line=row + 2, column=str(column)
            )
    data = raw.apply(lambda col: pd.to_numeric(col.str.strip())).to_numpy(dtype=np.float64)
    names = [str(c).strip() for c in raw.columns]
    logger.info("Read panel %s: %d steps x %d series", path, data.shape[0], data.shape[1])
    return TimeSeriesPanel(data=data, series_names=names, sampling_rate=sampling_rate, metadata={"source": path})


def write_panel_csv(path: str, panel: TimeSeriesPanel) -> str:
    frame = pd.DataFrame(panel.data, columns=panel.series_names)
    return storage_service.write_frame_atomic(path, frame)


def read_truth_csv(path: str, num_series: Optional[int] = None) -> np.ndarray:
    """
    Read a p x p 0/1 truth matrix (no header; row i, column j = j causes i).

    Raises:
        FormatError: If the matrix is not square, has the wrong size, or holds values other than 0/1.
    """
    try:
        raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise FormatError(f"{path}: empty truth file", line=1) from None
    rows, cols = raw.shape
    if rows != cols:
        raise FormatError(f"{path}: truth matrix is {rows}x{cols}, expected square")
    if num_series is not None and rows != num_series:
        raise FormatError(f"{path}: truth matrix is {rows}x{rows}, panel has {num_series} series")
    truth = np.zeros((rows, cols), dtype=np.int64)
    for i in range(rows):
        for j in range(cols):
            cell = raw.iat[i, j].strip()
            if cell not in ("0", "1"):
                raise FormatError(f"{path}: truth entries must be 0 or 1, got {cell!r}", line=i + 1, column=str(j))
            truth[i, j] = int(cell)
    return truth


def write_truth_csv(path: str, truth: np.ndarray) -> str:
    frame = pd.DataFrame(np.asarray(truth, dtype=np.int64))
    return storage_service.write_frame_atomic(path, frame, header=False)


# ---------------------------------------------------------------------------
# Replicated panels (time-course blocks separated by blank lines)
# ---------------------------------------------------------------------------


def _parse_float(token: str, line: int, column: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise FormatError(f"non-numeric value {token!r}", line=line, column=column) from None
    if not math.isfinite(value):
        raise FormatError(f"non-finite value {token!r}", line=line, column=column)
    return value


def _column_label(names: Optional[list[str]], column: int) -> str:
    if column == 0:
        return "time"
    if names and column - 1 < len(names):
        return names[column - 1]
    return f"G{column}"


def load_replicated_panel(path: str, truth_path: Optional[str] = None) -> TimeSeriesPanel:
    """
    Load a tab-separated time-course file with one block per replicate.

    The first column is time; blocks are separated by blank lines. An
    optional header line (first field non-numeric) names the series;
    otherwise they are G1..Gp. ``truth_path`` points to an edge list with
    lines ``G<a> G<b> 1`` meaning a regulates b, i.e. truth[b][a] = 1.

    Raises:
        FormatError: On ragged replicate lengths, inconsistent column
            counts, non-numeric values, or unknown names in the edge list.
    """
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()

    names: Optional[list[str]] = None
    blocks: list[list[list[float]]] = []
    block_lines: list[int] = []
    current: list[list[float]] = []
    width: Optional[int] = None
    for number, text in enumerate(lines, start=1):
        if not text.strip():
            if current:
                blocks.append(current)
                current = []
            continue
        fields = text.strip().split("\t") if "\t" in text else text.split()
        if names is None and not blocks and not current:
            try:
                float(fields[0])
            except ValueError:
                names = [f.strip() for f in fields[1:]]
                width = len(fields)
                continue
        if width is None:
            width = len(fields)
        if len(fields) != width:
            raise FormatError(f"{path}: expected {width} fields, got {len(fields)}", line=number)
        if not current:
            block_lines.append(number)
        current.append([_parse_float(tok, number, _column_label(names, c)) for c, tok in enumerate(fields)])
    if current:
        blocks.append(current)
    if not blocks:
        raise FormatError(f"{path}: no time points found", line=len(lines) or 1)

    length = len(blocks[0])
    for block, first_line in zip(blocks, block_lines):
        if len(block) != length:
            raise FormatError(
                f"{path}: replicate has {len(block)} time points, expected {length}", line=first_line
            )

    p = width - 1
    if names is None:
        names = [f"G{j + 1}" for j in range(p)]
    data = np.array([row[1:] for block in blocks for row in block], dtype=np.float64)
    times = [row[0] for row in blocks[0]]
    truth = read_edge_list(truth_path, names) if truth_path else None
    logger.info("Loaded replicated panel %s: %d replicates x %d steps x %d series", path, len(blocks), length, p)
    return TimeSeriesPanel(
        data=data,
        series_names=names,
        truth=truth,
        replicate_lengths=[length] * len(blocks),
        metadata={"source": path, "times": times},
    )


def read_edge_list(path: str, names: list[str]) -> np.ndarray:
    """Parse ``a b weight`` lines into truth[b][a] = 1 for weight 1."""
    index = {name: j for j, name in enumerate(names)}
    truth = np.zeros((len(names), len(names)), dtype=np.int64)
    with open(path, encoding="utf-8") as handle:
        for number, text in enumerate(handle, start=1):
            fields = text.split()
            if not fields:
                continue
            if len(fields) not in (2, 3):
                raise FormatError(f"{path}: edge lines need 'source target [0|1]'", line=number)
            source, target = fields[0], fields[1]
            for name in (source, target):
                if name not in index:
                    raise FormatError(f"{path}: unknown series name {name!r}", line=number)
            weight = fields[2] if len(fields) == 3 else "1"
            if weight not in ("0", "1"):
                raise FormatError(f"{path}: edge weight must be 0 or 1, got {weight!r}", line=number)
            if weight == "1":
                truth[index[target], index[source]] = 1
    return truth
