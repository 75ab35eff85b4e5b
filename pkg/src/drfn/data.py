"""Ingestion, returns, normalization, windowing, and the file formats.

File formats:
  bars       CSV ``date,symbol,open,high,low,close,adj_close,volume``
  relations  CSV ``symbol_a,symbol_b`` edge list (header optional)
  news       JSON-lines ``{"date":..., "symbol":..., "texts":[...]}`` or a
             binary embedding file (magic ``DRFNEMB1``, little-endian:
             u32 dim, u32 record count, then records of u32 epoch-day,
             u32 symbol index, u32 count, count*dim float32 values)
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .encoders import aggregate_daily_news
from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"DRFNEMB1"
EPOCH = date(1970, 1, 1)

# Indicator order used everywhere downstream.
INDICATOR_COLUMNS = ("open", "close", "adj_close", "high", "low", "volume")
_CSV_HEADER = ["date", "symbol", "open", "high", "low", "close", "adj_close",
               "volume"]


@dataclass
class BarSeries:
    """One stock's retained trading days and their six indicators.

    ``indicators`` is (n_days, 6) in INDICATOR_COLUMNS order. Days with
    any missing indicator were removed at load time.
    """

    symbol: str
    dates: list[date]
    indicators: np.ndarray

    def __post_init__(self):
        if len(self.dates) != self.indicators.shape[0]:
            raise DataError(f"{self.symbol}: {len(self.dates)} dates vs "
                            f"{self.indicators.shape[0]} indicator rows")
        if self.indicators.ndim != 2 or self.indicators.shape[1] != 6:
            raise DataError(f"{self.symbol}: indicators must be (n, 6)")
        for prev, cur in zip(self.dates, self.dates[1:]):
            if cur <= prev:
                raise DataError(f"{self.symbol}: dates not strictly increasing "
                                f"at {cur}")

    @property
    def closes(self) -> np.ndarray:
        return self.indicators[:, 1]


@dataclass
class StaticRelations:
    """Binary Z x Z adjacency of predefined business relationships."""

    symbols: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        z = len(self.symbols)
        m = self.matrix
        if m.shape != (z, z):
            raise DataError(f"relation matrix shape {m.shape} != ({z}, {z})")
        if not np.array_equal(m, m.T):
            raise DataError("relation matrix must be symmetric")
        if not np.isin(m, (0.0, 1.0)).all():
            raise DataError("relation matrix entries must be 0 or 1")
        if np.trace(m) != 0:
            raise DataError("relation matrix diagonal must be zero")


def compute_returns(series: BarSeries) -> np.ndarray:
    """Daily return realized on each day after the first: (c1 - c0) / c0.

    Uses the raw close. Output has length n-1 and index k corresponds to
    the series' day k+1.
    """
    closes = series.closes
    if closes.size < 2:
        raise DataError(f"{series.symbol}: need at least 2 days of closes")
    bad = np.where(closes <= 0.0)[0]
    if bad.size:
        raise DataError(f"{series.symbol}: nonpositive close on "
                        f"{series.dates[bad[0]]}")
    return closes[1:] / closes[:-1] - 1.0


def chronological_split(n_days: int, ratios: tuple[int, int, int] = (8, 1, 1),
                        ) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """Contiguous train/validation/test day ranges, never shuffled.

    Train and validation sizes are floored; the remainder goes to test.
    """
    if n_days < 3:
        raise DataError(f"cannot split {n_days} days three ways")
    total = sum(ratios)
    n_train = n_days * ratios[0] // total
    n_val = n_days * ratios[1] // total
    if n_train == 0 or n_val == 0 or n_train + n_val >= n_days:
        raise DataError(f"split of {n_days} days with ratios {ratios} leaves "
                        "an empty partition")
    return ((0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_days))


def zscore_stats(values: np.ndarray, present: np.ndarray,
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean/std (population) over rows flagged present."""
    mean = np.zeros(values.shape[1])
    std = np.ones(values.shape[1])
    rows = values[present]
    if rows.shape[0] == 0:
        raise DataError("no training rows available for normalization")
    mean[:] = rows.mean(axis=0)
    std[:] = rows.std(axis=0)
    return mean, std


def apply_zscore(values: np.ndarray, mean: np.ndarray, std: np.ndarray,
                 ) -> np.ndarray:
    """Standardize columns; near-constant features are zeroed out."""
    out = np.zeros_like(values)
    live = std >= 1e-12
    out[:, live] = (values[:, live] - mean[live]) / std[live]
    return out


# ---------------------------------------------------------------------------
# file loaders / writers


def load_bars_csv(path: str | Path) -> dict[str, BarSeries]:
    """Parse the bar CSV; rows with any missing field are dropped."""
    rows: dict[str, dict[date, list[float]]] = {}
    dropped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in _CSV_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: bar CSV missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                d = date.fromisoformat(row["date"].strip())
                values = [float(row[c]) for c in INDICATOR_COLUMNS]
            except (ValueError, TypeError, AttributeError):
                dropped += 1
                continue
            symbol = row["symbol"].strip()
            if not symbol:
                raise DataError(f"{path}:{lineno}: empty symbol")
            per_symbol = rows.setdefault(symbol, {})
            if d in per_symbol:
                raise DataError(f"{path}: duplicate date {d} for {symbol}")
            per_symbol[d] = values
    if dropped:
        log.info("load_bars_csv: dropped %d rows with missing fields", dropped)
    out: dict[str, BarSeries] = {}
    for symbol, by_date in rows.items():
        dates = sorted(by_date)
        indicators = np.asarray([by_date[d] for d in dates], dtype=np.float64)
        out[symbol] = BarSeries(symbol=symbol, dates=dates, indicators=indicators)
    if not out:
        raise DataError(f"{path}: no usable bar rows")
    return out


def write_bars_csv(path: str | Path, series: Iterable[BarSeries]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for s in series:
            for d, row in zip(s.dates, s.indicators):
                o, c, ac, h, lo, v = row
                writer.writerow([d.isoformat(), s.symbol,
                                 repr(o), repr(h), repr(lo), repr(c),
                                 repr(ac), repr(v)])


def load_relations(path: str | Path, symbols: Sequence[str]) -> StaticRelations:
    """Edge-list CSV -> symmetrized binary matrix with zero diagonal."""
    index = {s: i for i, s in enumerate(symbols)}
    z = len(symbols)
    matrix = np.zeros((z, z))
    n_edges = 0
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and [c.strip().lower() for c in row[:2]]
                           == ["symbol_a", "symbol_b"]):
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: expected two symbols")
            a, b = row[0].strip(), row[1].strip()
            unknown = [s for s in (a, b) if s not in index]
            if unknown:
                raise DataError(f"{path}:{lineno}: unknown symbols {unknown}")
            if a == b:
                continue  # self-relations are masked out by contract
            matrix[index[a], index[b]] = 1.0
            matrix[index[b], index[a]] = 1.0
            n_edges += 1
    if n_edges == 0:
        log.warning("load_relations: %s has no edges; using all-zeros matrix",
                    path)
    return StaticRelations(symbols=list(symbols), matrix=matrix)


def write_relations_csv(path: str | Path, relations: StaticRelations) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["symbol_a", "symbol_b"])
        z = len(relations.symbols)
        for i in range(z):
            for j in range(i + 1, z):
                if relations.matrix[i, j]:
                    writer.writerow([relations.symbols[i], relations.symbols[j]])


NewsTable = dict[tuple[str, date], list[np.ndarray]]


def load_news_jsonl(path: str | Path, embedder) -> NewsTable:
    """Embed raw texts day by day with the given embedder."""
    table: NewsTable = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                d = date.fromisoformat(record["date"])
                symbol = record["symbol"]
                texts = record["texts"]
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: bad news record ({e})")
            vecs = [embedder.embed(t) for t in texts]
            table.setdefault((symbol, d), []).extend(vecs)
    return table


def load_news_embeddings(path: str | Path, symbols: Sequence[str],
                         ) -> tuple[NewsTable, int]:
    """Read the binary embedding format; returns (table, embedding dim)."""
    raw = Path(path).read_bytes()
    if raw[:8] != EMBEDDING_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:8]!r}")
    dim, count = struct.unpack_from("<II", raw, 8)
    offset = 16
    table: NewsTable = {}
    for _ in range(count):
        if offset + 12 > len(raw):
            raise DataError(f"{path}: truncated record header")
        epoch_day, sym_idx, q = struct.unpack_from("<III", raw, offset)
        offset += 12
        nbytes = 4 * q * dim
        if offset + nbytes > len(raw):
            raise DataError(f"{path}: truncated embedding data")
        if sym_idx >= len(symbols):
            raise DataError(f"{path}: symbol index {sym_idx} out of range")
        vecs = np.frombuffer(raw, dtype="<f4", count=q * dim, offset=offset)
        offset += nbytes
        d = EPOCH + timedelta(days=int(epoch_day))
        key = (symbols[sym_idx], d)
        table.setdefault(key, []).extend(
            vecs.reshape(q, dim).astype(np.float64))
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes")
    return table, dim


def write_news_embeddings(path: str | Path, symbols: Sequence[str],
                          table: Mapping[tuple[str, date], Sequence[np.ndarray]],
                          dim: int) -> None:
    index = {s: i for i, s in enumerate(symbols)}
    keys = sorted(table.keys(), key=lambda k: (k[1], index[k[0]]))
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", dim, len(keys)))
        for symbol, d in keys:
            vecs = table[(symbol, d)]
            fh.write(struct.pack("<III", (d - EPOCH).days, index[symbol],
                                 len(vecs)))
            for v in vecs:
                if v.shape != (dim,):
                    raise ShapeError(f"embedding shape {v.shape} != ({dim},)")
                fh.write(np.asarray(v, dtype="<f4").tobytes())


def load_news_auto(path: str | Path, symbols: Sequence[str], embedder,
                   ) -> tuple[NewsTable, int]:
    """Dispatch on the file's magic: binary embeddings or JSON-lines."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == EMBEDDING_MAGIC:
        return load_news_embeddings(path, symbols)
    return load_news_jsonl(path, embedder), embedder.dim


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class WindowSample:
    """One training example: T days of inputs for all Z stocks.

    All array fields are views into the parent dataset. ``targets`` holds
    the next-day returns (day ``end_index + 1``).
    """

    end_index: int
    features: np.ndarray    # (T, Z, 6) z-scored indicators
    news_mean: np.ndarray   # (T, Z, L) mean-pooled news embeddings
    news_mask: np.ndarray   # (T, Z) True where the day had news
    targets: np.ndarray     # (Z,)


@dataclass
class Dataset:
    """Calendar-aligned arrays plus split ranges and window lists."""

    symbols: list[str]
    calendar: list[date]
    features: np.ndarray        # (n_days, Z, 6) z-scored
    closes: np.ndarray          # (n_days, Z) raw closes, NaN where absent
    returns: np.ndarray         # (n_days, Z), NaN where undefined
    present: np.ndarray         # (n_days, Z) bool
    news_mean: np.ndarray       # (n_days, Z, L)
    news_mask: np.ndarray       # (n_days, Z) bool
    relations: StaticRelations
    t_window: int
    ranges: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def n_days(self) -> int:
        return len(self.calendar)

    @property
    def news_dim(self) -> int:
        return self.news_mean.shape[2]

    def windows(self, partition: str) -> list[WindowSample]:
        return build_windows(self, self.ranges[partition])


def build_windows(dataset: Dataset, day_range: tuple[int, int],
                  t_window: int | None = None) -> list[WindowSample]:
    """All full-presence sliding windows wholly inside one partition.

    A sample whose T+1-day span is missing any (day, stock) bar is
    dropped and logged, so no window ever straddles a partition boundary
    or a data gap.
    """
    t_win = t_window if t_window is not None else dataset.t_window
    start, end = day_range
    samples: list[WindowSample] = []
    dropped = 0
    for t in range(start + t_win - 1, end - 1):
        lo = t - t_win + 1
        if not dataset.present[lo:t + 2].all():
            dropped += 1
            continue
        samples.append(WindowSample(
            end_index=t,
            features=dataset.features[lo:t + 1],
            news_mean=dataset.news_mean[lo:t + 1],
            news_mask=dataset.news_mask[lo:t + 1],
            targets=dataset.returns[t + 1],
        ))
    if dropped:
        log.info("build_windows: dropped %d samples with missing days in "
                 "range [%d, %d)", dropped, start, end)
    return samples


def build_dataset(bars: Mapping[str, BarSeries], news: NewsTable,
                  relations: StaticRelations, t_window: int,
                  news_dim: int, q_max: int = 30,
                  ratios: tuple[int, int, int] = (8, 1, 1)) -> Dataset:
    """Align everything on the union trading calendar and split it.

    Normalization statistics come from the training partition only, per
    stock and indicator, so later partitions cannot leak into them.
    """
    symbols = relations.symbols
    missing = [s for s in symbols if s not in bars]
    if missing:
        raise DataError(f"no bars for symbols {missing}")
    calendar = sorted({d for s in symbols for d in bars[s].dates})
    n_days, z = len(calendar), len(symbols)
    if n_days < t_window + 3:
        raise DataError(f"{n_days} days is too short for T={t_window}")
    day_index = {d: i for i, d in enumerate(calendar)}

    raw = np.full((n_days, z, 6), np.nan)
    present = np.zeros((n_days, z), dtype=bool)
    returns = np.full((n_days, z), np.nan)
    for i, symbol in enumerate(symbols):
        series = bars[symbol]
        idx = np.asarray([day_index[d] for d in series.dates])
        raw[idx, i] = series.indicators
        present[idx, i] = True
        series_returns = compute_returns(series)
        # A return lands on the calendar only when the two days it spans
        # are consecutive calendar days.
        consecutive = idx[1:] == idx[:-1] + 1
        returns[idx[1:][consecutive], i] = series_returns[consecutive]

    train_range, val_range, test_range = chronological_split(n_days, ratios)
    features = np.zeros_like(raw)
    for i in range(z):
        train_present = present[train_range[0]:train_range[1], i]
        mean, std = zscore_stats(raw[train_range[0]:train_range[1], i],
                                 train_present)
        normalized = apply_zscore(np.nan_to_num(raw[:, i]), mean, std)
        normalized[~present[:, i]] = 0.0
        features[:, i] = normalized

    news_mean = np.zeros((n_days, z, news_dim))
    news_mask = np.zeros((n_days, z), dtype=bool)
    sym_to_col = {s: i for i, s in enumerate(symbols)}
    for (symbol, d), vecs in news.items():
        if symbol not in sym_to_col or d not in day_index:
            continue  # news outside the bar universe/calendar is ignored
        pooled, has_news = aggregate_daily_news(vecs, dim=news_dim,
                                                max_count=q_max)
        news_mean[day_index[d], sym_to_col[symbol]] = pooled
        news_mask[day_index[d], sym_to_col[symbol]] = has_news

    return Dataset(symbols=list(symbols), calendar=calendar, features=features,
                   closes=raw[:, :, 1], returns=returns, present=present,
                   news_mean=news_mean, news_mask=news_mask,
                   relations=relations, t_window=t_window,
                   ranges={"train": train_range, "val": val_range,
                           "test": test_range})
