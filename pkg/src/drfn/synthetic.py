"""Synthetic markets with planted sector structure and predictive news.

Returns follow a sign-switching sector-factor model:

    r[t, i] = beta[i] * s[t, sector(i)] * f[t] + eps[t, i]

where f is a shared daily factor, s is a per-sector regime sign following
a Markov switch, and eps is idiosyncratic noise. Prices are rebuilt
multiplicatively. News embeddings lean toward a fixed direction u signed
by the stock's next-day return, so text is genuinely predictive and the
strength is controlled by one signal-to-noise knob.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .data import (BarSeries, NewsTable, StaticRelations, write_bars_csv,
                   write_news_embeddings, write_relations_csv)
from .errors import ConfigError, DataError

_START_DATE = date(2018, 1, 2)


@dataclass
class SyntheticSpec:
    """Knobs for one generated market; the seed fixes every byte."""

    n_stocks: int = 12
    n_sectors: int = 3
    n_days: int = 600
    switch_prob: float = 0.05
    factor_vol: float = 0.02
    noise_scale: float = 0.01
    news_snr: float = 1.0
    seed: int = 0
    news_dim: int = 32

    def validate(self) -> None:
        if self.n_stocks < 2:
            raise ConfigError("need at least 2 stocks")
        if not 1 <= self.n_sectors <= self.n_stocks:
            raise ConfigError("sectors must be in [1, n_stocks]")
        if self.n_days < 10:
            raise ConfigError("need at least 10 days")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ConfigError(f"switch_prob {self.switch_prob} not in [0, 1]")
        if self.factor_vol < 0 or self.noise_scale < 0 or self.news_snr < 0:
            raise ConfigError("volatility/noise/snr knobs must be nonnegative")
        if self.news_dim < 1:
            raise ConfigError("news_dim must be positive")

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        spec = cls(**raw)
        spec.validate()
        return spec


@dataclass
class SyntheticMarket:
    spec: SyntheticSpec
    symbols: list[str]
    sectors: list[int]              # sector index per stock
    dates: list[date]
    bars: dict[str, BarSeries]
    news: NewsTable
    relations: StaticRelations
    regimes: np.ndarray             # (n_days, n_sectors) of +-1
    returns: np.ndarray             # (n_days, n_stocks); row 0 is zero


def _trading_days(n: int) -> list[date]:
    days = []
    d = _START_DATE
    while len(days) < n:
        if d.weekday() < 5:
            days.append(d)
        d += timedelta(days=1)
    return days


def generate_synthetic(spec: SyntheticSpec) -> SyntheticMarket:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    z, s_count, n = spec.n_stocks, spec.n_sectors, spec.n_days

    symbols = [f"SYN{i:02d}" for i in range(z)]
    sectors = [i * s_count // z for i in range(z)]
    betas = rng.uniform(0.7, 1.3, size=z)
    base_prices = rng.uniform(20.0, 200.0, size=z)

    direction = rng.normal(size=spec.news_dim)
    direction /= np.linalg.norm(direction)

    flips = rng.random((n, s_count)) < spec.switch_prob
    regimes = np.ones((n, s_count))
    for t in range(1, n):
        regimes[t] = np.where(flips[t], -regimes[t - 1], regimes[t - 1])

    factor = rng.normal(0.0, spec.factor_vol, size=n)
    idio = rng.normal(0.0, spec.noise_scale, size=(n, z))
    returns = np.zeros((n, z))
    sector_sign = regimes[:, sectors]            # (n, z)
    returns[1:] = betas * sector_sign[1:] * factor[1:, None] + idio[1:]
    returns = np.maximum(returns, -0.95)         # keeps closes positive

    closes = base_prices * np.cumprod(1.0 + returns, axis=0)
    opens = np.vstack([closes[0], closes[:-1]])
    spread = np.abs(rng.normal(0.0, 0.002, size=(n, z)))
    highs = np.maximum(opens, closes) * (1.0 + spread)
    lows = np.minimum(opens, closes) * (1.0 - spread)
    volumes = np.exp(rng.normal(13.0, 0.5, size=(n, z)))

    news_noise = rng.normal(0.0, 1.0 / np.sqrt(spec.news_dim),
                            size=(n, z, spec.news_dim))

    dates = _trading_days(n)
    bars: dict[str, BarSeries] = {}
    for i, symbol in enumerate(symbols):
        indicators = np.column_stack([opens[:, i], closes[:, i], closes[:, i],
                                      highs[:, i], lows[:, i], volumes[:, i]])
        bars[symbol] = BarSeries(symbol=symbol, dates=list(dates),
                                 indicators=indicators)

    news: NewsTable = {}
    for t in range(n):
        for i, symbol in enumerate(symbols):
            vec = news_noise[t, i].copy()
            if t + 1 < n:
                vec += spec.news_snr * np.sign(returns[t + 1, i]) * direction
            norm = np.linalg.norm(vec)
            if norm > 0:
                vec /= norm
            news[(symbol, dates[t])] = [vec]

    matrix = np.zeros((z, z))
    for i in range(z):
        for j in range(z):
            if i != j and sectors[i] == sectors[j]:
                matrix[i, j] = 1.0
    relations = StaticRelations(symbols=symbols, matrix=matrix)

    return SyntheticMarket(spec=spec, symbols=symbols, sectors=sectors,
                           dates=dates, bars=bars, news=news,
                           relations=relations, regimes=regimes,
                           returns=returns)


def write_synthetic(market: SyntheticMarket, out_dir: str | Path,
                    ) -> dict[str, str]:
    """Write bars/news/relations/regimes plus a manifest; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "bars": str(out / "bars.csv"),
        "news": str(out / "news.bin"),
        "relations": str(out / "relations.csv"),
        "regimes": str(out / "regimes.csv"),
        "manifest": str(out / "manifest.json"),
    }
    write_bars_csv(paths["bars"], [market.bars[s] for s in market.symbols])
    write_news_embeddings(paths["news"], market.symbols, market.news,
                          market.spec.news_dim)
    write_relations_csv(paths["relations"], market.relations)
    with open(paths["regimes"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date"] + [f"sector_{k}"
                                    for k in range(market.spec.n_sectors)])
        for t, d in enumerate(market.dates):
            writer.writerow([d.isoformat()]
                            + [int(v) for v in market.regimes[t]])
    manifest = {"spec": asdict(market.spec),
                "symbols": market.symbols,
                "sectors": market.sectors,
                "files": {k: Path(v).name for k, v in paths.items()
                          if k != "manifest"}}
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def load_regimes(path: str | Path) -> tuple[list[date], np.ndarray]:
    """Read a regimes.csv back into (dates, signs)."""
    dates: list[date] = []
    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "date":
            raise DataError(f"{path}: not a regimes file")
        for row in reader:
            dates.append(date.fromisoformat(row[0]))
            rows.append([float(v) for v in row[1:]])
    return dates, np.asarray(rows)
