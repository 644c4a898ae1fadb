"""Panel ingestion, normalisation, windowing and a synthetic factor-model generator.

CSV schema
----------
``<stock_id>.csv``
    ``date,<feature...>`` with ISO-8601 dates and a mandatory ``close`` column.
``index.csv``
    ``date,value``.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffopt import SeededRng

log = logging.getLogger(__name__)

INDEX_FILE = "index.csv"

# reference header of the 45-column daily panel this layout was designed for
REFERENCE_FEATURES = (
    "open high low close pre_close change pct_chg vol amount turnover_rate turnover_rate_f "
    "volume_ratio pe pe_ttm pb ps ps_ttm dv_ratio dv_ttm total_share float_share free_share "
    "total_mv circ_mv buy_sm_vol buy_sm_amount sell_sm_vol sell_sm_amount buy_md_vol "
    "buy_md_amount sell_md_vol sell_md_amount buy_lg_vol buy_lg_amount sell_lg_vol "
    "sell_lg_amount buy_elg_vol buy_elg_amount sell_elg_vol sell_elg_amount net_mf_vol "
    "net_mf_amount up_limit down_limit ma5 ma10 ma15 ma20 ma25 industry"
).split()


class DataError(ValueError):
    pass


@dataclass
class PanelDataset:
    stocks: list[str]
    calendar: list[str]
    feature_names: list[str]
    features: np.ndarray          # [N, T, F]
    index_series: np.ndarray      # [T]
    close: np.ndarray             # [N, T], raw prices
    fill_counts: dict[str, int] = field(default_factory=dict)

    @property
    def shape(self):
        return self.features.shape


@dataclass
class WindowSample:
    X_window: np.ndarray          # [N, T_in, F]
    I_window: np.ndarray          # [T_in]
    labels: np.ndarray            # [N]
    anchor: int                   # calendar position of the last window step
    anchor_date: str


@dataclass(frozen=True)
class SplitSpec:
    """Sample counts per segment; segments are chronological and separated by an embargo."""
    train: int
    valid: int
    test: int

    @classmethod
    def from_fractions(cls, n_samples: int, horizon: int, train: float = 0.6,
                       valid: float = 0.1) -> "SplitSpec":
        usable = n_samples - 2 * (horizon - 1)
        if usable < 3:
            raise DataError(f"{n_samples} samples cannot be split with a {horizon}-day embargo")
        n_train = max(1, int(round(usable * train)))
        n_valid = max(1, int(round(usable * valid)))
        n_test = usable - n_train - n_valid
        if n_test < 1:
            raise DataError("split fractions leave no test samples")
        return cls(n_train, n_valid, n_test)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _parse_date(text: str, where: str) -> str:
    try:
        return dt.date.fromisoformat(text.strip()).isoformat()
    except ValueError:
        raise DataError(f"{where}: bad ISO date {text!r}") from None


def _parse_float(text: str, where: str) -> float:
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{where}: non-numeric cell {text!r}") from None


def _read_csv(path: Path) -> tuple[list[str], dict[str, list[float]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0] != "date":
            raise DataError(f"{path}: first column must be 'date'")
        rows: dict[str, list[float]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            where = f"{path}:{lineno}"
            rows[_parse_date(row[0], where)] = [_parse_float(c, where) for c in row[1:]]
    return header[1:], rows


def _fill(series: np.ndarray) -> tuple[np.ndarray, int]:
    """Forward-fill NaNs along the last axis; leading gaps take the first valid value."""
    out = series.copy()
    filled = 0
    for row in out.reshape(-1, out.shape[-1]):
        bad = np.isnan(row)
        if not bad.any():
            continue
        if bad.all():
            raise DataError("a series has no valid values on the shared calendar")
        filled += int(bad.sum())
        idx = np.where(~bad, np.arange(row.size), 0)
        np.maximum.accumulate(idx, out=idx)
        first = np.argmax(~bad)
        idx[:first] = first
        row[:] = row[idx]
    return out, filled


def load_panel(data_dir) -> PanelDataset:
    """Read a directory of per-stock CSVs plus ``index.csv``.

    The shared calendar is the set of index dates inside the span that every
    stock covers and on which at least one stock reports. Missing stock rows
    and empty cells on that calendar are forward-filled.
    """
    root = Path(data_dir)
    index_path = root / INDEX_FILE
    if not index_path.is_file():
        raise DataError(f"{root}: missing {INDEX_FILE}")
    idx_cols, idx_rows = _read_csv(index_path)
    if idx_cols != ["value"]:
        raise DataError(f"{index_path}: expected columns date,value")
    stock_paths = sorted(p for p in root.glob("*.csv") if p.name != INDEX_FILE)
    if not stock_paths:
        raise DataError(f"{root}: no stock files")

    names = None
    tables = []
    for p in stock_paths:
        cols, rows = _read_csv(p)
        if names is None:
            names = cols
            if "close" not in names:
                raise DataError(f"{p}: mandatory 'close' column missing")
        elif cols != names:
            raise DataError(f"{p}: header {cols} differs from {names}")
        if not rows:
            raise DataError(f"{p}: no rows")
        tables.append(rows)

    start = max(min(t) for t in tables)
    end = min(max(t) for t in tables)
    seen = set().union(*tables)
    calendar = sorted(d for d in idx_rows if start <= d <= end and d in seen)
    if not calendar:
        raise DataError("empty calendar: stock and index dates do not overlap")

    N, T, F = len(tables), len(calendar), len(names)
    feats = np.full((N, T, F), np.nan)
    for i, rows in enumerate(tables):
        for j, d in enumerate(calendar):
            if d in rows:
                feats[i, j] = rows[d]
    index = np.array([idx_rows[d][0] for d in calendar])

    fill_counts = {}
    feats_t, n = _fill(np.moveaxis(feats, 1, 2))
    feats = np.moveaxis(feats_t, 2, 1)
    fill_counts["features"] = n
    index, fill_counts["index"] = _fill(index[None])
    index = index[0]
    if any(fill_counts.values()):
        log.info("forward-filled cells: %s", fill_counts)
    close = feats[:, :, names.index("close")].copy()
    return PanelDataset([p.stem for p in stock_paths], calendar, list(names), feats, index,
                        close, fill_counts)


def save_panel(ds: PanelDataset, out_dir) -> None:
    """Write ``ds`` in the ingestion schema; values use shortest round-trip repr."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    header = ["date", *ds.feature_names]
    for i, sid in enumerate(ds.stocks):
        with open(root / f"{sid}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for j, d in enumerate(ds.calendar):
                w.writerow([d, *(repr(float(v)) for v in ds.features[i, j])])
    with open(root / INDEX_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "value"])
        for d, v in zip(ds.calendar, ds.index_series):
            w.writerow([d, repr(float(v))])


# ---------------------------------------------------------------------------
# normalisation and windowing
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    scheme: str
    mean: np.ndarray | None = None
    std: np.ndarray | None = None


def normalize(ds: PanelDataset, scheme: str = "zscore_cross_sectional") -> tuple[PanelDataset, NormStats]:
    """Per-date, per-feature cross-sectional z-score (prices for labels stay raw)."""
    if scheme == "none":
        return ds, NormStats(scheme)
    if scheme != "zscore_cross_sectional":
        raise DataError(f"unknown normalisation scheme {scheme!r}")
    x = ds.features
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    centered = x - mean
    ok = std >= 1e-12
    z = np.where(ok, centered / np.where(ok, std, 1.0), 0.0)
    return replace(ds, features=z), NormStats(scheme, mean, std)


def index_input(index_series: np.ndarray) -> np.ndarray:
    """Daily index returns in percent (first day 0): the model's index channel."""
    s = np.asarray(index_series, dtype=np.float64)
    out = np.zeros_like(s)
    out[1:] = 100.0 * (s[1:] / s[:-1] - 1.0)
    return out


def forward_returns(close: np.ndarray, horizon: int) -> np.ndarray:
    """``close[:, t + h] / close[:, t] - 1``; NaN where the horizon runs past the end."""
    out = np.full(close.shape, np.nan)
    out[:, : close.shape[1] - horizon] = close[:, horizon:] / close[:, :-horizon] - 1.0
    return out


def sample_count(T_total: int, T_in: int, horizon: int) -> int:
    return T_total - T_in - horizon + 1


def make_windows(ds: PanelDataset, T_in: int, horizon: int,
                 split: SplitSpec | None = None) -> tuple[list[WindowSample], ...]:
    """Cut ``ds`` into (train, valid, test) windows.

    Anchor ``t0`` is the last step of a window; its label is the ``horizon``
    day forward return from ``t0``. Consecutive segments are separated so
    that the first anchor of a segment is at least ``horizon`` steps after
    the last anchor of the previous one.
    """
    N, T_total, _ = ds.features.shape
    if T_in < 2 or horizon < 1:
        raise DataError(f"need T_in >= 2 and horizon >= 1, got {T_in}, {horizon}")
    n = sample_count(T_total, T_in, horizon)
    if n < 1:
        raise DataError(f"T_total={T_total} is shorter than T_in + horizon = {T_in + horizon}")
    if split is None:
        split = SplitSpec.from_fractions(n, horizon)
    counts = [c for c in (split.train, split.valid, split.test) if c > 0]
    need = sum(counts) + (horizon - 1) * max(len(counts) - 1, 0)
    if need > n:
        raise DataError(f"split {split} needs {need} samples, only {n} available")

    idx = index_input(ds.index_series)
    fwd = forward_returns(ds.close, horizon)

    def sample(t0: int) -> WindowSample:
        lo = t0 - T_in + 1
        return WindowSample(ds.features[:, lo: t0 + 1, :].copy(), idx[lo: t0 + 1].copy(),
                            fwd[:, t0].copy(), t0, ds.calendar[t0])

    segments = []
    t = T_in - 1
    last = None
    for count in (split.train, split.valid, split.test):
        if count and last is not None:
            t = max(t, last + horizon)
        seg = [sample(t0) for t0 in range(t, t + count)]
        if seg:
            last = seg[-1].anchor
            t = last + 1
        segments.append(seg)
    return tuple(segments)


def realized_returns(ds: PanelDataset, anchors: Sequence[int]) -> np.ndarray:
    """One-day returns from each anchor to the next day: ``[D, N]``."""
    c = ds.close
    return np.stack([c[:, a + 1] / c[:, a] - 1.0 for a in anchors])


# ---------------------------------------------------------------------------
# synthetic panel
# ---------------------------------------------------------------------------

BASE_SYNTH_FEATURES = ["close", "signal", "ret1", "ret5", "ma5_gap", "vol10", "volume", "ma10_gap"]


@dataclass(frozen=True)
class SynthConfig:
    n_stocks: int = 30
    t_total: int = 300
    n_features: int = 8
    seed: int = 0
    signal_strength: float = 0.8
    horizon: int = 10
    signal_noise: float = 0.3
    beta_spread: float = 0.0
    n_sectors: int = 4
    market_ar: float = 0.95
    market_vol: float = 0.002
    sector_vol: float = 0.01
    idio_vol: float = 0.015
    start_date: str = "2020-01-02"


def _rolling_mean(x: np.ndarray, w: int) -> np.ndarray:
    """Trailing mean along the last axis over up to ``w`` points (shorter at the start)."""
    c = np.cumsum(np.pad(x, [(0, 0)] * (x.ndim - 1) + [(1, 0)]), axis=-1)
    T = x.shape[-1]
    hi = np.arange(1, T + 1)
    lo = np.maximum(hi - w, 0)
    return (c[..., hi] - c[..., lo]) / (hi - lo)


def _business_days(start: str, n: int) -> list[str]:
    d = dt.date.fromisoformat(start)
    out = []
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d.isoformat())
        d += dt.timedelta(days=1)
    return out


def synth_generate(cfg: SynthConfig) -> tuple[PanelDataset, dict]:
    """Factor-model panel with a plantable predictive feature.

    Daily returns are ``beta_n * m_t + gamma_n * s_{sector(n), t} + eps`` with
    an AR(1) market factor, round-robin sector membership and Gaussian noise.
    ``beta_n`` is uniform on ``1 +- beta_spread`` (default 0).
    The ``signal`` column equals ``signal_strength * fwd_t + noise`` where
    ``fwd_t`` is the ``horizon``-day forward return and the noise scale is
    ``signal_noise`` times that day's cross-sectional std of ``fwd_t``.
    """
    N, T, F = cfg.n_stocks, cfg.t_total, cfg.n_features
    if N < 4 or T < 64:
        raise DataError(f"synthetic panel needs N >= 4 and T_total >= 64, got N={N}, T={T}")
    if F < 2:
        raise DataError("synthetic panel needs at least the close and signal columns (F >= 2)")
    if not 0 < cfg.horizon < T:
        raise DataError("horizon must lie inside the panel")
    rng = SeededRng(cfg.seed)

    innov = rng.normal(T, scale=cfg.market_vol)
    m = np.empty(T)
    m[0] = innov[0] / math.sqrt(1.0 - cfg.market_ar ** 2)
    for t in range(1, T):
        m[t] = cfg.market_ar * m[t - 1] + innov[t]
    sectors = np.arange(N) % cfg.n_sectors
    s = rng.normal((cfg.n_sectors, T), scale=cfg.sector_vol)
    # a beta spread plus the persistent market factor would make returns
    # cross-sectionally predictable even with no planted signal
    beta = 1.0 + cfg.beta_spread * (2.0 * rng.uniform(N) - 1.0)
    gamma = rng.uniform(N, 0.5, 1.5)
    eps = rng.normal((N, T), scale=cfg.idio_vol)
    ret = beta[:, None] * m[None, :] + gamma[:, None] * s[sectors] + eps

    p0 = rng.uniform(N, 5.0, 50.0)
    close = p0[:, None] * np.cumprod(1.0 + ret, axis=1)
    index = close.mean(axis=0)

    fwd = forward_returns(close, cfg.horizon)
    known = ~np.isnan(fwd[0])
    disp = np.zeros(T)
    disp[known] = fwd[:, known].std(axis=0)
    disp[~known] = disp[known].mean()
    signal = cfg.signal_strength * np.nan_to_num(fwd) + cfg.signal_noise * disp * rng.normal((N, T))

    ret5 = np.concatenate([np.zeros((N, 1)), close[:, 1:] / close[:, :-1] - 1.0], axis=1)
    ret5 = _rolling_mean(ret5, 5) * 5.0
    vol10 = np.sqrt(np.maximum(_rolling_mean(ret ** 2, 10) - _rolling_mean(ret, 10) ** 2, 0.0))
    volume = np.exp(rng.normal((N, T), scale=0.3)) * (1.0 + 20.0 * np.abs(ret))
    cols = {
        "close": close,
        "signal": signal,
        "ret1": ret,
        "ret5": ret5,
        "ma5_gap": close / _rolling_mean(close, 5) - 1.0,
        "vol10": vol10,
        "volume": volume,
        "ma10_gap": close / _rolling_mean(close, 10) - 1.0,
    }
    names = BASE_SYNTH_FEATURES[:F]
    lag = 1
    while len(names) < F:
        name = f"ret1_lag{lag}"
        cols[name] = np.concatenate([np.zeros((N, lag)), ret[:, :-lag]], axis=1)
        names.append(name)
        lag += 1
    feats = np.stack([cols[c] for c in names], axis=-1)
    width = max(2, len(str(N - 1)))
    ds = PanelDataset([f"S{i:0{width}d}" for i in range(N)], _business_days(cfg.start_date, T),
                      names, feats, index, close)
    truth = {"market": m, "sectors": sectors, "sector_factors": s, "beta": beta,
             "gamma": gamma, "returns": ret, "signal_column": names.index("signal")}
    return ds, truth
