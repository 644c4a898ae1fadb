"""Top-fraction tranche strategy, ranking IC and the six report metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import DegenerateCrossSection, information_coefficient

ANNUALIZATION_DAYS = 240


class BacktestError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    top_fraction: float = 0.10
    holding_days: int = 10
    fee_rate: float = 0.001

    def __post_init__(self):
        if not 0.0 < self.top_fraction <= 0.5:
            raise BacktestError(f"top_fraction must be in (0, 0.5], got {self.top_fraction}")
        if self.holding_days < 1:
            raise BacktestError(f"holding_days must be >= 1, got {self.holding_days}")
        if not self.fee_rate >= 0.0:
            raise BacktestError(f"fee_rate must be >= 0, got {self.fee_rate}")

    def basket_size(self, n_stocks: int) -> int:
        return max(1, math.ceil(round(self.top_fraction * n_stocks, 9)))


@dataclass
class BacktestReport:
    ic_mean: float
    pnl: float
    maxd: float
    sharpe: float
    winr: float
    pl: float
    daily_returns: np.ndarray
    cumulative: np.ndarray
    per_trade_returns: np.ndarray
    sharpe_degenerate: bool = False
    pl_degenerate: bool = False
    ic_skipped_days: int = 0
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "ic_mean": self.ic_mean, "ic_skipped_days": self.ic_skipped_days,
            "pnl": self.pnl, "maxd": self.maxd,
            "sharpe": self.sharpe, "sharpe_degenerate": int(self.sharpe_degenerate),
            "winr": self.winr, "pl": self.pl, "pl_degenerate": int(self.pl_degenerate),
            "n_days": int(self.daily_returns.size), "n_trades": int(self.per_trade_returns.size),
            **self.extra,
        }


def daily_ic(scores, labels) -> tuple[float, int]:
    """Mean of per-day ICs over rows of ``[D, N]`` arrays, and the number of skipped days."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise BacktestError(f"scores {scores.shape} and labels {labels.shape} must be matching [D, N]")
    ics, skipped = [], 0
    for s, y in zip(scores, labels):
        try:
            ics.append(information_coefficient(s, y))
        except DegenerateCrossSection:
            skipped += 1
    return (float(np.mean(ics)) if ics else float("nan")), skipped


def select_basket(day_scores: np.ndarray, size: int) -> np.ndarray:
    """Indices of the ``size`` highest scores; equal scores go to the lower index."""
    return np.sort(np.argsort(-day_scores, kind="stable")[:size])


def run_strategy(scores, realized_1d_returns, cfg: StrategyConfig = StrategyConfig()
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Simulate overlapping tranches.

    Day ``d`` opens a tranche when all ``h`` of its holding days fit in the
    sample (``d <= D - h``). It holds the day's top basket equally weighted on
    ``1/h`` of capital, earns ``realized_1d_returns[d .. d+h-1]`` and pays
    ``fee_rate`` on its first and on its last day. Idle capital earns nothing.

    Returns ``(daily_returns [D], per_trade_returns [D - h + 1])``.
    """
    S = np.asarray(scores, dtype=np.float64)
    R = np.asarray(realized_1d_returns, dtype=np.float64)
    if S.ndim != 2 or S.shape != R.shape:
        raise BacktestError(f"scores {S.shape} and returns {R.shape} must be matching [D, N]")
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(R))):
        raise BacktestError("scores and returns must be finite")
    D, N = S.shape
    h = cfg.holding_days
    if D < h:
        raise BacktestError(f"need at least holding_days={h} days, got {D}")
    k = cfg.basket_size(N)
    daily = np.zeros(D)
    trades = np.empty(D - h + 1)
    for d in range(D - h + 1):
        basket = select_basket(S[d], k)
        legs = R[d: d + h, basket].mean(axis=1)
        legs[0] -= cfg.fee_rate
        legs[-1] -= cfg.fee_rate
        daily[d: d + h] += legs / h
        trades[d] = legs.sum()
    return daily, trades


def max_drawdown(cumulative) -> float:
    c = np.asarray(cumulative, dtype=np.float64)
    return float(np.max(np.maximum.accumulate(c) - c)) if c.size else 0.0


def metrics(daily_returns, per_trade_returns, ic_mean: float = float("nan"),
            ic_skipped_days: int = 0) -> BacktestReport:
    daily = np.asarray(daily_returns, dtype=np.float64)
    trades = np.asarray(per_trade_returns, dtype=np.float64)
    if daily.size < 2:
        raise BacktestError(f"metrics need at least 2 daily returns, got {daily.size}")
    if trades.size == 0:
        raise BacktestError("metrics need at least one trade")
    cumulative = np.cumsum(daily)
    sd = float(daily.std())
    sharpe_degenerate = sd == 0.0
    sharpe = math.inf if sharpe_degenerate else float(daily.mean()) / sd * math.sqrt(ANNUALIZATION_DAYS)
    wins, losses = trades[trades > 0], trades[trades < 0]
    pl_degenerate = losses.size == 0
    if pl_degenerate:
        pl = math.inf
    else:
        avg_win = float(wins.sum()) / wins.size if wins.size else 0.0
        pl = avg_win / (float(np.abs(losses).sum()) / losses.size)
    return BacktestReport(
        ic_mean=float(ic_mean), pnl=float(daily.sum()), maxd=max_drawdown(cumulative),
        sharpe=sharpe, winr=wins.size / trades.size, pl=pl,
        daily_returns=daily, cumulative=cumulative, per_trade_returns=trades,
        sharpe_degenerate=sharpe_degenerate, pl_degenerate=pl_degenerate,
        ic_skipped_days=int(ic_skipped_days))


def backtest(scores, realized_1d_returns, labels, cfg: StrategyConfig = StrategyConfig()
             ) -> BacktestReport:
    """Strategy plus metrics; ``labels`` are the horizon returns used for IC."""
    daily, trades = run_strategy(scores, realized_1d_returns, cfg)
    ic, skipped = daily_ic(scores, labels)
    return metrics(daily, trades, ic, skipped)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_report(report: BacktestReport, out_dir, dates: Sequence[str] | None = None) -> tuple[Path, Path]:
    """``report.txt`` (key=value lines) and ``curve.csv`` (date,daily_return,cumulative)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt = out / "report.txt"
    txt.write_text("".join(f"{k}={_fmt(v)}\n" for k, v in report.summary().items()))
    dates = list(dates) if dates is not None else [str(i) for i in range(report.daily_returns.size)]
    if len(dates) != report.daily_returns.size:
        raise BacktestError(f"{len(dates)} dates for {report.daily_returns.size} daily returns")
    curve = out / "curve.csv"
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "daily_return", "cumulative"])
        for d, r, c in zip(dates, report.daily_returns, report.cumulative):
            w.writerow([d, _fmt(r), _fmt(c)])
    return txt, curve


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        k, _, v = line.partition("=")
        out[k] = v
    return out


def read_scores(path, stocks: Sequence[str] | None = None) -> tuple[list[str], list[str], np.ndarray]:
    """Parse a ``date,stock_id,score`` CSV (extra columns ignored) into ``[D, N]``.

    Every date must score every stock exactly once. When ``stocks`` is given it
    fixes the column order and must match the file's stock set.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"date", "stock_id", "score"} <= set(rows[0]):
        raise BacktestError(f"{path}: header must include date,stock_id,score")
    if not rows:
        raise BacktestError(f"{path}: no score rows")
    dates = sorted({r["date"] for r in rows})
    found = sorted({r["stock_id"] for r in rows})
    if stocks is None:
        stocks = found
    elif sorted(stocks) != found:
        raise BacktestError(f"{path}: stock set does not match the dataset")
    col = {s: j for j, s in enumerate(stocks)}
    row_of = {d: i for i, d in enumerate(dates)}
    out = np.full((len(dates), len(stocks)), np.nan)
    for r in rows:
        i, j = row_of[r["date"]], col[r["stock_id"]]
        if not np.isnan(out[i, j]):
            raise BacktestError(f"{path}: duplicate score for {r['stock_id']} on {r['date']}")
        try:
            out[i, j] = float(r["score"])
        except ValueError:
            raise BacktestError(f"{path}: non-numeric score {r['score']!r}") from None
    if np.isnan(out).any():
        raise BacktestError(f"{path}: every date must score every stock")
    return dates, list(stocks), out
