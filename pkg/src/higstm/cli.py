"""Command-line entry point: ``higstm <command> [--config FILE] [--key value ...]``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import backtest as bt
from .config import DEFAULTS, GENERATION_KEYS, RunConfig, load_config, parse_value
from .data import (DataError, PanelDataset, SplitSpec, forward_returns, index_input, load_panel,
                   make_windows, normalize, realized_returns, sample_count, save_panel,
                   synth_generate)
from .decomposition import decompose
from .diffopt import GradientError, OptimState, SeededRng, load_checkpoint, save_checkpoint
from .model import (ConfigError, HigstmModel, ModelConfig, expected_shapes, mean_ic,
                    predict_samples, train_epoch)
from .numerics import NumericsError
from .relational import GraphError

log = logging.getLogger("higstm")

CHECKPOINT_NAME = "checkpoint.ckpt"
_SHUFFLE_STREAM = 100


class CliError(Exception):
    """Failure with a machine-readable category."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# exception type, category, exit code
_CATEGORIES = [
    (ConfigError, "config", 3),
    (DataError, "data", 4),
    (bt.BacktestError, "backtest", 5),
    (GradientError, "divergence", 6),
    ((NumericsError, GraphError), "numerics", 7),
    (OSError, "io", 8),
]
_EXIT = {"config": 3, "output-exists": 3, "data": 4, "backtest": 5, "divergence": 6,
         "numerics": 7, "io": 8, "checkpoint": 9}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_kv(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepare(cfg: RunConfig):
    ds = load_panel(cfg.data_dir)
    norm, _ = normalize(ds, cfg.norm_scheme)
    n = sample_count(len(ds.calendar), cfg.l_in, cfg.horizon)
    if n < 1:
        raise DataError(f"{len(ds.calendar)} dates cannot hold l_in={cfg.l_in} plus horizon={cfg.horizon}")
    split = SplitSpec.from_fractions(n, cfg.horizon, cfg.train_frac, cfg.valid_frac)
    return ds, norm, make_windows(norm, cfg.l_in, cfg.horizon, split)


def _model_config(cfg: RunConfig, ds: PanelDataset) -> ModelConfig:
    return cfg.model_config(len(ds.stocks), len(ds.feature_names))


def _load_model(cfg: RunConfig, ds: PanelDataset, checkpoint) -> HigstmModel:
    mcfg = _model_config(cfg, ds)
    path = Path(checkpoint)
    if not path.is_file():
        raise CliError("checkpoint", f"{path} not found")
    try:
        params, _, _, meta = load_checkpoint(path)
    except ValueError as exc:
        raise CliError("checkpoint", str(exc)) from None
    saved = meta.get("model", {})
    for k, v in mcfg.to_dict().items():
        if k in saved and saved[k] != v:
            raise CliError("checkpoint", f"{k}: checkpoint has {saved[k]!r}, config gives {v!r}")
    shapes = expected_shapes(mcfg)
    for k, shape in shapes.items():
        if k not in params:
            raise CliError("checkpoint", f"{k}: missing from checkpoint")
        if params[k].shape != tuple(shape):
            raise CliError("checkpoint", f"{k}: checkpoint shape {params[k].shape}, config needs {tuple(shape)}")
    extra = sorted(set(params) - set(shapes))
    if extra:
        raise CliError("checkpoint", f"{extra[0]}: not used by this configuration")
    return HigstmModel(mcfg, params)


def _resolve_checkpoint(args, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / CHECKPOINT_NAME


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, force: bool = False) -> Path:
    """Synthetic dataset plus ``manifest.txt`` into ``out_dir``."""
    out = Path(cfg.out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError("output-exists", f"{out} is not empty; pass --force to overwrite")
    ds, _ = synth_generate(cfg.synth_config())
    if out.exists():
        for p in out.glob("*.csv"):
            p.unlink()
    save_panel(ds, out)
    manifest = {"seed": cfg.seed, "config_hash": cfg.digest(GENERATION_KEYS)}
    manifest.update({k: getattr(cfg, k) for k in GENERATION_KEYS if k != "seed"})
    manifest["n_dates"] = len(ds.calendar)
    _write_kv(out / "manifest.txt", manifest)
    return out


def cmd_train(cfg: RunConfig) -> Path:
    """Train with early stopping on validation IC; returns the checkpoint path."""
    ds, _, (train, valid, _) = _prepare(cfg)
    mcfg = _model_config(cfg, ds)
    model = HigstmModel(mcfg, seed=cfg.seed)
    state = OptimState.for_params(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                  eps=cfg.adam_eps)
    rng = SeededRng(cfg.seed).spawn(_SHUFFLE_STREAM)
    out = _out_dir(cfg)
    ckpt = out / CHECKPOINT_NAME
    meta = {"model": mcfg.to_dict(), "config_hash": cfg.digest(), "epoch": 0, "valid_ic": None}
    save_checkpoint(ckpt, model.params, state, cfg.seed, meta)
    log_path = out / "train_log.csv"
    rows = []
    _write_rows(log_path, ["epoch", "loss", "train_ic", "valid_ic"], rows)
    best, since = -np.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        try:
            stats = train_epoch(train, model, state, rng)
        except GradientError as exc:
            raise GradientError(f"epoch {epoch}: {exc}; kept {ckpt}") from None
        vic = mean_ic(model, valid)
        rows.append([epoch, _fmt(stats.mean_loss), _fmt(stats.mean_ic), _fmt(vic)])
        _write_rows(log_path, ["epoch", "loss", "train_ic", "valid_ic"], rows)
        if vic > best:
            best, since = vic, 0
            meta.update(epoch=epoch, valid_ic=float(vic))
            save_checkpoint(ckpt, model.params, state, cfg.seed, meta)
        else:
            since += 1
            if since >= cfg.patience:
                log.info("early stop after epoch %d (best valid IC %.4f)", epoch, best)
                break
    return ckpt


def cmd_evaluate(cfg: RunConfig, checkpoint) -> float:
    """Test-split predictions as ``predictions.csv`` and the mean IC in ``evaluate.txt``."""
    ds, _, (_, _, test) = _prepare(cfg)
    model = _load_model(cfg, ds, checkpoint)
    out = _out_dir(cfg)
    preds = predict_samples(model, test)
    labels = np.stack([s.labels for s in test]) if test else np.zeros((0, len(ds.stocks)))
    rows = [[s.anchor_date, sid, _fmt(preds[i, j]), _fmt(s.labels[j])]
            for i, s in enumerate(test) for j, sid in enumerate(ds.stocks)]
    _write_rows(out / "predictions.csv", ["date", "stock_id", "score", "label"], rows)
    ic, skipped = bt.daily_ic(preds, labels) if test else (float("nan"), 0)
    _write_kv(out / "evaluate.txt", {"ic_mean": _fmt(ic), "n_days": len(test), "ic_skipped_days": skipped})
    return ic


def cmd_backtest(cfg: RunConfig, scores_csv) -> bt.BacktestReport:
    """Strategy on a ``date,stock_id,score`` file; realized returns come from ``data_dir``."""
    ds = load_panel(cfg.data_dir)
    if not Path(scores_csv).is_file():
        raise CliError("io", f"{scores_csv} not found")
    dates, _, scores = bt.read_scores(scores_csv, ds.stocks)
    pos = {d: i for i, d in enumerate(ds.calendar)}
    missing = [d for d in dates if d not in pos]
    if missing:
        raise bt.BacktestError(f"score date {missing[0]} not in the dataset calendar")
    anchors = [pos[d] for d in dates]
    h = cfg.holding_days
    if len(dates) < h + 1:
        raise bt.BacktestError(f"scores cover {len(dates)} days; need at least holding_days + 1 = {h + 1}")
    if anchors[-1] + 1 >= len(ds.calendar):
        raise bt.BacktestError(f"no next-day return after {dates[-1]}")
    realized = realized_returns(ds, anchors)
    labels = forward_returns(ds.close, cfg.horizon)[:, anchors].T
    report = bt.metrics(*bt.run_strategy(scores, realized, cfg.strategy_config()),
                        *(bt.daily_ic(scores, labels) if np.isfinite(labels).all() else (float("nan"), 0)))
    bt.write_report(report, _out_dir(cfg), dates)
    return report


def _matrix_rows(labels, mat):
    return [[lab, *(_fmt(v) for v in row)] for lab, row in zip(labels, mat)]


def _vector_rows(vec):
    return [[j, _fmt(v)] for j, v in enumerate(np.ravel(vec))]


def _anchor_index(ds: PanelDataset, cfg: RunConfig, anchor: str | None) -> int:
    if anchor is None:
        n = sample_count(len(ds.calendar), cfg.l_in, cfg.horizon)
        split = SplitSpec.from_fractions(n, cfg.horizon, cfg.train_frac, cfg.valid_frac)
        return make_windows(ds, cfg.l_in, cfg.horizon, split)[2][0].anchor
    if anchor not in ds.calendar:
        raise DataError(f"anchor {anchor} not in the dataset calendar")
    t0 = ds.calendar.index(anchor)
    if t0 < cfg.l_in - 1:
        raise DataError(f"anchor {anchor} leaves fewer than l_in={cfg.l_in} dates of history")
    return t0


def _window(norm: PanelDataset, t0: int, l_in: int):
    lo = t0 - l_in + 1
    return norm.features[:, lo: t0 + 1], index_input(norm.index_series)[lo: t0 + 1]


def cmd_inspect(cfg: RunConfig, checkpoint, anchor: str | None = None) -> list[Path]:
    """Graphs, macro vectors and filter gains of one forward pass as CSVs."""
    ds = load_panel(cfg.data_dir)
    norm, _ = normalize(ds, cfg.norm_scheme)
    model = _load_model(cfg, ds, checkpoint)
    t0 = _anchor_index(ds, cfg, anchor)
    X, I = _window(norm, t0, cfg.l_in)
    diag = model.run(X, I).diagnostics
    out = _out_dir(cfg)
    steps = ds.calendar[t0 - cfg.l_in + 1: t0 + 1]
    written = []

    def put(name, header, rows):
        _write_rows(out / name, header, rows)
        written.append(out / name)

    if "G_S" in diag:
        for t, G in enumerate(diag["G_S"]):
            put(f"G_S_t{t:02d}.csv", ["stock_id", *ds.stocks], _matrix_rows(ds.stocks, G))
    if "G_G" in diag:
        put("G_G.csv", ["stock_id", *ds.stocks], _matrix_rows(ds.stocks, diag["G_G"]))
    if "M_S" in diag:
        M = diag["M_S"]
        put("M_S.csv", ["date", *(f"m{j}" for j in range(M.shape[1]))], _matrix_rows(steps, M))
    if "M_G" in diag:
        put("M_G.csv", ["component", "value"], _vector_rows(diag["M_G"]))
    for key in ("g_c", "g_s"):
        if key in diag:
            put(f"{key}.csv", ["bin", "gain"], _vector_rows(diag[key]))
    _write_kv(out / "inspect.txt", {"anchor": ds.calendar[t0], "files": len(written)})
    return written


def cmd_decompose(cfg: RunConfig, checkpoint=None, anchor: str | None = None) -> list[Path]:
    """Commonality/specificity split of one window; initial weights when no checkpoint is given."""
    ds = load_panel(cfg.data_dir)
    norm, _ = normalize(ds, cfg.norm_scheme)
    if checkpoint is not None:
        model = _load_model(cfg, ds, checkpoint)
    else:
        model = HigstmModel(_model_config(cfg, ds), seed=cfg.seed)
    if not model.cfg.use_decomposition or "decomp.W_c" not in model.params:
        raise CliError("config", "use_decomposition: decompose needs the index-guided decomposition enabled")
    t0 = _anchor_index(ds, cfg, anchor)
    X, I = _window(norm, t0, cfg.l_in)
    res = decompose(X, I, model.params["decomp.W_c"], model.params["decomp.W_s"])
    out = _out_dir(cfg)
    steps = ds.calendar[t0 - cfg.l_in + 1: t0 + 1]
    written = []
    for name, arr in (("X_c", res.X_c), ("X_s", res.X_s)):
        rows = [[sid, d, *(_fmt(v) for v in arr[i, t])]
                for i, sid in enumerate(ds.stocks) for t, d in enumerate(steps)]
        _write_rows(out / f"{name}.csv", ["stock_id", "date", *ds.feature_names], rows)
        written.append(out / f"{name}.csv")
    for name, g in (("g_c", res.g_c), ("g_s", res.g_s)):
        _write_rows(out / f"{name}.csv", ["bin", "gain"], _vector_rows(g))
        written.append(out / f"{name}.csv")
    return written


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    g = p.add_argument_group("run configuration (flags override the config file)")
    for f in fields(RunConfig):
        default = getattr(DEFAULTS, f.name)
        flag = "--" + f.name.replace("_", "-")
        kind = type(default)
        metavar = {bool: "BOOL", int: "INT", float: "FLOAT", str: "TEXT"}[kind]
        shown = ("true" if default else "false") if kind is bool else default
        g.add_argument(flag, dest=f.name, default=None, metavar=metavar, help=f"(default: {shown})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="higstm", description="Stock ranking with index-guided selective state spaces.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic panel to --out-dir")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train and write the best checkpoint and a log")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score the test split")
    p.add_argument("--checkpoint", help=f"checkpoint file (default: <out-dir>/{CHECKPOINT_NAME})")
    _add_config_flags(p)

    p = sub.add_parser("backtest", help="run the trading strategy on a score file")
    p.add_argument("--scores", required=True, help="CSV with date,stock_id,score")
    _add_config_flags(p)

    p = sub.add_parser("inspect-graphs", help="dump graphs, macro vectors and gains for one window")
    p.add_argument("--checkpoint", help=f"checkpoint file (default: <out-dir>/{CHECKPOINT_NAME})")
    p.add_argument("--anchor", help="last date of the window (default: first test anchor)")
    _add_config_flags(p)

    p = sub.add_parser("decompose", help="dump the commonality/specificity split for one window")
    p.add_argument("--checkpoint", help="checkpoint file (default: freshly initialised weights)")
    p.add_argument("--anchor", help="last date of the window (default: first test anchor)")
    _add_config_flags(p)
    return parser


def _overrides(args) -> dict:
    return {f.name: parse_value(f.name, getattr(args, f.name))
            for f in fields(RunConfig) if getattr(args, f.name) is not None}


def _category(exc: BaseException) -> tuple[str, int] | None:
    if isinstance(exc, CliError):
        return exc.category, _EXIT.get(exc.category, 3)
    for kinds, cat, code in _CATEGORIES:
        if isinstance(exc, kinds):
            return cat, code
    return None


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "gen-data":
            print(cmd_gen_data(cfg, args.force))
        elif args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "evaluate":
            print(f"ic_mean={_fmt(cmd_evaluate(cfg, _resolve_checkpoint(args, cfg)))}")
        elif args.command == "backtest":
            report = cmd_backtest(cfg, args.scores)
            for k, v in report.summary().items():
                print(f"{k}={v}")
        elif args.command == "inspect-graphs":
            for p in cmd_inspect(cfg, _resolve_checkpoint(args, cfg), args.anchor):
                print(p)
        elif args.command == "decompose":
            for p in cmd_decompose(cfg, args.checkpoint, args.anchor):
                print(p)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one error line
        found = _category(exc)
        if found is None:
            raise
        cat, code = found
        msg = " ".join(str(exc).split())
        print(f"error: {cat}: {msg}", file=sys.stderr)
        return code
    return 0


def main() -> None:
    sys.exit(run())
