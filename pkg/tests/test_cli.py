import csv
import re
import subprocess
import sys

import numpy as np
import pytest

from higstm import backtest as bt
from higstm.cli import build_parser, run
from higstm.config import DEFAULTS, RunConfig, load_config, parse_config_text
from higstm.data import load_panel, normalize, index_input
from higstm.decomposition import decompose
from higstm.diffopt import load_checkpoint
from higstm.model import ConfigError
from higstm.relational import temporal_section_graphs

TINY = ["--n-stocks", "8", "--t-total", "70", "--l-in", "8", "--horizon", "3", "--holding-days", "3",
        "--d-model", "4", "--d-state", "2", "--d-conv", "2", "--d-te", "2", "--d-ge", "2", "--d-attn", "2"]
ERR = re.compile(r"^error: [a-z-]+: \S.*$")


def cli(*args):
    return run([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    data, model, bdir = root / "data", root / "model", root / "bt"
    assert cli("gen-data", *TINY, "--seed", 42, "--out-dir", data) == 0
    assert cli("train", *TINY, "--seed", 42, "--epochs", 2, "--data-dir", data, "--out-dir", model) == 0
    assert cli("evaluate", *TINY, "--data-dir", data, "--out-dir", model) == 0
    assert cli("backtest", *TINY, "--data-dir", data, "--out-dir", bdir,
               "--scores", model / "predictions.csv") == 0
    return root


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- configuration ---------------------------------------------------------

def test_config_file_and_flag_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nd_model = 12\nfee_rate = 0.002  # trailing\nuse_index = false\n")
    cfg = load_config(p, {"d_model": 20})
    assert cfg.d_model == 20 and cfg.fee_rate == 0.002 and cfg.use_index is False


def test_config_defaults():
    assert (DEFAULTS.d_model, DEFAULTS.d_state, DEFAULTS.d_conv, DEFAULTS.l_in) == (64, 16, 4, 16)
    assert (DEFAULTS.d_te, DEFAULTS.d_ge, DEFAULTS.d_attn) == (32, 32, 32)


@pytest.mark.parametrize("text,field", [
    ("d_conv = 0", "d_conv"), ("top_fraction = 0.7", "top_fraction"),
    ("lr = -1", "lr"), ("bogus = 1", "bogus"), ("d_model = abc", "d_model"),
    ("norm_scheme = rank", "norm_scheme"),
])
def test_config_errors_name_field(tmp_path, text, field):
    p = tmp_path / "c.cfg"
    p.write_text(text + "\n")
    with pytest.raises(ConfigError, match=f"^{field}"):
        load_config(p)


def test_config_text_round_trip():
    cfg = RunConfig(d_model=7, fee_rate=0.0025, residual=False)
    assert load_config(None, parse_config_text(cfg.to_text())) == cfg


def test_help_lists_every_field_with_default(capsys):
    for cmd in ("gen-data", "train", "evaluate", "backtest", "inspect-graphs", "decompose"):
        with pytest.raises(SystemExit):
            build_parser().parse_args([cmd, "--help"])
        out = " ".join(capsys.readouterr().out.split())
        assert "--d-model INT (default: 64)" in out
        assert "--fee-rate FLOAT (default: 0.001)" in out
        assert "--use-index BOOL (default: true)" in out


# -- gen-data ----------------------------------------------------------------

def test_gen_data_contract(pipeline):
    files = sorted(p.name for p in (pipeline / "data").iterdir())
    assert files == [f"S{i:02d}.csv" for i in range(8)] + ["index.csv", "manifest.txt"]
    assert "seed=42" in (pipeline / "data" / "manifest.txt").read_text()


def test_gen_data_rerun_identical_and_force(pipeline, tmp_path, capsys):
    assert cli("gen-data", *TINY, "--seed", 42, "--out-dir", tmp_path / "d") == 0
    for p in (pipeline / "data").iterdir():
        assert p.read_bytes() == (tmp_path / "d" / p.name).read_bytes()
    assert cli("gen-data", *TINY, "--out-dir", tmp_path / "d") == 3
    assert ERR.match(capsys.readouterr().err.strip())
    assert cli("gen-data", *TINY, "--seed", 1, "--force", "--out-dir", tmp_path / "d") == 0


def test_manifest_hash_sensitive():
    base = RunConfig()
    keys = ("seed", "n_stocks", "t_total", "n_features", "signal_strength", "signal_noise", "horizon")
    h0 = base.digest(keys)
    for k in keys:
        v = getattr(base, k)
        changed = RunConfig(**{k: v + (1 if isinstance(v, int) else 0.1)})
        assert changed.digest(keys) != h0, k
    assert RunConfig(d_model=3).digest(keys) == h0


# -- train -------------------------------------------------------------------

def test_train_log_rows(pipeline):
    rows = read_csv(pipeline / "model" / "train_log.csv")
    assert rows[0] == ["epoch", "loss", "train_ic", "valid_ic"] and len(rows) == 3
    _, _, seed, meta = load_checkpoint(pipeline / "model" / "checkpoint.ckpt")
    assert seed == 42 and meta["model"]["d_model"] == 4


def test_train_zero_epochs(pipeline, tmp_path):
    assert cli("train", *TINY, "--epochs", 0, "--data-dir", pipeline / "data", "--out-dir", tmp_path) == 0
    assert read_csv(tmp_path / "train_log.csv") == [["epoch", "loss", "train_ic", "valid_ic"]]
    assert (tmp_path / "checkpoint.ckpt").is_file()


def test_train_deterministic(pipeline, tmp_path):
    assert cli("train", *TINY, "--seed", 42, "--epochs", 2, "--data-dir", pipeline / "data",
               "--out-dir", tmp_path) == 0
    for name in ("train_log.csv", "checkpoint.ckpt"):
        assert (tmp_path / name).read_bytes() == (pipeline / "model" / name).read_bytes()


def test_train_missing_data(tmp_path, capsys):
    assert cli("train", "--data-dir", tmp_path / "nope", "--out-dir", tmp_path / "o") == 4
    assert capsys.readouterr().err.startswith("error: data: ")


# -- evaluate ----------------------------------------------------------------

def test_evaluate_outputs(pipeline):
    rows = read_csv(pipeline / "model" / "predictions.csv")
    assert rows[0] == ["date", "stock_id", "score", "label"]
    assert (len(rows) - 1) % 8 == 0
    assert "ic_mean=" in (pipeline / "model" / "evaluate.txt").read_text()


def test_evaluate_shape_mismatch_names_field(pipeline, tmp_path, capsys):
    args = [*TINY, "--data-dir", pipeline / "data", "--out-dir", tmp_path,
            "--checkpoint", pipeline / "model" / "checkpoint.ckpt"]
    assert cli("evaluate", *args, "--d-model", 6) == 9
    err = capsys.readouterr().err.strip()
    assert ERR.match(err) and "d_model" in err


def test_evaluate_missing_checkpoint(pipeline, tmp_path, capsys):
    assert cli("evaluate", *TINY, "--data-dir", pipeline / "data", "--out-dir", tmp_path) == 9
    assert capsys.readouterr().err.startswith("error: checkpoint: ")


# -- backtest ----------------------------------------------------------------

def test_backtest_matches_module(pipeline):
    ds = load_panel(pipeline / "data")
    dates, _, S = bt.read_scores(pipeline / "model" / "predictions.csv", ds.stocks)
    idx = [ds.calendar.index(d) for d in dates]
    R = np.stack([ds.close[:, i + 1] / ds.close[:, i] - 1 for i in idx])
    Y = np.stack([ds.close[:, i + 3] / ds.close[:, i] - 1 for i in idx])
    rep = bt.backtest(S, R, Y, bt.StrategyConfig(holding_days=3))
    kv = bt.read_report(pipeline / "bt" / "report.txt")
    assert float(kv["pnl"]) == pytest.approx(rep.pnl, abs=1e-15)
    assert float(kv["sharpe"]) == pytest.approx(rep.sharpe, rel=1e-12)
    assert float(kv["ic_mean"]) == pytest.approx(rep.ic_mean, abs=1e-12)
    assert len(read_csv(pipeline / "bt" / "curve.csv")) == len(dates) + 1


def test_backtest_empty_scores(pipeline, tmp_path, capsys):
    p = tmp_path / "s.csv"
    p.write_text("date,stock_id,score\n")
    assert cli("backtest", *TINY, "--data-dir", pipeline / "data", "--out-dir", tmp_path, "--scores", p) == 5
    assert ERR.match(capsys.readouterr().err.strip())


def test_backtest_too_few_days(pipeline, tmp_path, capsys):
    ds = load_panel(pipeline / "data")
    p = tmp_path / "s.csv"
    p.write_text("date,stock_id,score\n" + "".join(
        f"{d},{s},{i}\n" for d in ds.calendar[:3] for i, s in enumerate(ds.stocks)))
    assert cli("backtest", *TINY, "--data-dir", pipeline / "data", "--out-dir", tmp_path, "--scores", p) == 5
    assert "holding_days" in capsys.readouterr().err


# -- inspect / decompose -----------------------------------------------------

def test_inspect_graphs_match_module(pipeline, tmp_path):
    data, ckpt = pipeline / "data", pipeline / "model" / "checkpoint.ckpt"
    ds = load_panel(data)
    anchor = ds.calendar[20]
    assert cli("inspect-graphs", *TINY, "--data-dir", data, "--out-dir", tmp_path,
               "--checkpoint", ckpt, "--anchor", anchor) == 0
    P, _, _, _ = load_checkpoint(ckpt)
    norm, _ = normalize(ds)
    X, I = norm.features[:, 13:21], index_input(norm.index_series)[13:21]
    X_s = decompose(X, I, P["decomp.W_c"], P["decomp.W_s"]).X_s
    G = temporal_section_graphs(X_s, P["rel.W_QS"], P["rel.W_KS"])
    for t in range(8):
        rows = read_csv(tmp_path / f"G_S_t{t:02d}.csv")
        assert rows[0] == ["stock_id", *ds.stocks]
        got = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        assert np.array_equal(got, G[t])
    for name in ("G_G.csv", "M_S.csv", "M_G.csv", "g_c.csv", "g_s.csv"):
        assert (tmp_path / name).is_file()


def test_inspect_bad_anchor(pipeline, tmp_path, capsys):
    assert cli("inspect-graphs", *TINY, "--data-dir", pipeline / "data", "--out-dir", tmp_path,
               "--checkpoint", pipeline / "model" / "checkpoint.ckpt", "--anchor", "1999-01-01") == 4
    assert capsys.readouterr().err.startswith("error: data: ")


def test_decompose_matches_module(pipeline, tmp_path):
    data, ckpt = pipeline / "data", pipeline / "model" / "checkpoint.ckpt"
    ds = load_panel(data)
    anchor = ds.calendar[30]
    assert cli("decompose", *TINY, "--data-dir", data, "--out-dir", tmp_path,
               "--checkpoint", ckpt, "--anchor", anchor) == 0
    P, _, _, _ = load_checkpoint(ckpt)
    norm, _ = normalize(ds)
    out = decompose(norm.features[:, 23:31], index_input(norm.index_series)[23:31],
                    P["decomp.W_c"], P["decomp.W_s"])
    rows = read_csv(tmp_path / "X_c.csv")
    assert rows[0][:2] == ["stock_id", "date"] and len(rows) == 8 * 8 + 1
    got = np.array([[float(v) for v in r[2:]] for r in rows[1:]]).reshape(8, 8, -1)
    assert np.array_equal(got, out.X_c)
    g = np.array([float(r[1]) for r in read_csv(tmp_path / "g_c.csv")[1:]])
    assert np.array_equal(g, out.g_c)


def test_decompose_requires_stage(pipeline, tmp_path, capsys):
    assert cli("decompose", *TINY, "--data-dir", pipeline / "data", "--out-dir", tmp_path,
               "--use-decomposition", "false") == 3
    assert ERR.match(capsys.readouterr().err.strip())


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "higstm", "train", "--d-conv", "0"],
                         capture_output=True, text=True, cwd=tmp_path)
    assert res.returncode == 3
    assert res.stderr.strip() == "error: config: d_conv: must be >= 1, got 0"
