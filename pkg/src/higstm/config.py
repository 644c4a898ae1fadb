"""Run configuration: a flat ``key = value`` file with command-line overrides."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Mapping

from .backtest import StrategyConfig
from .data import SynthConfig
from .model import ConfigError, ModelConfig

NORM_SCHEMES = ("zscore_cross_sectional", "none")
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    # paths and seed
    data_dir: str = "data"
    out_dir: str = "out"
    seed: int = 0
    # synthetic data
    n_stocks: int = 30
    t_total: int = 300
    n_features: int = 8
    signal_strength: float = 0.8
    signal_noise: float = 0.3
    beta_spread: float = 0.0
    # windows and split
    l_in: int = 16
    horizon: int = 10
    train_frac: float = 0.6
    valid_frac: float = 0.1
    norm_scheme: str = "zscore_cross_sectional"
    # model
    d_model: int = 64
    d_state: int = 16
    d_conv: int = 4
    d_te: int = 32
    d_ge: int = 32
    d_attn: int = 32
    residual: bool = True
    use_tigstm: bool = True
    use_gigstm: bool = True
    use_decomposition: bool = True
    use_index: bool = True
    # optimiser
    epochs: int = 50
    patience: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # strategy
    top_fraction: float = 0.10
    holding_days: int = 10
    fee_rate: float = 0.001

    def validate(self) -> "RunConfig":
        def need(ok: bool, name: str, rule: str):
            if not ok:
                raise ConfigError(f"{name}: {rule}, got {getattr(self, name)!r}")

        for name in ("d_model", "d_state", "d_conv", "d_te", "d_ge", "d_attn",
                     "n_features", "horizon", "holding_days", "patience"):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        need(self.l_in >= 2, "l_in", "must be >= 2")
        need(self.n_stocks >= 4, "n_stocks", "must be >= 4")
        need(self.t_total >= 64, "t_total", "must be >= 64")
        need(self.epochs >= 0, "epochs", "must be >= 0")
        need(self.seed >= 0, "seed", "must be >= 0")
        need(math.isfinite(self.signal_strength), "signal_strength", "must be finite")
        need(self.signal_noise >= 0, "signal_noise", "must be >= 0")
        need(0 <= self.beta_spread < 1, "beta_spread", "must be in [0, 1)")
        need(0 < self.train_frac < 1, "train_frac", "must be in (0, 1)")
        need(0 < self.valid_frac < 1, "valid_frac", "must be in (0, 1)")
        need(self.train_frac + self.valid_frac < 1, "valid_frac", "train_frac + valid_frac must be < 1")
        need(self.norm_scheme in NORM_SCHEMES, "norm_scheme", f"must be one of {NORM_SCHEMES}")
        need(self.lr > 0, "lr", "must be > 0")
        need(0 <= self.beta1 < 1, "beta1", "must be in [0, 1)")
        need(0 <= self.beta2 < 1, "beta2", "must be in [0, 1)")
        need(self.adam_eps > 0, "adam_eps", "must be > 0")
        need(0 < self.top_fraction <= 0.5, "top_fraction", "must be in (0, 0.5]")
        need(self.fee_rate >= 0, "fee_rate", "must be >= 0")
        return self

    # -- derived configs -------------------------------------------------
    def model_config(self, n_stocks: int, n_features: int) -> ModelConfig:
        return ModelConfig(n_stocks=n_stocks, t_in=self.l_in, n_features=n_features,
                           d_model=self.d_model, d_state=self.d_state, d_conv=self.d_conv,
                           d_te=self.d_te, d_ge=self.d_ge, d_attn=self.d_attn,
                           residual=self.residual, use_tigstm=self.use_tigstm,
                           use_gigstm=self.use_gigstm, use_decomposition=self.use_decomposition,
                           use_index=self.use_index)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(n_stocks=self.n_stocks, t_total=self.t_total, n_features=self.n_features,
                           seed=self.seed, signal_strength=self.signal_strength,
                           horizon=self.horizon, signal_noise=self.signal_noise,
                           beta_spread=self.beta_spread)

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(top_fraction=self.top_fraction, holding_days=self.holding_days,
                              fee_rate=self.fee_rate)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())

    def digest(self, keys=None) -> str:
        """SHA-256 of the canonical ``key=value`` text of ``keys``.

        The default covers every field except the input/output paths, so the
        same run written to two places hashes the same.
        """
        d = asdict(self)
        keys = sorted(k for k in d if k not in PATH_KEYS) if keys is None else sorted(keys)
        return hashlib.sha256("".join(f"{k}={_format(d[k])}\n" for k in keys).encode()).hexdigest()


PATH_KEYS = ("data_dir", "out_dir")
GENERATION_KEYS = ("seed", "n_stocks", "t_total", "n_features", "signal_strength",
                   "signal_noise", "beta_spread", "horizon")

_FIELDS = {f.name: f for f in fields(RunConfig)}
DEFAULTS = RunConfig()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(name: str, text: str):
    if name not in _FIELDS:
        raise ConfigError(f"{name}: unknown configuration key")
    kind = type(getattr(DEFAULTS, name))
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config_text(text: str, where: str = "config") -> dict:
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{where}:{no}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{key}: set twice in {where}")
        out[key] = parse_value(key, value)
    return out


def load_config(path=None, overrides: Mapping | None = None) -> RunConfig:
    """File values over defaults, then ``overrides`` over both; validated."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file {path} not found")
        values.update(parse_config_text(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise ConfigError(f"{k}: unknown configuration key")
        values[k] = v
    return replace(DEFAULTS, **values).validate()
