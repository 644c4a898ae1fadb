"""The hierarchical model: decomposition, three SSM stages, head and ranking loss."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import decomposition as dec
from . import relational as rel
from .autodiff import Tensor
from .diffopt import (GradientError, OptimState, ParamStore, SeededRng, adam_step,
                      as_tensors, gradients, init_uniform)
from .ssm import conv1d_t, init_ssm_params, mamba_block, selective_core

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DegenerateCrossSection(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_stocks: int
    t_in: int = 16
    n_features: int = 45
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

    def __post_init__(self):
        for name in ("t_in", "n_features", "d_model", "d_state", "d_conv", "d_te", "d_ge", "d_attn"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_stocks < 2:
            raise ConfigError(f"n_stocks must be >= 2, got {self.n_stocks}")
        if self.t_in < 2:
            raise ConfigError(f"t_in must be >= 2, got {self.t_in}")

    @property
    def n_bins(self) -> int:
        return self.t_in // 2 + 1

    @property
    def relational(self) -> bool:
        return self.use_tigstm or self.use_gigstm

    @property
    def decomposes(self) -> bool:
        return self.relational and self.use_decomposition

    def to_dict(self) -> dict:
        return asdict(self)


# stream ids keep each stage's initial values independent of which stages exist
_STREAMS = {"decomp": 1, "nim": 2, "rel_s": 3, "rel_g": 4, "macro": 5, "tig": 6, "gig": 7, "head": 8}


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Initial parameters for ``cfg``; only stages that are enabled get parameters."""
    root = SeededRng(seed)

    def stream(name):
        return root.spawn(_STREAMS[name])

    P: dict[str, np.ndarray] = {}
    N, T, F, D, H = cfg.n_stocks, cfg.t_in, cfg.n_features, cfg.d_model, cfg.n_bins
    if cfg.decomposes:
        r = stream("decomp")
        if cfg.use_index:
            P["decomp.W_c"] = init_uniform(r, (H, H), H)
            P["decomp.W_s"] = init_uniform(r, (H, H), H)
        else:
            P["decomp.v_c"] = np.zeros(H)
            P["decomp.v_s"] = np.zeros(H)
    P.update(init_ssm_params(stream("nim"), "nim.", D, cfg.d_state, cfg.d_conv, d_in=F))
    if cfg.relational:
        r = stream("macro")
        P["rel.W_Nagg"] = init_uniform(r, (N,), N)
        P["rel.W_FS"] = init_uniform(r, (F, cfg.d_te), F)
        P["rel.b_FS"] = np.zeros(cfg.d_te)
    if cfg.use_tigstm:
        r = stream("rel_s")
        P["rel.W_QS"] = init_uniform(r, (F, cfg.d_attn), F)
        P["rel.W_KS"] = init_uniform(r, (F, cfg.d_attn), F)
        P.update(init_ssm_params(stream("tig"), "tig.", D, cfg.d_state, cfg.d_conv,
                                 a_width=cfg.d_state + cfg.d_te))
    if cfg.use_gigstm:
        r = stream("rel_g")
        P["rel.W_Tagg_spec"] = init_uniform(r, (T,), T)
        P["rel.W_QG"] = init_uniform(r, (F, cfg.d_attn), F)
        P["rel.W_KG"] = init_uniform(r, (F, cfg.d_attn), F)
        P["rel.W_Tagg_macro"] = init_uniform(r, (T,), T)
        P["rel.W_FG"] = init_uniform(r, (cfg.d_te, cfg.d_ge), cfg.d_te)
        P["rel.b_FG"] = np.zeros(cfg.d_ge)
        P.update(init_ssm_params(stream("gig"), "gig.", D, cfg.d_state, cfg.d_conv,
                                 a_width=cfg.d_state + cfg.d_ge))
    r = stream("head")
    P["head.W_mean"] = init_uniform(r, (T * D, 1), T * D)
    P["head.b_mean"] = np.zeros(1)
    P["head.W_dev"] = init_uniform(r, (T * D, 1), T * D)
    P["head.b_dev"] = np.zeros(1)
    return ParamStore(P)


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_params(cfg, 0).items()}


def check_params(cfg: ModelConfig, params: ParamStore) -> None:
    want = expected_shapes(cfg)
    have = {k: v.shape for k, v in params.items()}
    if set(want) != set(have):
        extra, missing = sorted(set(have) - set(want)), sorted(set(want) - set(have))
        raise ConfigError(f"parameter set does not match config (missing={missing}, extra={extra})")
    for k, shape in want.items():
        if have[k] != shape:
            raise ConfigError(f"{k}: shape {have[k]} does not match config {shape}")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def guided_ssm_block(x_agg: Tensor, guide: Tensor, p: Mapping[str, Tensor], prefix: str,
                     residual: bool = True) -> Tensor:
    """Selective SSM whose input/output matrices carry a market guide.

    ``guide`` is already broadcast to ``[N, T, d_guide]``; it is appended to
    both the projected B and C along the state axis, so the recurrent state
    widens to ``d_state + d_guide``.
    """
    u = ad.silu(conv1d_t(x_agg, p[prefix + "conv_w"], p[prefix + "conv_b"]))
    B = ad.concat([u @ p[prefix + "W_B"], guide], axis=-1)
    C = ad.concat([u @ p[prefix + "W_C"], guide], axis=-1)
    y = selective_core(u, B, C, p, prefix)
    return y + x_agg if residual else y


def predict_head(O_G: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """mean + exp(tanh(dev)) from the flattened ``[T * d_model]`` features of each stock."""
    N = O_G.shape[0]
    flat = O_G.reshape(N, -1)
    mean = flat @ p["head.W_mean"] + p["head.b_mean"]
    dev = ad.tanh(flat @ p["head.W_dev"] + p["head.b_dev"])
    return (mean + ad.exp(dev)).reshape(N)


def pearson_loss(pred, target) -> Tensor:
    """Negative cross-sectional Pearson correlation."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape[0] < 2 or pred.shape != target.shape:
        raise DegenerateCrossSection(f"need two or more aligned values, got {pred.shape} / {target.shape}")
    yc = target - target.mean()
    pc = pred - pred.mean()
    ss_y = float(yc @ yc)
    ss_p = float(pc.value @ pc.value)
    if ss_y <= 1e-300 or ss_p <= 1e-300:
        raise DegenerateCrossSection("zero cross-sectional variance")
    num = (pc * yc).sum()
    loss = -num / (ad.sqrt((pc * pc).sum()) * math.sqrt(ss_y))
    if abs(float(loss.value)) <= 1.0:
        return loss
    # rounding can overshoot the bound by an ulp (e.g. two stocks)
    return ad.make_op(np.clip(loss.value, -1.0, 1.0), (loss,), lambda g: (g,))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    prediction: Tensor
    diagnostics: dict = field(default_factory=dict)


def forward(X_window, I_window, p: Mapping[str, Tensor], cfg: ModelConfig,
            keep: np.ndarray | None = None) -> ForwardResult:
    """Full forward pass. ``keep`` optionally freezes the top-k neighbour selection."""
    X_window = np.asarray(X_window, dtype=np.float64)
    I_window = np.asarray(I_window, dtype=np.float64)
    want = (cfg.n_stocks, cfg.t_in, cfg.n_features)
    if X_window.shape != want:
        raise ConfigError(f"X_window shape {X_window.shape} does not match config {want}")
    if I_window.shape != (cfg.t_in,):
        raise ConfigError(f"I_window shape {I_window.shape} does not match t_in={cfg.t_in}")
    N, T = cfg.n_stocks, cfg.t_in
    X = Tensor(X_window)
    diag: dict = {}

    # stage 0: commonality / specificity
    X_c = X_s = X
    if cfg.decomposes:
        if cfg.use_index:
            amp = dec.index_amplitude(I_window)
            g_c = dec.gains_t(amp, p["decomp.W_c"])
            g_s = dec.gains_t(amp, p["decomp.W_s"], complement=True)
        else:
            g_c = ad.sigmoid(p["decomp.v_c"])
            g_s = ad.sigmoid(-p["decomp.v_s"])
        X_c, X_s = dec.filter_panel_t(X, g_c, g_s)
        diag.update(g_c=g_c.value, g_s=g_s.value, X_c=X_c.value, X_s=X_s.value)

    # stage 1: node-independent block
    O = mamba_block(X, p, "nim.", residual=cfg.residual)

    if cfg.relational:
        M_S = rel.timestep_macro_t(X_c, p["rel.W_Nagg"], p["rel.W_FS"], p["rel.b_FS"])
        diag["M_S"] = M_S.value

    # stage 2: temporal-section graphs + time-step guidance
    if cfg.use_tigstm:
        G_S, keep = rel.temporal_section_graphs_t(X_s, p["rel.W_QS"], p["rel.W_KS"], keep)
        x_agg = rel.neighbor_aggregate_t(G_S, O)
        guide = ad.broadcast_to(ad.expand(M_S, 0), (N, T, cfg.d_te))
        O = guided_ssm_block(x_agg, guide, p, "tig.", residual=cfg.residual)
        diag.update(G_S=G_S.value, keep=keep)

    # stage 3: global graph + global guidance
    if cfg.use_gigstm:
        G_G = rel.global_graph_t(X_s, p["rel.W_Tagg_spec"], p["rel.W_QG"], p["rel.W_KG"])
        x_agg = rel.neighbor_aggregate_t(G_G, O)
        M_G = rel.global_macro_t(M_S, p["rel.W_Tagg_macro"], p["rel.W_FG"], p["rel.b_FG"])
        guide = ad.broadcast_to(M_G.reshape(1, 1, cfg.d_ge), (N, T, cfg.d_ge))
        O = guided_ssm_block(x_agg, guide, p, "gig.", residual=cfg.residual)
        diag.update(G_G=G_G.value, M_G=M_G.value)

    return ForwardResult(predict_head(O, p), diag)


class HigstmModel:
    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params
        check_params(cfg, self.params)

    def run(self, X_window, I_window, keep=None) -> ForwardResult:
        return forward(X_window, I_window, as_tensors(self.params), self.cfg, keep)

    def predict(self, X_window, I_window) -> np.ndarray:
        return self.run(X_window, I_window).prediction.value.copy()

    def loss_fn(self, X_window, I_window, labels, keep=None):
        cfg = self.cfg

        def fn(p):
            return pearson_loss(forward(X_window, I_window, p, cfg, keep).prediction, labels)

        return fn


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

def information_coefficient(pred, label) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    pc = pred - pred.mean()
    lc = label - label.mean()
    den = math.sqrt(float(pc @ pc) * float(lc @ lc))
    if den <= 1e-300:
        raise DegenerateCrossSection("zero cross-sectional variance")
    return float(pc @ lc) / den


@dataclass
class EpochStats:
    mean_loss: float
    mean_ic: float
    steps: int
    skipped: int


def train_epoch(samples: Sequence, model: HigstmModel, state: OptimState,
                rng: SeededRng) -> EpochStats:
    """One pass over ``samples`` in a seeded shuffled order, one Adam step per day."""
    if not samples:
        raise ValueError("train_epoch needs at least one sample")
    losses, ics, skipped = [], [], 0
    for i in rng.permutation(len(samples)):
        s = samples[int(i)]
        if np.ptp(s.labels) == 0.0:
            skipped += 1
            continue
        try:
            loss, grads = gradients(model.loss_fn(s.X_window, s.I_window, s.labels), model.params)
        except DegenerateCrossSection:
            log.warning("skipping degenerate cross-section at %s", getattr(s, "anchor_date", i))
            skipped += 1
            continue
        except GradientError as exc:
            raise GradientError(f"sample {getattr(s, 'anchor_date', i)}: {exc}") from exc
        adam_step(state, model.params, grads)
        losses.append(loss)
        ics.append(-loss)
    n = len(losses)
    return EpochStats(float(np.mean(losses)) if n else float("nan"),
                      float(np.mean(ics)) if n else float("nan"), n, skipped)


def predict_samples(model: HigstmModel, samples: Sequence) -> np.ndarray:
    return np.stack([model.predict(s.X_window, s.I_window) for s in samples]) if samples else \
        np.zeros((0, model.cfg.n_stocks))


def mean_ic(model: HigstmModel, samples: Sequence) -> float:
    """Mean daily IC; degenerate days are skipped."""
    ics = []
    for s in samples:
        try:
            ics.append(information_coefficient(model.predict(s.X_window, s.I_window), s.labels))
        except DegenerateCrossSection:
            continue
    return float(np.mean(ics)) if ics else float("nan")
