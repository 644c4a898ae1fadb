"""Parameters, gradients, finite-difference checking, Adam, RNG, checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from .autodiff import Tensor

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


class GradientError(FloatingPointError):
    pass


class ParamStore:
    """Named float64 arrays, iterated in lexicographic id order."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._data: dict[str, np.ndarray] = {}
        for k, v in (arrays or {}).items():
            self.register(k, v)

    def register(self, pid: str, value) -> None:
        if pid in self._data:
            raise KeyError(f"parameter {pid!r} already registered")
        self._data[pid] = np.array(value, dtype=np.float64)

    def __setitem__(self, pid: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if pid not in self._data:
            raise KeyError(f"unknown parameter {pid!r}")
        if value.shape != self._data[pid].shape:
            raise ValueError(f"shape of {pid!r} is fixed at {self._data[pid].shape}, got {value.shape}")
        self._data[pid] = value

    def __getitem__(self, pid: str) -> np.ndarray:
        return self._data[pid]

    def __contains__(self, pid) -> bool:
        return pid in self._data

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._data))

    def __len__(self) -> int:
        return len(self._data)

    def keys(self):
        return list(self)

    def items(self):
        return [(k, self._data[k]) for k in self]

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.items()})

    def size(self) -> int:
        return sum(v.size for v in self._data.values())


def as_tensors(params: ParamStore, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def gradients(loss_fn: LossFn, params: ParamStore) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` and return ``(loss, {id: dloss/dparam})``."""
    leaves = as_tensors(params, requires_grad=True)
    loss = loss_fn(leaves)
    value = float(loss.value)
    if not math.isfinite(value):
        bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
        raise GradientError(f"non-finite loss {value}; non-finite parameters: {bad or 'none'}")
    loss.backward()
    return value, {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
                   for k, t in leaves.items()}


@dataclass
class GradReport:
    analytic: dict[str, np.ndarray] = field(default_factory=dict)
    numeric: dict[str, np.ndarray] = field(default_factory=dict)
    coords: dict[str, np.ndarray] = field(default_factory=dict)
    rel_error: dict[str, float] = field(default_factory=dict)
    threshold: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_error.values(), default=0.0)

    @property
    def flagged(self) -> dict[str, float]:
        return {k: e for k, e in self.rel_error.items() if e >= self.threshold}

    @property
    def ok(self) -> bool:
        return not self.flagged


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_check(loss_fn: LossFn, params: ParamStore, eps: float = 1e-5,
                      max_coords: int = 25, seed: int = 0, threshold: float = 1e-4,
                      richardson: bool = False) -> GradReport:
    """Compare analytic gradients with central differences.

    Parameters with more than ``max_coords`` entries are subsampled with a
    seeded choice of ``max_coords`` flat coordinates.

    With ``richardson=True`` each coordinate uses ``(4 D(eps) - D(2 eps)) / 3``
    where ``D`` is the central difference. The truncation error drops to
    O(eps^4), so a larger step can be used and roundoff stays far below the
    1e-8 floor of the relative error, which matters for near-zero gradients.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, analytic = gradients(loss_fn, params)
    rng = SeededRng(seed)
    report = GradReport(threshold=threshold)

    def f(store: ParamStore) -> float:
        return float(loss_fn(as_tensors(store)).value)

    work = params.copy()
    for pid, base in params.items():
        flat = base.ravel()
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.permutation(flat.size)[:max_coords])
        num = np.empty(coords.size)

        def central(c, h):
            bumped = flat.copy()
            bumped[c] = flat[c] + h
            work[pid] = bumped.reshape(base.shape)
            up = f(work)
            bumped[c] = flat[c] - h
            work[pid] = bumped.reshape(base.shape)
            down = f(work)
            return (up - down) / (2.0 * h)

        for i, c in enumerate(coords):
            if richardson:
                num[i] = (4.0 * central(c, eps) - central(c, 2.0 * eps)) / 3.0
            else:
                num[i] = central(c, eps)
        work[pid] = base
        a = analytic[pid].ravel()[coords]
        report.analytic[pid] = a
        report.numeric[pid] = num
        report.coords[pid] = coords
        report.rel_error[pid] = float(relative_error(a, num).max()) if coords.size else 0.0
    return report


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "OptimState":
        st = cls(**hyper)
        for k, p in params.items():
            st.m[k] = np.zeros_like(p)
            st.v[k] = np.zeros_like(p)
        return st


def adam_step(state: OptimState, params: ParamStore, grads: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for {missing}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        state.m[k] = m
        state.v[k] = v
        params[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

class SeededRng:
    """Reproducible stream: PCG64 raw 64-bit words, 53-bit uniforms, Box-Muller normals.

    PCG64's raw output is fixed by its published algorithm, so the streams do
    not depend on numpy's distribution code (which may change across versions).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        raw = self._bits.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # in (0, 1]
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = loc + scale * z[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, key: int) -> "SeededRng":
        """Child stream derived deterministically from this stream's seed."""
        return SeededRng((self.seed * 1_000_003 + int(key)) % (2**63))


def init_uniform(rng: SeededRng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HIGSTM-CKPT\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamStore, state: OptimState | None = None,
                    seed: int = 0, meta: Mapping | None = None) -> None:
    """Write the flat checkpoint container.

    Layout: magic line, one JSON header line, then the float64 little-endian
    payload of every entry in header order. The header lists
    ``{"key", "shape"}`` per entry, where keys are ``param/<id>``,
    ``adam_m/<id>`` and ``adam_v/<id>``.
    """
    entries = [(f"param/{k}", v) for k, v in params.items()]
    header = {"version": CHECKPOINT_VERSION, "seed": int(seed), "meta": dict(meta or {})}
    if state is not None:
        header["optim"] = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                           "eps": state.eps, "step": state.step}
        entries += [(f"adam_m/{k}", state.m[k]) for k in params]
        entries += [(f"adam_v/{k}", state.v[k]) for k in params]
    header["entries"] = [{"key": k, "shape": list(v.shape)} for k, v in entries]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, v in entries:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, OptimState | None, int, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    rest = blob[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = memoryview(rest[nl + 1:])
    offset = 0
    arrays = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload[offset: offset + 8 * n], dtype="<f8").astype(np.float64)
        arrays[e["key"]] = arr.reshape(e["shape"])
        offset += 8 * n
    params = ParamStore({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    state = None
    if "optim" in header:
        o = header["optim"]
        state = OptimState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        for k in params:
            state.m[k] = arrays[f"adam_m/{k}"]
            state.v[k] = arrays[f"adam_v/{k}"]
    return params, state, header["seed"], header["meta"]
