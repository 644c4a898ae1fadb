import numpy as np
import pytest

from higstm.model import ModelConfig

TINY = dict(n_stocks=6, t_in=8, n_features=3, d_model=4, d_state=2, d_conv=2, d_te=2, d_ge=2, d_attn=2)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


def random_window(cfg, seed=0):
    r = np.random.default_rng(seed)
    X = r.normal(size=(cfg.n_stocks, cfg.t_in, cfg.n_features))
    I = r.normal(size=cfg.t_in)
    y = r.normal(size=cfg.n_stocks)
    return X, I, y


ACCEPTANCE: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}")
    print(ACCEPTANCE[-1])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
