from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from figmine.synthetic import write_demo_corpus

DATA = Path(__file__).parent / "data"


def read_table(name: str) -> list[list[str]]:
    rows = []
    for line in (DATA / name).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            rows.append(line.split("\t"))
    return rows


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def demo_config(tmp_path_factory) -> Path:
    """Path to config.toml of a freshly written demo corpus (shared, read-only)."""
    return write_demo_corpus(tmp_path_factory.mktemp("demo"), seed=0)


def boxes_match(found, truth, tol: int = 2) -> bool:
    """Same panel count and every edge within ``tol`` pixels, matched in reading order."""
    if len(found) != len(truth):
        return False
    key = lambda b: (b.y, b.x)  # noqa: E731
    for f, t in zip(sorted(found, key=key), sorted(truth, key=key)):
        edges_f = (f.x, f.y, f.x + f.w, f.y + f.h)
        edges_t = (t.x, t.y, t.x + t.w, t.y + t.h)
        if any(abs(a - b) > tol for a, b in zip(edges_f, edges_t)):
            return False
    return True


def numeric_gradient(weights, bias, x, y, eps: float = 1e-5):
    """Central finite differences of the mean cross-entropy, computed independently."""

    def loss(w, b):
        z = x @ w.T + b
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return -np.mean(np.log(p[np.arange(len(y)), y]))

    gw = np.zeros_like(weights)
    for idx in np.ndindex(weights.shape):
        up, down = weights.copy(), weights.copy()
        up[idx] += eps
        down[idx] -= eps
        gw[idx] = (loss(up, bias) - loss(down, bias)) / (2 * eps)
    gb = np.zeros_like(bias)
    for k in range(len(bias)):
        up, down = bias.copy(), bias.copy()
        up[k] += eps
        down[k] -= eps
        gb[k] = (loss(weights, up) - loss(weights, down)) / (2 * eps)
    return gw, gb


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
