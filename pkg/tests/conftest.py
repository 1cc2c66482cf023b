import numpy as np
import pytest
import torch

from attention_i2i.networks import GeneratorConfig, TranslationModel
from attention_i2i.toy import synthesize_toy_dataset

TINY = dict(n_content=3, base_width=4, num_res_blocks=1, embed_dim=8, patch_embed_dim=8, disc_width=4)


def directional_check(fn, params, n_dirs=20, eps=1e-6, rtol=1e-3, seed=0):
    """Compare autograd directional derivatives of scalar ``fn()`` with central differences.

    ``params`` are float64 leaf tensors with ``requires_grad``; ``fn`` must be deterministic.
    Returns the worst relative error seen.
    """
    for p in params:
        p.grad = None
    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        norm = torch.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            plus = float(fn())
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
            minus = float(fn())
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        numeric = (plus - minus) / (2 * eps)
        err = abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, err)
        assert err < rtol, f"directional derivative mismatch: autograd {analytic}, numeric {numeric}"
    return worst


@pytest.fixture
def tiny_cfg():
    return GeneratorConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return TranslationModel(tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_small(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_small")
    return synthesize_toy_dataset(4, 32, seed=3, out=root, num_test=3)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class CriterionLog:
    """Records one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def __init__(self, store):
        self.store = store

    def record(self, number: int, title: str, passed: bool, detail: str = "") -> None:
        prev = self.store.get(number)
        if prev is not None and prev[1] == "FAIL":
            return
        if prev is not None and passed:
            detail = "; ".join(d for d in (prev[2], detail) if d)
        self.store[number] = (title, "PASS" if passed else "FAIL", detail)


@pytest.fixture(scope="session")
def criterion_log():
    return CriterionLog(_ACCEPTANCE)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        line = f"criterion {number} [{status}] {title}"
        terminalreporter.write_line(line + (f" :: {detail}" if detail else ""))
