import numpy as np
import pytest

from nmprune import autodiff as ad
from nmprune.data import Corpus, batch_iterator, sequential_batches, synthetic_text
from nmprune.models import ToyModelSpec, build_model, pretrain_dense

# small char-LM shared by the trainer, CLI and acceptance tests
LM_SPEC = ToyModelSpec(kind="transformer_lm", embed_dim=32, context_length=32, num_heads=4, num_layers=2)
LM_PRETRAIN_STEPS = 1500


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (modified in place and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def check_grad(fn, *arrays, tol=1e-5, seed=0):
    """``fn(*tensors) -> scalar Tensor``; compare backward against central differences for every input."""
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    ad.backward(fn(*leaves))
    for leaf in leaves:
        num = numeric_grad(lambda: fn(*[ad.Tensor(t.data) for t in leaves]).item(), leaf.data)
        assert rel_err(leaf.grad, num) <= tol


@pytest.fixture(scope="session")
def lm_corpus():
    return Corpus.from_bytes(synthetic_text(200_000, seed=0, domain="A"))


@pytest.fixture(scope="session")
def lm_model(lm_corpus):
    model = build_model(LM_SPEC, seed=0)
    return pretrain_dense(model, batch_iterator(lm_corpus.train, 16, LM_SPEC.context_length, seed=0),
                          LM_PRETRAIN_STEPS)


@pytest.fixture(scope="session")
def lm_val(lm_corpus):
    return sequential_batches(lm_corpus.val, 16, LM_SPEC.context_length, max_batches=16)


@pytest.fixture(scope="session")
def lm_train(lm_corpus):
    return lambda seed: batch_iterator(lm_corpus.train, 16, LM_SPEC.context_length, seed=seed)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} | {detail}")
