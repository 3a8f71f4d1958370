import numpy as np
import pytest
import torch

from rtpen.data import TokenizedQuery, VideoFeatures


def central_difference_check(fn, params, step=1e-5, tol=1e-3, max_entries=None, rng=None):
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``params`` maps names to double-precision leaf tensors. Returns the worst
    relative error per parameter (entries with both gradients below 1e-7 are skipped).
    """
    for p in params.values():
        p.grad = None
    fn().backward()
    worst = {}
    for name, p in params.items():
        analytic = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        idx = range(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.numel(), max_entries, replace=False)
        err = 0.0
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic[i].item()
            scale = max(abs(a), abs(numeric))
            if scale < 1e-7:
                continue
            err = max(err, abs(a - numeric) / scale)
        worst[name] = err
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_query(rng, n_q, d_q, qid="q"):
    emb = rng.standard_normal((n_q, d_q)).astype(np.float32)
    return TokenizedQuery(qid, list(range(n_q)), emb, np.zeros(d_q, np.float32),
                          [f"t{i}" for i in range(n_q)])


def make_video(rng, n_v, d_v, vid="v"):
    return VideoFeatures(vid, rng.standard_normal((n_v, d_v)).astype(np.float32))


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
