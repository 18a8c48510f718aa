import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def central_fd_error(fn, inputs, h=1e-6):
    """Relative error between autograd and central finite differences of scalar ``fn(*inputs)``.

    ``inputs`` are float64 tensors with ``requires_grad``; the error is
    ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, 1e-12)`` over all entries jointly.
    """
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    auto = torch.cat([(g if g is not None else torch.zeros_like(x)).reshape(-1) for g, x in zip(grads, inputs)])
    fd = []
    with torch.no_grad():
        for x in inputs:
            flat = x.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = fn(*inputs).item()
                flat[i] = old - h
                down = fn(*inputs).item()
                flat[i] = old
                fd.append((up - down) / (2 * h))
    fd = torch.tensor(fd, dtype=torch.float64)
    scale = max(auto.norm().item(), fd.norm().item(), 1e-12)
    return (auto - fd).norm().item() / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, from the ``criterion`` property each test records."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict} {name}: {detail}")
