import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def perturb(module: torch.nn.Module, seed: int = 0, scale: float = 0.5) -> torch.nn.Module:
    """Overwrite every parameter (zero-initialized gates included) with noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def central_difference_check(loss_fn, params, h: float = 1e-6, floor: float = 1e-5) -> np.ndarray:
    """Relative error between autograd and central differences, one entry per
    scalar parameter. ``loss_fn`` takes no arguments and returns a scalar; ``floor`` keeps
    gradients that vanish analytically (key biases under softmax) from
    dividing round-off by round-off."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    errors = []
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            flat, gflat = p.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = gflat[i].item()
                errors.append(abs(a - num) / max(abs(a), abs(num), floor))
    return np.asarray(errors)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[", 1)[1].split("]", 1)[0])):
            terminalreporter.write_line(line)
