import numpy as np
import pytest

from negmargin.losses import margin_loss
from negmargin.model import BackboneConfig, Network
from negmargin.numerics import make_rng


def random_net(rng: np.random.Generator, similarity: str, activation: str | None = None) -> Network:
    n_hidden = int(rng.integers(0, 3))
    widths = [int(w) for w in rng.integers(2, 33, size=n_hidden)]
    cfg = BackboneConfig(int(rng.integers(1, 9)), tuple(widths), int(rng.integers(1, 6)),
                         activation or str(rng.choice(["relu", "tanh"])))
    net = Network.initialized(cfg, int(rng.integers(2, 6)), make_rng(int(rng.integers(1 << 30))), similarity)
    for p in net.params.values():
        # non-zero biases keep relu kinks away from the probe points
        p += rng.normal(scale=0.1, size=p.shape)
    return net


def max_fd_error(net: Network, x, y, spec, h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients."""

    def loss_at():
        _, scores = net.forward(x)
        return margin_loss(scores, y, spec)[0]

    net.zero_grad()
    _, scores = net.forward(x)
    net.backward(margin_loss(scores, y, spec)[1])
    worst = 0.0
    for name, p in net.params.items():
        analytic = net.grads[name].copy()
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_at()
            p[idx] = old - h
            down = loss_at()
            p[idx] = old
            fd = (up - down) / (2 * h)
            err = abs(fd - analytic[idx]) / max(1.0, abs(fd), abs(analytic[idx]))
            worst = max(worst, err)
    net.zero_grad()
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from test_acceptance import ACCEPTANCE_KEY

    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
