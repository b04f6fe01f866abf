import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def data_root():
    env = os.environ.get("ALLINONE_DATA_DIR")
    return Path(env) if env else Path.home() / "data"


def mnist_available():
    return (data_root() / "mnist" / "train-images-idx3-ubyte").exists() or \
        (data_root() / "mnist" / "train-images-idx3-ubyte.gz").exists()


requires_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST files not found under $ALLINONE_DATA_DIR")


def central_difference(f, x, step=1e-5):
    """Numerical gradient of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        up = f()
        x[i] = old - step
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad


def rel_error(a, b):
    # the floor keeps exactly-zero gradients (e.g. a bias feeding batch norm) from amplifying FD noise
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)) + np.max(np.abs(b)), 1e-6))


def tiny_descriptor(in_ch=2, size=6, mid=4, out=6, classes=3, bn=True, kernel=3):
    """Two prunable 3×3 convs after a fixed first conv, with optional BN."""
    layers = [{"type": "conv", "out": mid, "kernel": 3, "padding": 1}]
    if bn:
        layers.append({"type": "bn"})
    layers += [{"type": "relu"}, {"type": "conv", "out": out, "kernel": kernel, "padding": kernel // 2}]
    if bn:
        layers.append({"type": "bn"})
    layers += [{"type": "relu"}, {"type": "conv", "out": out, "kernel": 3, "padding": 1, "stride": 2}]
    if bn:
        layers.append({"type": "bn"})
    layers += [{"type": "relu"}, {"type": "gap"}, {"type": "affine", "out": classes}]
    return {"name": "tiny", "input": [in_ch, size, size], "num_classes": classes, "layers": layers}


def random_state(architecture="lenet", scheme="pattern", n=3, seed=0, block=(4, 16), descriptor=None):
    """A pruning-ready state with scores spread over every threshold band and non-trivial BN banks."""
    from allinone.trainer import TrainConfig, init_state, setup_pruning

    targets = [1.0 - 0.1 * i for i in range(n)]
    cfg = TrainConfig(targets=targets, architecture=architecture, scheme=scheme, warmup_epochs=0, seed=seed,
                      block_rows=block[0], block_cols=block[1])
    state = setup_pruning(init_state(cfg, descriptor))
    rng = np.random.default_rng(seed)
    for s in state.scores.values():
        s[...] = rng.random(s.shape)
    for _, bn in state.net.bn_layers():
        for arr in (bn.params["gamma"], bn.params["beta"], bn.running_mean):
            arr[...] = rng.normal(0.5, 0.3, arr.shape)
        bn.running_var[...] = rng.uniform(0.5, 2.0, bn.running_var.shape)
    for p in state.net.weight_parameters().values():
        if p.ndim == 1:
            p[...] = rng.normal(0, 0.1, p.shape)
    return state


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
