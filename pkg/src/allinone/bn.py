"""Switchable batch normalization: one parameter/statistics bank per switch."""
import numpy as np

from . import kernels
from .errors import DimensionError, RangeError
from .nn import Layer

MOMENTUM = 0.1
EPS = 1e-5


class SwitchableBatchNorm(Layer):
    """Batch norm over channels with ``n_switches`` independent banks.

    ``params["gamma"]``/``params["beta"]`` and the running statistics are
    (N, C) arrays; row ``switch`` is the only one read or written. Works on
    (B, C, H, W) and (B, C) inputs.
    """

    kind = "bn"

    def __init__(self, channels, n_switches=1, momentum=MOMENTUM, eps=EPS):
        super().__init__()
        self.channels = channels
        self.n_switches = n_switches
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones((n_switches, channels))
        self.params["beta"] = np.zeros((n_switches, channels))
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.running_mean = np.zeros((n_switches, channels))
        self.running_var = np.ones((n_switches, channels))
        self._switch = 0
        self._cache = None

    @property
    def switch(self):
        return self._switch

    @switch.setter
    def switch(self, n):
        if not 0 <= n < self.n_switches:
            raise RangeError(f"switch {n} outside [0, {self.n_switches})")
        self._switch = n

    def _axes(self, x):
        if x.ndim == 4:
            return (0, 2, 3), (None, slice(None), None, None)
        if x.ndim == 2:
            return (0,), (None, slice(None))
        raise DimensionError(f"batch norm expects 2-d or 4-d input, got {x.ndim}-d", axis="ndim")

    def forward(self, x, train=False):
        if x.shape[1] != self.channels:
            raise DimensionError(f"input has {x.shape[1]} channels, batch norm has {self.channels}",
                                 axis="channels")
        axes, bc = self._axes(x)
        n = self._switch
        gamma, beta = self.params["gamma"][n], self.params["beta"][n]
        if train:
            x4 = np.ascontiguousarray(x.reshape(x.shape[0], self.channels, -1, 1))
            out, xhat, mean, var, inv = kernels.bn_train_forward(x4, gamma, beta, self.eps)
            count = x.size // self.channels
            m = self.momentum
            self.running_mean[n] = (1 - m) * self.running_mean[n] + m * mean
            unbiased = var * count / max(count - 1, 1)
            self.running_var[n] = (1 - m) * self.running_var[n] + m * unbiased
            self._cache = (xhat, inv, x.shape, n, True)
            return out.reshape(x.shape)
        inv = 1.0 / np.sqrt(self.running_var[n] + self.eps)
        xhat = (x - self.running_mean[n][bc]) * inv[bc]
        self._cache = (xhat, inv, x.shape, n, False)
        return xhat * gamma[bc] + beta[bc]

    def backward(self, dy):
        xhat, inv, shape, n, train = self._cache
        for g in self.grads.values():
            g[...] = 0.0
        gamma = self.params["gamma"][n]
        if train:
            dy4 = np.ascontiguousarray(dy.reshape(xhat.shape))
            dx, dgamma, dbeta = kernels.bn_train_backward(dy4, xhat, gamma, inv)
            self.grads["gamma"][n] = dgamma
            self.grads["beta"][n] = dbeta
            return dx.reshape(shape)
        axes, bc = self._axes(dy)
        self.grads["gamma"][n] = (dy * xhat).sum(axis=axes)
        self.grads["beta"][n] = dy.sum(axis=axes)
        return dy * (gamma * inv)[bc]

    def copy_bank(self, src, dst):
        for arr in (self.params["gamma"], self.params["beta"], self.running_mean, self.running_var):
            arr[dst] = arr[src]


def bn_param_count(descriptor, n_switches):
    """Switchable-BN parameter overhead for an architecture descriptor.

    Returns a dict with the learnable count per bank, the extra learnables
    added by banks 2..N, the running-statistics count per bank, the dense
    parameter total (one bank) and the extra fraction of that total.
    """
    from .arch import layer_table

    table = layer_table(descriptor)
    channels = sum(row["channels"] for row in table if row["kind"] == "bn")
    total = sum(row["params"] for row in table)
    per_switch = 2 * channels
    extra = per_switch * (n_switches - 1)
    return {
        "bn_channels": channels,
        "learnable_per_switch": per_switch,
        "extra_learnable": extra,
        "stats_per_switch": 2 * channels,
        "total_params": total,
        "extra_fraction": extra / total if total else 0.0,
    }
