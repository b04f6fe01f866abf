"""Joint training of shared weights, shared soft mask and per-switch BN banks.

Each outer iteration visits the switches densest to sparsest. Every visit
runs forward/backward under that switch's hard mask and BN bank, updates the
bank right away, and adds its weight and score gradients to running sums.
After the last switch the sums are applied once: weights with ``lr_weights``,
scores with ``lr_scores`` followed by clipping to [0, 1].
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from pydantic import ConfigDict

from .arch import build_network, load_descriptor
from .errors import ConfigError, NumericError
from .nn import Batch, sgd_step, softmax_cross_entropy
from .objective import LossReport, MacsAccount, band_gate, l_reg, network_connectivity_error
from .pruning import (SoftMask, ThresholdSet, apply_pattern_assignment, assign_patterns,
                      attach_block_partitions, attach_kernel_grouping, binarize, group_shapes, ste_backward)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    targets: list[float] = field(default_factory=lambda: [1.0, 0.6, 0.35])   # fractions of reference MACs
    architecture: str = "lenet"
    scheme: str = "pattern"
    warmup_epochs: int = 1
    epochs: int = 5
    batch_size: int = 128
    lr_weights: float = 1e-3
    lr_scores: float = 1e-2
    gamma: float = 2.0
    lr_decay: str = "constant"      # joint-phase learning-rate schedule: constant | cosine
    reg_scope: str = "band"         # groups the regularizer gradient reaches: band | all
    seed: int = 0
    pattern_k: int = 8
    block_rows: int = 4
    block_cols: int = 16
    block_overrides: dict[str, list[int]] = field(default_factory=dict)
    thresholds: Optional[list[float]] = None
    dataset: str = "mnist"

    def __post_init__(self):
        if self.lr_weights <= 0 or self.lr_scores <= 0:
            raise ConfigError("learning rates must be positive")
        if self.warmup_epochs < 0 or self.epochs < 0 or self.batch_size < 1 or self.gamma < 0:
            raise ConfigError("epochs and gamma must be non-negative, batch size positive")
        if self.scheme not in ("pattern", "block"):
            raise ConfigError(f"unknown pruning scheme {self.scheme!r}")
        if self.lr_decay not in ("constant", "cosine"):
            raise ConfigError(f"unknown learning-rate schedule {self.lr_decay!r}")
        if self.reg_scope not in ("band", "all"):
            raise ConfigError(f"unknown regularizer scope {self.reg_scope!r}")
        if not self.targets:
            raise ConfigError("need at least one target")
        if any(b >= a for a, b in zip(self.targets, self.targets[1:])):
            raise ConfigError(f"targets must be strictly descending: {self.targets}")
        if self.thresholds is not None and len(self.thresholds) != len(self.targets):
            raise ConfigError("need one threshold per target")

    @property
    def n_switches(self):
        return len(self.targets)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    config: TrainConfig
    descriptor: dict
    net: object
    thresholds: ThresholdSet
    scores: SoftMask = None
    account: MacsAccount = None
    targets: list = None            # absolute remaining-MACs targets per switch
    assignment: object = None       # PatternAssignment for the pattern scheme
    epoch: int = 0
    iteration: int = 0
    rng: np.random.Generator = None
    history: list = field(default_factory=list)
    lr_scale: float = 1.0           # multiplier on both learning rates, set by the schedule

    @property
    def n_switches(self):
        return len(self.thresholds)

    def hard_mask(self, n):
        """Hard mask of switch ``n`` (1-based)."""
        return binarize(self.scores, self.thresholds[n - 1])


@dataclass
class EvalResult:
    switch: int
    accuracy: float
    macs: int
    target_macs: int
    connectivity_error: float


def init_state(config, descriptor=None):
    descriptor = load_descriptor(descriptor or config.architecture)
    net = build_network(descriptor, config.n_switches, seed=config.seed)
    thresholds = ThresholdSet(config.thresholds) if config.thresholds is not None \
        else ThresholdSet.evenly_spaced(config.n_switches)
    return TrainState(config, descriptor, net, thresholds, rng=np.random.default_rng(config.seed))


def iterate_batches(data, batch_size, rng):
    order = rng.permutation(len(data))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        x, y = data.batch(idx)
        yield Batch(x, y)


def dense_step(net, batch, lr):
    logits = net.forward(batch.x, train=True)
    loss, d = softmax_cross_entropy(logits, batch.y)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss during warm-up")
    net.backward(d, input_grad=False)
    sgd_step(net.parameters(), net.gradients(), lr)
    return loss


def setup_pruning(state):
    """Attach groupings (and patterns), initialize scores and absolute targets."""
    cfg, net = state.config, state.net
    if cfg.scheme == "pattern":
        attach_kernel_grouping(net)
        weights = {name: conv.params["weight"] for name, conv in net.prunable()}
        state.assignment = assign_patterns(weights, cfg.pattern_k)
        apply_pattern_assignment(net, state.assignment)
    else:
        overrides = {k: tuple(v) for k, v in cfg.block_overrides.items()}
        attach_block_partitions(net, cfg.block_rows, cfg.block_cols, overrides)
    state.account = MacsAccount(net, state.descriptor)
    ref = state.account.reference
    state.targets = [int(round(f * ref)) for f in cfg.targets]
    if state.targets[0] > ref:
        raise ConfigError(f"target {state.targets[0]} exceeds achievable MACs {ref}")
    if state.targets[-1] < state.account.fixed:
        raise ConfigError(f"target {state.targets[-1]} is below the unprunable MACs {state.account.fixed}")
    # start every switch dense: scores above the largest threshold
    low = state.thresholds[-1]
    state.scores = SoftMask.initialize(group_shapes(net), low, 1.0, seed=cfg.seed + 1)
    return state


def warmup_and_assign(config, data=None, state=None, on_epoch=None):
    """Dense warm-up on BN bank 1, copy that bank to all switches, then set up pruning."""
    state = state or init_state(config)
    net = state.net
    net.set_switch(0)
    for epoch in range(config.warmup_epochs):
        if data is None:
            raise ConfigError("warm-up epochs requested without training data")
        losses = [dense_step(net, b, config.lr_weights) for b in iterate_batches(data, config.batch_size, state.rng)]
        state.history.append({"phase": "warmup", "epoch": epoch + 1, "loss": float(np.mean(losses))})
        if on_epoch:
            on_epoch(state, epoch + 1, float(np.mean(losses)))
    for _, bn in net.bn_layers():
        for n in range(1, state.n_switches):
            bn.copy_bank(0, n)
    return setup_pruning(state)


def train_step(state, batch):
    """One outer iteration over all switches; returns one LossReport per switch."""
    net, cfg = state.net, state.config
    weights = net.weight_parameters()
    acc_w = {k: np.zeros_like(v) for k, v in weights.items()}
    acc_s = {k: np.zeros_like(v) for k, v in state.scores.items()}
    reports = []
    masks = [state.hard_mask(n) for n in range(1, state.n_switches + 1)]
    signs = [l_reg(state.account.current(m), t, state.account.dense)[1] for m, t in zip(masks, state.targets)]
    for n in range(1, state.n_switches + 1):
        hard = masks[n - 1]
        net.set_group_masks(hard)
        net.set_switch(n - 1)
        logits = net.forward(batch.x, train=True)
        ce, d = softmax_cross_entropy(logits, batch.y)
        if not np.isfinite(ce):
            raise NumericError(f"non-finite loss at switch {n}, iteration {state.iteration}",
                               switch=n, iteration=state.iteration)
        net.backward(d, input_grad=False)
        for k, g in net.weight_gradients().items():
            acc_w[k] += g
        # the active BN bank takes its own gradient immediately
        try:
            sgd_step(net.bn_parameters(), net.bn_gradients(), cfg.lr_weights * state.lr_scale)
        except NumericError as exc:
            raise NumericError(f"{exc} at switch {n}, iteration {state.iteration}", name=exc.name,
                               switch=n, iteration=state.iteration) from exc
        current = state.account.current(hard)
        reg, sign = l_reg(current, state.targets[n - 1], state.account.dense)
        gate = band_gate(masks, n, signs, state.scores, state.thresholds) if cfg.reg_scope == "band" else None
        reg_grad = state.account.reg_gradient(sign, cfg.gamma, gate)
        for name, conv in net.prunable():
            acc_s[name] += ste_backward(conv.mask_grad) + reg_grad[name]
        reports.append(LossReport(ce, reg, cfg.gamma, {n: current}, n))
    try:
        sgd_step(weights, acc_w, cfg.lr_weights * state.lr_scale)
        sgd_step(state.scores, acc_s, cfg.lr_scores * state.lr_scale)
    except NumericError as exc:
        raise NumericError(f"{exc} at iteration {state.iteration}", name=exc.name,
                           iteration=state.iteration) from exc
    state.scores.clip_()
    state.iteration += 1
    return reports


def evaluate(state, data, switch, batch_size=1000):
    """Top-1 accuracy, remaining MACs and connectivity error under one switch (eval-mode BN)."""
    net = state.net
    hard = state.hard_mask(switch)
    net.set_group_masks(hard)
    net.set_switch(switch - 1)
    correct = 0
    for i in range(0, len(data), batch_size):
        x, y = data.batch(np.arange(i, min(i + batch_size, len(data))))
        correct += int((net.forward(x, train=False).argmax(axis=1) == y).sum())
    net._last = None
    return EvalResult(switch, correct / max(len(data), 1), state.account.current(hard),
                      state.targets[switch - 1], network_connectivity_error(net, hard))


def lr_factor(schedule, step, total):
    """Learning-rate multiplier at joint step ``step`` of ``total``."""
    if schedule == "constant" or total <= 0:
        return 1.0
    return 0.5 * (1.0 + np.cos(np.pi * step / total))


def train(config, train_data, test_data=None, on_iteration=None, on_eval=None, on_warmup=None,
          state=None):
    """Warm-up, pattern assignment and the joint loop; returns the final state."""
    state = warmup_and_assign(config, train_data, state, on_epoch=on_warmup)
    total = config.epochs * -(-len(train_data) // config.batch_size)
    step = 0
    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        for batch in iterate_batches(train_data, config.batch_size, state.rng):
            state.lr_scale = lr_factor(config.lr_decay, step, total)
            step += 1
            reports = train_step(state, batch)
            if on_iteration:
                on_iteration(state, reports)
        if test_data is not None:
            results = [evaluate(state, test_data, n) for n in range(1, state.n_switches + 1)]
            state.history.append({"phase": "joint", "epoch": epoch,
                                  "accuracy": [r.accuracy for r in results],
                                  "macs": [r.macs for r in results]})
            if on_eval:
                on_eval(state, results)
            log.info("epoch %d: %s", epoch, ", ".join(f"n={r.switch} acc={r.accuracy:.4f} macs={r.macs}"
                                                       for r in results))
    return state


def round_weights_to_storage(state):
    """Round weights and BN banks to float32 precision, matching what a compact model stores."""
    for arr in list(state.net.parameters().values()):
        arr[...] = arr.astype(np.float32).astype(np.float64)
    for _, bn in state.net.bn_layers():
        for arr in (bn.running_mean, bn.running_var):
            arr[...] = arr.astype(np.float32).astype(np.float64)
