"""MACs accounting, the MACs-target regularizer and the combined training loss.

Current MACs are *remaining* work: kept groups times their per-group MACs,
plus the dense MACs of layers that are never pruned. Targets are remaining
MACs too.
"""
from dataclasses import dataclass, field

import numpy as np

from .arch import layer_table
from .errors import DimensionError
from .nn import softmax_cross_entropy
from .pruning import PATTERN_SIZE, binarize, ste_backward


def _nnz(mask):
    return int(np.count_nonzero(mask))


def current_macs_pattern(shapes, hard_mask, fixed_macs=0):
    """Remaining MACs of pattern-pruned 3×3 layers: Σ f·f'·4·‖b‖₀, plus ``fixed_macs``."""
    total = fixed_macs
    for name, shape in shapes.items():
        b = hard_mask[name]
        if b.shape != (shape.out_channels, shape.in_channels):
            raise DimensionError(f"mask for {name} is {b.shape}, layer has "
                                 f"{(shape.out_channels, shape.in_channels)} kernels", axis=name)
        total += shape.out_h * shape.out_w * PATTERN_SIZE * _nnz(b)
    return total


def current_macs_block(shapes, partitions, hard_mask, fixed_macs=0):
    """Remaining MACs of block-pruned layers: Σ_l Σ_p f·f'·o·‖b_lp‖₀, plus ``fixed_macs``."""
    total = fixed_macs
    for name, shape in shapes.items():
        part = partitions[name]
        b = hard_mask[name]
        if b.shape != part.group_shape:
            raise DimensionError(f"mask for {name} is {b.shape}, partition has {part.group_shape}", axis=name)
        total += shape.out_h * shape.out_w * part.rows * _nnz(b)
    return total


def l_reg(current, target, dense):
    """``|current − target| / dense`` and the sign of its derivative in ``current``."""
    if dense <= 0:
        raise ValueError("dense MACs must be positive")
    diff = current - target
    return abs(diff) / dense, float(np.sign(diff))


class MacsAccount:
    """Per-group MAC quanta for a network's prunable layers.

    ``quanta[name]`` gives, per group, the MACs that group costs when kept
    (pattern-aware). ``fixed`` collects every layer that is never pruned.
    """

    def __init__(self, net, descriptor):
        rows = {r["name"]: r for r in layer_table(descriptor)}
        self.dense = sum(r["macs"] for r in rows.values())
        self.shapes = {}
        self.quanta = {}
        self.scheme = None
        prunable = dict(net.prunable())
        fixed = 0
        for name, conv in net.convs():
            shape = rows[name]["layer_shape"]
            if name in prunable:
                per_group = conv.grouping.weights_per_group(conv.pattern)
                self.quanta[name] = shape.out_h * shape.out_w * per_group
                self.shapes[name] = shape
                self.scheme = conv.grouping.scheme
            else:
                fixed += shape.dense_macs
        fixed += sum(r["macs"] for r in rows.values() if r["kind"] == "affine")
        self.fixed = fixed

    @property
    def reference(self):
        """MACs with every group kept (the pattern-pruned model for the pattern scheme)."""
        return self.fixed + sum(int(q.sum()) for q in self.quanta.values())

    def current(self, masks):
        return self.fixed + sum(int((self.quanta[n] * (masks[n] != 0)).sum()) for n in self.quanta)

    def relaxed(self, masks):
        """Σ quanta·b for real-valued b (the differentiable surrogate)."""
        return self.fixed + sum(float((self.quanta[n] * masks[n]).sum()) for n in self.quanta)

    def reg_gradient(self, sign, gamma, gate=None):
        """γ·∂L_reg/∂b per group: each group's MAC quantum with the over/under-budget sign.

        ``gate`` (per-layer 0/1 arrays) limits which groups receive it.
        """
        grads = {n: gamma * sign * q / self.dense for n, q in self.quanta.items()}
        if gate is not None:
            grads = {n: g * gate[n] for n, g in grads.items()}
        return grads


def band_gate(hard_masks, n, signs, scores=None, thres=None):
    """Groups switch ``n`` (1-based) can flip without touching any other switch.

    Over budget these are groups kept at ``n`` but not at ``n+1``; under
    budget, groups pruned at ``n`` but kept at ``n-1``. The under-budget band
    of switch ``n`` is the over-budget band of switch ``n-1``. When both apply,
    the band is split at its midpoint score: the lower half is pushed down, the
    upper half up. Without ``scores`` the removal wins outright. ``hard_masks``
    and ``signs`` cover all switches, densest first.
    """
    cur = hard_masks[n - 1]
    sign = signs[n - 1]
    split = scores is not None and thres is not None
    if sign > 0:
        if n == len(hard_masks):
            return dict(cur)
        nxt = hard_masks[n]
        gate = {k: m * (1.0 - nxt[k]) for k, m in cur.items()}
        if signs[n] < 0 and split:
            mid = 0.5 * (thres[n - 1] + thres[n])
            gate = {k: g * (scores[k] < mid) for k, g in gate.items()}
        return gate
    if n == 1:
        return {k: 1.0 - m for k, m in cur.items()}
    prev = hard_masks[n - 2]
    gate = {k: (1.0 - m) * prev[k] for k, m in cur.items()}
    if signs[n - 2] > 0:
        if not split:
            return {k: np.zeros_like(m) for k, m in cur.items()}
        mid = 0.5 * (thres[n - 2] + thres[n - 1])
        gate = {k: g * (scores[k] >= mid) for k, g in gate.items()}
    return gate


@dataclass
class LossReport:
    ce: float
    l_reg: float
    gamma: float
    current_macs: dict = field(default_factory=dict)    # switch (1-based) -> MACs
    switch: int = 1
    score_grad: dict = field(default=None, repr=False)

    @property
    def total(self):
        return self.ce + self.gamma * self.l_reg

    def row(self):
        return {"switch": self.switch, "ce": self.ce, "l_reg": self.l_reg, "gamma": self.gamma,
                "total": self.total, "current_macs": self.current_macs.get(self.switch, "")}


def total_loss(net, scores, thres, switch, batch, gamma, account, target, train=True, masks=None,
               gate=None):
    """Cross-entropy under switch ``switch`` plus ``gamma·L_reg`` against ``target``.

    Runs forward and backward, so weight and BN gradients are left in the
    network's buffers. The report's ``score_grad`` holds ∂total/∂scores via
    the straight-through estimator. ``masks`` overrides binarization (used to
    probe the relaxed surrogate). ``gate`` limits which groups the
    regularizer gradient reaches (see :func:`band_gate`).
    """
    hard = binarize(scores, thres) if masks is None else masks
    net.set_group_masks(hard)
    net.set_switch(switch - 1)
    logits = net.forward(batch.x, train=train)
    ce, dlogits = softmax_cross_entropy(logits, batch.y)
    net.backward(dlogits)
    current = account.current(hard) if masks is None else account.relaxed(hard)
    reg, sign = l_reg(current, target, account.dense)
    reg_grad = account.reg_gradient(sign, gamma, gate)
    grads = {}
    for name, conv in net.prunable():
        grads[name] = ste_backward(conv.mask_grad) + reg_grad[name]
    return LossReport(ce, reg, gamma, {switch: current}, switch, grads)


def connectivity_error_norm(weights, pattern, kept):
    """Frobenius norm of W⊙(M−P) with M = P⊙kept (kept expanded to weight shape).

    Kernels removed by connectivity pruning contribute their pattern-retained
    weights; kept kernels contribute nothing.
    """
    p = np.ones_like(weights) if pattern is None else pattern
    m = p * kept
    return float(np.linalg.norm((weights * (m - p)).ravel()))


def network_connectivity_error(net, masks):
    total = 0.0
    for name, conv in net.prunable():
        kept = conv.grouping.expand(masks[name])
        total += connectivity_error_norm(conv.params["weight"], conv.pattern, kept) ** 2
    return float(np.sqrt(total))
