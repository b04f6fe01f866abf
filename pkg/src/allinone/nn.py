"""Dense 64-bit layers with hand-written reverse passes.

A :class:`Network` is an ordered list of layers (a residual block nests two
more lists). Each layer caches what its backward pass needs during
``forward`` and fills ``grads`` (same keys and shapes as ``params``) during
``backward``.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, NumericError, StateError

DTYPE = np.float64


def conv_out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class LayerShape:
    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    out_h: int
    out_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("out_channels", "in_channels", "kernel_h", "kernel_w", "out_h", "out_w", "stride"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be >= 1", axis=name)
        if self.padding < 0:
            raise DimensionError("padding must be >= 0", axis="padding")

    @classmethod
    def for_input(cls, out_channels, in_channels, kernel, in_h, in_w, stride=1, padding=0):
        return cls(out_channels, in_channels, kernel, kernel,
                   conv_out_size(in_h, kernel, stride, padding),
                   conv_out_size(in_w, kernel, stride, padding), stride, padding)

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def dense_macs(self):
        return self.out_h * self.out_w * self.out_channels * self.in_channels * self.kernel_h * self.kernel_w

    def check_input(self, x):
        if x.ndim != 4:
            raise DimensionError(f"expected a 4-d input, got {x.ndim}-d", axis="ndim")
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"input has {x.shape[1]} channels, layer expects {self.in_channels}",
                                 axis="channels")
        oh = conv_out_size(x.shape[2], self.kernel_h, self.stride, self.padding)
        ow = conv_out_size(x.shape[3], self.kernel_w, self.stride, self.padding)
        if oh != self.out_h:
            raise DimensionError(f"input height {x.shape[2]} gives output height {oh}, expected {self.out_h}",
                                 axis="height")
        if ow != self.out_w:
            raise DimensionError(f"input width {x.shape[3]} gives output width {ow}, expected {self.out_w}",
                                 axis="width")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x, masked_weights, shape, method="gemm"):
    """Convolve ``x`` (B×I×H×W) with already-masked weights (O×I×kh×kw).

    ``method="direct"`` runs the naive loop reference; ``"gemm"`` lowers to
    im2col and a matrix product.
    """
    shape.check_input(x)
    if masked_weights.shape != shape.weight_shape:
        axis = next(i for i, (a, b) in enumerate(zip(masked_weights.shape, shape.weight_shape)) if a != b) \
            if masked_weights.ndim == 4 else "ndim"
        raise DimensionError(f"weights {masked_weights.shape} do not match {shape.weight_shape}", axis=axis)
    xp = _pad(x, shape.padding)
    if method == "direct":
        return kernels.conv2d_direct(xp, masked_weights, shape.stride)
    cols = kernels.im2col(xp, shape.kernel_h, shape.kernel_w, shape.stride)
    out = cols @ masked_weights.reshape(shape.out_channels, -1).T
    return out.reshape(x.shape[0], shape.out_h, shape.out_w, shape.out_channels).transpose(0, 3, 1, 2)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def sublayers(self):
        return ()


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, bias=False,
                 prunable=False, rng=None, method="gemm"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.prunable = prunable
        self.method = method
        fan_in = in_channels * kernel * kernel
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                           (out_channels, in_channels, kernel, kernel))
        if bias:
            self.params["bias"] = np.zeros(out_channels)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        # pruning hooks, filled in by the pruning code
        self.pattern = None         # 0/1 array of weight shape
        self.grouping = None        # kernel grouping or block partition
        self.group_mask = None      # hard (or relaxed) mask at group granularity
        self.mask_grad = None
        self.shape = None           # LayerShape, resolved on first forward
        self._cache = None

    def layer_shape(self, in_h, in_w):
        return LayerShape.for_input(self.out_channels, self.in_channels, self.kernel, in_h, in_w,
                                    self.stride, self.padding)

    def pattern_weight(self):
        w = self.params["weight"]
        return w if self.pattern is None else w * self.pattern

    def effective_weight(self):
        w = self.pattern_weight()
        if self.group_mask is not None:
            w = w * self.grouping.expand(self.group_mask)
        return w

    def forward(self, x, train=False):
        shape = self.layer_shape(x.shape[2], x.shape[3])
        self.shape = shape
        shape.check_input(x)
        w_pat = self.pattern_weight()
        expanded = None if self.group_mask is None else self.grouping.expand(self.group_mask)
        w = w_pat if expanded is None else w_pat * expanded
        xp = _pad(x, self.padding)
        if self.method == "direct":
            out = kernels.conv2d_direct(xp, w, self.stride)
            cols = None
        else:
            cols = kernels.im2col(xp, self.kernel, self.kernel, self.stride)
            out = np.ascontiguousarray((cols @ w.reshape(self.out_channels, -1).T).reshape(
                x.shape[0], shape.out_h, shape.out_w, self.out_channels).transpose(0, 3, 1, 2))
        if "bias" in self.params:
            out = out + self.params["bias"][None, :, None, None]
        self._cache = (xp, cols, w, w_pat, expanded)
        return out

    def backward(self, dy, input_grad=True):
        if self._cache is None:
            raise StateError("conv backward called before forward")
        xp, cols, w, w_pat, expanded = self._cache
        if cols is None:
            cols = kernels.im2col(xp, self.kernel, self.kernel, self.stride)
        d2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        d_eff = (d2.T @ cols).reshape(w.shape)
        gw = d_eff if self.pattern is None else d_eff * self.pattern
        if expanded is not None:
            gw = gw * expanded
            self.mask_grad = self.grouping.reduce(d_eff * w_pat)
        else:
            self.mask_grad = None
        self.grads["weight"][...] = gw
        if "bias" in self.params:
            self.grads["bias"][...] = dy.sum(axis=(0, 2, 3))
        if not input_grad:
            return None
        dcols = d2 @ w.reshape(self.out_channels, -1)
        dxp = kernels.col2im(dcols, xp.shape, self.kernel, self.kernel, self.stride)
        p = self.padding
        return dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p] if p else dxp


class Affine(Layer):
    kind = "affine"

    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / in_features), (out_features, in_features))
        if bias:
            self.params["bias"] = np.zeros(out_features)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"affine expects (B, {self.in_features}), got {x.shape}", axis=1)
        self._x = x
        out = x @ self.params["weight"].T
        if "bias" in self.params:
            out = out + self.params["bias"]
        return out

    def backward(self, dy):
        if self._x is None:
            raise StateError("affine backward called before forward")
        self.grads["weight"][...] = dy.T @ self._x
        if "bias" in self.params:
            self.grads["bias"][...] = dy.sum(axis=0)
        return dy @ self.params["weight"]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return dy * self._mask


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, kernel=2, stride=None, padding=0):
        super().__init__()
        self.kernel = kernel
        self.stride = stride or kernel
        self.padding = padding

    def forward(self, x, train=False):
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
        out, arg = kernels.maxpool_forward(np.ascontiguousarray(xp), self.kernel, self.stride)
        self._cache = (xp.shape, arg)
        return out

    def backward(self, dy):
        shape, arg = self._cache
        dxp = kernels.maxpool_backward(np.ascontiguousarray(dy), arg, shape, self.kernel, self.stride)
        p = self.padding
        return dxp[:, :, p:shape[2] - p, p:shape[3] - p] if p else dxp


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        b, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None] / (h * w), self._shape).copy()


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Residual(Layer):
    """``body(x) + shortcut(x)``; an empty shortcut is the identity."""

    kind = "residual"

    def __init__(self, body, shortcut=()):
        super().__init__()
        self.body = list(body)
        self.shortcut = list(shortcut)

    def sublayers(self):
        return (("body", self.body), ("shortcut", self.shortcut))

    def forward(self, x, train=False):
        a = x
        for layer in self.body:
            a = layer.forward(a, train)
        s = x
        for layer in self.shortcut:
            s = layer.forward(s, train)
        if a.shape != s.shape:
            raise DimensionError(f"residual branches disagree: {a.shape} vs {s.shape}", axis="shape")
        return a + s

    def backward(self, dy):
        da = dy
        for layer in reversed(self.body):
            da = layer.backward(da)
        ds = dy
        for layer in reversed(self.shortcut):
            ds = layer.backward(ds)
        return da + ds


def _walk(layers, prefix):
    for i, layer in enumerate(layers):
        name = f"{prefix}{i}"
        yield name, layer
        for sub, group in layer.sublayers():
            yield from _walk(group, f"{name}.{sub}.")


class Network:
    """Ordered layer graph with a flat parameter registry."""

    def __init__(self, layers, num_classes=None):
        self.layers = list(layers)
        self.num_classes = num_classes
        self._last = None

    def named_layers(self):
        return list(_walk(self.layers, ""))

    def convs(self):
        return [(n, l) for n, l in self.named_layers() if l.kind == "conv"]

    def prunable(self):
        return [(n, l) for n, l in self.convs() if l.prunable]

    def bn_layers(self):
        return [(n, l) for n, l in self.named_layers() if l.kind == "bn"]

    def named_parameters(self, include_bn=True):
        """Yield ``(name, layer, key)`` for every learnable array."""
        for name, layer in self.named_layers():
            if layer.kind == "bn" and not include_bn:
                continue
            for key in layer.params:
                yield f"{name}.{key}", layer, key

    def parameters(self, include_bn=True):
        return {n: l.params[k] for n, l, k in self.named_parameters(include_bn)}

    def gradients(self, include_bn=True):
        return {n: l.grads[k] for n, l, k in self.named_parameters(include_bn)}

    def weight_parameters(self):
        return {n: l.params[k] for n, l, k in self.named_parameters() if l.kind != "bn"}

    def weight_gradients(self):
        return {n: l.grads[k] for n, l, k in self.named_parameters() if l.kind != "bn"}

    def bn_parameters(self):
        return {n: l.params[k] for n, l, k in self.named_parameters() if l.kind == "bn"}

    def bn_gradients(self):
        return {n: l.grads[k] for n, l, k in self.named_parameters() if l.kind == "bn"}

    def set_switch(self, n):
        for _, bn in self.bn_layers():
            bn.switch = n

    def set_group_masks(self, masks):
        """Install per-layer group masks (``None`` removes masking)."""
        for name, conv in self.prunable():
            conv.group_mask = None if masks is None else masks[name]

    def forward(self, x, train=False):
        a = x
        for layer in self.layers:
            a = layer.forward(a, train)
        self._last = (x, a)
        return a

    def backward(self, dlogits, input_grad=True):
        """Backpropagate; with ``input_grad=False`` a leading conv skips its input gradient."""
        if self._last is None:
            raise StateError("backward called before forward")
        d = dlogits
        first = self.layers[0]
        for layer in reversed(self.layers):
            if layer is first and not input_grad and layer.kind == "conv":
                layer.backward(d, input_grad=False)
                return None
            d = layer.backward(d)
        return d

    def predict(self, x, batch_size=512):
        outs = [self.forward(x[i:i + batch_size], train=False) for i in range(0, len(x), batch_size)]
        self._last = None
        return np.concatenate(outs) if outs else np.zeros((0, self.num_classes or 0))


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DimensionError(f"{len(self.x)} inputs but {len(self.y)} labels", axis=0)
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DimensionError(f"labels must lie in [0, {self.num_classes})", axis="label")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    b = len(labels)
    loss = -logp[np.arange(b), labels].mean()
    d = np.exp(logp)
    d[np.arange(b), labels] -= 1.0
    return float(loss), d / b


def backprop(net, batch):
    """Loss and gradients for the batch the network last ran forward on.

    Returns ``(loss, grads)``; ``grads`` maps parameter names to arrays and
    ``"mask:<layer>"`` to group-mask gradients for masked layers.
    """
    if net._last is None or net._last[0] is not batch.x:
        raise StateError("backprop requires a forward pass on this batch first")
    logits = net._last[1]
    loss, d = softmax_cross_entropy(logits, batch.y)
    net.backward(d)
    grads = dict(net.gradients())
    for name, conv in net.prunable():
        if conv.mask_grad is not None:
            grads[f"mask:{name}"] = conv.mask_grad
    return loss, grads


def sgd_step(params, grads, lr):
    """In-place ``θ ← θ − lr·g`` over aligned dictionaries."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}", axis=name)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}", name=name)
        if lr != 0:
            p -= lr * g
    return params
