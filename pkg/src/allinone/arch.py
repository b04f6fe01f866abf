"""Architecture descriptors.

A descriptor is a JSON-compatible dict::

    {"name": "lenet", "input": [1, 28, 28], "num_classes": 10,
     "layers": [{"type": "conv", "out": 8, "kernel": 3, "padding": 1}, {"type": "bn"}, ...]}

Layer types: conv, affine, bn, relu, maxpool, gap, flatten, residual
(``body`` and optional ``shortcut`` lists). Channel counts are inferred.
Every conv except the first is prunable unless it says ``"prunable": false``;
affine layers are never pruned.
"""
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .bn import SwitchableBatchNorm
from .errors import ConfigError
from .nn import (Affine, Conv2d, Flatten, GlobalAvgPool, LayerShape, MaxPool2d, Network, ReLU,
                 Residual, conv_out_size)

_KEYS = {
    "conv": {"type", "out", "kernel", "stride", "padding", "bias", "prunable"},
    "affine": {"type", "out", "bias"},
    "bn": {"type"},
    "relu": {"type"},
    "maxpool": {"type", "kernel", "stride", "padding"},
    "gap": {"type"},
    "flatten": {"type"},
    "residual": {"type", "body", "shortcut"},
}

BUNDLED = ("lenet", "mini_resnet", "resnet18")


def load_descriptor(name_or_path):
    """Bundled descriptor by name, a path to a JSON file, or a dict passed through."""
    if isinstance(name_or_path, dict):
        return name_or_path
    if name_or_path in BUNDLED:
        text = resources.files("allinone.fixtures").joinpath(f"{name_or_path}.json").read_text("utf-8")
        return json.loads(text)
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"unknown architecture descriptor {name_or_path!r}")
    return json.loads(path.read_text("utf-8"))


def dumps(descriptor):
    """Canonical UTF-8 encoding used inside compact model files."""
    return json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _check(spec, where):
    kind = spec.get("type")
    if kind not in _KEYS:
        raise ConfigError(f"{where}: unknown layer type {kind!r}")
    extra = set(spec) - _KEYS[kind]
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)} for {kind}")
    return kind


def _walk(layers, shape, prefix, state, rows):
    """Shape inference; appends one row per layer. ``shape`` is (C, H, W) or (F,)."""
    for i, spec in enumerate(layers):
        name = f"{prefix}{i}"
        kind = _check(spec, name)
        row = {"name": name, "kind": kind, "in_shape": shape, "params": 0, "macs": 0}
        if kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"{name}: conv needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            k = spec["kernel"]
            stride = spec.get("stride", 1)
            pad = spec.get("padding", 0)
            oh, ow = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
            if oh < 1 or ow < 1:
                raise ConfigError(f"{name}: output size collapses to {oh}x{ow}")
            first = not state["seen_conv"]
            state["seen_conv"] = True
            prunable = spec.get("prunable", not first)
            if first and spec.get("prunable", False):
                raise ConfigError(f"{name}: the first conv layer is never pruned")
            ls = LayerShape(spec["out"], c, k, k, oh, ow, stride, pad)
            bias = spec.get("bias", False)
            row.update(layer_shape=ls, prunable=prunable, bias=bias,
                       params=spec["out"] * c * k * k + (spec["out"] if bias else 0),
                       macs=ls.dense_macs)
            shape = (spec["out"], oh, ow)
        elif kind == "affine":
            if len(shape) != 1:
                raise ConfigError(f"{name}: affine needs a flat input, add a flatten or gap layer")
            bias = spec.get("bias", True)
            row.update(in_features=shape[0], out_features=spec["out"], bias=bias,
                       params=spec["out"] * shape[0] + (spec["out"] if bias else 0),
                       macs=spec["out"] * shape[0])
            shape = (spec["out"],)
        elif kind == "bn":
            row.update(channels=shape[0], params=2 * shape[0])
        elif kind == "maxpool":
            c, h, w = shape
            k = spec.get("kernel", 2)
            stride = spec.get("stride", k)
            pad = spec.get("padding", 0)
            shape = (c, conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad))
        elif kind == "gap":
            shape = (shape[0],)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "residual":
            rows.append(row)
            body_shape = _walk(spec["body"], shape, f"{name}.body.", state, rows)
            short_shape = _walk(spec.get("shortcut", []), shape, f"{name}.shortcut.", state, rows)
            if body_shape != short_shape:
                raise ConfigError(f"{name}: residual branches disagree: {body_shape} vs {short_shape}")
            row["out_shape"] = body_shape
            shape = body_shape
            continue
        row["out_shape"] = shape
        rows.append(row)
    return shape


def layer_table(descriptor):
    """Per-layer rows (name, kind, shapes, params, dense MACs) in network order."""
    descriptor = load_descriptor(descriptor)
    extra = set(descriptor) - {"name", "input", "num_classes", "layers"}
    if extra:
        raise ConfigError(f"descriptor has unknown keys {sorted(extra)}")
    rows = []
    out = _walk(descriptor["layers"], tuple(descriptor["input"]), "", {"seen_conv": False}, rows)
    if out != (descriptor["num_classes"],):
        raise ConfigError(f"network output shape {out} does not match num_classes {descriptor['num_classes']}")
    return rows


def dense_macs(descriptor):
    return sum(row["macs"] for row in layer_table(descriptor))


def _build(layers, rows, n_switches, rng, method):
    built = []
    for spec in layers:
        row = next(rows)
        kind = row["kind"]
        if kind == "conv":
            ls = row["layer_shape"]
            layer = Conv2d(ls.in_channels, ls.out_channels, ls.kernel_h, ls.stride, ls.padding,
                           bias=row["bias"], prunable=row["prunable"], rng=rng, method=method)
        elif kind == "affine":
            layer = Affine(row["in_features"], row["out_features"], bias=row["bias"], rng=rng)
        elif kind == "bn":
            layer = SwitchableBatchNorm(row["channels"], n_switches)
        elif kind == "relu":
            layer = ReLU()
        elif kind == "maxpool":
            layer = MaxPool2d(spec.get("kernel", 2), spec.get("stride"), spec.get("padding", 0))
        elif kind == "gap":
            layer = GlobalAvgPool()
        elif kind == "flatten":
            layer = Flatten()
        else:
            body = _build(spec["body"], rows, n_switches, rng, method)
            shortcut = _build(spec.get("shortcut", []), rows, n_switches, rng, method)
            layer = Residual(body, shortcut)
        built.append(layer)
    return built


def build_network(descriptor, n_switches=1, seed=0, method="gemm"):
    descriptor = load_descriptor(descriptor)
    rows = iter(layer_table(descriptor))
    rng = np.random.default_rng(seed)
    return Network(_build(descriptor["layers"], rows, n_switches, rng, method),
                   num_classes=descriptor["num_classes"])
