"""Inference straight from a compact model.

A plan is built per (model, switch). Pruned convolutions keep their stored
values in compact order (four per kernel for patterns, ``rows`` per group
for blocks); a plan only adds the index table of groups alive at that switch.
"""
import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import arch, kernels
from .errors import DimensionError, RangeError
from .pruning import PATTERN_SIZE


@dataclass
class Op:
    kind: str
    name: str = ""
    args: dict = field(default_factory=dict)
    body: list = None
    shortcut: list = None
    work: int = 0               # multiplications per sample


@dataclass
class ExecutablePlan:
    switch: int
    ops: list
    input_shape: tuple
    eps: float

    def walk(self, ops=None):
        for op in self.ops if ops is None else ops:
            yield op
            if op.kind == "residual":
                yield from self.walk(op.body)
                yield from self.walk(op.shortcut)


class _CompactTables:
    """Per-model compact weight layout, shared by all plans of that model."""

    def __init__(self, model):
        self.values = {}
        self.meta = {}
        for name in model.layers:
            w = model.weights[f"{name}.weight"]
            codes = model.codes[name]
            stored = codes > 0
            if model.scheme == "pattern":
                ids = model.assignment.ids[name]
                out_idx, in_idx = np.nonzero(stored)
                pats = ids[stored]
                pos = model.assignment.library.positions[pats]
                flat = w.reshape(w.shape[0], w.shape[1], 9)[stored]
                self.values[name] = np.take_along_axis(flat, pos, axis=1).ravel()
                self.meta[name] = {"kout": out_idx, "kin": in_idx, "kpat": pats,
                                   "code": codes[stored].astype(np.int64)}
            else:
                part = model.grouping(name)
                rb, col = np.nonzero(stored)
                mat = w.reshape(part.row_blocks, part.rows, part.width)
                self.values[name] = mat[rb, :, col].ravel()
                self.meta[name] = {"grow": rb, "gcol": col, "rows": part.rows,
                                   "code": codes[stored].astype(np.int64)}
        self.offsets = None
        if model.scheme == "pattern":
            self.offsets = np.ascontiguousarray(model.assignment.library.offsets)


def _tables(model):
    tables = getattr(model, "_runtime_tables", None)
    if tables is None:
        tables = _CompactTables(model)
        model._runtime_tables = tables
    return tables


def build_plan(model, n):
    """Executable plan of switch ``n`` (1-based)."""
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= model.n_switches:
        raise RangeError(f"switch {n} outside 1..{model.n_switches}")
    tables = _tables(model)
    rows = iter(arch.layer_table(model.descriptor))
    ops = _plan_ops(model.descriptor["layers"], rows, model, tables, int(n))
    return ExecutablePlan(int(n), ops, tuple(model.descriptor["input"]), 1e-5)


def _plan_ops(specs, rows, model, tables, n):
    ops = []
    for spec in specs:
        row = next(rows)
        name, kind = row["name"], row["kind"]
        if kind == "conv":
            ls = row["layer_shape"]
            common = {"stride": ls.stride, "padding": ls.padding, "oh": ls.out_h, "ow": ls.out_w,
                      "kernel": ls.kernel_h, "out_channels": ls.out_channels,
                      "bias": model.weights.get(f"{name}.bias")}
            if name in model.layers:
                meta = tables.meta[name]
                alive = np.nonzero(meta["code"] >= n)[0]
                if model.scheme == "pattern":
                    args = dict(common, values=tables.values[name], kidx=alive, kout=meta["kout"],
                                kin=meta["kin"], kpat=meta["kpat"], offsets=tables.offsets)
                    ops.append(Op("conv_pattern", name, args, work=len(alive) * PATTERN_SIZE * ls.out_h * ls.out_w))
                else:
                    args = dict(common, values=tables.values[name], gidx=alive, grow=meta["grow"],
                                gcol=meta["gcol"], rows=meta["rows"])
                    ops.append(Op("conv_block", name, args, work=len(alive) * meta["rows"] * ls.out_h * ls.out_w))
            else:
                ops.append(Op("conv_dense", name, dict(common, weight=model.weights[f"{name}.weight"]),
                              work=ls.dense_macs))
        elif kind == "affine":
            ops.append(Op("affine", name, {"weight": model.weights[f"{name}.weight"],
                                           "bias": model.weights.get(f"{name}.bias")},
                          work=row["macs"]))
        elif kind == "bn":
            banks = model.bn[name]
            ops.append(Op("bn", name, {key: banks[key][n - 1] for key in banks}))
        elif kind == "maxpool":
            k = spec.get("kernel", 2)
            ops.append(Op("maxpool", name, {"kernel": k, "stride": spec.get("stride") or k,
                                            "padding": spec.get("padding", 0)}))
        elif kind == "residual":
            body = _plan_ops(spec["body"], rows, model, tables, n)
            shortcut = _plan_ops(spec.get("shortcut", []), rows, model, tables, n)
            ops.append(Op("residual", name, body=body, shortcut=shortcut))
        else:
            ops.append(Op(kind, name))
    return ops


def count_work(plan):
    """Multiplications executed per input sample."""
    return sum(op.work for op in plan.walk())


def _pad(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _run(ops, x, dtype, eps):
    for op in ops:
        a = op.args
        if op.kind == "conv_pattern":
            xp = np.ascontiguousarray(_pad(x, a["padding"]))
            x = kernels.pattern_conv(xp, a["values"].astype(dtype), a["kidx"], a["kout"], a["kin"], a["kpat"],
                                     a["offsets"], a["out_channels"], a["stride"], a["oh"], a["ow"])
        elif op.kind == "conv_block":
            xp = np.ascontiguousarray(_pad(x, a["padding"]))
            k = a["kernel"]
            cols = kernels.im2col(xp, k, k, a["stride"])
            b = x.shape[0]
            cols = np.ascontiguousarray(cols.reshape(b, a["oh"] * a["ow"], -1).transpose(0, 2, 1))
            out = kernels.block_matmul(cols, a["values"].astype(dtype), a["gidx"], a["grow"], a["gcol"],
                                       a["rows"], a["out_channels"])
            x = out.reshape(b, a["out_channels"], a["oh"], a["ow"])
        elif op.kind == "conv_dense":
            xp = np.ascontiguousarray(_pad(x, a["padding"]))
            k = a["kernel"]
            cols = kernels.im2col(xp, k, k, a["stride"])
            w = a["weight"].astype(dtype).reshape(a["out_channels"], -1)
            x = np.ascontiguousarray((cols @ w.T).reshape(x.shape[0], a["oh"], a["ow"], -1).transpose(0, 3, 1, 2))
        elif op.kind == "affine":
            x = x @ a["weight"].astype(dtype).T
        elif op.kind == "bn":
            bc = (None, slice(None), None, None) if x.ndim == 4 else (None, slice(None))
            inv = (1.0 / np.sqrt(a["running_var"] + eps)).astype(dtype)
            x = (x - a["running_mean"].astype(dtype)[bc]) * inv[bc] * a["gamma"].astype(dtype)[bc] \
                + a["beta"].astype(dtype)[bc]
        elif op.kind == "relu":
            x = np.maximum(x, 0)
        elif op.kind == "maxpool":
            xp = np.ascontiguousarray(_pad(x, a["padding"], -np.inf))
            x, _ = kernels.maxpool_forward(xp, a["kernel"], a["stride"])
        elif op.kind == "gap":
            x = x.mean(axis=(2, 3))
        elif op.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif op.kind == "residual":
            x = _run(op.body, x, dtype, eps) + _run(op.shortcut, x, dtype, eps)
        if op.kind in ("conv_pattern", "conv_block", "conv_dense", "affine") and a.get("bias") is not None:
            bias = a["bias"].astype(dtype)
            x = x + (bias[None, :, None, None] if x.ndim == 4 else bias)
    return x


def infer(plan, x, check=True):
    """Logits for a (B, C, H, W) batch. ``check=True`` runs in float64, otherwise float32."""
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != plan.input_shape:
        raise DimensionError(f"input {x.shape} does not match model input {plan.input_shape}", axis="input")
    dtype = np.float64 if check else np.float32
    return _run(plan.ops, x.astype(dtype), dtype, plan.eps)


def benchmark(model, x, repetitions=20, check=False, switches=None):
    """Median wall time per switch; rows of (switch, repetitions, median_ns, macs)."""
    rows = []
    for n in switches or range(1, model.n_switches + 1):
        plan = build_plan(model, n)
        infer(plan, x[:1], check)                  # compile / warm caches
        times = []
        for _ in range(repetitions):
            t = time.perf_counter_ns()
            infer(plan, x, check)
            times.append(time.perf_counter_ns() - t)
        rows.append({"switch": n, "repetitions": repetitions, "median_ns": int(statistics.median(times)),
                     "macs": count_work(plan)})
    return rows


BENCH_COLUMNS = ("switch", "repetitions", "median_ns", "macs")


def write_benchmark_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)


__all__ = ["ExecutablePlan", "Op", "build_plan", "count_work", "infer", "benchmark", "write_benchmark_csv"]
