"""Compact model files and memory accounting.

Only the largest compact model is written: weights of groups that survive the
lowest threshold, the low-bit re-scaled mask that tells which switch each of
them belongs to, the thresholds and one BN bank per switch. The byte layout
is described in ``docs/format.md``.
"""
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import arch
from .bn import bn_param_count
from .errors import ChecksumError, FormatError, MagicError, VersionError
from .pruning import (PATTERN_SIZE, BlockPartition, KernelGrouping, PatternAssignment, PatternLibrary,
                      RescaledMask, code_bits, partition_blocks, rescale_mask)

MAGIC = b"AIO1"
VERSION = 1
SCHEMES = {"pattern": 0, "block": 1}
_HEADER = struct.Struct("<4sHBB")
_SECTION = struct.Struct("<4sI")
_SECTION_ORDER = (b"META", b"MASK", b"PATT", b"WGHT", b"BNRM")


@dataclass
class CompactModel:
    """Decoded compact model.

    ``weights`` holds full-shaped float64 arrays with omitted groups zeroed;
    only the stored entries travel through the file.
    """

    scheme: str
    thresholds: np.ndarray
    descriptor: dict
    layers: dict                  # pruned layer name -> (block_rows, block_cols) or None for patterns
    codes: RescaledMask
    weights: dict                 # parameter name -> array
    bn: dict                      # bn layer name -> dict of (N, C) arrays
    assignment: PatternAssignment = None
    meta: dict = field(default_factory=dict)

    @property
    def n_switches(self):
        return len(self.thresholds)

    def grouping(self, name):
        shape = self.weights[f"{name}.weight"].shape
        if self.scheme == "pattern":
            return KernelGrouping(shape)
        rows, cols = self.layers[name]
        return BlockPartition(tuple(shape), rows, cols, name)

    def pattern(self, name):
        return None if self.assignment is None else self.assignment.layer_mask(name)

    def hard_mask(self, n):
        return self.codes.decode(n)

    def network(self, method="gemm"):
        """A :class:`~allinone.nn.Network` carrying the stored weights, patterns and BN banks."""
        net = arch.build_network(self.descriptor, self.n_switches, method=method)
        for pname, arr in net.parameters(include_bn=False).items():
            arr[...] = self.weights[pname]
        for name, bn in net.bn_layers():
            banks = self.bn[name]
            bn.params["gamma"][...] = banks["gamma"]
            bn.params["beta"][...] = banks["beta"]
            bn.running_mean[...] = banks["running_mean"]
            bn.running_var[...] = banks["running_var"]
        for name, conv in net.convs():
            conv.prunable = name in self.layers
            if conv.prunable:
                conv.grouping = self.grouping(name)
                conv.pattern = self.pattern(name)
        return net


def from_state(state):
    """Build a :class:`CompactModel` from a trained :class:`~allinone.trainer.TrainState`.

    Weights are taken at float32 precision, which is what the file stores.
    """
    net = state.net
    codes = rescale_mask(state.scores, state.thresholds)
    layers = {}
    for name, conv in net.prunable():
        g = conv.grouping
        layers[name] = (g.rows, g.cols) if isinstance(g, BlockPartition) else None
    weights = {}
    for pname, arr in net.parameters(include_bn=False).items():
        weights[pname] = arr.astype(np.float32).astype(np.float64)
    for name in layers:
        conv = dict(net.prunable())[name]
        keep = conv.grouping.expand(codes[name] > 0)
        if conv.pattern is not None:
            keep = keep * conv.pattern
        weights[f"{name}.weight"] = weights[f"{name}.weight"] * keep
    bn = {}
    for name, layer in net.bn_layers():
        bn[name] = {k: v.astype(np.float32).astype(np.float64) for k, v in
                    (("gamma", layer.params["gamma"]), ("beta", layer.params["beta"]),
                     ("running_mean", layer.running_mean), ("running_var", layer.running_var))}
    assignment = None
    if state.config.scheme == "pattern" and state.assignment is not None:
        ids = {k: v for k, v in state.assignment.ids.items() if k in layers}
        assignment = PatternAssignment(state.assignment.library, ids)
    thresholds = np.asarray(list(state.thresholds), dtype=np.float32).astype(np.float64)
    return CompactModel(state.config.scheme, thresholds, state.descriptor, layers, codes, weights, bn,
                        assignment)


# encoding ------------------------------------------------------------------

def _section(tag, payload):
    return _SECTION.pack(tag, len(payload)) + payload


def _f32(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _pattern_values(weight, ids, library, stored):
    """Four values per stored kernel, in the pattern's position order."""
    flat = weight.reshape(weight.shape[0], weight.shape[1], 9)
    pos = library.positions[ids[stored]]                          # (S, 4)
    return np.take_along_axis(flat[stored], pos, axis=1)


def _block_values(weight, part, stored):
    """``rows`` values per stored (row block, column) group, top to bottom."""
    mat = weight.reshape(part.row_blocks, part.rows, part.width)
    rb, col = np.nonzero(stored)
    return mat[rb, :, col]                                       # (S, rows)


def _param_order(model):
    net = arch.build_network(model.descriptor, model.n_switches)
    return list(net.parameters(include_bn=False)), [n for n, _ in net.bn_layers()]


def dumps(model):
    """Serialize to bytes."""
    names, bn_names = _param_order(model)
    pruned = list(model.layers)
    out = bytearray(_HEADER.pack(MAGIC, VERSION, SCHEMES[model.scheme], model.n_switches))
    out += _f32(model.thresholds)
    desc = arch.dumps(model.descriptor)
    out += struct.pack("<I", len(desc)) + desc

    meta = {"layers": [[n, list(model.layers[n]) if model.layers[n] else None] for n in pruned]}
    out += _section(b"META", json.dumps(meta, separators=(",", ":")).encode("utf-8"))
    out += _section(b"MASK", model.codes.pack(pruned))

    patt = b""
    if model.scheme == "pattern":
        lib = model.assignment.library
        patt = struct.pack("<B", len(lib)) + lib.positions.astype(np.uint8).tobytes()
        for n in pruned:
            stored = model.codes[n] > 0
            patt += model.assignment.ids[n][stored].astype(np.uint8).tobytes()
    out += _section(b"PATT", patt)

    wparts = []
    for pname in names:
        layer = pname.rsplit(".", 1)[0]
        arr = model.weights[pname]
        if layer in model.layers and pname.endswith(".weight"):
            stored = model.codes[layer] > 0
            if model.scheme == "pattern":
                arr = _pattern_values(arr, model.assignment.ids[layer], model.assignment.library, stored)
            else:
                arr = _block_values(arr, model.grouping(layer), stored)
        wparts.append(_f32(arr.ravel()))
    out += _section(b"WGHT", b"".join(wparts))

    bparts = []
    for name in bn_names:
        banks = model.bn[name]
        for key in ("gamma", "beta", "running_mean", "running_var"):
            bparts.append(_f32(banks[key]))
    out += _section(b"BNRM", b"".join(bparts))
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save(model, path):
    data = dumps(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


# decoding ------------------------------------------------------------------

class _Reader:
    def __init__(self, data, pos=0):
        self.data = data
        self.pos = pos

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"file ends inside a field at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def f32(self, count):
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def loads(data):
    """Parse bytes into a :class:`CompactModel`; validates everything before returning."""
    data = bytes(data)
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise MagicError(f"not a compact model file (magic {data[:4]!r})")
    if len(data) < _HEADER.size + 4:
        raise FormatError("file too short")
    crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("CRC-32 mismatch, file is corrupted")
    r = _Reader(data[:-4])
    _, version, scheme_id, n = r.unpack(_HEADER)
    if version != VERSION:
        raise VersionError(f"unsupported format version {version} (expected {VERSION})")
    schemes = {v: k for k, v in SCHEMES.items()}
    if scheme_id not in schemes:
        raise FormatError(f"unknown scheme id {scheme_id}")
    scheme = schemes[scheme_id]
    thresholds = r.f32(n)
    (dlen,) = r.unpack(struct.Struct("<I"))
    descriptor = json.loads(r.take(dlen).decode("utf-8"))

    sections = {}
    for tag in _SECTION_ORDER:
        got, length = r.unpack(_SECTION)
        if got != tag:
            raise FormatError(f"expected section {tag!r}, found {got!r}")
        sections[tag] = r.take(length)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes before the checksum")

    meta = json.loads(sections[b"META"].decode("utf-8"))
    layers = {name: tuple(v) if v else None for name, v in meta["layers"]}
    net = arch.build_network(descriptor, n)
    params = net.parameters(include_bn=False)
    shapes = {}
    for name in layers:
        w = params[f"{name}.weight"]
        if scheme == "pattern":
            shapes[name] = KernelGrouping(w.shape).group_shape
        else:
            shapes[name] = partition_blocks(w.shape, *layers[name], name).group_shape
    codes = RescaledMask.unpack(sections[b"MASK"], shapes, n)
    expected_mask = (sum(int(np.prod(s)) for s in shapes.values()) * code_bits(n) + 7) // 8
    if len(sections[b"MASK"]) != expected_mask:
        raise FormatError(f"mask section has {len(sections[b'MASK'])} bytes, expected {expected_mask}")
    if any(int(c.max(initial=0)) > n for c in codes.values()):
        raise FormatError("mask code exceeds the switch count")

    assignment = None
    if scheme == "pattern":
        pr = _Reader(sections[b"PATT"])
        (k,) = pr.unpack(struct.Struct("<B"))
        library = PatternLibrary(np.frombuffer(pr.take(k * PATTERN_SIZE), dtype=np.uint8))
        if library.positions.size and library.positions.max() > 8:
            raise FormatError("pattern position outside the 3x3 grid")
        ids = {}
        for name, shape in shapes.items():
            stored = codes[name] > 0
            got = np.frombuffer(pr.take(int(stored.sum())), dtype=np.uint8).astype(np.int64)
            if got.size and got.max() >= k:
                raise FormatError(f"pattern id out of range in layer {name}")
            full = np.zeros(shape, dtype=np.int64)
            full[stored] = got
            ids[name] = full
        if pr.pos != len(pr.data):
            raise FormatError("trailing bytes in pattern section")
        assignment = PatternAssignment(library, ids)

    wr = _Reader(sections[b"WGHT"])
    weights = {}
    for pname, arr in params.items():
        layer = pname.rsplit(".", 1)[0]
        if layer in layers and pname.endswith(".weight"):
            stored = codes[layer] > 0
            full = np.zeros(arr.shape)
            if scheme == "pattern":
                vals = wr.f32(int(stored.sum()) * PATTERN_SIZE).reshape(-1, PATTERN_SIZE)
                flat = full.reshape(arr.shape[0], arr.shape[1], 9)
                pos = assignment.library.positions[assignment.ids[layer][stored]]
                sub = np.zeros((len(vals), 9))
                np.put_along_axis(sub, pos, vals, axis=1)
                flat[stored] = sub
            else:
                part = partition_blocks(arr.shape, *layers[layer], layer)
                vals = wr.f32(int(stored.sum()) * part.rows).reshape(-1, part.rows)
                mat = full.reshape(part.row_blocks, part.rows, part.width)
                rb, col = np.nonzero(stored)
                mat[rb, :, col] = vals
            weights[pname] = full
        else:
            weights[pname] = wr.f32(arr.size).reshape(arr.shape)
    if wr.pos != len(wr.data):
        raise FormatError("weight section size does not match the descriptor and mask")

    br = _Reader(sections[b"BNRM"])
    bn = {}
    for name, layer in net.bn_layers():
        c = layer.channels
        bn[name] = {key: br.f32(n * c).reshape(n, c) for key in ("gamma", "beta", "running_mean", "running_var")}
    if br.pos != len(br.data):
        raise FormatError("BN section size does not match the descriptor")
    return CompactModel(scheme, thresholds, descriptor, layers, codes, weights, bn, assignment,
                        meta={"size": len(data)})


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


# memory accounting ---------------------------------------------------------

@dataclass
class MemoryReport:
    """Bit counts per line item against a dense 32-bit model with one BN set."""

    dense_bits: int
    weight_bits: float
    mask_bits: int
    threshold_bits: int
    bn_bits: int
    extra_bn_bits: int
    stats_bits: int              # running statistics, reported separately
    group_count: int

    @property
    def total_bits(self):
        return self.weight_bits + self.mask_bits + self.threshold_bits + self.bn_bits

    @property
    def extra_bits(self):
        return self.mask_bits + self.threshold_bits + self.extra_bn_bits

    @property
    def extra_fraction(self):
        return self.extra_bits / self.dense_bits

    @property
    def mask_fraction(self):
        return self.mask_bits / self.dense_bits

    @property
    def extra_bn_fraction(self):
        return self.extra_bn_bits / self.dense_bits

    @property
    def saving(self):
        return 1.0 - self.total_bits / self.dense_bits

    def rows(self):
        return [
            ("weights", self.weight_bits / 8),
            ("mask", self.mask_bits / 8),
            ("thresholds", self.threshold_bits / 8),
            ("bn learnables", self.bn_bits / 8),
            ("bn running stats", self.stats_bits / 8),
        ]


def prunable_group_count(descriptor, scheme="pattern", block_rows=4, block_cols=16):
    count = 0
    for row in arch.layer_table(descriptor):
        if row["kind"] != "conv" or not row["prunable"]:
            continue
        ls = row["layer_shape"]
        if scheme == "pattern":
            if (ls.kernel_h, ls.kernel_w) == (3, 3):
                count += ls.out_channels * ls.in_channels
        else:
            count += partition_blocks(ls, block_rows, block_cols, row["name"]).group_count
    return count


def memory_report(descriptor, n_switches=3, scheme="pattern", compression=0.0, block_rows=4, block_cols=16):
    """Memory of the stored artifact.

    ``compression`` is the fraction of non-BN weights removed in the largest
    compact model. Weights, thresholds and BN learnables are 32-bit; the mask
    uses ``code_bits(n_switches)`` bits per prunable group. A single switch
    with nothing removed needs neither mask nor thresholds.
    """
    bn = bn_param_count(descriptor, n_switches)
    dense_params = bn["total_params"]
    weight_params = dense_params - bn["learnable_per_switch"]
    groups = prunable_group_count(descriptor, scheme, block_rows, block_cols)
    unpruned = n_switches == 1 and compression == 0
    mask_bits = 0 if unpruned else groups * code_bits(n_switches)
    threshold_bits = 0 if unpruned else 32 * n_switches
    return MemoryReport(
        dense_bits=32 * dense_params,
        weight_bits=32 * (1.0 - compression) * weight_params,
        mask_bits=mask_bits,
        threshold_bits=threshold_bits,
        bn_bits=32 * bn["learnable_per_switch"] * n_switches,
        extra_bn_bits=32 * bn["extra_learnable"],
        stats_bits=32 * bn["stats_per_switch"] * n_switches,
        group_count=groups,
    )


def stored_model_counts(n_switches):
    """Stored (models, masks) for N sparsity levels under three storage strategies."""
    return {
        "all-in-one": (1, 1),
        "multiple models": (n_switches, 0),
        "mask per switch": (1, n_switches),
    }


# training checkpoints --------------------------------------------------------

def save_checkpoint(state, path):
    """Full-precision training state (weights, scores, BN banks, patterns) as ``.npz``."""
    arrays = {
        "config": np.array(json.dumps(state.config.to_dict())),
        "descriptor": np.array(arch.dumps(state.descriptor).decode("utf-8")),
        "thresholds": np.asarray(list(state.thresholds)),
        "counters": np.array([state.epoch, state.iteration]),
    }
    for pname, arr in state.net.parameters(include_bn=False).items():
        arrays[f"param/{pname}"] = arr
    for name, layer in state.net.bn_layers():
        arrays[f"bn/{name}/gamma"] = layer.params["gamma"]
        arrays[f"bn/{name}/beta"] = layer.params["beta"]
        arrays[f"bn/{name}/running_mean"] = layer.running_mean
        arrays[f"bn/{name}/running_var"] = layer.running_var
    if state.scores is not None:
        for name, s in state.scores.items():
            arrays[f"score/{name}"] = s
    if state.assignment is not None:
        arrays["pattern/library"] = state.assignment.library.positions
        for name, ids in state.assignment.ids.items():
            arrays[f"pattern/{name}"] = ids
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Rebuild a :class:`~allinone.trainer.TrainState` saved by :func:`save_checkpoint`."""
    from .objective import MacsAccount
    from .pruning import SoftMask, apply_pattern_assignment, attach_block_partitions, attach_kernel_grouping
    from .trainer import TrainConfig, init_state

    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    with z:
        config = TrainConfig(**json.loads(str(z["config"])))
        descriptor = json.loads(str(z["descriptor"]))
        state = init_state(config, descriptor)
        state.epoch, state.iteration = (int(v) for v in z["counters"])
        net = state.net
        for pname, arr in net.parameters(include_bn=False).items():
            arr[...] = z[f"param/{pname}"]
        for name, layer in net.bn_layers():
            layer.params["gamma"][...] = z[f"bn/{name}/gamma"]
            layer.params["beta"][...] = z[f"bn/{name}/beta"]
            layer.running_mean[...] = z[f"bn/{name}/running_mean"]
            layer.running_var[...] = z[f"bn/{name}/running_var"]
        scores = {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("score/")}
        if not scores:
            return state
        if config.scheme == "pattern":
            attach_kernel_grouping(net)
            library = PatternLibrary(z["pattern/library"])
            ids = {k.split("/", 1)[1]: z[k].copy() for k in z.files
                   if k.startswith("pattern/") and k != "pattern/library"}
            state.assignment = PatternAssignment(library, ids)
            apply_pattern_assignment(net, state.assignment)
        else:
            overrides = {k: tuple(v) for k, v in config.block_overrides.items()}
            attach_block_partitions(net, config.block_rows, config.block_cols, overrides)
        state.scores = SoftMask(scores)
        state.account = MacsAccount(net, descriptor)
        state.targets = [int(round(f * state.account.reference)) for f in config.targets]
    return state
