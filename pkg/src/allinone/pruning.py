"""Soft masks, threshold binarization, pattern and block groupings, low-bit mask codes."""
import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

PATTERN_SIZE = 4


# groupings -----------------------------------------------------------------

class KernelGrouping:
    """One group per (output, input) kernel."""

    scheme = "pattern"

    def __init__(self, weight_shape):
        self.weight_shape = tuple(weight_shape)
        o, i = self.weight_shape[:2]
        self.group_shape = (o, i)

    @property
    def group_count(self):
        return self.group_shape[0] * self.group_shape[1]

    def expand(self, mask):
        return np.broadcast_to(mask[:, :, None, None], self.weight_shape)

    def reduce(self, arr):
        return arr.sum(axis=(2, 3))

    def weights_per_group(self, pattern=None):
        kh, kw = self.weight_shape[2:]
        if pattern is None:
            return np.full(self.group_shape, kh * kw, dtype=np.int64)
        return pattern.sum(axis=(2, 3)).astype(np.int64)


@dataclass(frozen=True)
class BlockPartition:
    """Equal-sized blocks over the O×(I·H·W) weight matrix.

    Blocks are ``rows`` output channels by ``cols`` matrix columns; there is
    one group per (row block, matrix column), so a block holds ``cols`` groups.
    """

    weight_shape: tuple
    rows: int
    cols: int
    name: str = ""

    scheme = "block"

    @property
    def out_channels(self):
        return self.weight_shape[0]

    @property
    def width(self):
        return int(np.prod(self.weight_shape[1:]))

    @property
    def row_blocks(self):
        return self.out_channels // self.rows

    @property
    def block_count(self):
        return self.row_blocks * (self.width // self.cols)

    @property
    def group_shape(self):
        return (self.row_blocks, self.width)

    @property
    def group_count(self):
        return self.row_blocks * self.width

    def block_of(self, row_block, column):
        return row_block * (self.width // self.cols) + column // self.cols

    def expand(self, mask):
        return np.repeat(mask, self.rows, axis=0).reshape(self.weight_shape)

    def reduce(self, arr):
        return arr.reshape(self.row_blocks, self.rows, self.width).sum(axis=1)

    def weights_per_group(self, pattern=None):
        return np.full(self.group_shape, self.rows, dtype=np.int64)


def partition_blocks(shape, block_rows, block_cols, name=""):
    """Block partition for a conv layer; sizes must divide the matrix exactly."""
    weight_shape = shape.weight_shape if hasattr(shape, "weight_shape") else tuple(shape)
    o = weight_shape[0]
    width = int(np.prod(weight_shape[1:]))
    if block_rows < 1 or o % block_rows:
        raise ConfigError(f"layer {name or weight_shape}: block rows {block_rows} do not divide {o} outputs")
    if block_cols < 1 or width % block_cols:
        raise ConfigError(f"layer {name or weight_shape}: block columns {block_cols} do not divide width {width}")
    return BlockPartition(tuple(weight_shape), block_rows, block_cols, name)


# thresholds and masks --------------------------------------------------------

class ThresholdSet:
    """Strictly ascending thresholds in (0, 1); index n-1 belongs to switch n."""

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or len(values) == 0:
            raise ConfigError("need at least one threshold")
        if np.any(values <= 0) or np.any(values >= 1):
            raise ConfigError(f"thresholds must lie in (0, 1): {values.tolist()}")
        if np.any(np.diff(values) <= 0):
            raise ConfigError(f"thresholds must be strictly ascending: {values.tolist()}")
        self.values = values

    @classmethod
    def evenly_spaced(cls, n):
        if n == 1:
            return cls([0.5])
        return cls(0.5 + 0.4 * np.arange(n) / (n - 1))

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return float(self.values[i])

    def __iter__(self):
        return iter(self.values.tolist())

    def __repr__(self):
        return f"ThresholdSet({self.values.tolist()})"


class SoftMask(dict):
    """Per-layer score arrays, one score per prunable group, shared by all switches."""

    @classmethod
    def initialize(cls, group_shapes, low, high=1.0, seed=0):
        rng = np.random.default_rng(seed)
        return cls({name: rng.uniform(low, high, shape) for name, shape in group_shapes.items()})

    def clip_(self):
        for s in self.values():
            np.clip(s, 0.0, 1.0, out=s)
        return self

    def copy(self):
        return SoftMask({k: v.copy() for k, v in self.items()})

    @property
    def size(self):
        return sum(v.size for v in self.values())


def binarize(scores, thres):
    """Hard mask: 1 where score >= thres. Accepts an array or a per-layer dict."""
    if isinstance(scores, dict):
        return {name: binarize(s, thres) for name, s in scores.items()}
    return (np.asarray(scores) >= thres).astype(np.float64)


def ste_backward(upstream):
    """Straight-through estimator: the hard-mask gradient passes to the scores unchanged."""
    return upstream


def hard_masks(scores, thresholds):
    return [binarize(scores, t) for t in thresholds]


# kernel patterns -------------------------------------------------------------

@dataclass
class PatternLibrary:
    """``positions`` is (K, 4) flat indices into the 3×3 grid, each row sorted."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, PATTERN_SIZE)

    def __len__(self):
        return len(self.positions)

    @property
    def offsets(self):
        """(K, 4, 2) (dy, dx) offsets."""
        return np.stack(np.divmod(self.positions, 3), axis=-1)

    def masks(self):
        m = np.zeros((len(self), 9))
        np.put_along_axis(m, self.positions, 1.0, axis=1)
        return m.reshape(-1, 3, 3)


@dataclass
class PatternAssignment:
    library: PatternLibrary
    ids: dict            # layer name -> (O, I) pattern ids

    def layer_mask(self, name):
        return self.library.masks()[self.ids[name]]


def top4_sets(kernels):
    """Top-4 magnitude positions per kernel; magnitude ties go to the lower position."""
    flat = np.abs(kernels.reshape(-1, 9))
    order = np.argsort(-flat, axis=1, kind="stable")[:, :PATTERN_SIZE]
    return np.sort(order, axis=1)


def assign_patterns(weights, library_size=8):
    """Build a pattern library from the most frequent top-4 sets and assign one pattern per kernel.

    ``weights`` maps layer names to (O, I, kh, kw) arrays; layers without 3×3
    kernels are skipped. Each kernel gets the library pattern retaining the
    most |weight| mass (lowest library index on ties).
    """
    eligible = {}
    for name, w in weights.items():
        if w.shape[2:] != (3, 3):
            log.info("layer %s has %sx%s kernels; skipped for pattern pruning", name, *w.shape[2:])
            continue
        eligible[name] = w
    if not eligible:
        return PatternAssignment(PatternLibrary(np.zeros((0, PATTERN_SIZE))), {})
    counts = Counter()
    for w in eligible.values():
        counts.update(map(tuple, top4_sets(w).tolist()))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    library = PatternLibrary(np.array([k for k, _ in ranked[:library_size]]))
    onehot = library.masks().reshape(len(library), 9)
    ids = {}
    for name, w in eligible.items():
        mass = np.abs(w.reshape(-1, 9)) @ onehot.T
        ids[name] = mass.argmax(axis=1).reshape(w.shape[:2])
    return PatternAssignment(library, ids)


# low-bit re-scaled mask ------------------------------------------------------

def code_bits(n_switches):
    """Bits per group code: categories are 'not stored' plus values 0..N-1."""
    return max(1, math.ceil(math.log2(n_switches + 1)))


class RescaledMask(dict):
    """Per-layer int8 codes: 0 = below every threshold (not stored), v+1 otherwise.

    ``v`` counts the thresholds a score meets minus one, so ``v = N-1`` marks
    groups kept by the sparsest switch.
    """

    def __init__(self, codes, n_switches):
        super().__init__(codes)
        self.n_switches = n_switches

    def values_of(self, name):
        """Stored values v for the groups that are stored, row-major order."""
        c = self[name].ravel()
        return (c[c > 0] - 1).astype(np.int64)

    def stored(self, name):
        return self[name] > 0

    def decode(self, n):
        """Hard mask of switch ``n`` (1-based)."""
        if not 1 <= n <= self.n_switches:
            raise DimensionError(f"switch {n} outside 1..{self.n_switches}", axis="switch")
        return {name: (c >= n).astype(np.float64) for name, c in self.items()}

    def histogram(self):
        counts = np.zeros(self.n_switches + 1, dtype=np.int64)
        for c in self.values():
            counts += np.bincount(c.ravel(), minlength=self.n_switches + 1)
        return counts

    def pack(self, order=None):
        names = order if order is not None else list(self)
        flat = np.concatenate([self[n].ravel() for n in names]) if names else np.zeros(0, np.int8)
        return pack_codes(flat, code_bits(self.n_switches))

    @classmethod
    def unpack(cls, data, shapes, n_switches):
        total = sum(int(np.prod(s)) for s in shapes.values())
        flat = unpack_codes(data, code_bits(n_switches), total)
        out, pos = {}, 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            out[name] = flat[pos:pos + size].reshape(shape)
            pos += size
        return cls(out, n_switches)


def rescale_mask(scores, thresholds):
    """Re-scaled low-bit mask of a soft mask (see :class:`RescaledMask`)."""
    thr = np.asarray(list(thresholds), dtype=np.float64)
    codes = {}
    for name, s in scores.items():
        codes[name] = (s[..., None] >= thr).sum(axis=-1).astype(np.int8)
    return RescaledMask(codes, len(thr))


def pack_codes(codes, bits):
    codes = np.asarray(codes, dtype=np.uint8)
    if len(codes) == 0:
        return b""
    planes = (codes[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def unpack_codes(data, bits, count):
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if len(raw) < bits * count:
        raise DimensionError(f"mask holds {len(raw)} bits, need {bits * count}", axis="mask")
    planes = raw[:bits * count].reshape(count, bits).astype(np.uint8)
    return (planes << np.arange(bits, dtype=np.uint8)).sum(axis=1).astype(np.int8)


# installing onto a network ---------------------------------------------------

def attach_kernel_grouping(net):
    for _, conv in net.prunable():
        conv.grouping = KernelGrouping(conv.params["weight"].shape)


def attach_block_partitions(net, block_rows=4, block_cols=16, overrides=None):
    overrides = overrides or {}
    for name, conv in net.prunable():
        rows, cols = overrides.get(name, (block_rows, block_cols))
        conv.grouping = partition_blocks(conv.params["weight"].shape, rows, cols, name)


def apply_pattern_assignment(net, assignment):
    """Install pattern masks on the network. Prunable layers that are not 3×3 lose prunability."""
    for name, conv in net.prunable():
        if name in assignment.ids:
            conv.pattern = assignment.layer_mask(name)
        else:
            conv.prunable = False
            conv.grouping = None


def group_shapes(net):
    return {name: conv.grouping.group_shape for name, conv in net.prunable()}
