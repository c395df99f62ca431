"""Network assembly and receptive-field planning.

The architecture: three parallel temporal-convolution branches of different
kernel extents, each followed by a depthwise spatial convolution spanning
all electrodes; the concatenated features feed a stack of residual blocks
of depthwise causal dilated convolutions; a 1x1 convolution reduces
dimensionality before the dense softmax head.

Also here: the closed-form receptive-field arithmetic used to size the
causal stack, and the ``ITNETMDL`` binary model format with its key=value
config sidecar.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import FormatError
from .fileio import atomic_write, pack_string, read_exact
from .ops import (ConvSpec, RunningStats, avg_pool_time, batch_norm,
                  conv_temporal, dense, dropout, elu, flatten, softmax_rows)
from .tensor import Tensor, concat_channels, no_grad

MODEL_MAGIC = b"ITNETMDL"
MODEL_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


# ----------------------------------------------------------------------
# receptive-field arithmetic

def receptive_field_plain(kernel_extent, dilation_base, n_layers):
    """Receptive field of ``n_layers`` stacked causal convolutions.

    Layer i uses dilation ``dilation_base**i``; each adds
    ``(kernel_extent - 1) * dilation`` samples of history.  Exact integer
    arithmetic: r = 1 + (T-1)(b^n - 1)/(b-1), with the b=1 limit
    1 + n(T-1).
    """
    if kernel_extent < 1:
        raise ValueError("kernel_extent must be >= 1")
    if dilation_base < 1:
        raise ValueError("dilation_base must be >= 1")
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    if dilation_base == 1:
        return 1 + n_layers * (kernel_extent - 1)
    return 1 + (kernel_extent - 1) * (dilation_base ** n_layers - 1) // (dilation_base - 1)


def receptive_field_blocks(layers_per_block, kernel_extent, dilation_base, n_blocks):
    """Receptive field of ``n_blocks`` residual blocks of ``layers_per_block``
    causal convolutions each, block i at dilation ``dilation_base**i``.

    r = 1 + m(T-1)(b^n - 1)/(b-1); reduces to the plain-stack formula at
    m = 1.
    """
    if layers_per_block < 1:
        raise ValueError("layers_per_block must be >= 1")
    plain = receptive_field_plain(kernel_extent, dilation_base, n_blocks)
    return 1 + layers_per_block * (plain - 1)


def plan_kernel(target_r, layers_per_block, dilation_base, n_blocks):
    """Smallest kernel extent T > dilation_base whose residual stack reaches
    a receptive field of at least ``target_r``."""
    if target_r < 1:
        raise ValueError("target_r must be >= 1")
    t = dilation_base + 1
    if target_r > 1 and receptive_field_blocks(layers_per_block, 2, dilation_base,
                                               n_blocks) == 1:
        raise ValueError("receptive field cannot grow without layers (n_blocks=0)")
    while receptive_field_blocks(layers_per_block, t, dilation_base, n_blocks) < target_r:
        t += 1
    return t


# ----------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ArchConfig:
    """Static shape of the network.

    ``inception_branches`` lists (filter_count, kernel_extent) pairs in the
    order the branches are concatenated; their filter counts sum to the
    width of the causal stack.  ``tc_kernel`` must exceed ``dilation_base``
    or the dilated taps leave gaps in time coverage.
    """

    n_channels: int
    n_samples: int
    n_classes: int
    inception_branches: tuple = ((2, 16), (4, 32), (8, 64))
    pool1: int = 4
    tc_blocks: int = 4
    tc_layers_per_block: int = 2
    tc_kernel: int = 4
    dilation_base: int = 2
    dr_filters: int = 14
    pool2: int = 4
    dropout_rate: float = 0.4

    def __post_init__(self):
        branches = tuple((int(f), int(k)) for f, k in self.inception_branches)
        object.__setattr__(self, "inception_branches", branches)
        if self.n_channels < 1 or self.n_samples < 1:
            raise ValueError("n_channels and n_samples must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not branches:
            raise ValueError("at least one inception branch is required")
        for f, k in branches:
            if f < 1 or k < 1:
                raise ValueError(f"branch ({f}, {k}): filter count and kernel extent must be >= 1")
        if self.tc_kernel <= self.dilation_base:
            raise ValueError(
                f"tc_kernel ({self.tc_kernel}) must exceed dilation_base "
                f"({self.dilation_base}); smaller kernels leave uncovered time gaps")
        if self.dilation_base < 1:
            raise ValueError("dilation_base must be >= 1")
        for name in ("pool1", "pool2", "tc_layers_per_block", "dr_filters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tc_blocks < 0:
            raise ValueError("tc_blocks must be >= 0")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.pooled2_samples < 1:
            raise ValueError(
                f"n_samples={self.n_samples} too short for pooling {self.pool1}*{self.pool2}")

    @property
    def branch_filters(self):
        """Feature width after branch concatenation (input width of the causal stack)."""
        return sum(f for f, _ in self.inception_branches)

    @property
    def pooled1_samples(self):
        return self.n_samples // self.pool1

    @property
    def pooled2_samples(self):
        return self.pooled1_samples // self.pool2

    @property
    def feature_dim(self):
        return self.dr_filters * self.pooled2_samples

    @property
    def receptive_field(self):
        """History (in pooled samples) one causal-stack output can see."""
        return receptive_field_blocks(self.tc_layers_per_block, self.tc_kernel,
                                      self.dilation_base, self.tc_blocks)


# ----------------------------------------------------------------------
# model

def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class ITNetModel:
    """The assembled network: named parameter tensors plus forward passes.

    ``params`` maps stable dotted names to trainable tensors; ``buffers``
    holds the running batch-norm statistics keyed by norm-layer name.  Both
    are serialized by :func:`save_model`.
    """

    def __init__(self, config: ArchConfig, params, buffers, layers):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.layers = layers

    @property
    def param_count(self):
        return sum(p.size for p in self.params.values())

    def parameters(self):
        return list(self.params.values())

    # ------------------------------------------------------------------
    def _as_input(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x))
        if x.ndim == 3:
            x = x.reshape((x.shape[0], 1, x.shape[1], x.shape[2]))
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(
                f"input must be (batch, 1, electrodes, time), got {tuple(x.shape)}")
        if x.shape[2] != self.config.n_channels:
            raise ValueError(
                f"electrode axis mismatch: model expects {self.config.n_channels}, got {x.shape[2]}")
        if x.shape[3] != self.config.n_samples:
            raise ValueError(
                f"time axis mismatch: model expects {self.config.n_samples}, got {x.shape[3]}")
        return x

    def forward_logits(self, x, mode="infer", rng=None):
        """Class scores before softmax for a (N, 1, electrodes, time) batch."""
        cfg = self.config
        x = self._as_input(x)
        branch_outs = []
        for i, (f, k) in enumerate(cfg.inception_branches):
            t = conv_temporal(x, ConvSpec(k, 1, "same", False, f),
                              self.params[f"branch{i}.temporal.w"])
            t = t + self.params[f"branch{i}.temporal.b"].reshape((1, f, 1, 1))
            t = batch_norm(t, self.params[f"branch{i}.bn1.gamma"],
                           self.params[f"branch{i}.bn1.beta"],
                           mode=mode, running=self.buffers[f"branch{i}.bn1"])
            t = conv_temporal(t, ConvSpec(cfg.n_channels, 1, "valid", True, f),
                              self.params[f"branch{i}.spatial.w"])
            t = batch_norm(t, self.params[f"branch{i}.bn2.gamma"],
                           self.params[f"branch{i}.bn2.beta"],
                           mode=mode, running=self.buffers[f"branch{i}.bn2"])
            branch_outs.append(t)
        y = concat_channels(branch_outs)
        y = elu(y)
        y = dropout(y, cfg.dropout_rate, mode, rng)
        y = avg_pool_time(y, cfg.pool1)
        y = self.tc_features(y, mode=mode, rng=rng)
        y = conv_temporal(y, ConvSpec(1, 1, "same", False, cfg.dr_filters),
                          self.params["dr.w"])
        y = y + self.params["dr.b"].reshape((1, cfg.dr_filters, 1, 1))
        y = batch_norm(y, self.params["dr.bn.gamma"], self.params["dr.bn.beta"],
                       mode=mode, running=self.buffers["dr.bn"])
        y = elu(y)
        y = dropout(y, cfg.dropout_rate, mode, rng)
        y = avg_pool_time(y, cfg.pool2)
        y = flatten(y)
        return dense(y, self.params["head.w"], self.params["head.b"])

    def tc_features(self, y, mode="infer", rng=None):
        """Run only the residual causal stack on (N, width, 1, time) features.

        Block i applies its convolutions at dilation ``dilation_base**i``;
        the identity skip joins before the block's final activation.
        """
        cfg = self.config
        if y.shape[1] != cfg.branch_filters:
            raise ValueError(
                f"filter axis mismatch: causal stack expects {cfg.branch_filters}, got {y.shape[1]}")
        for j in range(cfg.tc_blocks):
            skip = y
            dilation = cfg.dilation_base ** j
            for l in range(cfg.tc_layers_per_block):
                y = conv_temporal(
                    y, ConvSpec(cfg.tc_kernel, dilation, "causal", True, cfg.branch_filters),
                    self.params[f"tc{j}.conv{l}.w"])
                y = batch_norm(y, self.params[f"tc{j}.bn{l}.gamma"],
                               self.params[f"tc{j}.bn{l}.beta"],
                               mode=mode, running=self.buffers[f"tc{j}.bn{l}"])
                y = elu(y)
                y = dropout(y, cfg.dropout_rate, mode, rng)
            y = y + skip
            y = elu(y)
        return y

    def forward(self, x, mode="infer", rng=None):
        """Class probabilities; rows sum to 1."""
        return softmax_rows(self.forward_logits(x, mode=mode, rng=rng))

    def predict(self, x):
        """Hard labels for an array of trials, without recording gradients."""
        with no_grad():
            probs = self.forward(x, mode="infer")
        return np.argmax(probs.data, axis=1)

    # ------------------------------------------------------------------
    # checkpointing
    def state_arrays(self):
        """Copies of every parameter and running-stat array, by name."""
        state = {name: p.data.copy() for name, p in self.params.items()}
        for name, rs in self.buffers.items():
            state[name + ".running_mean"] = rs.mean.copy()
            state[name + ".running_var"] = rs.var.copy()
        return state

    def load_state_arrays(self, state):
        expected = set(self.params)
        for name in self.buffers:
            expected.add(name + ".running_mean")
            expected.add(name + ".running_var")
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, rs in self.buffers.items():
            rs.mean = np.asarray(state[name + ".running_mean"]).copy()
            rs.var = np.asarray(state[name + ".running_var"]).copy()

    def copy(self):
        clone = build(self.config, seed=0)
        clone.load_state_arrays(self.state_arrays())
        return clone


def build(config: ArchConfig, seed=0, dtype=np.float32) -> ITNetModel:
    """Initialize all parameters (uniform Glorot weights, zero biases) and
    assemble the layer sequence for ``config``."""
    rng = np.random.default_rng(seed)
    params = {}
    buffers = {}
    layers = []
    c = config.n_channels

    for i, (f, k) in enumerate(config.inception_branches):
        params[f"branch{i}.temporal.w"] = _glorot(rng, (f, 1, 1, k), fan_in=k, fan_out=f * k,
                                                  dtype=dtype)
        params[f"branch{i}.temporal.b"] = _zeros((f,), dtype)
        params[f"branch{i}.bn1.gamma"] = _ones((f,), dtype)
        params[f"branch{i}.bn1.beta"] = _zeros((f,), dtype)
        buffers[f"branch{i}.bn1"] = RunningStats(f, dtype)
        params[f"branch{i}.spatial.w"] = _glorot(rng, (f, 1, c, 1), fan_in=c, fan_out=c,
                                                 dtype=dtype)
        params[f"branch{i}.bn2.gamma"] = _ones((f,), dtype)
        params[f"branch{i}.bn2.beta"] = _zeros((f,), dtype)
        buffers[f"branch{i}.bn2"] = RunningStats(f, dtype)
        layers.append(f"branch{i}: temporal conv {f}x(1x{k}) same, norm, "
                      f"depthwise spatial ({c}x1) valid, norm")
    layers.append(f"concat -> elu -> dropout({config.dropout_rate}) -> avg_pool({config.pool1})")

    width = config.branch_filters
    for j in range(config.tc_blocks):
        d = config.dilation_base ** j
        for l in range(config.tc_layers_per_block):
            params[f"tc{j}.conv{l}.w"] = _glorot(
                rng, (width, 1, 1, config.tc_kernel),
                fan_in=config.tc_kernel, fan_out=config.tc_kernel, dtype=dtype)
            params[f"tc{j}.bn{l}.gamma"] = _ones((width,), dtype)
            params[f"tc{j}.bn{l}.beta"] = _zeros((width,), dtype)
            buffers[f"tc{j}.bn{l}"] = RunningStats(width, dtype)
        layers.append(f"tc{j}: {config.tc_layers_per_block} x [depthwise causal conv "
                      f"(1x{config.tc_kernel}) d={d}, norm, elu, dropout], skip add, elu")

    params["dr.w"] = _glorot(rng, (config.dr_filters, width, 1, 1),
                             fan_in=width, fan_out=config.dr_filters, dtype=dtype)
    params["dr.b"] = _zeros((config.dr_filters,), dtype)
    params["dr.bn.gamma"] = _ones((config.dr_filters,), dtype)
    params["dr.bn.beta"] = _zeros((config.dr_filters,), dtype)
    buffers["dr.bn"] = RunningStats(config.dr_filters, dtype)
    layers.append(f"dr: conv 1x1 -> {config.dr_filters}, norm, elu, dropout, "
                  f"avg_pool({config.pool2})")

    params["head.w"] = _glorot(rng, (config.feature_dim, config.n_classes),
                               fan_in=config.feature_dim, fan_out=config.n_classes,
                               dtype=dtype)
    params["head.b"] = _zeros((config.n_classes,), dtype)
    layers.append(f"flatten -> dense {config.feature_dim}->{config.n_classes} -> softmax")

    return ITNetModel(config, params, buffers, layers)


# ----------------------------------------------------------------------
# config text serialization (key=value lines)

def _format_branches(branches):
    return ",".join(f"{f}x{k}" for f, k in branches)


def _parse_branches(text):
    branches = []
    for part in text.split(","):
        f, _, k = part.strip().partition("x")
        try:
            branches.append((int(f), int(k)))
        except ValueError:
            raise ValueError(f"bad branch spec {part!r}; expected FILTERSxKERNEL") from None
    return tuple(branches)


_ARCH_PARSERS = {
    "n_channels": int, "n_samples": int, "n_classes": int,
    "inception_branches": _parse_branches,
    "pool1": int, "tc_blocks": int, "tc_layers_per_block": int,
    "tc_kernel": int, "dilation_base": int, "dr_filters": int, "pool2": int,
    "dropout_rate": float,
}


def arch_config_to_items(config: ArchConfig):
    items = {}
    for f in fields(ArchConfig):
        value = getattr(config, f.name)
        if f.name == "inception_branches":
            items[f.name] = _format_branches(value)
        else:
            items[f.name] = repr(value) if isinstance(value, float) else str(value)
    return items


def arch_config_from_items(items):
    """Build an ArchConfig from a {key: string} mapping; unknown keys are errors."""
    unknown = sorted(set(items) - set(_ARCH_PARSERS))
    if unknown:
        raise ValueError(f"unknown architecture keys: {', '.join(unknown)}")
    kwargs = {}
    for key, raw in items.items():
        try:
            kwargs[key] = _ARCH_PARSERS[key](raw)
        except ValueError as exc:
            raise ValueError(f"architecture key {key}: {exc}") from None
    for required in ("n_channels", "n_samples", "n_classes"):
        if required not in kwargs:
            raise ValueError(f"architecture key {required} is required")
    return ArchConfig(**kwargs)


# ----------------------------------------------------------------------
# binary model files

def _pack_entry(name, arr):
    dt = np.dtype(arr.dtype)
    if dt not in _DTYPE_TAGS:
        raise ValueError(f"parameter {name}: unsupported dtype {dt}")
    parts = [pack_string(name),
             struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim),
             struct.pack(f"<{arr.ndim}I", *arr.shape),
             np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes()]
    return b"".join(parts)


def save_model(model: ITNetModel, path):
    """Write the binary parameter file plus a ``<path>.cfg`` text sidecar."""
    path = os.fspath(path)
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION)]
    for name, p in model.params.items():
        parts.append(_pack_entry(name, p.data))
    for name, rs in model.buffers.items():
        parts.append(_pack_entry(name + ".running_mean", rs.mean))
        parts.append(_pack_entry(name + ".running_var", rs.var))
    atomic_write(path, b"".join(parts))
    cfg_lines = [f"{k}={v}" for k, v in arch_config_to_items(model.config).items()]
    atomic_write(path + ".cfg", ("\n".join(cfg_lines) + "\n").encode("utf-8"))


def load_model(path) -> ITNetModel:
    """Read a model written by :func:`save_model` (parameter file + sidecar)."""
    path = os.fspath(path)
    cfg_path = path + ".cfg"
    if not os.path.exists(cfg_path):
        raise FormatError("missing_config", f"config sidecar not found: {cfg_path}")
    with open(cfg_path, "r", encoding="utf-8") as f:
        items = {}
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError("bad_value", f"config line without '=': {line!r}")
            items[key.strip()] = value.strip()
    try:
        config = arch_config_from_items(items)
    except ValueError as exc:
        raise FormatError("bad_value", str(exc)) from None

    model = build(config, seed=0)
    state = {}
    with open(path, "rb") as f:
        magic = f.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise FormatError("bad_magic", f"not a model file: magic {magic!r}")
        version, = struct.unpack("<I", read_exact(f, 4, "version"))
        if version != MODEL_VERSION:
            raise FormatError("bad_value", f"unsupported model file version {version}")
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated", "file ends inside a name length")
            name_len, = struct.unpack("<H", head)
            name = read_exact(f, name_len, "a parameter name").decode("utf-8")
            tag, rank = struct.unpack("<BB", read_exact(f, 2, f"{name} header"))
            if tag not in _TAG_DTYPES:
                raise FormatError("bad_value", f"parameter {name}: unknown dtype tag {tag}")
            extents = struct.unpack(f"<{rank}I", read_exact(f, 4 * rank, f"{name} extents"))
            count = 1
            for e in extents:
                count *= e
            if count > 2 ** 31:
                raise FormatError("extent_overflow",
                                  f"parameter {name}: {count} elements exceeds the format limit")
            dt = _TAG_DTYPES[tag]
            raw = read_exact(f, count * dt.itemsize, f"{name} values")
            state[name] = np.frombuffer(raw, dtype=dt).reshape(extents).copy()
    try:
        model.load_state_arrays(state)
    except ValueError as exc:
        raise FormatError("bad_value", str(exc)) from None
    return model
