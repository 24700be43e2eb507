"""The MedNet topology: configuration, builder, and graph executor.

The network is a DAG assembled from the primitives in :mod:`mednet.layers`:

* a two-conv stem (3x3 then 5x5, both stride 2, never 1x1);
* eight blocks, each running four parallel conv+BN+ReLU branches with
  kernel sizes 1, 3, 5, 7 whose outputs are channel-concatenated;
* twelve skip connections (eight short: block input to block output; four
  long: stem->block 2, block 2->4, 4->6, 6->8) merged by elementwise
  addition, ten of them through a 1x1 projection conv + BN and two
  (blocks 1 and 2, the shape-preserving positions) as identities;
* a head of global average pooling, FC + ReLU, dropout, FC, softmax.

Stem (2) + branches (8*4 = 32) + projections (10) gives exactly 44
convolution layers; the builder refuses any configuration whose count
differs.  Parameter initialization draws from a per-node substream keyed
by the node name, so a layer's initial weights depend only on (seed,
node name), never on construction order.  Head replacement during
transfer can therefore reproduce exactly the head a fresh build with the
same seed would have produced.
"""

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers
from .tensor import NonFiniteError, Rng, ShapeError

BRANCH_KERNELS = (1, 3, 5, 7)
BLOCK_NAMES = tuple(f"block_{k}" for k in range(1, 9))


class ConfigError(ValueError):
    """A MedNetConfig violates a structural invariant."""


@dataclass(frozen=True)
class StemSpec:
    """One stem convolution: square kernel, output width, stride."""

    kernel: int
    out_channels: int
    stride: int = 2


@dataclass(frozen=True)
class BlockSpec:
    """One parallel-conv block: per-branch output channels and shared stride."""

    per_branch_channels: int
    stride: int = 1


@dataclass(frozen=True)
class ConnectionSpec:
    """A skip edge from one stage's merged output into another's.

    ``source``/``target`` name stages ("stem" or "block_1".."block_8"); a
    connection is short when the source is the stage immediately before the
    target, long otherwise.  ``projection`` is "conv1x1" (1x1 conv + BN with
    stride matching the path's downsampling) or "identity" (shapes must
    already agree).
    """

    source: str
    target: str
    projection: str = "conv1x1"


def canonical_blocks():
    """Channel/stride schedule: downsampling at blocks 3, 5, 7."""
    widths = (16, 16, 32, 32, 48, 48, 64, 64)
    strides = (1, 1, 2, 1, 2, 1, 2, 1)
    return tuple(BlockSpec(c, s) for c, s in zip(widths, strides))


def canonical_connections():
    """Eight short skips plus four long ones, ten carrying projections."""
    shorts = []
    for k in range(1, 9):
        source = "stem" if k == 1 else f"block_{k - 1}"
        projection = "identity" if k <= 2 else "conv1x1"
        shorts.append(ConnectionSpec(source, f"block_{k}", projection))
    longs = [
        ConnectionSpec("stem", "block_2"),
        ConnectionSpec("block_2", "block_4"),
        ConnectionSpec("block_4", "block_6"),
        ConnectionSpec("block_6", "block_8"),
    ]
    return tuple(shorts + longs)


@dataclass(frozen=True)
class MedNetConfig:
    """Full architectural description; every field has the canonical default."""

    input_h: int = 64
    input_w: int = 64
    input_channels: int = 1
    num_classes: int = 8
    stem: tuple = (StemSpec(3, 32), StemSpec(5, 64))
    blocks: tuple = field(default_factory=canonical_blocks)
    connections: tuple = field(default_factory=canonical_connections)
    branch_kernels: tuple = BRANCH_KERNELS
    fc1_width: int = 256
    dropout_rate: float = 0.5

    def validate(self):
        for dim, label in ((self.input_h, "input_h"), (self.input_w, "input_w")):
            if dim < 16 or dim % 16 != 0:
                raise ConfigError(f"{label} must be >= 16 and divisible by 16, got {dim}")
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 1 (gray) or 3 (color), "
                              f"got {self.input_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.stem) != 2:
            raise ConfigError(f"stem must have exactly 2 convolutions, got {len(self.stem)}")
        for spec in self.stem:
            if spec.kernel == 1:
                raise ConfigError("stem kernels must not be 1x1 (small filters are "
                                  "excluded from the stem)")
            if spec.kernel not in BRANCH_KERNELS:
                raise ConfigError(f"stem kernel must be one of {{3,5,7}}, got {spec.kernel}")
            if spec.out_channels < 1 or spec.stride < 1:
                raise ConfigError(f"bad stem spec {spec}")
        if len(self.blocks) != 8:
            raise ConfigError(f"exactly 8 blocks required, got {len(self.blocks)}")
        for spec in self.blocks:
            if spec.per_branch_channels < 1 or spec.stride not in (1, 2):
                raise ConfigError(f"bad block spec {spec}")
        if tuple(self.branch_kernels) != BRANCH_KERNELS:
            raise ConfigError(f"branch kernels must be exactly {BRANCH_KERNELS}, "
                              f"got {tuple(self.branch_kernels)}")
        if len(self.connections) != 12:
            raise ConfigError(f"exactly 12 connections required, got {len(self.connections)}")
        stages = ("stem",) + BLOCK_NAMES
        seen = set()
        for conn in self.connections:
            if conn.source not in stages or conn.target not in BLOCK_NAMES:
                raise ConfigError(f"connection endpoints must be stages: {conn}")
            if stages.index(conn.source) >= stages.index(conn.target):
                raise ConfigError(f"connection must run forward in the graph: {conn}")
            if conn.projection not in ("conv1x1", "identity"):
                raise ConfigError(f"unknown projection kind {conn.projection!r}")
            kind = "short" if stages.index(conn.source) + 1 == stages.index(conn.target) \
                else "long"
            if (conn.target, kind) in seen:
                raise ConfigError(f"duplicate {kind} connection into {conn.target}")
            seen.add((conn.target, kind))
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.fc1_width < 1:
            raise ConfigError(f"fc1_width must be positive, got {self.fc1_width}")
        n_proj = sum(1 for c in self.connections if c.projection == "conv1x1")
        total = len(self.stem) + len(self.blocks) * 4 + n_proj
        if total != 44:
            raise ConfigError(f"conv layer count must be 44, this config yields {total} "
                              f"({len(self.stem)} stem + {len(self.blocks) * 4} branch "
                              f"+ {n_proj} projection)")

    def to_dict(self):
        return {
            "input_h": self.input_h,
            "input_w": self.input_w,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "stem": [[s.kernel, s.out_channels, s.stride] for s in self.stem],
            "blocks": [[b.per_branch_channels, b.stride] for b in self.blocks],
            "connections": [[c.source, c.target, c.projection] for c in self.connections],
            "branch_kernels": list(self.branch_kernels),
            "fc1_width": self.fc1_width,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_h=int(d["input_h"]),
            input_w=int(d["input_w"]),
            input_channels=int(d["input_channels"]),
            num_classes=int(d["num_classes"]),
            stem=tuple(StemSpec(int(k), int(c), int(s)) for k, c, s in d["stem"]),
            blocks=tuple(BlockSpec(int(c), int(s)) for c, s in d["blocks"]),
            connections=tuple(ConnectionSpec(src, dst, proj)
                              for src, dst, proj in d["connections"]),
            branch_kernels=tuple(int(k) for k in d["branch_kernels"]),
            fc1_width=int(d["fc1_width"]),
            dropout_rate=float(d["dropout_rate"]),
        )


def canonical_config(input_channels=1, num_classes=8):
    """The full-width 64x64 network (gray by default)."""
    return MedNetConfig(input_channels=input_channels, num_classes=num_classes)


def canonical_small_config(input_channels=1, num_classes=4):
    """Half-width variant on 32x32 inputs for fast overfit/sanity runs."""
    widths = (8, 8, 16, 16, 24, 24, 32, 32)
    strides = (1, 1, 2, 1, 2, 1, 2, 1)
    return MedNetConfig(
        input_h=32, input_w=32, input_channels=input_channels,
        num_classes=num_classes,
        stem=(StemSpec(3, 16), StemSpec(5, 32)),
        blocks=tuple(BlockSpec(c, s) for c, s in zip(widths, strides)),
        fc1_width=128, dropout_rate=0.0,
    )


def tiny_config(num_classes=3):
    """Minimal 16x16 variant for float64 end-to-end gradient checking."""
    widths = (2, 2, 3, 3, 4, 4, 5, 5)
    strides = (1, 1, 2, 1, 2, 1, 2, 1)
    return MedNetConfig(
        input_h=16, input_w=16, input_channels=1, num_classes=num_classes,
        stem=(StemSpec(3, 4), StemSpec(5, 8)),
        blocks=tuple(BlockSpec(c, s) for c, s in zip(widths, strides)),
        fc1_width=16, dropout_rate=0.0,
    )


def slim_config(input_channels=1, num_classes=8):
    """Narrow 64x64 variant sized so the transfer experiment fits a single core."""
    widths = (8, 8, 12, 12, 16, 16, 24, 24)
    strides = (1, 1, 2, 1, 2, 1, 2, 1)
    return MedNetConfig(
        input_channels=input_channels, num_classes=num_classes,
        stem=(StemSpec(3, 16), StemSpec(5, 32)),
        blocks=tuple(BlockSpec(c, s) for c, s in zip(widths, strides)),
        fc1_width=128, dropout_rate=0.5,
    )


def with_classes(config, num_classes):
    """Same architecture with a different head width."""
    return replace(config, num_classes=num_classes)


@dataclass
class Node:
    """One executable graph node: a layer plus the names of its producers."""

    name: str
    layer: layers.Layer
    inputs: tuple  # producer node names; "input" denotes the graph input


def _init_rng(seed, node_name):
    """Init stream for a node, a function of (seed, name) only."""
    return Rng(seed).child(zlib.crc32(node_name.encode("ascii")))


def init_rng_for(seed, node_name):
    """Public alias used by head replacement to reproduce build-time draws."""
    return _init_rng(seed, node_name)


class ModelGraph:
    """Executable DAG over layer objects, stored in topological order."""

    def __init__(self, config, nodes, stage_out, seed):
        self.config = config
        self.seed = int(seed)
        self.nodes = list(nodes)
        self.stage_out = dict(stage_out)  # stage name -> its output node name
        self.mode = "train"
        self.frozen = set()  # parameter names excluded from optimizer updates
        self._by_name = {n.name: n for n in self.nodes}
        if len(self._by_name) != len(self.nodes):
            raise ConfigError("duplicate node names in graph")
        self.logits_node = "head.fc2"
        self.output_node = "head.softmax"

    def node(self, name):
        return self._by_name[name]

    def set_mode(self, mode):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode

    def forward(self, x, rng=None, capture=None):
        """Run the net on a batch, returning ``(logits, probs)``.

        ``capture`` names a node whose activation is returned instead, e.g.
        ``"head.relu"`` for the penultimate embedding.
        """
        cfg = self.config
        if (x.ndim != 4 or x.shape[1] != cfg.input_h or x.shape[2] != cfg.input_w
                or x.shape[3] != cfg.input_channels):
            raise ShapeError(
                f"input must be N x {cfg.input_h} x {cfg.input_w} x "
                f"{cfg.input_channels}, got {tuple(x.shape)}"
            )
        values = {"input": x}
        for node in self.nodes:
            xs = [values[name] for name in node.inputs]
            y = node.layer.forward(xs if node.layer.n_inputs == "many" else xs[0],
                                   mode=self.mode, rng=rng)
            if not np.all(np.isfinite(y)):
                raise NonFiniteError(f"non-finite activation at node {node.name!r}")
            values[node.name] = y
        if capture is not None:
            if capture not in values:
                raise KeyError(f"graph has no node {capture!r}")
            return values[capture]
        return values[self.logits_node], values[self.output_node]

    def backward(self, grad_from_loss):
        """Reverse pass filling every layer's param grads.

        Gradients arriving at a fan-out point (a node consumed by several
        downstream nodes, e.g. a block input feeding four branches and a
        skip) accumulate by summation.
        """
        pending = {self.output_node: grad_from_loss}
        for node in reversed(self.nodes):
            grad_out = pending.pop(node.name, None)
            if grad_out is None:
                raise layers.MissingCacheError(
                    f"no gradient reached node {node.name!r}; "
                    "was forward run in train mode?"
                )
            grad_ins = node.layer.backward(grad_out)
            if node.layer.n_inputs != "many":
                grad_ins = [grad_ins]
            for producer, grad in zip(node.inputs, grad_ins):
                if producer == "input":
                    continue
                if producer in pending:
                    pending[producer] = pending[producer] + grad
                else:
                    pending[producer] = grad

    def named_params(self):
        """Ordered mapping of parameter name to live array (BN stats included)."""
        out = {}
        for node in self.nodes:
            for key, value in node.layer.params.items():
                out[f"{node.name}.{key}"] = value
        return out

    def set_param(self, name, value):
        node_name, _, key = name.rpartition(".")
        node = self._by_name.get(node_name)
        if node is None or key not in node.layer.params:
            raise KeyError(f"graph has no parameter {name!r}")
        current = node.layer.params[key]
        if tuple(value.shape) != tuple(current.shape):
            raise ShapeError(f"parameter {name!r} has shape {current.shape}, "
                             f"got {value.shape}")
        node.layer.params[key] = value.astype(current.dtype, copy=False)

    def trainable_names(self):
        """Parameter names the optimizer may update (running stats excluded)."""
        out = []
        for node in self.nodes:
            for key in node.layer.trainable:
                out.append(f"{node.name}.{key}")
        return out

    def named_grads(self):
        """Gradients for trainable parameters, keyed like named_params."""
        out = {}
        for node in self.nodes:
            for key in node.layer.trainable:
                out[f"{node.name}.{key}"] = node.layer.grads.get(key)
        return out

    def param_count(self):
        return int(sum(v.size for v in self.named_params().values()))

    def trainable_param_count(self):
        params = self.named_params()
        return int(sum(params[name].size for name in self.trainable_names()))


def _project_or_identity(conn, kind, src_shape, dst_shape, target, nodes,
                         seed, dtype, src_node):
    """Wire one skip edge; returns the node name carrying the skip value."""
    (sh, sw, sc), (dh, dw, dc) = src_shape, dst_shape
    if conn.projection == "identity":
        if src_shape != dst_shape:
            raise ConfigError(
                f"identity connection {conn.source}->{conn.target} needs matching "
                f"shapes, got {src_shape} vs {dst_shape}"
            )
        return src_node
    if sh % dh or sw % dw or sh // dh != sw // dw:
        raise ConfigError(
            f"connection {conn.source}->{conn.target}: source {sh}x{sw} not an "
            f"integer isotropic stride above target {dh}x{dw}"
        )
    stride = sh // dh
    conv_name = f"{target}.{kind}_proj.conv"
    conv = layers.Conv2d(1, 1, sc, dc, stride=stride, padding="same",
                         rng=_init_rng(seed, conv_name), dtype=dtype)
    bn_name = f"{target}.{kind}_proj.bn"
    bn = layers.BatchNorm2d(dc, dtype=dtype)
    nodes.append(Node(conv_name, conv, (src_node,)))
    nodes.append(Node(bn_name, bn, (conv_name,)))
    return bn_name


def build_mednet(config, seed=0, *, dtype=np.float32, enforce_conv_count=True):
    """Construct the full graph; refuses configs that break the 44-conv law.

    ``enforce_conv_count=False`` skips only the final 44-count assertion so
    tests can build deliberately wrong variants and count them.
    """
    if enforce_conv_count:
        config.validate()
    else:
        try:
            config.validate()
        except ConfigError as err:
            if "conv layer count" not in str(err):
                raise
    nodes = []
    stage_out = {}
    stage_shape = {}  # stage name -> (h, w, c) of its merged output

    h, w, c = config.input_h, config.input_w, config.input_channels
    prev = "input"
    for i, spec in enumerate(config.stem, start=1):
        if spec.kernel == 1:
            raise ConfigError("stem kernels must not be 1x1")
        conv_name = f"stem.conv{i}"
        conv = layers.Conv2d(spec.kernel, spec.kernel, c, spec.out_channels,
                             stride=spec.stride, padding="same",
                             rng=_init_rng(seed, conv_name), dtype=dtype)
        bn = layers.BatchNorm2d(spec.out_channels, dtype=dtype)
        relu = layers.Relu()
        nodes.append(Node(conv_name, conv, (prev,)))
        nodes.append(Node(f"stem.bn{i}", bn, (conv_name,)))
        nodes.append(Node(f"stem.relu{i}", relu, (f"stem.bn{i}",)))
        prev = f"stem.relu{i}"
        h, w = layers.conv_output_hw(h, w, spec.kernel, spec.kernel,
                                     spec.stride, "same")[:2]
        c = spec.out_channels
    stage_out["stem"] = prev
    stage_shape["stem"] = (h, w, c)

    stages = ("stem",) + BLOCK_NAMES
    for k, block in enumerate(config.blocks, start=1):
        target = f"block_{k}"
        in_stage = stages[stages.index(target) - 1]
        in_node = stage_out[in_stage]
        in_h, in_w, in_c = stage_shape[in_stage]
        branch_outputs = []
        for kernel in config.branch_kernels:
            base = f"{target}.branch{kernel}x{kernel}"
            conv = layers.Conv2d(kernel, kernel, in_c, block.per_branch_channels,
                                 stride=block.stride, padding="same",
                                 rng=_init_rng(seed, f"{base}.conv"), dtype=dtype)
            bn = layers.BatchNorm2d(block.per_branch_channels, dtype=dtype)
            nodes.append(Node(f"{base}.conv", conv, (in_node,)))
            nodes.append(Node(f"{base}.bn", bn, (f"{base}.conv",)))
            nodes.append(Node(f"{base}.relu", layers.Relu(), (f"{base}.bn",)))
            branch_outputs.append(f"{base}.relu")
        concat_name = f"{target}.concat"
        nodes.append(Node(concat_name, layers.Concat(), tuple(branch_outputs)))
        out_h, out_w = layers.conv_output_hw(in_h, in_w, 1, 1, block.stride, "same")[:2]
        out_c = block.per_branch_channels * len(config.branch_kernels)
        dst_shape = (out_h, out_w, out_c)

        merged = concat_name
        for conn in config.connections:
            if conn.target != target:
                continue
            kind = "short" if stages.index(conn.source) + 1 == stages.index(target) \
                else "long"
            skip = _project_or_identity(
                conn, kind, stage_shape[conn.source], dst_shape, target,
                nodes, seed, dtype, stage_out[conn.source]
            )
            add_name = f"{target}.add_{kind}"
            nodes.append(Node(add_name, layers.Add(), (merged, skip)))
            merged = add_name
        stage_out[target] = merged
        stage_shape[target] = dst_shape

    final_c = stage_shape["block_8"][2]
    nodes.append(Node("head.gap", layers.GlobalAvgPool(), (stage_out["block_8"],)))
    fc1 = layers.FullyConnected(final_c, config.fc1_width,
                                rng=_init_rng(seed, "head.fc1"), dtype=dtype)
    nodes.append(Node("head.fc1", fc1, ("head.gap",)))
    nodes.append(Node("head.relu", layers.Relu(), ("head.fc1",)))
    nodes.append(Node("head.dropout", layers.Dropout(config.dropout_rate),
                      ("head.relu",)))
    fc2 = layers.FullyConnected(config.fc1_width, config.num_classes,
                                rng=_init_rng(seed, "head.fc2"), dtype=dtype)
    nodes.append(Node("head.fc2", fc2, ("head.dropout",)))
    nodes.append(Node("head.softmax", layers.SoftmaxOutput(config.num_classes),
                      ("head.fc2",)))

    graph = ModelGraph(config, nodes, stage_out, seed)
    n_convs = count_conv_layers(graph)
    if enforce_conv_count and n_convs != 44:
        raise ConfigError(f"built graph has {n_convs} conv layers, expected 44")
    return graph


def build_stem_only(config, seed=0, *, dtype=np.float32):
    """Just the two stem convolutions; a debugging aid, not a classifier."""
    nodes = []
    prev = "input"
    c = config.input_channels
    for i, spec in enumerate(config.stem, start=1):
        conv_name = f"stem.conv{i}"
        conv = layers.Conv2d(spec.kernel, spec.kernel, c, spec.out_channels,
                             stride=spec.stride, padding="same",
                             rng=_init_rng(seed, conv_name), dtype=dtype)
        nodes.append(Node(conv_name, conv, (prev,)))
        nodes.append(Node(f"stem.bn{i}", layers.BatchNorm2d(spec.out_channels, dtype=dtype),
                          (conv_name,)))
        nodes.append(Node(f"stem.relu{i}", layers.Relu(), (f"stem.bn{i}",)))
        prev = f"stem.relu{i}"
        c = spec.out_channels
    graph = ModelGraph(config, nodes, {"stem": prev}, seed)
    graph.logits_node = prev
    graph.output_node = prev
    return graph


def count_conv_layers(graph):
    """Number of Conv2d nodes in the graph."""
    return sum(1 for node in graph.nodes if isinstance(node.layer, layers.Conv2d))


def summary(graph, batch=1):
    """Symbolic shape walk: list of (node name, output shape, param count).

    Returns ``(rows, total_params)``; purely symbolic, no arrays allocated.
    """
    cfg = graph.config
    shapes = {"input": (batch, cfg.input_h, cfg.input_w, cfg.input_channels)}
    rows = []
    for node in graph.nodes:
        in_shapes = [shapes[name] for name in node.inputs]
        arg = in_shapes if node.layer.n_inputs == "many" else in_shapes[0]
        out = tuple(node.layer.output_shape(arg))
        shapes[node.name] = out
        rows.append((node.name, out, node.layer.param_count()))
    total = sum(r[2] for r in rows)
    return rows, total


def format_summary(graph, batch=1):
    """Human-readable architecture table; ends with the conv-layer count."""
    rows, total = summary(graph, batch)
    name_width = max(len(r[0]) for r in rows)
    shape_width = max(len("x".join(str(d) for d in r[1])) for r in rows)
    lines = [f"{'node':<{name_width}}  {'output':<{shape_width}}  params"]
    lines.append("-" * len(lines[0]))
    for name, shape, count in rows:
        shape_str = "x".join(str(d) for d in shape)
        lines.append(f"{name:<{name_width}}  {shape_str:<{shape_width}}  {count}")
    lines.append("-" * len(lines[0]))
    lines.append(f"total parameters: {total}")
    lines.append(f"batch-norm running stats: {graph.param_count() - total}")
    lines.append(f"conv layers: {count_conv_layers(graph)}")
    return "\n".join(lines)
