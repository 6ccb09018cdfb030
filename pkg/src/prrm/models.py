"""Miniature architecture families as ordered layer graphs.

Two families are defined:

* ``mini_long``: an encoder-decoder with long skip concatenations
  (two pooling stages, mirrored decoder, 11 conv / 10 BN layers).
* ``mini_short``: a residual trunk with identity skips plus a
  global-context head (stem, three residual blocks with one projection
  downsample, pooled-context concat head; 11 conv / 9 BN layers).

Every swappable parameter is addressed by a ParamKey: a 1-based layer
ordinal counted front-to-back per layer kind (conv layers and BN layers
are numbered independently) plus the parameter kind. Both families share
a 4-channel output head so segmentation and auto-encoder tasks expose the
same parameter shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import ops
from .errors import ShapeError, UnknownKeyError
from .rng import Rng, derive_seed
from .tensor import REAL, BnState, Tensor

CLASS_COUNT = 4
IN_CHANNELS = 1

ARCH_MINI_LONG = "mini_long"
ARCH_MINI_SHORT = "mini_short"
ARCH_IDS = (ARCH_MINI_LONG, ARCH_MINI_SHORT)


class ParamKind(Enum):
    """The six swappable parameter kinds of conv and BN layers."""

    CONV_W = "conv_w"
    CONV_B = "conv_b"
    BN_RM = "bn_rm"
    BN_RV = "bn_rv"
    BN_RW = "bn_rw"
    BN_RB = "bn_rb"

    @classmethod
    def from_name(cls, name: str) -> "ParamKind":
        for kind in cls:
            if kind.value == name:
                return kind
        raise UnknownKeyError(f"unknown parameter kind {name!r}")


CONV_KINDS = (ParamKind.CONV_W, ParamKind.CONV_B)
BN_KINDS = (ParamKind.BN_RM, ParamKind.BN_RV, ParamKind.BN_RW, ParamKind.BN_RB)


@dataclass(frozen=True)
class ParamKey:
    layer_id: int
    kind: ParamKind

    def canonical(self) -> str:
        return f"L{self.layer_id}.{self.kind.value}"

    def order(self) -> tuple[str, int]:
        """Stable sort key: kind group first, then layer ordinal."""
        return (self.kind.value, self.layer_id)

    @classmethod
    def parse(cls, text: str) -> "ParamKey":
        try:
            layer, kind = text.split(".", 1)
            if not layer.startswith("L"):
                raise ValueError
            return cls(int(layer[1:]), ParamKind.from_name(kind))
        except (ValueError, IndexError):
            raise UnknownKeyError(f"malformed parameter key {text!r}") from None


@dataclass(frozen=True)
class Node:
    """One graph node; inputs are indices of earlier nodes."""

    op: str
    inputs: tuple[int, ...] = ()
    conv_id: int = 0
    bn_id: int = 0
    ref: int = -1  # node whose spatial size upsample_to matches


@dataclass
class ConvLayer:
    w: Tensor
    b: Tensor
    stride: int
    pad: int
    feature_decomposition: bool
    residual_branch: bool


class BnLayer:
    """BN state plus Tensor views of gamma/beta that carry gradients.

    The views share buffers with the state, so in-place SGD updates and
    set_param writes stay visible to both.
    """

    def __init__(self, state: BnState):
        self.state = state
        self.gamma_t = Tensor(state.gamma)
        self.beta_t = Tensor(state.beta)


class _Builder:
    def __init__(self) -> None:
        self.nodes: list[Node] = [Node("input")]
        self.convs: list[ConvLayer] = []
        self.bns: list[BnLayer] = []

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def conv(self, src: int, cin: int, cout: int, k: int, stride: int = 1,
             pad: int | None = None, residual_branch: bool = False) -> int:
        if pad is None:
            pad = k // 2
        fd = cin != cout or stride != 1
        self.convs.append(ConvLayer(
            w=Tensor.zeros((cout, cin, k, k)),
            b=Tensor.zeros((cout,)),
            stride=stride,
            pad=pad,
            feature_decomposition=fd,
            residual_branch=residual_branch,
        ))
        return self._push(Node("conv", (src,), conv_id=len(self.convs)))

    def bn(self, src: int, channels: int) -> int:
        self.bns.append(BnLayer(BnState.identity(channels)))
        return self._push(Node("bn", (src,), bn_id=len(self.bns)))

    def relu(self, src: int) -> int:
        return self._push(Node("relu", (src,)))

    def maxpool2(self, src: int) -> int:
        return self._push(Node("maxpool2", (src,)))

    def upsample2(self, src: int) -> int:
        return self._push(Node("upsample2", (src,)))

    def upsample_to(self, src: int, ref: int) -> int:
        return self._push(Node("upsample_to", (src,), ref=ref))

    def gap(self, src: int) -> int:
        return self._push(Node("gap", (src,)))

    def concat(self, *srcs: int) -> int:
        return self._push(Node("concat", srcs))

    def add(self, a: int, b: int) -> int:
        return self._push(Node("add", (a, b)))

    def conv_bn_relu(self, src: int, cin: int, cout: int, k: int = 3,
                     stride: int = 1, residual_branch: bool = False) -> int:
        n = self.conv(src, cin, cout, k, stride=stride, residual_branch=residual_branch)
        n = self.bn(n, cout)
        return self.relu(n)


def _build_mini_long(b: _Builder) -> None:
    e1 = b.conv_bn_relu(0, 1, 8)
    e1 = b.conv_bn_relu(e1, 8, 8)
    p1 = b.maxpool2(e1)
    e2 = b.conv_bn_relu(p1, 8, 16)
    e2 = b.conv_bn_relu(e2, 16, 16)
    p2 = b.maxpool2(e2)
    t = b.conv_bn_relu(p2, 16, 32)
    t = b.conv_bn_relu(t, 32, 32)
    t = b.upsample2(t)
    t = b.concat(t, e2)
    t = b.conv_bn_relu(t, 48, 16)
    t = b.conv_bn_relu(t, 16, 16)
    t = b.upsample2(t)
    t = b.concat(t, e1)
    t = b.conv_bn_relu(t, 24, 8)
    t = b.conv_bn_relu(t, 8, 8)
    b.conv(t, 8, CLASS_COUNT, 1)


def _build_mini_short(b: _Builder) -> None:
    t = b.conv_bn_relu(0, 1, 16)
    # residual unit: out = relu(x + BN(conv(relu(BN(conv(x))))))
    r = b.conv_bn_relu(t, 16, 16, residual_branch=True)
    r = b.conv(r, 16, 16, 3, residual_branch=True)
    r = b.bn(r, 16)
    t = b.relu(b.add(t, r))
    # downsample unit with a projection skip (the feature number change layer)
    r = b.conv_bn_relu(t, 16, 32, stride=2, residual_branch=True)
    r = b.conv(r, 32, 32, 3, residual_branch=True)
    r = b.bn(r, 32)
    skip = b.conv(t, 16, 32, 1, stride=2)
    skip = b.bn(skip, 32)
    t = b.relu(b.add(skip, r))
    # second identity-skip unit
    r = b.conv_bn_relu(t, 32, 32, residual_branch=True)
    r = b.conv(r, 32, 32, 3, residual_branch=True)
    r = b.bn(r, 32)
    t = b.relu(b.add(t, r))
    # pooled-context head: global context broadcast back onto the trunk
    g = b.gap(t)
    g = b.conv(g, 32, 8, 1)
    g = b.upsample_to(g, t)
    h = b.concat(t, g)
    h = b.conv_bn_relu(h, 40, 16)
    h = b.conv(h, 16, CLASS_COUNT, 1)
    b.upsample2(h)


_BUILDERS = {
    ARCH_MINI_LONG: _build_mini_long,
    ARCH_MINI_SHORT: _build_mini_short,
}


class Model:
    """Ordered layer graph plus parameter store addressed by ParamKey."""

    def __init__(self, arch_id: str, nodes: list[Node],
                 convs: list[ConvLayer], bns: list[BnLayer]):
        self.arch_id = arch_id
        self.nodes = nodes
        self.convs = convs
        self.bns = bns
        self.class_count = CLASS_COUNT
        self.in_channels = IN_CHANNELS

    # -- parameter addressing ------------------------------------------------

    @property
    def conv_count(self) -> int:
        return len(self.convs)

    @property
    def bn_count(self) -> int:
        return len(self.bns)

    def param_keys(self) -> list[ParamKey]:
        keys = []
        for i in range(1, self.conv_count + 1):
            keys.append(ParamKey(i, ParamKind.CONV_W))
            keys.append(ParamKey(i, ParamKind.CONV_B))
        for j in range(1, self.bn_count + 1):
            for kind in BN_KINDS:
                keys.append(ParamKey(j, kind))
        return keys

    def _slot(self, key: ParamKey) -> np.ndarray:
        if key.kind in CONV_KINDS:
            if not 1 <= key.layer_id <= self.conv_count:
                raise UnknownKeyError(f"no conv layer {key.layer_id} in {self.arch_id}")
            layer = self.convs[key.layer_id - 1]
            return layer.w.data if key.kind is ParamKind.CONV_W else layer.b.data
        if not 1 <= key.layer_id <= self.bn_count:
            raise UnknownKeyError(f"no BN layer {key.layer_id} in {self.arch_id}")
        state = self.bns[key.layer_id - 1].state
        return {
            ParamKind.BN_RM: state.run_mean,
            ParamKind.BN_RV: state.run_var,
            ParamKind.BN_RW: state.gamma,
            ParamKind.BN_RB: state.beta,
        }[key.kind]

    def get_param(self, key: ParamKey) -> Tensor:
        """Copy of the addressed parameter; mutating it never touches the model."""
        return Tensor(self._slot(key).copy())

    def set_param(self, key: ParamKey, t: Tensor) -> None:
        """Replace the addressed parameter wholesale. Shape must match exactly."""
        slot = self._slot(key)
        if t.shape != slot.shape:
            raise ShapeError(
                f"shape mismatch for {key.canonical()}: got {t.shape}, slot is {slot.shape}"
            )
        slot[...] = t.data

    def trainable_params(self) -> list[tuple[ParamKey, Tensor]]:
        """Gradient-carrying params (conv w/b, BN gamma/beta), in key order."""
        out = []
        for i, layer in enumerate(self.convs, start=1):
            out.append((ParamKey(i, ParamKind.CONV_W), layer.w))
            out.append((ParamKey(i, ParamKind.CONV_B), layer.b))
        for j, bn in enumerate(self.bns, start=1):
            out.append((ParamKey(j, ParamKind.BN_RW), bn.gamma_t))
            out.append((ParamKey(j, ParamKind.BN_RB), bn.beta_t))
        return out

    def clone(self) -> "Model":
        convs = [
            ConvLayer(
                w=Tensor(c.w.data.copy()), b=Tensor(c.b.data.copy()),
                stride=c.stride, pad=c.pad,
                feature_decomposition=c.feature_decomposition,
                residual_branch=c.residual_branch,
            )
            for c in self.convs
        ]
        bns = [BnLayer(bn.state.copy()) for bn in self.bns]
        return Model(self.arch_id, self.nodes, convs, bns)

    # -- execution -------------------------------------------------------------

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        """Run the graph; eval mode is pure, train mode updates BN statistics."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        logits, _, _ = self._run(x, train=(mode == "train"), keep=False)
        return logits

    def forward_train_cached(
        self, x: Tensor, freeze: frozenset[ParamKey] = frozenset()
    ) -> tuple[Tensor, list, list]:
        """Train-mode forward keeping per-node caches for backward."""
        return self._run(x, train=True, keep=True, freeze=freeze)

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"input must be (N,{self.in_channels},H,W), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"spatial extents must be divisible by 4, got {x.shape[2:]}")

    def _run(self, x: Tensor, train: bool, keep: bool,
             freeze: frozenset[ParamKey] = frozenset()):
        self._check_input(x)
        values: list[Tensor | None] = [None] * len(self.nodes)
        caches: list = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.op == "input":
                values[i] = x
            elif node.op == "conv":
                layer = self.convs[node.conv_id - 1]
                src = values[node.inputs[0]]
                if keep:
                    values[i], caches[i] = ops.conv2d_forward_cols(
                        src, layer.w, layer.b, layer.stride, layer.pad, exact=False
                    )
                else:
                    values[i], _ = ops.conv2d_forward_cols(
                        src, layer.w, layer.b, layer.stride, layer.pad, exact=False
                    )
            elif node.op == "bn":
                bn = self.bns[node.bn_id - 1]
                src = values[node.inputs[0]]
                if train:
                    y, mu, var, cache = ops.bn_train_core(
                        src.data, bn.state.gamma, bn.state.beta, bn.state.eps
                    )
                    n = src.shape[0] * src.shape[2] * src.shape[3]
                    mom = bn.state.momentum
                    if ParamKey(node.bn_id, ParamKind.BN_RM) not in freeze:
                        bn.state.run_mean = (
                            (1.0 - mom) * bn.state.run_mean + mom * mu
                        ).astype(bn.state.run_mean.dtype)
                    if ParamKey(node.bn_id, ParamKind.BN_RV) not in freeze:
                        unbiased = var * (n / (n - 1))
                        bn.state.run_var = (
                            (1.0 - mom) * bn.state.run_var + mom * unbiased
                        ).astype(bn.state.run_var.dtype)
                    values[i] = Tensor(y)
                    if keep:
                        caches[i] = cache
                else:
                    values[i] = ops.bn_forward_eval(src, bn.state)
            elif node.op == "relu":
                values[i] = ops.relu_forward(values[node.inputs[0]])
            elif node.op == "maxpool2":
                values[i] = ops.maxpool2_forward(values[node.inputs[0]])
            elif node.op == "upsample2":
                values[i] = ops.upsample_nearest2_forward(values[node.inputs[0]])
            elif node.op == "upsample_to":
                src = values[node.inputs[0]]
                ref = values[node.ref]
                sh = ref.shape[2] // src.shape[2]
                sw = ref.shape[3] // src.shape[3]
                if src.shape[2] * sh != ref.shape[2] or src.shape[3] * sw != ref.shape[3]:
                    raise ShapeError(
                        f"upsample_to needs integer scales: {src.shape[2:]} -> {ref.shape[2:]}"
                    )
                values[i] = ops.upsample_nearest_forward(src, sh, sw)
                if keep:
                    caches[i] = (sh, sw)
            elif node.op == "gap":
                values[i] = ops.global_avg_pool_forward(values[node.inputs[0]])
            elif node.op == "concat":
                values[i] = ops.concat_channels_forward([values[j] for j in node.inputs])
            elif node.op == "add":
                values[i] = ops.add_forward(values[node.inputs[0]], values[node.inputs[1]])
            else:  # pragma: no cover
                raise RuntimeError(f"unhandled op {node.op}")
        return values[-1], values, caches

    def backward_cached(self, values: list, caches: list, grad_logits: Tensor) -> None:
        """Backpropagate through the cached train-mode forward.

        Accumulates into the .grad slots of conv weights/biases and BN
        gamma/beta. Running statistics carry no gradients.
        """
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[-1] = grad_logits.data

        def acc(idx: int, g: np.ndarray) -> None:
            if grads[idx] is None:
                grads[idx] = g.copy()
            else:
                grads[idx] += g

        for i in range(len(self.nodes) - 1, 0, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            src_idx = node.inputs[0] if node.inputs else -1
            if node.op == "conv":
                layer = self.convs[node.conv_id - 1]
                need_gx = src_idx != 0
                gx, gw, gb = ops.conv2d_backward(
                    values[src_idx], layer.w, Tensor(g), layer.stride, layer.pad,
                    cols=caches[i], need_grad_x=need_gx,
                )
                layer.w.accumulate_grad(gw.data)
                layer.b.accumulate_grad(gb.data)
                if need_gx:
                    acc(src_idx, gx.data)
            elif node.op == "bn":
                bn = self.bns[node.bn_id - 1]
                gx, ggamma, gbeta = ops.bn_train_backward(caches[i], g)
                bn.gamma_t.accumulate_grad(ggamma)
                bn.beta_t.accumulate_grad(gbeta)
                acc(src_idx, gx)
            elif node.op == "relu":
                acc(src_idx, ops.relu_backward(values[src_idx], Tensor(g)).data)
            elif node.op == "maxpool2":
                acc(src_idx, ops.maxpool2_backward(values[src_idx], Tensor(g)).data)
            elif node.op == "upsample2":
                acc(src_idx, ops.upsample_nearest2_backward(values[src_idx], Tensor(g)).data)
            elif node.op == "upsample_to":
                sh, sw = caches[i]
                acc(src_idx, ops.upsample_nearest_backward(values[src_idx], Tensor(g), sh, sw).data)
            elif node.op == "gap":
                acc(src_idx, ops.global_avg_pool_backward(values[src_idx], Tensor(g)).data)
            elif node.op == "concat":
                counts = [values[j].shape[1] for j in node.inputs]
                parts = ops.concat_channels_backward(Tensor(g), counts)
                for j, part in zip(node.inputs, parts):
                    acc(j, part.data)
            elif node.op == "add":
                acc(node.inputs[0], g)
                acc(node.inputs[1], g)


def build_model(arch_id: str, seed: int) -> Model:
    """Construct an architecture with seeded Kaiming-uniform conv weights.

    Conv weights are uniform in +-sqrt(6/fan_in) with fan_in = Cin*Kh*Kw,
    biases start at zero, BN layers at identity (gamma=1, beta=0,
    run_mean=0, run_var=1).
    """
    if arch_id not in _BUILDERS:
        raise UnknownKeyError(f"unknown arch_id {arch_id!r}")
    b = _Builder()
    _BUILDERS[arch_id](b)
    rng = Rng(derive_seed(seed, f"init/{arch_id}"))
    for layer in b.convs:
        cout, cin, kh, kw = layer.w.shape
        bound = math.sqrt(6.0 / (cin * kh * kw))
        layer.w.data[...] = rng.uniform(-bound, bound, (cout, cin, kh, kw), dtype=REAL)
    return Model(arch_id, b.nodes, b.convs, b.bns)
