"""Sequential networks: specs, forward/backward, loss heads, SGD and parameter files."""

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import (
    ConsistencyError,
    DuplicateNameError,
    FormatError,
    LabelError,
    ParameterError,
    ShapeError,
)
from .tensor import check_dims, tensor_read, tensor_write

KINDS = ("conv", "pool", "relu", "gap")
PIXEL_CE = "pixel_softmax_ce"
GLOBAL_CE = "global_softmax_ce"
LOSS_KINDS = (PIXEL_CE, GLOBAL_CE)
IGNORE = -1


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    conv: L.ConvSpec = None
    pool: L.PoolSpec = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if (self.conv is not None) != (self.kind == "conv"):
            raise ShapeError(f"layer {self.name}: conv spec must be present iff kind is conv")
        if (self.pool is not None) != (self.kind == "pool"):
            raise ShapeError(f"layer {self.name}: pool spec must be present iff kind is pool")

    @property
    def geometry(self):
        """The conv or pool spec, whichever this layer carries."""
        return self.conv if self.kind == "conv" else self.pool


@dataclass(frozen=True)
class NetworkSpec:
    input_dims: tuple
    layers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "input_dims", check_dims(self.input_dims))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate layer names in {names}")

    def index_of(self, name):
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def with_input(self, dims):
        return replace(self, input_dims=tuple(dims))


def conv(name, k, in_ch, out_ch, stride=1, pad=0, est=1, bias=True):
    kh, kw = (k, k) if isinstance(k, int) else k
    return LayerSpec(name, "conv", conv=L.ConvSpec(kh, kw, in_ch, out_ch, stride, pad, est, bias))


def pool(name, k, stride, pad=0, est=1):
    kh, kw = (k, k) if isinstance(k, int) else k
    return LayerSpec(name, "pool", pool=L.PoolSpec(kh, kw, stride, pad, est))


def relu(name):
    return LayerSpec(name, "relu")


def gap(name):
    return LayerSpec(name, "gap")


def infer_shapes(net):
    """Output dims of every layer, in order."""
    dims = net.input_dims
    shapes = []
    for layer in net.layers:
        try:
            if layer.kind == "conv":
                dims = L.conv_output_dims(dims, layer.conv)
            elif layer.kind == "pool":
                dims = L.pool_output_dims(dims, layer.pool)
            elif layer.kind == "gap":
                dims = (1, 1, dims[2])
        except ShapeError as exc:
            raise ShapeError(f"layer {layer.name}: {exc}") from None
        shapes.append(dims)
    return shapes


def output_dims(net):
    shapes = infer_shapes(net)
    return shapes[-1] if shapes else net.input_dims


def param_shapes(net):
    """Keys and shapes of the parameters a network demands, in layer order."""
    shapes = {}
    for layer in net.layers:
        if layer.kind == "conv":
            shapes[f"{layer.name}.weight"] = layer.conv.weight_dims
            if layer.conv.has_bias:
                shapes[f"{layer.name}.bias"] = layer.conv.bias_dims
    return shapes


def check_params(net, params):
    demanded = param_shapes(net)
    for key, shape in demanded.items():
        if key not in params:
            raise ParameterError(f"missing parameter {key}")
        if tuple(params[key].shape) != shape:
            raise ParameterError(
                f"parameter {key} has shape {tuple(params[key].shape)}, expected {shape}"
            )
    extra = set(params) - set(demanded)
    if extra:
        raise ParameterError(f"unexpected parameters {sorted(extra)}")


def init_params(net, rng):
    """He-uniform weights drawn in layer order from ``rng``; zero biases."""
    params = {}
    for key, shape in param_shapes(net).items():
        if key.endswith(".bias"):
            params[key] = np.zeros(shape)
            continue
        spec = net.layers[net.index_of(key[: -len(".weight")])].conv
        bound = math.sqrt(6.0 / (spec.kernel_h * spec.kernel_w * spec.in_channels))
        n = shape[0] * shape[1] * shape[2]
        params[key] = rng.fill(n, -bound, bound).reshape(shape)
    return params


@dataclass
class ForwardCache:
    net: NetworkSpec
    inputs: list = field(default_factory=list)
    argmax: dict = field(default_factory=dict)


def forward(net, params, x, fast=False):
    """Run every layer in order.  Returns ``(output, cache)``."""
    if tuple(x.shape) != net.input_dims:
        raise ShapeError(f"input has shape {tuple(x.shape)}, expected {net.input_dims}")
    check_params(net, params)
    cache = ForwardCache(net)
    for layer in net.layers:
        cache.inputs.append(x)
        if layer.kind == "conv":
            x = L.conv_forward(
                x, params[f"{layer.name}.weight"], params.get(f"{layer.name}.bias"),
                layer.conv, fast=fast,
            )
        elif layer.kind == "pool":
            x, cache.argmax[layer.name] = L.pool_forward(x, layer.pool)
        elif layer.kind == "relu":
            x = L.relu_forward(x)
        else:
            x = L.gap_forward(x)
    return x, cache


def backward(net, params, cache, grad_out):
    """Reverse pass.  Returns ``(param_grads, grad_input)``."""
    if cache.net != net or len(cache.inputs) != len(net.layers):
        raise ConsistencyError("forward cache does not belong to this network")
    grads = {}
    g = grad_out
    for layer, x in zip(reversed(net.layers), reversed(cache.inputs)):
        if layer.kind == "conv":
            g, gw, gb = L.conv_backward(x, params[f"{layer.name}.weight"], layer.conv, g)
            grads[f"{layer.name}.weight"] = gw
            if gb is not None:
                grads[f"{layer.name}.bias"] = gb
        elif layer.kind == "pool":
            g = L.pool_backward(cache.argmax[layer.name], x.shape, g)
        elif layer.kind == "relu":
            g = L.relu_backward(x, g)
        else:
            g = L.gap_backward(x.shape, g)
    ordered = {key: grads[key] for key in param_shapes(net)}
    return ordered, g


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_forward(output, labels, kind):
    """Mean softmax cross-entropy and its gradient with respect to ``output``.

    ``pixel_softmax_ce`` takes an (H, W) integer label map where -1 marks
    positions to ignore; ``global_softmax_ce`` takes a single class id and a
    (1, 1, C) output.  With every position ignored the loss is 0.
    """
    h, w, c = output.shape
    if kind == GLOBAL_CE:
        if (h, w) != (1, 1):
            raise ShapeError(f"global loss needs a (1, 1, C) output, got {output.shape}")
        labels = np.full((1, 1), int(np.asarray(labels).reshape(-1)[0]))
    elif kind == PIXEL_CE:
        labels = np.asarray(labels)
        if labels.ndim == 3 and labels.shape[2] == 1:
            labels = labels[:, :, 0]
        if labels.shape != (h, w):
            raise ShapeError(f"label map has shape {labels.shape}, expected {(h, w)}")
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    labels = labels.astype(np.int64)
    if labels.max(initial=IGNORE) >= c or labels.min(initial=0) < IGNORE:
        raise LabelError(f"label ids must lie in [-1, {c - 1}]")
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(output)
    logp = _log_softmax(output)
    idx = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, idx[:, :, None], axis=2)[:, :, 0]
    loss = -float(picked[valid].sum()) / n
    grad = np.exp(logp)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, idx[:, :, None], 1.0, axis=2)
    grad = (grad - onehot) * valid[:, :, None] / n
    return loss, grad


def sgd_step(params, grads, lr):
    if set(params) != set(grads):
        raise ParameterError(
            f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}"
        )
    updated = {}
    for key, p in params.items():
        if grads[key].shape != p.shape:
            raise ParameterError(f"gradient for {key} has shape {grads[key].shape}")
        updated[key] = p - lr * grads[key]
    return updated


PARAM_MAGIC = b"EPRM"
PARAM_VERSION = 1


def params_write(params, sink):
    sink.write(PARAM_MAGIC + struct.pack("<BI", PARAM_VERSION, len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        sink.write(struct.pack("<H", len(raw)) + raw)
        tensor_write(t, sink)


def params_read(source):
    head = source.read(9)
    if len(head) != 9:
        raise FormatError("header", "truncated parameter header")
    if head[:4] != PARAM_MAGIC:
        raise FormatError("magic", f"expected {PARAM_MAGIC!r}, got {head[:4]!r}")
    version, count = struct.unpack("<BI", head[4:])
    if version != PARAM_VERSION:
        raise FormatError("version", f"unsupported version {version}")
    params = {}
    for _ in range(count):
        size = source.read(2)
        if len(size) != 2:
            raise FormatError("name_length", "truncated entry")
        (n,) = struct.unpack("<H", size)
        raw = source.read(n)
        if len(raw) != n:
            raise FormatError("name", "truncated entry name")
        name = raw.decode("utf-8")
        if name in params:
            raise DuplicateNameError(name)
        params[name] = tensor_read(source)
    return params


def save_params(path, params):
    with open(path, "wb") as fh:
        params_write(params, fh)


def load_params(path):
    with open(path, "rb") as fh:
        return params_read(fh)
