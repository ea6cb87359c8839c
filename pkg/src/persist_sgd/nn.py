"""Layer stack, cross-entropy loss and exact backpropagation in float64.

Conventions
-----------
* Batches are leading-axis arrays: dense activations are ``(n, features)``,
  image activations are ``(n, channels, height, width)``.
* All parameters live in one flat float64 vector. Each parametric layer owns
  a contiguous slot ``[weights (row-major), biases]``.
* Gradients are the SUM of per-example gradients. Per-example contributions
  are computed without mixing examples and then accumulated in ascending
  example order (:func:`ordered_sum`), so ``grad([x, x]) == 2 * grad([x])``
  holds bitwise and the result never depends on batch composition.
* Products that contract a feature axis use broadcast-multiply followed by a
  numpy reduction instead of BLAS; the reduction order then depends only on
  the row being reduced, which keeps every example independent of its
  neighbours in the batch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .rng import INIT_STREAM, make_rng


class LayerKind(str, enum.Enum):
    DENSE = "dense"
    CONV2D = "conv2d"
    MAXPOOL2D = "maxpool2d"
    RELU = "relu"
    FLATTEN = "flatten"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    Conv2D always uses stride 1 without padding; MaxPool2D always uses a 2x2
    window with stride 2. Use the classmethod constructors rather than
    filling fields by hand.
    """

    kind: LayerKind
    in_dim: int | None = None
    out_dim: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None

    @classmethod
    def dense(cls, in_dim: int, out_dim: int) -> "LayerSpec":
        return cls(LayerKind.DENSE, in_dim=int(in_dim), out_dim=int(out_dim))

    @classmethod
    def conv2d(cls, in_channels: int, out_channels: int, kernel_size: int) -> "LayerSpec":
        return cls(
            LayerKind.CONV2D,
            in_channels=int(in_channels),
            out_channels=int(out_channels),
            kernel_size=int(kernel_size),
        )

    @classmethod
    def maxpool2d(cls) -> "LayerSpec":
        return cls(LayerKind.MAXPOOL2D)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls(LayerKind.FLATTEN)

    @property
    def is_parametric(self) -> bool:
        return self.kind in (LayerKind.DENSE, LayerKind.CONV2D)

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.DENSE:
            return (self.out_dim, self.in_dim)
        if self.kind is LayerKind.CONV2D:
            k = self.kernel_size
            return (self.out_channels, self.in_channels, k, k)
        return ()

    def bias_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.DENSE:
            return (self.out_dim,)
        if self.kind is LayerKind.CONV2D:
            return (self.out_channels,)
        return ()

    def fan_in(self) -> int:
        if self.kind is LayerKind.DENSE:
            return self.in_dim
        if self.kind is LayerKind.CONV2D:
            return self.in_channels * self.kernel_size**2
        return 0

    def describe(self) -> str:
        if self.kind is LayerKind.DENSE:
            return f"Dense({self.in_dim}->{self.out_dim})"
        if self.kind is LayerKind.CONV2D:
            k = self.kernel_size
            return f"Conv2D({self.in_channels}->{self.out_channels}, {k}x{k})"
        return {
            LayerKind.MAXPOOL2D: "MaxPool2D(2x2)",
            LayerKind.RELU: "ReLU",
            LayerKind.FLATTEN: "Flatten",
        }[self.kind]


def _layer_output_shape(spec: LayerSpec, shape: tuple[int, ...], who: str) -> tuple[int, ...]:
    """Shape produced by ``spec`` from ``shape``; ``who`` names the producer."""
    here = spec.describe()

    def mismatch(expected: str) -> ConfigError:
        return ConfigError(f"{who} produces shape {shape} but {here} expects {expected}")

    if spec.kind is LayerKind.DENSE:
        if min(spec.in_dim, spec.out_dim) < 1:
            raise ConfigError(f"{here}: dimensions must be positive")
        if shape != (spec.in_dim,):
            raise mismatch(f"({spec.in_dim},)")
        return (spec.out_dim,)
    if spec.kind is LayerKind.CONV2D:
        if min(spec.in_channels, spec.out_channels, spec.kernel_size) < 1:
            raise ConfigError(f"{here}: channel counts and kernel size must be positive")
        if len(shape) != 3 or shape[0] != spec.in_channels:
            raise mismatch(f"({spec.in_channels}, H, W)")
        k = spec.kernel_size
        if k > shape[1] or k > shape[2]:
            raise ConfigError(f"{here}: kernel larger than input {shape[1:]} from {who}")
        return (spec.out_channels, shape[1] - k + 1, shape[2] - k + 1)
    if spec.kind is LayerKind.MAXPOOL2D:
        if len(shape) != 3:
            raise mismatch("(C, H, W)")
        if shape[1] < 2 or shape[2] < 2:
            raise ConfigError(f"{here}: 2x2 window larger than input {shape[1:]} from {who}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if spec.kind is LayerKind.RELU:
        return shape
    if spec.kind is LayerKind.FLATTEN:
        return (math.prod(shape),)
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


def chain_shapes(specs, input_shape) -> list[tuple[int, ...]]:
    """Activation shapes ``[input, after layer 0, ..., after last layer]``.

    Raises :class:`ConfigError` naming both layers when a layer's input does
    not match its predecessor's output.
    """
    specs = list(specs)
    if not specs:
        raise ConfigError("network needs at least one layer")
    if input_shape is None:
        first = specs[0]
        if first.kind is not LayerKind.DENSE:
            raise ConfigError(f"input_shape is required when the first layer is {first.describe()}")
        input_shape = (first.in_dim,)
    shapes = [tuple(int(s) for s in input_shape)]
    for i, spec in enumerate(specs):
        who = "input" if i == 0 else f"layer {i - 1} {specs[i - 1].describe()}"
        try:
            shapes.append(_layer_output_shape(spec, shapes[-1], who))
        except ConfigError as exc:
            raise ConfigError(f"layer {i}: {exc}") from None
    if len(shapes[-1]) != 1:
        raise ConfigError(f"network output must be a vector of logits, got shape {shapes[-1]}")
    return shapes


@dataclass
class Network:
    """A layer stack together with its flat parameter vector."""

    specs: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    params: np.ndarray
    shapes: tuple[tuple[int, ...], ...] = field(repr=False)
    offsets: tuple[int | None, ...] = field(repr=False)

    @property
    def num_params(self) -> int:
        return self.params.size

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def layer_params(self, i: int, vector: np.ndarray | None = None):
        """Views ``(weights, biases)`` of layer ``i`` into ``vector`` (default: params)."""
        vec = self.params if vector is None else vector
        spec = self.specs[i]
        start = self.offsets[i]
        if start is None:
            raise ConfigError(f"layer {i} ({spec.describe()}) has no parameters")
        ws, bs = spec.weight_shape(), spec.bias_shape()
        nw = math.prod(ws)
        w = vec[start : start + nw].reshape(ws)
        b = vec[start + nw : start + nw + math.prod(bs)]
        return w, b

    def copy(self) -> "Network":
        return Network(self.specs, self.input_shape, self.params.copy(), self.shapes, self.offsets)


def _parameter_layout(specs) -> tuple[tuple[int | None, ...], int]:
    offsets, total = [], 0
    for spec in specs:
        if spec.is_parametric:
            offsets.append(total)
            total += math.prod(spec.weight_shape()) + math.prod(spec.bias_shape())
        else:
            offsets.append(None)
    return tuple(offsets), total


def build_network(specs, params=None, input_shape=None) -> Network:
    """Assemble a :class:`Network` around an existing parameter vector (zeros if None)."""
    specs = tuple(specs)
    shapes = chain_shapes(specs, input_shape)
    offsets, total = _parameter_layout(specs)
    if params is None:
        vec = np.zeros(total)
    else:
        vec = np.array(params, dtype=np.float64).reshape(-1)
        if vec.size != total:
            raise ConfigError(f"expected {total} parameters, got {vec.size}")
    return Network(specs, shapes[0], vec, tuple(shapes), offsets)


def init_network(specs, seed: int, input_shape=None) -> Network:
    """Create a network with weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.

    Layers draw from one PCG64 stream in layer order, so ``(specs, seed,
    input_shape)`` fully determines the parameter vector bitwise.
    """
    net = build_network(specs, input_shape=input_shape)
    rng = make_rng(seed, INIT_STREAM)
    for i, spec in enumerate(net.specs):
        if not spec.is_parametric:
            continue
        w, _ = net.layer_params(i)
        bound = 1.0 / math.sqrt(spec.fan_in())
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return net


def ordered_sum(per_example: np.ndarray) -> np.ndarray:
    """Sum along axis 0 strictly in ascending index order."""
    total = per_example[0].copy()
    for item in per_example[1:]:
        total += item
    return total


# -- per-layer kernels ----------------------------------------------------


def dense_forward(x, w, b):
    return (x[:, None, :] * w[None, :, :]).sum(axis=-1) + b


def dense_backward(dy, x, w, need_dx=True):
    """Return ``(dx, dw, db)``; parameter gradients are summed over the batch."""
    dw = ordered_sum(dy[:, :, None] * x[:, None, :])
    db = ordered_sum(dy)
    dx = (dy[:, :, None] * w[None, :, :]).sum(axis=1) if need_dx else None
    return dx, dw, db


def _im2col(x, k):
    n, c, h, wd = x.shape
    ho, wo = h - k + 1, wd - k + 1
    windows = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * k * k)


def conv2d_forward(x, w, b):
    """Valid (unpadded) stride-1 convolution.

    Returns ``(y, patches)`` with ``y`` of shape ``(n, out_c, h-k+1, w-k+1)``;
    ``patches`` is what :func:`conv2d_backward` needs.
    """
    x = np.asarray(x, dtype=np.float64)
    out_c, in_c, k, _ = w.shape
    n, c, h, wd = x.shape
    if c != in_c:
        raise ConfigError(f"conv expects {in_c} input channels, got {c}")
    if k > h or k > wd:
        raise ConfigError(f"conv kernel {k}x{k} larger than input {h}x{wd}")
    patches = _im2col(x, k)  # n, P, Q
    wf = w.reshape(out_c, -1)
    y = (patches[:, :, None, :] * wf[None, None, :, :]).sum(axis=-1) + b  # n, P, O
    y = y.transpose(0, 2, 1).reshape(n, out_c, h - k + 1, wd - k + 1)
    return y, patches


def conv2d_backward(dy, patches, w, in_shape, need_dx=True):
    """Return ``(dx, dw, db)`` for :func:`conv2d_forward`; ``in_shape`` is ``x.shape``."""
    out_c, in_c, k, _ = w.shape
    n = dy.shape[0]
    dyp = np.ascontiguousarray(dy.reshape(n, out_c, -1).transpose(0, 2, 1))  # n, P, O
    dw = ordered_sum((dyp[:, :, :, None] * patches[:, :, None, :]).sum(axis=1)).reshape(w.shape)
    db = ordered_sum(dyp.sum(axis=1))
    if not need_dx:
        return None, dw, db
    _, _, h, wd = in_shape
    ho, wo = h - k + 1, wd - k + 1
    wf = w.reshape(out_c, -1)
    dpatch = (dyp[:, :, :, None] * wf[None, None, :, :]).sum(axis=2)  # n, P, Q
    dpatch = dpatch.reshape(n, ho, wo, in_c, k, k)
    dx = np.zeros(in_shape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + ho, j : j + wo] += dpatch[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def maxpool_forward(x):
    """2x2 max-pool, stride 2; odd trailing rows/columns are dropped.

    Returns ``(y, argmax)`` where ``argmax`` indexes each window in row-major
    order; ties resolve to the first maximal element.
    """
    x = np.asarray(x, dtype=np.float64)
    n, c, h, wd = x.shape
    if h < 2 or wd < 2:
        raise ConfigError(f"2x2 pool window larger than input {h}x{wd}")
    ho, wo = h // 2, wd // 2
    win = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, 4)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool_backward(dy, argmax, in_shape):
    n, c, h, wd = in_shape
    ho, wo = h // 2, wd // 2
    dwin = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(dwin, argmax[..., None], dy[..., None], axis=-1)
    dwin = dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    dx = np.zeros(in_shape)
    dx[:, :, : 2 * ho, : 2 * wo] = dwin
    return dx


def relu_forward(x):
    return np.where(x > 0, x, 0.0)


def relu_backward(dy, x):
    return np.where(x > 0, dy, 0.0)


# -- loss -----------------------------------------------------------------


def batch_softmax_cross_entropy(logits, labels):
    """Per-example cross entropy and its gradient w.r.t. the logits.

    ``loss_i = logsumexp(z_i) - z_i[y_i]`` with the row max subtracted before
    exponentiating; ``grad_i = softmax(z_i) - onehot(y_i)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ConfigError(f"logits must have shape (n, C) with C >= 2, got {z.shape}")
    labels = np.asarray(labels)
    n, c = z.shape
    if labels.shape != (n,):
        raise ConfigError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ConfigError(f"label {bad} out of range for {c} classes")
    labels = labels.astype(np.intp)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=1)
    rows = np.arange(n)
    losses = np.log(s) - shifted[rows, labels]
    grad = e / s[:, None]
    grad[rows, labels] -= 1.0
    return losses, grad


def softmax_cross_entropy(logits, label: int):
    """Cross entropy of one logit vector; returns ``(loss, dloss/dlogits)``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ConfigError(f"expected a logit vector, got shape {z.shape}")
    losses, grad = batch_softmax_cross_entropy(z[None, :], np.array([label]))
    return float(losses[0]), grad[0]


# -- whole network --------------------------------------------------------


@dataclass
class ForwardCache:
    network: Network
    params: np.ndarray
    activations: list
    aux: list


def forward(net: Network, inputs):
    """Run the stack on a batch; returns ``(logits, cache)``."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == len(net.input_shape):
        x = x[None]
    if x.shape[1:] != net.input_shape or x.shape[0] < 1:
        raise ConfigError(f"batch shape {x.shape} does not match network input {net.input_shape}")
    activations, aux = [x], []
    for i, spec in enumerate(net.specs):
        extra = None
        if spec.kind is LayerKind.DENSE:
            w, b = net.layer_params(i)
            x = dense_forward(x, w, b)
        elif spec.kind is LayerKind.CONV2D:
            w, b = net.layer_params(i)
            x, extra = conv2d_forward(x, w, b)
        elif spec.kind is LayerKind.MAXPOOL2D:
            x, extra = maxpool_forward(x)
        elif spec.kind is LayerKind.RELU:
            x = relu_forward(x)
        else:
            x = x.reshape(x.shape[0], -1)
        activations.append(x)
        aux.append(extra)
    return x, ForwardCache(net, net.params.copy(), activations, aux)


def backward(net: Network, cache: ForwardCache, dlogits) -> np.ndarray:
    """Gradient of ``sum_i L_i`` given ``dL_i/dlogits_i`` for every example.

    The cache must come from :func:`forward` on this network with the current
    parameters; anything else raises :class:`ConfigError`.
    """
    if cache is None:
        raise ConfigError("backward called without a forward cache")
    if cache.network is not net or not np.array_equal(cache.params, net.params):
        raise ConfigError("stale forward cache: parameters changed since forward")
    dy = np.asarray(dlogits, dtype=np.float64)
    if dy.shape != cache.activations[-1].shape:
        raise ConfigError(f"dlogits shape {dy.shape} != logits shape {cache.activations[-1].shape}")
    grad = np.zeros(net.num_params)
    for i in range(len(net.specs) - 1, -1, -1):
        spec = net.specs[i]
        x = cache.activations[i]
        need_dx = i > 0
        if spec.kind is LayerKind.DENSE:
            w, _ = net.layer_params(i)
            gw, gb = net.layer_params(i, grad)
            dy, gw[...], gb[...] = dense_backward(dy, x, w, need_dx)
        elif spec.kind is LayerKind.CONV2D:
            w, _ = net.layer_params(i)
            gw, gb = net.layer_params(i, grad)
            dy, gw[...], gb[...] = conv2d_backward(dy, cache.aux[i], w, x.shape, need_dx)
        elif spec.kind is LayerKind.MAXPOOL2D:
            dy = maxpool_backward(dy, cache.aux[i], x.shape)
        elif spec.kind is LayerKind.RELU:
            dy = relu_backward(dy, x)
        else:
            dy = dy.reshape(x.shape)
    return grad


def loss_and_gradient(net: Network, inputs, labels):
    """Per-example losses and the summed parameter gradient for one minibatch."""
    logits, cache = forward(net, inputs)
    losses, dlogits = batch_softmax_cross_entropy(logits, labels)
    return losses, backward(net, cache, dlogits)


# -- architecture strings -------------------------------------------------

DEFAULT_ARCH = "dense:64,relu"


def parse_arch(text: str, input_shape, num_classes: int) -> list[LayerSpec]:
    """Expand a comma-separated layer string into a full stack.

    Tokens: ``dense:OUT``, ``conv:OUTxK`` (stride 1, no padding), ``pool``
    (2x2, stride 2), ``relu``, ``flatten``. Input sizes are inferred from the
    running shape. A ``Flatten`` is inserted before a dense layer that follows
    image activations, and the classifier ``Dense(..., num_classes)`` is always
    appended, so ``"dense:64,relu"`` is a two-layer MLP.
    """
    shape = tuple(int(s) for s in input_shape)
    specs: list[LayerSpec] = []

    def add(spec):
        nonlocal shape
        who = "input" if not specs else f"layer {len(specs) - 1} {specs[-1].describe()}"
        shape = _layer_output_shape(spec, shape, who)
        specs.append(spec)

    def add_dense(out):
        if len(shape) != 1:
            add(LayerSpec.flatten())
        add(LayerSpec.dense(shape[0], out))

    for raw in (t.strip().lower() for t in text.split(",")):
        if not raw:
            continue
        name, _, arg = raw.partition(":")
        try:
            if name == "dense":
                add_dense(int(arg))
            elif name == "conv":
                out, _, k = arg.partition("x")
                if len(shape) != 3:
                    raise ConfigError(f"conv needs (C, H, W) input, have {shape}")
                add(LayerSpec.conv2d(shape[0], int(out), int(k)))
            elif name in ("pool", "maxpool") and not arg:
                add(LayerSpec.maxpool2d())
            elif name == "relu" and not arg:
                add(LayerSpec.relu())
            elif name == "flatten" and not arg:
                add(LayerSpec.flatten())
            else:
                raise ConfigError(f"unknown layer token {raw!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise ConfigError(f"arch {text!r}: {exc}") from None
            raise ConfigError(f"arch {text!r}: bad size in token {raw!r}") from None
    add_dense(num_classes)
    return specs
