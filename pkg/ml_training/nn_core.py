# [file name]: nn_core.py
"""
Minimal neural-network engine on numpy arrays.

- layer descriptors (Dense, Conv2d, MaxPool2d, ReLU, Dropout, Flatten)
- NetworkSpec with shape inference and a one-layer-per-line text form
- ParamVector: one flat vector plus a per-layer (offset, length, shape) table
- Network: forward pass that records a context, exact reverse-mode backward
- capacity-scaled FCNN / CNN constructors

Tensors are plain row-major numpy arrays with a leading batch dimension.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax as _scipy_softmax

from ml_training.errors import NetworkUsageError, ShapeError, ValidationError

Tensor = np.ndarray


# ---------------------------------------------------------------- layers

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = True

    def output_shape(self, input_shape):
        if len(input_shape) != 1 or input_shape[0] != self.in_features:
            raise ValueError(f"expects ({self.in_features},) input, got {tuple(input_shape)}")
        return (self.out_features,)

    def param_shapes(self):
        shapes = [("weight", (self.in_features, self.out_features))]
        if self.bias:
            shapes.append(("bias", (self.out_features,)))
        return shapes

    def fans(self):
        return self.in_features, self.out_features

    def forward(self, x, weights, rng):
        y = x @ weights["weight"]
        if self.bias:
            y = y + weights["bias"]
        return y, x

    def backward(self, grad, weights, cache):
        x = cache
        grads = {"weight": x.T @ grad}
        if self.bias:
            grads["bias"] = grad.sum(axis=0)
        return grad @ weights["weight"].T, grads

    def to_text(self):
        text = f"dense {self.in_features} {self.out_features}"
        return text if self.bias else text + " nobias"


@dataclass(frozen=True)
class Conv2d:
    """Valid (unpadded) convolution, NCHW layout"""

    in_channels: int
    num_kernels: int
    kernel_size: int
    stride: int = 1

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ValueError(f"expects (C, H, W) input, got {tuple(input_shape)}")
        channels, height, width = input_shape
        if channels != self.in_channels:
            raise ValueError(f"expects {self.in_channels} input channels, got {channels}")
        if height < self.kernel_size or width < self.kernel_size:
            raise ValueError(f"kernel {self.kernel_size} larger than input {height}x{width}")
        out_h = (height - self.kernel_size) // self.stride + 1
        out_w = (width - self.kernel_size) // self.stride + 1
        return (self.num_kernels, out_h, out_w)

    def param_shapes(self):
        k = self.kernel_size
        return [("weight", (self.num_kernels, self.in_channels, k, k)), ("bias", (self.num_kernels,))]

    def fans(self):
        area = self.kernel_size * self.kernel_size
        return self.in_channels * area, self.num_kernels * area

    def forward(self, x, weights, rng):
        k, s = self.kernel_size, self.stride
        # (N, C, Ho, Wo, k, k)
        windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        y = np.tensordot(windows, weights["weight"], axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + weights["bias"][None, :, None, None]
        return y, (x.shape, windows)

    def backward(self, grad, weights, cache):
        x_shape, windows = cache
        k, s = self.kernel_size, self.stride
        kernel = weights["weight"]
        out_h, out_w = grad.shape[2], grad.shape[3]

        grads = {
            "weight": np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])),
            "bias": grad.sum(axis=(0, 2, 3)),
        }
        grad_x = np.zeros(x_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contribution = np.tensordot(grad, kernel[:, :, i, j], axes=([1], [0]))
                grad_x[:, :, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += \
                    contribution.transpose(0, 3, 1, 2)
        return grad_x, grads

    def to_text(self):
        return f"conv {self.in_channels} {self.num_kernels} {self.kernel_size} {self.stride}"


@dataclass(frozen=True)
class MaxPool2d:
    """Non-overlapping max pooling, stride = kernel_size, floor output size"""

    kernel_size: int

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ValueError(f"expects (C, H, W) input, got {tuple(input_shape)}")
        channels, height, width = input_shape
        k = self.kernel_size
        if height < k or width < k:
            raise ValueError(f"pool {k} larger than input {height}x{width}")
        return (channels, height // k, width // k)

    def param_shapes(self):
        return []

    def _blocks(self, x):
        n, c, h, w = x.shape
        k = self.kernel_size
        out_h, out_w = h // k, w // k
        cropped = x[:, :, :out_h * k, :out_w * k]
        return cropped.reshape(n, c, out_h, k, out_w, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, out_h, out_w, k * k)

    def forward(self, x, weights, rng):
        blocks = self._blocks(x)
        # ties route the gradient to the first maximum
        winners = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, winners[..., None], axis=-1)[..., 0]
        return y, (x.shape, winners)

    def backward(self, grad, weights, cache):
        x_shape, winners = cache
        n, c, out_h, out_w = grad.shape
        k = self.kernel_size
        routed = np.zeros((n, c, out_h, out_w, k * k), dtype=grad.dtype)
        np.put_along_axis(routed, winners[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(n, c, out_h, out_w, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, out_h * k, out_w * k)
        grad_x = np.zeros(x_shape, dtype=grad.dtype)
        grad_x[:, :, :out_h * k, :out_w * k] = routed
        return grad_x, {}

    def to_text(self):
        return f"maxpool {self.kernel_size}"


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, input_shape):
        return tuple(input_shape)

    def param_shapes(self):
        return []

    def forward(self, x, weights, rng):
        active = x > 0
        return x * active, active

    def backward(self, grad, weights, cache):
        return grad * cache, {}

    def to_text(self):
        return "relu"


@dataclass(frozen=True)
class Dropout:
    """Inverted dropout; identity unless an rng is supplied (Train mode)"""

    rate: float

    def output_shape(self, input_shape):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        return tuple(input_shape)

    def param_shapes(self):
        return []

    def forward(self, x, weights, rng):
        if rng is None or self.rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        keep = keep.astype(x.dtype, copy=False)
        return x * keep, keep

    def backward(self, grad, weights, cache):
        if cache is None:
            return grad, {}
        return grad * cache, {}

    def to_text(self):
        return f"dropout {self.rate!r}"


@dataclass(frozen=True)
class Flatten:
    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def param_shapes(self):
        return []

    def forward(self, x, weights, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, weights, cache):
        return grad.reshape(cache), {}

    def to_text(self):
        return "flatten"


LAYER_TYPES = (Dense, Conv2d, MaxPool2d, ReLU, Dropout, Flatten)


def _parse_layer(tokens):
    kind, args = tokens[0].lower(), tokens[1:]
    if kind == "dense":
        bias = True
        if args and args[-1] == "nobias":
            bias, args = False, args[:-1]
        return Dense(int(args[0]), int(args[1]), bias=bias)
    if kind == "conv":
        stride = int(args[3]) if len(args) > 3 else 1
        return Conv2d(int(args[0]), int(args[1]), int(args[2]), stride)
    if kind == "maxpool":
        return MaxPool2d(int(args[0]))
    if kind == "relu":
        return ReLU()
    if kind == "dropout":
        return Dropout(float(args[0]))
    if kind == "flatten":
        return Flatten()
    raise ValidationError(f"unknown layer type: {kind}")


# ---------------------------------------------------------------- spec

@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers:
            raise ValidationError("network spec has no layers")
        if any(d <= 0 for d in self.input_shape):
            raise ValidationError(f"input shape must be positive, got {self.input_shape}")

        shapes = [self.input_shape]
        for index, layer in enumerate(self.layers):
            if not isinstance(layer, LAYER_TYPES):
                raise ShapeError(index, layer, "unsupported layer type")
            try:
                out = tuple(layer.output_shape(shapes[-1]))
            except ValueError as e:
                raise ShapeError(index, layer.to_text(), str(e)) from e
            if any(d <= 0 for d in out):
                raise ShapeError(index, layer.to_text(), f"produces empty output {out}")
            shapes.append(out)

        if not isinstance(self.layers[-1], Dense):
            raise ShapeError(len(self.layers) - 1, self.layers[-1].to_text(), "output layer must be dense")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def num_classes(self):
        return self.output_shape[0]

    def parameter_count(self):
        return sum(int(np.prod(shape)) for layer in self.layers for _, shape in layer.param_shapes())

    def has_dropout(self):
        return any(isinstance(layer, Dropout) and layer.rate > 0 for layer in self.layers)

    def to_text(self):
        lines = ["input " + " ".join(str(d) for d in self.input_shape)]
        lines.extend(layer.to_text() for layer in self.layers)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        input_shape = None
        layers = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                if tokens[0].lower() == "input":
                    input_shape = tuple(int(t) for t in tokens[1:])
                else:
                    layers.append(_parse_layer(tokens))
            except (IndexError, ValueError) as e:
                raise ValidationError(f"bad layer line {raw!r}: {e}") from e
        if input_shape is None:
            raise ValidationError("network text has no 'input' line")
        return cls(tuple(layers), input_shape)


# ---------------------------------------------------------------- params

@dataclass(frozen=True)
class ParamSlot:
    layer_index: int
    name: str
    offset: int
    length: int
    shape: tuple


def parameter_layout(spec):
    slots = []
    offset = 0
    for index, layer in enumerate(spec.layers):
        for name, shape in layer.param_shapes():
            length = int(np.prod(shape))
            slots.append(ParamSlot(index, name, offset, length, tuple(shape)))
            offset += length
    return tuple(slots)


class ParamVector:
    """Flat parameter vector (teacher theta or student omega) with its layout"""

    def __init__(self, values, layout):
        values = np.asarray(values)
        total = sum(slot.length for slot in layout)
        if values.ndim != 1 or values.shape[0] != total:
            raise ValidationError(f"parameter vector of length {values.size} does not match layout of {total}")
        self.values = values
        self.layout = tuple(layout)

    @classmethod
    def zeros(cls, spec, dtype=np.float64):
        layout = parameter_layout(spec)
        return cls(np.zeros(sum(s.length for s in layout), dtype=dtype), layout)

    @classmethod
    def initialize(cls, spec, rng, dtype=np.float64):
        """Glorot-uniform weights, zero biases"""
        params = cls.zeros(spec, dtype=dtype)
        for slot in params.layout:
            if slot.name != "weight":
                continue
            fan_in, fan_out = spec.layers[slot.layer_index].fans()
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params.values[slot.offset:slot.offset + slot.length] = rng.uniform(-limit, limit, slot.length)
        return params

    def __len__(self):
        return self.values.shape[0]

    @property
    def dtype(self):
        return self.values.dtype

    def view(self, layer_index, name):
        for slot in self.layout:
            if slot.layer_index == layer_index and slot.name == name:
                return self.values[slot.offset:slot.offset + slot.length].reshape(slot.shape)
        raise KeyError(f"no parameter {name!r} in layer {layer_index}")

    def layer_views(self, layer_index):
        return {
            slot.name: self.values[slot.offset:slot.offset + slot.length].reshape(slot.shape)
            for slot in self.layout if slot.layer_index == layer_index
        }

    def with_values(self, values):
        return ParamVector(values, self.layout)

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def to_bytes(self):
        """(dtype tag, little-endian bytes) for checkpoints"""
        tag = f"<f{self.values.dtype.itemsize}"
        return tag, self.values.astype(tag, copy=False).tobytes()

    @classmethod
    def from_bytes(cls, tag, data, layout):
        values = np.frombuffer(data, dtype=tag).astype(np.dtype(tag).newbyteorder("="))
        return cls(values, layout)

    def __repr__(self):
        return f"ParamVector(n={len(self)}, dtype={self.values.dtype})"


# ---------------------------------------------------------------- forward / backward

@dataclass(frozen=True)
class ForwardMode:
    """Eval (no dropout) or Train(rng_seed) (seeded dropout masks)"""

    train: bool = False
    rng_seed: int = None

    @classmethod
    def eval(cls):
        return cls(False, None)

    @classmethod
    def training(cls, rng_seed):
        return cls(True, int(rng_seed))

    def layer_rng(self, layer_index):
        if not self.train:
            return None
        return np.random.default_rng([self.rng_seed, layer_index])


EVAL = ForwardMode.eval()


@dataclass
class _ForwardContext:
    params: ParamVector
    batch: Tensor
    mode: ForwardMode
    caches: list


class Network:
    """
    Evaluates a NetworkSpec.

    forward() keeps the intermediate values of the latest call; backward()
    must be called with the same params and batch objects.
    One instance per thread.
    """

    def __init__(self, spec):
        self.spec = spec
        self._context = None

    def _check_batch(self, batch):
        expected = self.spec.input_shape
        if batch.ndim != len(expected) + 1 or tuple(batch.shape[1:]) != expected:
            raise ShapeError(0, self.spec.layers[0].to_text(),
                             f"batch shape {batch.shape} does not match input shape (n, {', '.join(map(str, expected))})")

    def forward(self, params, batch, mode=EVAL):
        if len(params) != self.spec.parameter_count():
            raise ValidationError(f"params of length {len(params)} do not match spec ({self.spec.parameter_count()})")
        x = np.asarray(batch, dtype=params.dtype)
        self._check_batch(x)

        caches = []
        for index, layer in enumerate(self.spec.layers):
            x, cache = layer.forward(x, params.layer_views(index), mode.layer_rng(index))
            caches.append(cache)
        self._context = _ForwardContext(params, batch, mode, caches)
        return x

    def backward(self, params, batch, upstream_loss_grad):
        context = self._context
        if context is None or context.params is not params or context.batch is not batch:
            raise NetworkUsageError("backward() needs a forward() on the same params and batch first")

        grad = np.asarray(upstream_loss_grad, dtype=params.dtype)
        gradient = np.zeros_like(params.values)
        result = params.with_values(gradient)
        for index in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[index]
            grad, layer_grads = layer.backward(grad, params.layer_views(index), context.caches[index])
            for name, value in layer_grads.items():
                result.view(index, name)[...] = value
        return result


def forward(spec, params, batch, mode=EVAL):
    """Logits of `batch` under `params`"""
    return Network(spec).forward(params, batch, mode)


def backward(spec, params, batch, upstream_loss_grad, mode=EVAL):
    """Parameter gradient; reruns the forward pass with `mode` (same dropout masks)"""
    network = Network(spec)
    network.forward(params, batch, mode)
    return network.backward(params, batch, upstream_loss_grad)


def softmax(logits):
    """Row-wise softmax, max-shifted"""
    return _scipy_softmax(np.asarray(logits), axis=-1)


def predict_probs(spec, params, inputs, chunk_size=2000):
    """Eval-mode class probabilities, computed in chunks, as float64"""
    network = spec if isinstance(spec, Network) else Network(spec)
    chunks = [
        softmax(network.forward(params, inputs[start:start + chunk_size], EVAL)).astype(np.float64, copy=False)
        for start in range(0, inputs.shape[0], chunk_size)
    ]
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------- losses

def categorical_nll(logits, labels):
    """Summed -log p(label) and its gradient w.r.t. the logits"""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(labels.shape[0])
    log_probs = log_softmax(logits, axis=-1)
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return float(-log_probs[rows, labels].sum()), grad


def gaussian_nll(outputs, targets):
    """Summed unit-variance Gaussian NLL (constant dropped) and its gradient"""
    residual = outputs[:, 0] - np.asarray(targets, dtype=outputs.dtype)
    return float(0.5 * np.dot(residual, residual)), residual[:, None]


LIKELIHOODS = {"categorical": categorical_nll, "gaussian": gaussian_nll}


# ---------------------------------------------------------------- capacity scaling

def _scaled(base, factor, what):
    # the epsilon keeps e.g. 100 * 1.15 from flooring to 114
    units = math.floor(base * factor + 1e-9)
    if units < 1:
        raise ValidationError(f"capacity factor {factor} leaves {what} with zero units")
    return units


def scale_fcnn(K, input_shape=(1, 28, 28), base_width=400, num_classes=10, dropout_rate=0.5):
    """
    in-floor(base*K)-floor(base*K)-classes with ReLU hiddens.

    dropout_rate=None builds the teacher variant (no dropout layers).
    """
    if K <= 0:
        raise ValidationError(f"capacity factor K must be positive, got {K}")
    width = _scaled(base_width, K, "hidden layer")
    input_shape = tuple(input_shape)
    input_dim = int(np.prod(input_shape))

    layers = [Flatten()] if len(input_shape) > 1 else []
    for fan_in in (input_dim, width):
        layers += [Dense(fan_in, width), ReLU()]
        if dropout_rate is not None:
            layers.append(Dropout(dropout_rate))
    layers.append(Dense(width, num_classes))
    return NetworkSpec(tuple(layers), input_shape)


def scale_cnn(C, input_shape=(1, 28, 28), num_classes=10, dropout_rate=0.5):
    """Conv(10C,4,1)-MaxPool(2)-Conv(20C,4,1)-MaxPool(2)-FC(80C)-FC(classes)"""
    if C <= 0:
        raise ValidationError(f"capacity factor C must be positive, got {C}")
    first = _scaled(10, C, "first conv layer")
    second = _scaled(20, C, "second conv layer")
    hidden = _scaled(80, C, "fully-connected layer")
    channels = int(input_shape[0])

    head = [
        Conv2d(channels, first, 4, 1), ReLU(), MaxPool2d(2),
        Conv2d(first, second, 4, 1), ReLU(), MaxPool2d(2),
        Flatten(),
    ]
    shape = tuple(input_shape)
    for index, layer in enumerate(head):
        try:
            shape = layer.output_shape(shape)
        except ValueError as e:
            raise ShapeError(index, layer.to_text(), str(e)) from e

    layers = head + [Dense(shape[0], hidden), ReLU()]
    if dropout_rate is not None:
        layers.append(Dropout(dropout_rate))
    layers.append(Dense(hidden, num_classes))
    return NetworkSpec(tuple(layers), input_shape)
