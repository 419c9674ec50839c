"""Dense layers with explicit per-layer caches, losses, and Adam.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Parameters are
stored as float32; every layer is dtype-generic so tests can shadow the same
computation in float64.
"""
from dataclasses import dataclass, field
from itertools import count

import numpy as np

from .errors import CacheError, LabelError, ShapeError, TrainingError
from .kernels import col2im, im2col

DTYPE = np.float32

_uid = count()


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


@dataclass
class Cache:
    """Activation record handed from ``layer_forward`` to ``layer_backward``."""

    layer_uid: int
    in_shape: tuple
    out_shape: tuple
    training: bool
    payload: object


class Layer:
    """Base class. Shapes passed around exclude the leading batch dimension."""

    kind = "layer"

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.in_shape = None
        self.name = self.kind
        self.uid = next(_uid)

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def build(self, in_shape):
        """Bind the layer to ``in_shape`` and return its declared output shape."""
        out = self.output_shape(tuple(in_shape))
        self.in_shape = tuple(in_shape)
        return out

    def named_params(self):
        return dict(self.params)

    def named_buffers(self):
        return dict(self.buffers)

    def set_array(self, name, value):
        """Overwrite a parameter or buffer in place (keeps array identity)."""
        store = self.params if name in self.params else self.buffers
        store[name][...] = value

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for key in store:
                store[key] = store[key].astype(dtype)
        return self

    def hyperparameters(self):
        return {}

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, payload, grad):
        raise NotImplementedError

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hyperparameters().items())
        return f"{type(self).__name__}({hp})"


def layer_forward(layer, x, training=True):
    """Run one layer; returns ``(output, cache)``."""
    if layer.in_shape is None:
        layer.build(x.shape[1:])
    if tuple(x.shape[1:]) != layer.in_shape:
        raise ShapeError(
            f"{layer.name}: expected input shape {layer.in_shape}, got {tuple(x.shape[1:])}",
            layer=layer.name,
            expected=layer.in_shape,
            got=tuple(x.shape[1:]),
        )
    out, payload = layer.forward(x, training)
    return out, Cache(layer.uid, tuple(x.shape), tuple(out.shape), training, payload)


def layer_backward(layer, cache, grad_output):
    """Backpropagate through one layer; returns ``(grad_input, grad_params)``."""
    if not isinstance(cache, Cache) or cache.layer_uid != layer.uid:
        raise CacheError(f"{layer.name}: cache was not produced by this layer", layer=layer.name)
    if tuple(grad_output.shape) != cache.out_shape:
        raise CacheError(
            f"{layer.name}: grad_output shape {tuple(grad_output.shape)} does not match "
            f"cached output shape {cache.out_shape}",
            layer=layer.name,
            expected=cache.out_shape,
            got=tuple(grad_output.shape),
        )
    if not cache.training:
        raise CacheError(f"{layer.name}: cache comes from an inference-mode forward", layer=layer.name)
    return layer.backward(cache.payload, grad_output)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            w = np.zeros((out_features, in_features), DTYPE)
        else:
            w = _he_uniform(rng, (out_features, in_features), in_features)
        self.params = {"weight": w, "bias": np.zeros(out_features, DTYPE)}

    def hyperparameters(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(
                f"{self.name}: expects ({self.in_features},), got {tuple(in_shape)}",
                layer=self.name, expected=(self.in_features,), got=tuple(in_shape),
            )
        return (self.out_features,)

    def forward(self, x, training):
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, x, g):
        w = self.params["weight"]
        return g @ w, {"weight": g.T @ x, "bias": g.sum(axis=0)}


def _conv_out(size, k, s, p):
    return (size + 2 * p - k) // s + 1


class Conv2d(Layer):
    """Cross-correlation (no kernel flip), weights (out, in, k, k)."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, rng=None):
        super().__init__()
        self.cin, self.cout = in_channels, out_channels
        self.k, self.stride, self.padding = kernel_size, stride, padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        w = np.zeros(shape, DTYPE) if rng is None else _he_uniform(rng, shape, fan_in)
        self.params = {"weight": w, "bias": np.zeros(out_channels, DTYPE)}

    def hyperparameters(self):
        return {"in_channels": self.cin, "out_channels": self.cout, "kernel_size": self.k,
                "stride": self.stride, "padding": self.padding}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.cin:
            raise ShapeError(
                f"{self.name}: expects ({self.cin}, H, W), got {tuple(in_shape)}",
                layer=self.name, got=tuple(in_shape),
            )
        _, h, w = in_shape
        ho, wo = _conv_out(h, self.k, self.stride, self.padding), _conv_out(w, self.k, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {tuple(in_shape)} too small for kernel", layer=self.name)
        return (self.cout, ho, wo)

    def forward(self, x, training):
        p, k, s = self.padding, self.k, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        n, _, hp, wp = x.shape
        cols = im2col(x, k, k, s, s)
        w2 = self.params["weight"].reshape(self.cout, -1)
        out = np.matmul(w2, cols) + self.params["bias"][:, None]
        ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
        return out.reshape(n, self.cout, ho, wo), (cols, hp, wp)

    def backward(self, payload, g):
        cols, hp, wp = payload
        n = g.shape[0]
        k, s, p = self.k, self.stride, self.padding
        g2 = g.reshape(n, self.cout, -1)
        w2 = self.params["weight"].reshape(self.cout, -1)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(self.params["weight"].shape)
        gb = g2.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, g2)
        gx = col2im(dcols, self.cin, hp, wp, k, k, s, s)
        if p:
            gx = gx[:, :, p:hp - p, p:wp - p]
        return gx, {"weight": gw, "bias": gb}


class ConvTranspose2d(Layer):
    """Adjoint of :class:`Conv2d` geometry, weights (in, out, k, k)."""

    kind = "transposed_conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 output_padding=0, rng=None):
        super().__init__()
        if output_padding >= max(stride, 1) and output_padding:
            raise ShapeError("output_padding must be smaller than stride", layer=self.kind)
        self.cin, self.cout = in_channels, out_channels
        self.k, self.stride, self.padding, self.output_padding = kernel_size, stride, padding, output_padding
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        w = np.zeros(shape, DTYPE) if rng is None else _he_uniform(rng, shape, fan_in)
        self.params = {"weight": w, "bias": np.zeros(out_channels, DTYPE)}

    def hyperparameters(self):
        return {"in_channels": self.cin, "out_channels": self.cout, "kernel_size": self.k,
                "stride": self.stride, "padding": self.padding, "output_padding": self.output_padding}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.cin:
            raise ShapeError(
                f"{self.name}: expects ({self.cin}, H, W), got {tuple(in_shape)}",
                layer=self.name, got=tuple(in_shape),
            )
        _, h, w = in_shape
        extra = self.k - 2 * self.padding + self.output_padding
        return (self.cout, (h - 1) * self.stride + extra, (w - 1) * self.stride + extra)

    def _canvas(self, h, w):
        s, k, op = self.stride, self.k, self.output_padding
        return (h - 1) * s + k + op, (w - 1) * s + k + op

    def forward(self, x, training):
        n, _, h, w = x.shape
        k, s, p = self.k, self.stride, self.padding
        x2 = x.reshape(n, self.cin, h * w)
        wm = self.params["weight"].reshape(self.cin, -1)
        cols = np.matmul(wm.T, x2)
        hc, wc = self._canvas(h, w)
        full = col2im(cols, self.cout, hc, wc, k, k, s, s)
        out = full[:, :, p:hc - p, p:wc - p] + self.params["bias"][:, None, None]
        return np.ascontiguousarray(out), (x2, h, w)

    def backward(self, payload, g):
        x2, h, w = payload
        n = g.shape[0]
        k, s, p = self.k, self.stride, self.padding
        hc, wc = self._canvas(h, w)
        canvas = np.zeros((n, self.cout, hc, wc), dtype=g.dtype)
        canvas[:, :, p:hc - p, p:wc - p] = g
        dcols = im2col(canvas, k, k, s, s)
        wm = self.params["weight"].reshape(self.cin, -1)
        gx = np.matmul(wm, dcols).reshape(n, self.cin, h, w)
        gw = np.tensordot(x2, dcols, axes=([0, 2], [0, 2])).reshape(self.params["weight"].shape)
        return gx, {"weight": gw, "bias": g.sum(axis=(0, 2, 3))}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, g):
        return g * mask, {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, training):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        out[~pos] = e / (1.0 + e)
        return out, out

    def backward(self, out, g):
        return g * out * (1 - out), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, g):
        return g.reshape(shape), {}


class _Pool2d(Layer):
    def __init__(self, kernel_size=2, stride=None):
        super().__init__()
        self.k = kernel_size
        self.stride = stride or kernel_size

    def hyperparameters(self):
        return {"kernel_size": self.k, "stride": self.stride}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.name}: expects (C, H, W), got {tuple(in_shape)}", layer=self.name)
        c, h, w = in_shape
        ho, wo = _conv_out(h, self.k, self.stride, 0), _conv_out(w, self.k, self.stride, 0)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {tuple(in_shape)} smaller than pooling window", layer=self.name)
        return (c, ho, wo)

    def _unfold(self, x):
        n, c, h, w = x.shape
        cols = im2col(x.reshape(n * c, 1, h, w), self.k, self.k, self.stride, self.stride)
        ho, wo = (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1
        return cols, (n, c, h, w, ho, wo)

    def _fold(self, dcols, dims):
        n, c, h, w, _, _ = dims
        return col2im(dcols, 1, h, w, self.k, self.k, self.stride, self.stride).reshape(n, c, h, w)


class MaxPool2d(_Pool2d):
    kind = "max_pool2d"

    def forward(self, x, training):
        cols, dims = self._unfold(x)
        idx = cols.argmax(axis=1)
        out = np.take_along_axis(cols, idx[:, None, :], axis=1)
        n, c, _, _, ho, wo = dims
        return out.reshape(n, c, ho, wo), (idx, dims, cols.shape)

    def backward(self, payload, g):
        idx, dims, cshape = payload
        dcols = np.zeros(cshape, dtype=g.dtype)
        np.put_along_axis(dcols, idx[:, None, :], g.reshape(cshape[0], 1, -1), axis=1)
        return self._fold(dcols, dims), {}


class AvgPool2d(_Pool2d):
    kind = "avg_pool2d"

    def forward(self, x, training):
        cols, dims = self._unfold(x)
        n, c, _, _, ho, wo = dims
        return cols.mean(axis=1).reshape(n, c, ho, wo), (dims, cols.shape)

    def backward(self, payload, g):
        dims, cshape = payload
        share = g.reshape(cshape[0], 1, -1) / (self.k * self.k)
        dcols = np.broadcast_to(share, cshape).astype(g.dtype)
        return self._fold(dcols, dims), {}


class BatchNorm2d(Layer):
    """Per-channel batch norm; running statistics updated with momentum 0.1."""

    kind = "batch_norm"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params = {"gamma": np.ones(channels, DTYPE), "beta": np.zeros(channels, DTYPE)}
        self.buffers = {"running_mean": np.zeros(channels, DTYPE), "running_var": np.ones(channels, DTYPE)}

    def hyperparameters(self):
        return {"channels": self.channels}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.channels:
            raise ShapeError(
                f"{self.name}: expects ({self.channels}, H, W), got {tuple(in_shape)}",
                layer=self.name, got=tuple(in_shape),
            )
        return tuple(in_shape)

    def forward(self, x, training):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if not training:
            mean = self.buffers["running_mean"][None, :, None, None]
            var = self.buffers["running_var"][None, :, None, None]
            return (x - mean) / np.sqrt(var + self.eps) * gamma + beta, None
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var.ravel() * (m / max(m - 1, 1))
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm[...] = (1 - self.momentum) * rm + self.momentum * mean.ravel()
        rv[...] = (1 - self.momentum) * rv + self.momentum * unbiased
        return xhat * gamma + beta, (xhat, inv_std)

    def backward(self, payload, g):
        xhat, inv_std = payload
        gamma = self.params["gamma"][None, :, None, None]
        axes = (0, 2, 3)
        m = g.shape[0] * g.shape[2] * g.shape[3]
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma
        gx = inv_std / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, {"gamma": ggamma, "beta": gbeta}


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus a skip path, followed by relu.

    The skip path is the identity when shapes agree, otherwise a strided 1x1 conv.
    """

    kind = "residual"

    def __init__(self, in_channels, out_channels, stride=1, rng=None):
        super().__init__()
        self.cin, self.cout, self.stride = in_channels, out_channels, stride
        self.main = [
            ("conv1", Conv2d(in_channels, out_channels, 3, stride, 1, rng=rng)),
            ("bn1", BatchNorm2d(out_channels)),
            ("relu1", ReLU()),
            ("conv2", Conv2d(out_channels, out_channels, 3, 1, 1, rng=rng)),
            ("bn2", BatchNorm2d(out_channels)),
        ]
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride, 0, rng=rng)
        self.out_relu = ReLU()

    def _children(self):
        yield from self.main
        if self.shortcut is not None:
            yield "short", self.shortcut

    def hyperparameters(self):
        return {"in_channels": self.cin, "out_channels": self.cout, "stride": self.stride}

    def named_params(self):
        return {f"{cn}.{k}": v for cn, child in self._children() for k, v in child.params.items()}

    def named_buffers(self):
        return {f"{cn}.{k}": v for cn, child in self._children() for k, v in child.buffers.items()}

    def set_array(self, name, value):
        cn, key = name.split(".", 1)
        dict(self._children())[cn].set_array(key, value)

    def astype(self, dtype):
        for _, child in self._children():
            child.astype(dtype)
        return self

    def convs(self):
        return [child for _, child in self._children() if isinstance(child, Conv2d)]

    def build(self, in_shape):
        shape = tuple(in_shape)
        self.in_shape = shape
        for cn, child in self.main:
            child.name = f"{self.name}.{cn}"
            shape = child.build(shape)
        if self.shortcut is not None:
            self.shortcut.name = f"{self.name}.short"
            skip = self.shortcut.build(in_shape)
        else:
            skip = tuple(in_shape)
        if skip != shape:
            raise ShapeError(f"{self.name}: skip path {skip} != main path {shape}", layer=self.name)
        self.out_relu.build(shape)
        return shape

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (self.cout, _conv_out(h, 3, self.stride, 1), _conv_out(w, 3, self.stride, 1))

    def forward(self, x, training):
        caches = []
        h = x
        for _, child in self.main:
            h, c = layer_forward(child, h, training)
            caches.append(c)
        if self.shortcut is not None:
            skip, sc = layer_forward(self.shortcut, x, training)
        else:
            skip, sc = x, None
        out, oc = layer_forward(self.out_relu, h + skip, training)
        return out, (caches, sc, oc)

    def backward(self, payload, g):
        caches, sc, oc = payload
        g, _ = layer_backward(self.out_relu, oc, g)
        grads = {}
        gm = g
        for (cn, child), c in zip(reversed(self.main), reversed(caches)):
            gm, gp = layer_backward(child, c, gm)
            grads.update({f"{cn}.{k}": v for k, v in gp.items()})
        if self.shortcut is not None:
            gs, gp = layer_backward(self.shortcut, sc, g)
            grads.update({f"short.{k}": v for k, v in gp.items()})
        else:
            gs = g
        return gm + gs, grads


class Sequential:
    """An ordered chain of layers bound to a fixed per-sample input shape."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            layer.name = f"{i}:{layer.kind}"
            shape = layer.build(shape)
        self.output_shape = shape

    def __len__(self):
        return len(self.layers)

    def forward(self, x, training=True):
        caches = []
        for layer in self.layers:
            x, c = layer_forward(layer, x, training)
            caches.append(c)
        return x, caches

    def __call__(self, x, training=False):
        return self.forward(x, training)[0]

    def backward(self, caches, g):
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            g, gp = layer_backward(self.layers[i], caches[i], g)
            for k, v in gp.items():
                grads[f"{i}.{k}"] = v
        return g, grads

    def params(self):
        """Live parameter arrays keyed ``"<layer index>.<name>"``."""
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.named_params().items()}

    def buffers(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.named_buffers().items()}

    def state_dict(self):
        """Copies of parameters and buffers."""
        state = {k: v.copy() for k, v in self.params().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state):
        own = set(self.params()) | set(self.buffers())
        if set(state) != own:
            missing, extra = sorted(own - set(state)), sorted(set(state) - own)
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}", missing=missing, extra=extra)
        for key, value in state.items():
            idx, name = key.split(".", 1)
            layer = self.layers[int(idx)]
            current = {**layer.named_params(), **layer.named_buffers()}[name]
            if current.shape != np.shape(value):
                raise ShapeError(f"{key}: expected {current.shape}, got {np.shape(value)}", key=key)
            layer.set_array(name, value)

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def param_count(self):
        return int(sum(v.size for v in self.params().values()))


def loss_cross_entropy(logits, labels):
    """Mean softmax cross-entropy; returns ``(loss, grad_logits)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"logits must be (batch, classes) with batch >= 1, got {logits.shape}", got=logits.shape)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}", got=labels.shape)
    classes = logits.shape[1]
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels[i])} at index {i} outside [0, {classes})", index=i, label=int(labels[i]))
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    return loss, grad / n


def loss_mse(prediction, target):
    """Mean squared error; returns ``(loss, grad_prediction)``."""
    if prediction.shape != target.shape:
        raise ShapeError(
            f"prediction shape {prediction.shape} != target shape {target.shape}",
            expected=target.shape, got=prediction.shape,
        )
    diff = prediction - target
    return float(np.mean(np.square(diff, dtype=np.float64))), (2.0 / diff.size) * diff


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise TrainingError(f"no gradient for parameter {missing[0]!r}", parameter=missing[0])
    for k in params:
        if grads[k].shape != params[k].shape:
            raise ShapeError(f"gradient for {k!r} has shape {grads[k].shape}, expected {params[k].shape}", key=k)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state
