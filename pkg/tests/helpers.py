"""Shared test oracles: float64 finite differences and brute-force convolution."""
import numpy as np

from splitguard.tensor_core import layer_backward, layer_forward


def numerical_grad(f, x, eps=1e-3):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (mutated and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6)))


def check_layer_gradients(layer, x, rng, eps=1e-3):
    """Max relative error of analytic vs numeric grads, for input and every parameter.

    The scalar loss is ``sum(out * r)`` for a fixed random ``r``. The layer and
    input must already be float64.
    """
    out, cache = layer_forward(layer, x, training=True)
    r = rng.standard_normal(out.shape)
    gx, gparams = layer_backward(layer, cache, r)

    def loss():
        return float(np.sum(layer_forward(layer, x, training=True)[0] * r))

    errors = {"input": rel_error(gx, numerical_grad(loss, x, eps))}
    for name, p in layer.named_params().items():
        errors[name] = rel_error(gparams[name], numerical_grad(loss, p, eps))
    return errors


def direct_correlate(x, w, stride=1):
    """Nested-loop cross-correlation, no padding. x (C,H,W), w (F,C,k,k)."""
    c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((f, ho, wo))
    for o in range(f):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ch in range(c):
                    for a in range(k):
                        for b in range(k):
                            acc += float(x[ch, i * stride + a, j * stride + b]) * float(w[o, ch, a, b])
                out[o, i, j] = acc
    return out
