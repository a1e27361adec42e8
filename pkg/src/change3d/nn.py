"""Layer building blocks on top of the tensor engine.

Layers hold parameters as ``Tensor`` attributes and non-trainable state
(batch-norm running statistics) in ``self.buffers``.  Parameter iteration
order follows attribute insertion order, which keeps initialization,
checkpointing, and the optimizer state all aligned and deterministic.
"""

from __future__ import annotations

import numpy as np

from change3d import tensor as T
from change3d.tensor import Tensor


class Layer:
    def __init__(self):
        self.buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if name == "buffers":
                continue
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Layer):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item

    def named_buffers(self, prefix: str = ""):
        for bname, arr in self.buffers.items():
            yield prefix + bname, arr
        for name, val in vars(self).items():
            if name == "buffers":
                continue
            if isinstance(val, Layer):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _he_normal(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Conv3d(Layer):
    def __init__(self, cin, cout, kernel, stride=(1, 1, 1), padding=(0, 0, 0),
                 groups=1, bias=True, *, rng, dtype=np.float32):
        super().__init__()
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.groups = groups
        kernel = tuple(kernel)
        fan_in = (cin // groups) * int(np.prod(kernel))
        self.weight = T.parameter(_he_normal(rng, (cout, cin // groups) + kernel,
                                             fan_in, dtype))
        self.bias = T.parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x):
        return T.conv3d(x, self.weight, self.bias, self.stride, self.padding,
                        self.groups)


class Conv2d(Layer):
    def __init__(self, cin, cout, kernel, stride=(1, 1), padding=(0, 0),
                 groups=1, bias=True, *, rng, dtype=np.float32):
        super().__init__()
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.groups = groups
        fan_in = (cin // groups) * int(np.prod(kernel))
        self.weight = T.parameter(_he_normal(rng, (cout, cin // groups) + tuple(kernel),
                                             fan_in, dtype))
        self.bias = T.parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding,
                        self.groups)


def bilinear_kernel2d(k: int) -> np.ndarray:
    factor = (k + 1) // 2
    center = factor - 0.5 if k % 2 == 0 else factor - 1.0
    og = np.arange(k, dtype=np.float64)
    filt = 1.0 - np.abs(og - center) / factor
    return np.outer(filt, filt)


class ConvTranspose2d(Layer):
    """Transposed conv; ``depthwise=True`` uses one filter per channel and can
    start from a bilinear-upsampling kernel so upsampling is sane at step 0."""

    def __init__(self, cin, cout, kernel=4, stride=(2, 2), padding=(1, 1),
                 depthwise=False, bias=True, bilinear_init=False, *,
                 rng, dtype=np.float32):
        super().__init__()
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.depthwise = depthwise
        kh, kw = kernel
        if depthwise:
            if cin != cout:
                raise ValueError("depthwise transposed conv needs cin == cout")
            self.groups = cin
            if bilinear_init:
                w = np.broadcast_to(bilinear_kernel2d(kh), (cin, 1, kh, kw)).copy()
                w = w + rng.normal(0.0, 0.01, size=w.shape)
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / (kh * kw)), size=(cin, 1, kh, kw))
            self.weight = T.parameter(w.astype(dtype))
        else:
            self.groups = 1
            fan_in = cin * kh * kw
            self.weight = T.parameter(_he_normal(rng, (cin, cout, kh, kw), fan_in, dtype))
        self.bias = T.parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x):
        return T.transposed_conv2d(x, self.weight, self.bias, self.stride,
                                   self.padding, self.groups)


class BatchNorm(Layer):
    """Per-channel normalization over (N, *, ...) with channel axis 1.

    Training mode uses biased batch statistics and folds them into the running
    estimates with the given momentum; eval mode normalizes with the running
    estimates only.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, *, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = T.parameter(np.ones(channels, dtype=dtype))
        self.beta = T.parameter(np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def __call__(self, x, train: bool):
        if train:
            out, m, v = T.batch_norm(x, self.gamma, self.beta, self.eps)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm += self.momentum * (m.astype(rm.dtype) - rm)
            rv += self.momentum * (v.astype(rv.dtype) - rv)
            return out
        return T.batch_norm_eval(x, self.gamma, self.beta,
                                 self.buffers["running_mean"],
                                 self.buffers["running_var"], self.eps)


class Linear(Layer):
    def __init__(self, din, dout, bias=True, *, rng, dtype=np.float32):
        super().__init__()
        self.weight = T.parameter(
            rng.normal(0.0, np.sqrt(1.0 / din), size=(din, dout)).astype(dtype))
        self.bias = T.parameter(np.zeros(dout, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class Embedding(Layer):
    def __init__(self, vocab, dim, *, rng, dtype=np.float32):
        super().__init__()
        self.weight = T.parameter(
            rng.normal(0.0, 0.02, size=(vocab, dim)).astype(dtype))

    def __call__(self, ids):
        return T.embedding(self.weight, ids)


class LayerNorm(Layer):
    """Normalization over the trailing axis, composed from primitives."""

    def __init__(self, dim, eps=1e-5, *, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = T.parameter(np.ones(dim, dtype=dtype))
        self.beta = T.parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x):
        m = T.mean(x, axis=-1, keepdims=True)
        centered = T.sub(x, m)
        var = T.mean(T.mul(centered, centered), axis=-1, keepdims=True)
        inv = T.div(1.0, T.sqrt(T.add(var, self.eps)))
        return T.add(T.mul(T.mul(centered, inv), self.gamma), self.beta)
