"""Differentiable layer primitives: forward passes with analytic backward passes.

Each layer is a small stateful object holding ``params`` (name -> array),
``grads`` (same shapes, filled by ``backward``) and ``cache`` (forward
intermediates).  ``forward`` takes a mode flag: ``"train"`` populates the
cache and, for batch norm, updates running statistics; ``"eval"`` mutates
nothing.  Backward passes never modify their ``grad_out`` argument.

Conventions frozen here:

* convolution is cross-correlation (no kernel flip);
* "same" padding yields output ceil(in/stride), odd padding going to the
  bottom/right edge;
* ReLU's subgradient at exactly 0 is 0;
* dropout is inverted (train-time scaling by 1/keep), so eval is identity.
"""

import numpy as np

from .tensor import Rng, ShapeError, matmul

HE_GAIN = 2.0  # variance gain for ReLU nets: std = sqrt(2 / fan_in)


class MissingCacheError(RuntimeError):
    """backward() called without a preceding train-mode forward()."""


def he_normal(rng, shape, fan_in, dtype):
    return (rng.normal(size=shape) * np.sqrt(HE_GAIN / fan_in)).astype(dtype)


def conv_output_hw(h, w, kernel_h, kernel_w, stride, padding):
    """Output spatial dims plus the (top, bottom, left, right) padding amounts."""
    if padding == "same":
        out_h = -(-h // stride)
        out_w = -(-w // stride)
        pad_h = max((out_h - 1) * stride + kernel_h - h, 0)
        pad_w = max((out_w - 1) * stride + kernel_w - w, 0)
        top, left = pad_h // 2, pad_w // 2
        return out_h, out_w, (top, pad_h - top, left, pad_w - left)
    if padding == "valid":
        out_h = (h - kernel_h) // stride + 1
        out_w = (w - kernel_w) // stride + 1
        if out_h <= 0 or out_w <= 0:
            raise ShapeError(
                f"valid convolution of {h}x{w} input with {kernel_h}x{kernel_w} kernel "
                f"stride {stride} yields empty output"
            )
        return out_h, out_w, (0, 0, 0, 0)
    raise ValueError(f"unknown padding mode {padding!r}")


class Layer:
    """Common shell: parameter/grad/cache dicts and trainable-name listing."""

    n_inputs = 1
    trainable = ()

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.cache = {}

    def forward(self, x, mode="train", rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def _need_cache(self, key):
        if key not in self.cache:
            raise MissingCacheError(f"{type(self).__name__}.backward before train-mode forward")
        return self.cache[key]

    def param_count(self):
        return int(sum(self.params[name].size for name in self.trainable))


class Conv2d(Layer):
    """2D cross-correlation, lowered to im2col + GEMM.

    Input N x H x W x Cin, kernel Kh x Kw x Cin x Cout, output N x H' x W' x Cout.
    The padded input is cached and patch extraction is redone in backward,
    which keeps peak memory at one column buffer regardless of depth.
    """

    def __init__(self, kernel_h, kernel_w, in_channels, out_channels,
                 stride=1, padding="same", use_bias=False, *, rng, dtype=np.float32):
        super().__init__()
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding mode {padding!r}")
        self.kernel_h = int(kernel_h)
        self.kernel_w = int(kernel_w)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.stride = int(stride)
        self.padding = padding
        self.use_bias = bool(use_bias)
        fan_in = self.kernel_h * self.kernel_w * self.in_channels
        shape = (self.kernel_h, self.kernel_w, self.in_channels, self.out_channels)
        self.params["kernel"] = he_normal(rng, shape, fan_in, dtype)
        if self.use_bias:
            self.params["bias"] = np.zeros(self.out_channels, dtype=dtype)
        self.trainable = ("kernel", "bias") if self.use_bias else ("kernel",)

    def output_shape(self, shape):
        n, h, w, c = shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got {c}")
        out_h, out_w, _ = conv_output_hw(h, w, self.kernel_h, self.kernel_w,
                                         self.stride, self.padding)
        return (n, out_h, out_w, self.out_channels)

    def _im2col(self, xp, out_h, out_w):
        s = self.stride
        windows = np.lib.stride_tricks.sliding_window_view(
            xp, (self.kernel_h, self.kernel_w), axis=(1, 2)
        )[:, ::s, ::s]
        # (N, H', W', C, Kh, Kw) -> (N*H'*W', Kh*Kw*C), patch order (kh, kw, c)
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(
            -1, self.kernel_h * self.kernel_w * self.in_channels
        )
        return np.ascontiguousarray(cols)

    def forward(self, x, mode="train", rng=None):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(
                f"conv expects N x H x W x {self.in_channels}, got {x.shape}"
            )
        n, h, w, _ = x.shape
        out_h, out_w, pads = conv_output_hw(h, w, self.kernel_h, self.kernel_w,
                                            self.stride, self.padding)
        top, bottom, left, right = pads
        if top or bottom or left or right:
            xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
        else:
            xp = x
        cols = self._im2col(xp, out_h, out_w)
        w2d = self.params["kernel"].reshape(-1, self.out_channels)
        y = cols @ w2d
        if self.use_bias:
            y = y + self.params["bias"]
        y = y.reshape(n, out_h, out_w, self.out_channels)
        if mode == "train":
            self.cache = {"xp": xp, "pads": pads, "in_shape": x.shape,
                          "out_hw": (out_h, out_w)}
        return y

    def backward(self, grad_out):
        xp = self._need_cache("xp")
        top, bottom, left, right = self.cache["pads"]
        n, h, w, _ = self.cache["in_shape"]
        out_h, out_w = self.cache["out_hw"]
        s = self.stride
        g2d = grad_out.reshape(-1, self.out_channels)
        cols = self._im2col(xp, out_h, out_w)
        self.grads["kernel"] = (cols.T @ g2d).reshape(self.params["kernel"].shape)
        if self.use_bias:
            self.grads["bias"] = g2d.sum(axis=0)
        w2d = self.params["kernel"].reshape(-1, self.out_channels)
        dcols = (g2d @ w2d.T).reshape(
            n, out_h, out_w, self.kernel_h, self.kernel_w, self.in_channels
        )
        dxp = np.zeros_like(xp)
        for kh in range(self.kernel_h):
            for kw in range(self.kernel_w):
                dxp[:, kh : kh + s * (out_h - 1) + 1 : s,
                    kw : kw + s * (out_w - 1) + 1 : s, :] += dcols[:, :, :, kh, kw, :]
        return dxp[:, top : top + h, left : left + w, :]


class BatchNorm2d(Layer):
    """Per-channel batch normalization over N, H, W.

    Train mode standardizes with batch statistics and folds them into the
    running estimates as ``running = momentum * running + (1 - momentum) * batch``;
    eval mode uses the running estimates and mutates nothing.  A frozen layer
    (transfer-learning freeze plans) keeps using running statistics during
    training so small target batches cannot corrupt them.
    """

    trainable = ("gamma", "beta")

    def __init__(self, channels, epsilon=1e-5, momentum=0.9, *, dtype=np.float32):
        super().__init__()
        self.channels = int(channels)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.frozen = False
        self.params["gamma"] = np.ones(self.channels, dtype=dtype)
        self.params["beta"] = np.zeros(self.channels, dtype=dtype)
        self.params["running_mean"] = np.zeros(self.channels, dtype=dtype)
        self.params["running_var"] = np.ones(self.channels, dtype=dtype)

    def output_shape(self, shape):
        return shape

    def forward(self, x, mode="train", rng=None):
        if x.ndim != 4 or x.shape[3] != self.channels:
            raise ShapeError(f"batchnorm expects N x H x W x {self.channels}, got {x.shape}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if mode == "train" and not self.frozen:
            m = x.shape[0] * x.shape[1] * x.shape[2]
            if m < 2:
                raise ShapeError(f"batchnorm train mode needs N*H*W >= 2, got {m}")
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.epsilon))
            xhat = (x - mean) * inv_std
            mom = x.dtype.type(self.momentum)
            self.params["running_mean"] = mom * self.params["running_mean"] + (1 - mom) * mean
            self.params["running_var"] = mom * self.params["running_var"] + (1 - mom) * var
            self.cache = {"xhat": xhat, "inv_std": inv_std, "m": m, "stats": "batch"}
            return gamma * xhat + beta
        inv_std = 1.0 / np.sqrt(self.params["running_var"] + x.dtype.type(self.epsilon))
        xhat = (x - self.params["running_mean"]) * inv_std
        if mode == "train":  # frozen layer inside a training pass
            self.cache = {"xhat": xhat, "inv_std": inv_std, "stats": "running"}
        return gamma * xhat + beta

    def backward(self, grad_out):
        xhat = self._need_cache("xhat")
        inv_std = self.cache["inv_std"]
        gamma = self.params["gamma"]
        self.grads["beta"] = grad_out.sum(axis=(0, 1, 2))
        self.grads["gamma"] = (grad_out * xhat).sum(axis=(0, 1, 2))
        if self.cache["stats"] == "running":
            return grad_out * gamma * inv_std
        # batch statistics depend on x, so their gradient terms enter here
        m = self.cache["m"]
        sum_g = self.grads["beta"]
        sum_gx = self.grads["gamma"]
        return (gamma * inv_std / m) * (m * grad_out - sum_g - xhat * sum_gx)


class Relu(Layer):
    """max(0, x); passes gradient where x > 0 (subgradient 0 at the kink)."""

    def output_shape(self, shape):
        return shape

    def forward(self, x, mode="train", rng=None):
        if mode == "train":
            self.cache = {"mask": x > 0}
        return np.maximum(x, x.dtype.type(0))

    def backward(self, grad_out):
        return grad_out * self._need_cache("mask")


class Dropout(Layer):
    """Inverted dropout: keep with probability 1-rate, scale kept values by 1/keep."""

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def output_shape(self, shape):
        return shape

    def forward(self, x, mode="train", rng=None):
        if mode != "train" or self.rate == 0.0:
            if mode == "train":
                self.cache = {"mask": None}
            return x
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        self.cache = {"mask": mask}
        return x * mask

    def backward(self, grad_out):
        mask = self._need_cache("mask")
        return grad_out if mask is None else grad_out * mask


class Concat(Layer):
    """Channel-axis concatenation of N x H x W x Ci inputs, in argument order."""

    n_inputs = "many"

    def output_shape(self, shapes):
        n, h, w, _ = shapes[0]
        return (n, h, w, sum(s[3] for s in shapes))

    def forward(self, xs, mode="train", rng=None):
        base = xs[0].shape[:3]
        for x in xs:
            if x.ndim != 4 or x.shape[:3] != base:
                raise ShapeError(
                    f"concat inputs must agree on N, H, W: {[x.shape for x in xs]}"
                )
        if mode == "train":
            self.cache = {"channels": [x.shape[3] for x in xs]}
        return np.concatenate(xs, axis=3)

    def backward(self, grad_out):
        channels = self._need_cache("channels")
        splits = np.cumsum(channels)[:-1]
        return [np.ascontiguousarray(g) for g in np.split(grad_out, splits, axis=3)]


def concat_split(grad_out, channels):
    """Split a concatenated gradient back into per-branch slices."""
    splits = np.cumsum(list(channels))[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, splits, axis=3)]


class Add(Layer):
    """Elementwise sum of two same-shape inputs; backward fans the gradient out."""

    n_inputs = "many"

    def output_shape(self, shapes):
        return shapes[0]

    def forward(self, xs, mode="train", rng=None):
        a, b = xs
        if a.shape != b.shape:
            raise ShapeError(f"add operands must match: {a.shape} vs {b.shape}")
        if mode == "train":
            self.cache = {"done": True}
        return a + b

    def backward(self, grad_out):
        self._need_cache("done")
        return [grad_out, grad_out]


class GlobalAvgPool(Layer):
    """Per-channel spatial mean: N x H x W x C -> N x C."""

    def output_shape(self, shape):
        n, h, w, c = shape
        return (n, c)

    def forward(self, x, mode="train", rng=None):
        if x.ndim != 4:
            raise ShapeError(f"global average pool expects rank 4, got {x.shape}")
        if mode == "train":
            self.cache = {"hw": (x.shape[1], x.shape[2])}
        return x.mean(axis=(1, 2))

    def backward(self, grad_out):
        h, w = self._need_cache("hw")
        g = grad_out[:, None, None, :] / grad_out.dtype.type(h * w)
        return np.broadcast_to(g, (grad_out.shape[0], h, w, grad_out.shape[1])).copy()


class FullyConnected(Layer):
    """Affine map y = x W + b over N x Din inputs."""

    trainable = ("weight", "bias")

    def __init__(self, in_features, out_features, *, rng, dtype=np.float32):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.params["weight"] = he_normal(rng, (self.in_features, self.out_features),
                                          self.in_features, dtype)
        self.params["bias"] = np.zeros(self.out_features, dtype=dtype)

    def output_shape(self, shape):
        n, d = shape
        if d != self.in_features:
            raise ShapeError(f"fully-connected expects {self.in_features} features, got {d}")
        return (n, self.out_features)

    def forward(self, x, mode="train", rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"fully-connected expects N x {self.in_features}, got {x.shape}")
        if mode == "train":
            self.cache = {"x": x}
        return matmul(x, self.params["weight"]) + self.params["bias"]

    def backward(self, grad_out):
        x = self._need_cache("x")
        self.grads["weight"] = matmul(np.ascontiguousarray(x.T), grad_out)
        self.grads["bias"] = grad_out.sum(axis=0)
        return matmul(grad_out, np.ascontiguousarray(self.params["weight"].T))


class SoftmaxOutput(Layer):
    """Row-wise stable softmax over logits.

    Fused with cross-entropy for training: the loss gradient produced by
    ``softmax_cross_entropy`` is already with respect to the logits, so this
    node's backward is a passthrough.
    """

    def __init__(self, num_classes):
        super().__init__()
        self.num_classes = int(num_classes)

    def output_shape(self, shape):
        return shape

    def forward(self, x, mode="train", rng=None):
        if x.ndim != 2 or x.shape[1] != self.num_classes:
            raise ShapeError(f"softmax expects N x {self.num_classes} logits, got {x.shape}")
        if mode == "train":
            self.cache = {"done": True}
        return softmax(x)

    def backward(self, grad_out):
        self._need_cache("done")
        return grad_out


def softmax(logits):
    """Numerically stable row softmax (max subtraction)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns ``(loss, probs, grad_logits)`` with
    ``grad_logits = (probs - onehot) / N``.  Probabilities come back in the
    logits' dtype; the loss is a python float.
    """
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"expected N x K logits with K >= 2, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    probs = np.exp(log_probs)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= logits.dtype.type(n)
    return loss, probs, grad
