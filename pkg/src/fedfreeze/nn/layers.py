"""Sequential layers with explicit forward and backward passes.

Each layer caches what its backward pass needs during ``forward``.  A model
instance is used from one thread at a time.  Parameter arrays are views
into per-unit flat buffers owned by :class:`~fedfreeze.nn.network.Network`.
"""
import numpy as np

from .. import _kernels


class Layer:
    kind = ""

    def __init__(self, desc):
        self.desc = desc
        self.name = desc.name
        self.input_shape = tuple(desc.input_shape)
        self.output_shape = tuple(desc.output_shape)
        self.params: dict[str, np.ndarray] = {}

    def param_specs(self):
        """List of (name, shape, trainable) in storage order."""
        return []

    def init_params(self, rng):
        pass

    def forward(self, x, training=False, update_stats=False):
        raise NotImplementedError

    def backward(self, dout, param_grads=True, input_grad=True):
        """Return (dx or None, {param name: gradient})."""
        raise NotImplementedError


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense(Layer):
    kind = "dense"

    def param_specs(self):
        n_in, n_out = self.input_shape[0], self.output_shape[0]
        return [("kernel", (n_in, n_out), True), ("bias", (n_out,), True)]

    def init_params(self, rng):
        w = self.params["kernel"]
        w[...] = _glorot(rng, w.shape, w.shape[0], w.shape[1], w.dtype)
        self.params["bias"][...] = 0

    def forward(self, x, training=False, update_stats=False):
        self._x = x
        return x @ self.params["kernel"] + self.params["bias"]

    def backward(self, dout, param_grads=True, input_grad=True):
        grads = {}
        if param_grads:
            grads["kernel"] = self._x.T @ dout
            grads["bias"] = dout.sum(axis=0)
        dx = dout @ self.params["kernel"].T if input_grad else None
        return dx, grads


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, desc):
        super().__init__(desc)
        self.k = desc.kernel_size
        self.stride = desc.strides
        self.filters = desc.filters
        if desc.padding == "same":
            h, w = self.input_shape[:2]
            ph = max((self.output_shape[0] - 1) * self.stride + self.k - h, 0)
            pw = max((self.output_shape[1] - 1) * self.stride + self.k - w, 0)
            self.pad = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
        else:
            self.pad = ((0, 0), (0, 0))

    def param_specs(self):
        c = self.input_shape[2]
        return [("kernel", (self.k, self.k, c, self.filters), True),
                ("bias", (self.filters,), True)]

    def init_params(self, rng):
        w = self.params["kernel"]
        rf = self.k * self.k
        w[...] = _glorot(rng, w.shape, rf * w.shape[2], rf * w.shape[3], w.dtype)
        self.params["bias"][...] = 0

    def forward(self, x, training=False, update_stats=False):
        (pt, pb), (pl, pr) = self.pad
        if pt or pb or pl or pr:
            x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        x = np.ascontiguousarray(x)
        self._padded_shape = x.shape
        cols = _kernels.im2col(x, self.k, self.k, self.stride)
        n, oh, ow, kk = cols.shape
        self._cols = cols.reshape(-1, kk)
        w2 = self.params["kernel"].reshape(kk, self.filters)
        out = self._cols @ w2 + self.params["bias"]
        return out.reshape(n, oh, ow, self.filters)

    def backward(self, dout, param_grads=True, input_grad=True):
        n, oh, ow, f = dout.shape
        d2 = dout.reshape(-1, f)
        grads = {}
        if param_grads:
            grads["kernel"] = (self._cols.T @ d2).reshape(self.params["kernel"].shape)
            grads["bias"] = d2.sum(axis=0)
        if not input_grad:
            return None, grads
        kk = self._cols.shape[1]
        dcols = (d2 @ self.params["kernel"].reshape(kk, f).T).reshape(n, oh, ow, kk)
        dx = _kernels.col2im(np.ascontiguousarray(dcols), tuple(self._padded_shape),
                             self.k, self.k, self.stride)
        (pt, pb), (pl, pr) = self.pad
        h, w = self.input_shape[:2]
        return dx[:, pt:pt + h, pl:pl + w, :], grads


class BatchNorm(Layer):
    """Normalization over every axis except the last (channels)."""

    kind = "batch_normalization"
    momentum = 0.99
    eps = 1e-3

    def param_specs(self):
        c = self.input_shape[-1]
        return [("gamma", (c,), True), ("beta", (c,), True),
                ("moving_mean", (c,), False), ("moving_variance", (c,), False)]

    def init_params(self, rng):
        self.params["gamma"][...] = 1
        self.params["beta"][...] = 0
        self.params["moving_mean"][...] = 0
        self.params["moving_variance"][...] = 1

    def forward(self, x, training=False, update_stats=False):
        p = self.params
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = ((x - mean) ** 2).mean(axis=axes)
            if update_stats:
                mom = self.momentum
                p["moving_mean"][...] = mom * p["moving_mean"] + (1 - mom) * mean
                p["moving_variance"][...] = mom * p["moving_variance"] + (1 - mom) * var
        else:
            mean, var = p["moving_mean"], p["moving_variance"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._xhat, self._inv_std, self._training = xhat, inv_std, training
        return xhat * p["gamma"] + p["beta"]

    def backward(self, dout, param_grads=True, input_grad=True):
        axes = tuple(range(dout.ndim - 1))
        xhat = self._xhat
        grads = {}
        if param_grads:
            grads["gamma"] = (dout * xhat).sum(axis=axes)
            grads["beta"] = dout.sum(axis=axes)
        if not input_grad:
            return None, grads
        dxhat = dout * self.params["gamma"]
        if not self._training:
            return dxhat * self._inv_std, grads
        m = dout.size // dout.shape[-1]
        dx = (self._inv_std / m) * (
            m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return dx, grads


class MaxPool2D(Layer):
    kind = "max_pooling2d"

    def forward(self, x, training=False, update_stats=False):
        x = np.ascontiguousarray(x)
        self._x_shape = x.shape
        out, self._arg = _kernels.maxpool_forward(x, self.desc.pool_size, self.desc.strides)
        return out

    def backward(self, dout, param_grads=True, input_grad=True):
        if not input_grad:
            return None, {}
        dx = _kernels.maxpool_backward(np.ascontiguousarray(dout), self._arg,
                                       tuple(self._x_shape), self.desc.pool_size,
                                       self.desc.strides)
        return dx, {}


class AvgPool2D(Layer):
    kind = "average_pooling2d"

    def forward(self, x, training=False, update_stats=False):
        p, s = self.desc.pool_size, self.desc.strides
        oh, ow = self.output_shape[:2]
        self._x_shape = x.shape
        out = np.zeros((x.shape[0], oh, ow, x.shape[3]), dtype=x.dtype)
        for i in range(p):
            for j in range(p):
                out += x[:, i:i + s * oh:s, j:j + s * ow:s, :]
        return out / (p * p)

    def backward(self, dout, param_grads=True, input_grad=True):
        if not input_grad:
            return None, {}
        p, s = self.desc.pool_size, self.desc.strides
        oh, ow = self.output_shape[:2]
        g = dout / (p * p)
        dx = np.zeros(self._x_shape, dtype=dout.dtype)
        for i in range(p):
            for j in range(p):
                dx[:, i:i + s * oh:s, j:j + s * ow:s, :] += g
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False, update_stats=False):
        self._x_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout, param_grads=True, input_grad=True):
        return (dout.reshape(self._x_shape) if input_grad else None), {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, update_stats=False):
        self._on = x > 0
        return np.where(self._on, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout, param_grads=True, input_grad=True):
        return (np.where(self._on, dout, 0).astype(dout.dtype, copy=False) if input_grad else None), {}


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training=False, update_stats=False):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        self._y = y
        return y

    def backward(self, dout, param_grads=True, input_grad=True):
        if not input_grad:
            return None, {}
        y = self._y
        return y * (dout - (dout * y).sum(axis=-1, keepdims=True)), {}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2D, BatchNorm, MaxPool2D, AvgPool2D,
                                         Flatten, ReLU, Softmax)}


def make_layer(desc) -> Layer:
    return LAYER_TYPES[desc.kind](desc)
