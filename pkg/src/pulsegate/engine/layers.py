"""Forward/backward math for the fixed layer set.

Every layer works on batched numpy arrays: convolutional tensors are
(batch, channels, length), dense tensors are (batch, features). Shapes
passed between the shape-inference helpers exclude the batch dimension.

Each op exposes:
    out_shape(options, in_shapes)     shape inference, batch-free
    param_shapes(options, in_shapes)  trainable parameter shapes
    forward(xs, params, options, ctx) -> (y, cache)
    backward(gout, cache, params, options) -> (input grads, param grads)

``ctx`` carries the execution mode ("train"/"infer"), the graph RNG
(dropout) and the node's running-statistics dict (batch norm).
"""
from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _one(xs):
    _require(len(xs) == 1, f"layer takes exactly one input, got {len(xs)}")
    return xs[0]


class Conv1d:
    """Cross-correlation with zero-padded 'same' output length.

    weight is (filters, in_channels, kernel); a kernel [1, 0, 0] therefore
    shifts the signal right by one sample.
    """

    kind = "conv1d"
    param_names = ("weight", "bias")

    @staticmethod
    def validate(options):
        k = options["kernel"]
        _require(k >= 1 and k % 2 == 1, f"conv1d kernel must be odd for 'same' padding, got {k}")
        _require(options["filters"] >= 1, "conv1d needs at least one filter")

    @staticmethod
    def out_shape(options, in_shapes):
        (c, length), = in_shapes
        return (options["filters"], length)

    @staticmethod
    def param_shapes(options, in_shapes):
        (c, _), = in_shapes
        return {"weight": (options["filters"], c, options["kernel"]),
                "bias": (options["filters"],)}

    @staticmethod
    def _im2col(x, k):
        # (b, c, L) -> (b, L, c*k) patch matrix of the zero-padded input
        p = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (b, c, L, k)
        b, c, length, _ = win.shape
        return win.transpose(0, 2, 1, 3).reshape(b, length, c * k)

    @classmethod
    def forward(cls, xs, params, options, ctx):
        x = _one(xs)
        k = options["kernel"]
        w, bias = params["weight"], params["bias"]
        cols = cls._im2col(x, k)                        # (b, L, c*k)
        w2 = w.reshape(w.shape[0], -1)                  # (f, c*k)
        y = cols @ w2.T + bias                          # (b, L, f)
        return np.ascontiguousarray(y.transpose(0, 2, 1)), (cols, x.shape)

    @classmethod
    def backward(cls, gout, cache, params, options):
        cols, x_shape = cache
        w = params["weight"]
        f, c, k = w.shape
        g2 = gout.transpose(0, 2, 1)                    # (b, L, f)
        gw = g2.reshape(-1, f).T @ cols.reshape(-1, c * k)
        gb = gout.sum(axis=(0, 2))
        # input grad: same-padded cross-correlation of gout with the
        # tap-reversed, channel-transposed kernel
        wT = np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2))  # (c, f, k)
        gcols = cls._im2col(gout, k)                    # (b, L, f*k)
        gx = gcols @ wT.reshape(c, -1).T                # (b, L, c)
        gx = np.ascontiguousarray(gx.transpose(0, 2, 1))
        return [gx], {"weight": gw.reshape(f, c, k), "bias": gb}


class BatchNorm:
    """Per-channel (3-d input) or per-feature (2-d input) normalization."""

    kind = "batchnorm"
    param_names = ("gamma", "beta")

    @staticmethod
    def validate(options):
        pass

    @staticmethod
    def out_shape(options, in_shapes):
        return in_shapes[0]

    @staticmethod
    def param_shapes(options, in_shapes):
        return {"gamma": (in_shapes[0][0],), "beta": (in_shapes[0][0],)}

    @staticmethod
    def _axes(x):
        if x.ndim == 3:
            return (0, 2), (1, -1, 1)
        return (0,), (1, -1)

    @classmethod
    def forward(cls, xs, params, options, ctx):
        x = _one(xs)
        axes, pshape = cls._axes(x)
        gamma = params["gamma"].reshape(pshape)
        beta = params["beta"].reshape(pshape)
        running = ctx.running
        if ctx.mode == "train":
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            running["mean"] = BN_MOMENTUM * running["mean"] + (1 - BN_MOMENTUM) * mu
            running["var"] = BN_MOMENTUM * running["var"] + (1 - BN_MOMENTUM) * var
            inv_std = 1.0 / np.sqrt(var.reshape(pshape) + BN_EPS)
            xhat = (x - mu.reshape(pshape)) * inv_std
            y = gamma * xhat + beta
            return y, ("train", xhat, inv_std)
        inv_std = 1.0 / np.sqrt(running["var"].reshape(pshape) + BN_EPS)
        xhat = (x - running["mean"].reshape(pshape)) * inv_std
        return gamma * xhat + beta, ("infer", xhat, inv_std)

    @classmethod
    def backward(cls, gout, cache, params, options):
        mode, xhat, inv_std = cache
        axes, pshape = cls._axes(gout)
        gamma = params["gamma"].reshape(pshape)
        ggamma = (gout * xhat).sum(axis=axes)
        gbeta = gout.sum(axis=axes)
        if mode == "infer":
            # running stats are constants at inference
            gx = gout * gamma * inv_std
        else:
            m = gout.size // gout.shape[1] if gout.ndim == 3 else gout.shape[0]
            gx = (gamma * inv_std) * (
                gout
                - gbeta.reshape(pshape) / m
                - xhat * ggamma.reshape(pshape) / m
            )
        return [gx], {"gamma": ggamma, "beta": gbeta}


class Relu:
    kind = "relu"
    param_names = ()

    @staticmethod
    def validate(options):
        pass

    @staticmethod
    def out_shape(options, in_shapes):
        return in_shapes[0]

    @staticmethod
    def param_shapes(options, in_shapes):
        return {}

    @staticmethod
    def forward(xs, params, options, ctx):
        x = _one(xs)
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    @staticmethod
    def backward(gout, cache, params, options):
        return [np.where(cache, gout, 0.0)], {}


class Sigmoid:
    kind = "sigmoid"
    param_names = ()

    @staticmethod
    def validate(options):
        pass

    @staticmethod
    def out_shape(options, in_shapes):
        return in_shapes[0]

    @staticmethod
    def param_shapes(options, in_shapes):
        return {}

    @staticmethod
    def forward(xs, params, options, ctx):
        y = sigmoid(_one(xs))
        return y, y

    @staticmethod
    def backward(gout, cache, params, options):
        y = cache
        return [gout * y * (1.0 - y)], {}


class MaxPool1d:
    """Non-overlapping max pooling, window == stride."""

    kind = "maxpool1d"
    param_names = ()

    @staticmethod
    def validate(options):
        _require(options["pool"] >= 1, "pool window must be positive")

    @staticmethod
    def out_shape(options, in_shapes):
        (c, length), = in_shapes
        s = options["pool"]
        _require(length % s == 0, f"maxpool1d: length {length} not divisible by window {s}")
        return (c, length // s)

    @staticmethod
    def param_shapes(options, in_shapes):
        return {}

    @staticmethod
    def forward(xs, params, options, ctx):
        x = _one(xs)
        s = options["pool"]
        _require(x.shape[2] % s == 0,
                 f"maxpool1d: length {x.shape[2]} not divisible by window {s}")
        xr = x.reshape(x.shape[0], x.shape[1], -1, s)
        idx = xr.argmax(axis=3)
        y = np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]
        return y, (idx, x.shape)

    @staticmethod
    def backward(gout, cache, params, options):
        idx, x_shape = cache
        s = options["pool"]
        gxr = np.zeros((x_shape[0], x_shape[1], x_shape[2] // s, s), dtype=gout.dtype)
        np.put_along_axis(gxr, idx[..., None], gout[..., None], axis=3)
        return [gxr.reshape(x_shape)], {}


class PyramidPool:
    """Parallel non-overlapping max pools at several window sizes,
    concatenated along the length axis per channel."""

    kind = "spp"
    param_names = ()

    @staticmethod
    def validate(options):
        windows = tuple(options["windows"])
        _require(len(windows) >= 1, "spp needs at least one window")
        _require(all(b > a for a, b in zip(windows, windows[1:])),
                 f"spp windows must be strictly increasing, got {windows}")

    @staticmethod
    def out_shape(options, in_shapes):
        (c, length), = in_shapes
        for w in options["windows"]:
            _require(length % w == 0, f"spp: length {length} not divisible by window {w}")
        return (c, sum(length // w for w in options["windows"]))

    @staticmethod
    def param_shapes(options, in_shapes):
        return {}

    @staticmethod
    def forward(xs, params, options, ctx):
        x = _one(xs)
        b, c, length = x.shape
        outs, idxs = [], []
        for w in options["windows"]:
            _require(length % w == 0, f"spp: length {length} not divisible by window {w}")
            xr = x.reshape(b, c, length // w, w)
            idx = xr.argmax(axis=3)
            outs.append(np.take_along_axis(xr, idx[..., None], axis=3)[..., 0])
            idxs.append(idx)
        return np.concatenate(outs, axis=2), (idxs, x.shape)

    @staticmethod
    def backward(gout, cache, params, options):
        idxs, x_shape = cache
        b, c, length = x_shape
        gx = np.zeros(x_shape, dtype=gout.dtype)
        off = 0
        for w, idx in zip(options["windows"], idxs):
            n = length // w
            seg = gout[:, :, off:off + n]
            gxr = np.zeros((b, c, n, w), dtype=gout.dtype)
            np.put_along_axis(gxr, idx[..., None], seg[..., None], axis=3)
            gx += gxr.reshape(x_shape)
            off += n
        return [gx], {}


class Dense:
    """Affine layer; inputs with more than one trailing dim are flattened."""

    kind = "dense"
    param_names = ("weight", "bias")

    @staticmethod
    def validate(options):
        _require(options["units"] >= 1, "dense needs at least one unit")

    @staticmethod
    def out_shape(options, in_shapes):
        return (options["units"],)

    @staticmethod
    def param_shapes(options, in_shapes):
        fan_in = int(np.prod(in_shapes[0]))
        return {"weight": (fan_in, options["units"]), "bias": (options["units"],)}

    @staticmethod
    def forward(xs, params, options, ctx):
        x = _one(xs)
        xf = x.reshape(x.shape[0], -1)
        return xf @ params["weight"] + params["bias"], (xf, x.shape)

    @staticmethod
    def backward(gout, cache, params, options):
        xf, x_shape = cache
        gw = xf.T @ gout
        gb = gout.sum(axis=0)
        gx = (gout @ params["weight"].T).reshape(x_shape)
        return [gx], {"weight": gw, "bias": gb}


class Dropout:
    """Inverted dropout; identity at inference."""

    kind = "dropout"
    param_names = ()

    @staticmethod
    def validate(options):
        r = options["rate"]
        _require(0.0 <= r < 1.0, f"dropout rate must be in [0, 1), got {r}")

    @staticmethod
    def out_shape(options, in_shapes):
        return in_shapes[0]

    @staticmethod
    def param_shapes(options, in_shapes):
        return {}

    @staticmethod
    def forward(xs, params, options, ctx):
        x = _one(xs)
        r = options["rate"]
        if ctx.mode != "train" or r == 0.0:
            return x, None
        mask = (ctx.rng.random(x.shape) >= r).astype(x.dtype) / (1.0 - r)
        return x * mask, mask

    @staticmethod
    def backward(gout, cache, params, options):
        if cache is None:
            return [gout], {}
        return [gout * cache], {}


class Softmax:
    kind = "softmax"
    param_names = ()

    @staticmethod
    def validate(options):
        pass

    @staticmethod
    def out_shape(options, in_shapes):
        return in_shapes[0]

    @staticmethod
    def param_shapes(options, in_shapes):
        return {}

    @staticmethod
    def forward(xs, params, options, ctx):
        x = _one(xs)
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    @staticmethod
    def backward(gout, cache, params, options):
        y = cache
        dot = (gout * y).sum(axis=-1, keepdims=True)
        return [y * (gout - dot)], {}


class Concat:
    """Concatenation along the channel/feature axis."""

    kind = "concat"
    param_names = ()
    variadic = True

    @staticmethod
    def validate(options):
        pass

    @staticmethod
    def out_shape(options, in_shapes):
        rest = {s[1:] for s in in_shapes}
        _require(len(rest) == 1,
                 f"concat inputs must agree beyond the channel axis, got {sorted(in_shapes)}")
        return (sum(s[0] for s in in_shapes),) + in_shapes[0][1:]

    @staticmethod
    def param_shapes(options, in_shapes):
        return {}

    @staticmethod
    def forward(xs, params, options, ctx):
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    @staticmethod
    def backward(gout, cache, params, options):
        splits = np.cumsum(cache[:-1])
        return list(np.split(gout, splits, axis=1)), {}


class Add:
    kind = "add"
    param_names = ()
    variadic = True

    @staticmethod
    def validate(options):
        pass

    @staticmethod
    def out_shape(options, in_shapes):
        _require(len(set(in_shapes)) == 1,
                 f"add inputs must share one shape, got {sorted(set(in_shapes))}")
        return in_shapes[0]

    @staticmethod
    def param_shapes(options, in_shapes):
        return {}

    @staticmethod
    def forward(xs, params, options, ctx):
        y = xs[0].copy()
        for x in xs[1:]:
            y += x
        return y, len(xs)

    @staticmethod
    def backward(gout, cache, params, options):
        return [gout] * cache, {}


class Upsample1d:
    """Nearest-neighbour upsampling along the length axis."""

    kind = "upsample1d"
    param_names = ()

    @staticmethod
    def validate(options):
        _require(options["factor"] >= 1, "upsample factor must be positive")

    @staticmethod
    def out_shape(options, in_shapes):
        (c, length), = in_shapes
        return (c, length * options["factor"])

    @staticmethod
    def param_shapes(options, in_shapes):
        return {}

    @staticmethod
    def forward(xs, params, options, ctx):
        x = _one(xs)
        return np.repeat(x, options["factor"], axis=2), x.shape

    @staticmethod
    def backward(gout, cache, params, options):
        b, c, length = cache
        m = options["factor"]
        return [gout.reshape(b, c, length, m).sum(axis=3)], {}


LAYER_OPS = {op.kind: op for op in (
    Conv1d, BatchNorm, Relu, Sigmoid, MaxPool1d, PyramidPool,
    Dense, Dropout, Softmax, Concat, Add, Upsample1d,
)}

# stable ids for the binary model format
KIND_IDS = {kind: i for i, kind in enumerate(sorted(LAYER_OPS))}
