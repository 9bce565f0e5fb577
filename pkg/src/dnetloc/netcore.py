"""A small dense network with exact backpropagation, written against numpy.

Pipeline: two stride-2 3x3 convolutions (Gaussian-initialised, linear) ->
dense blocks (conv3x3 -> [batchnorm] -> ReLU, outputs concatenated) with 2x2
average pooling between blocks -> global average pool -> linear -> sigmoid.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

BINOMIAL_3x3 = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


class ShapeError(ValueError):
    pass


@dataclass
class ModelSpec:
    in_channels: int = 3
    height: int = 64
    width: int = 64
    n_classes: int = 35
    down_layers: int = 2
    down_filters: int = 3
    blocks: int = 2
    layers_per_block: int = 4
    growth: int = 8
    batchnorm: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.down_filters != self.in_channels:
            raise ShapeError("Gaussian downsampler init maps channels one-to-one; need down_filters == in_channels")
        h, w = self.height, self.width
        for _ in range(self.down_layers):
            h, w = conv_out_size(h, 3, 2, 1), conv_out_size(w, 3, 2, 1)
        for _ in range(self.blocks - 1):
            if h < 2 or w < 2:
                raise ShapeError(f"input {self.height}x{self.width} too small for {self.blocks} blocks")
            h, w = h // 2, w // 2

    @property
    def feature_channels(self) -> int:
        return self.down_filters + self.blocks * self.layers_per_block * self.growth

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


class Param:
    __slots__ = ("name", "value", "grad", "init")

    def __init__(self, name: str, value: np.ndarray, init: str = ""):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.init = init

    def zero_grad(self):
        self.grad[...] = 0.0


# ---------------------------------------------------------------- primitives


def _im2col(x, k, stride, padding):
    """x: (N, H, W, C) -> cols (N, Ho, Wo, k, k, C)."""
    N, H, W, C = x.shape
    Ho, Wo = conv_out_size(H, k, stride, padding), conv_out_size(W, k, stride, padding)
    if padding:
        xp = np.zeros((N, H + 2 * padding, W + 2 * padding, C), dtype=x.dtype)
        xp[:, padding : padding + H, padding : padding + W] = x
    else:
        xp = x
    cols = np.empty((N, Ho, Wo, k, k, C), dtype=x.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + hs : stride, j : j + ws : stride, :]
    return cols


def _col2im(gcols, x_shape, k, stride, padding):
    N, H, W, C = x_shape
    Ho, Wo = gcols.shape[1:3]
    gxp = np.zeros((N, H + 2 * padding, W + 2 * padding, C), dtype=gcols.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(k):
        for j in range(k):
            gxp[:, i : i + hs : stride, j : j + ws : stride, :] += gcols[:, :, :, i, j, :]
    if padding:
        gxp = gxp[:, padding : padding + H, padding : padding + W]
    return gxp


def conv_nhwc_forward(x, w, b, stride=1, padding=0):
    """Channels-last convolution. x: (N, H, W, C), w: (O, C, k, k). Returns (out, cache)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[1]:
        raise ShapeError(f"conv input (NHWC) {x.shape} incompatible with kernel {w.shape}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    O, C, k, _ = w.shape
    cols = _im2col(x, k, stride, padding)
    N, Ho, Wo = cols.shape[:3]
    wmat = w.transpose(2, 3, 1, 0).reshape(k * k * C, O)
    out = cols.reshape(-1, k * k * C) @ wmat + b
    return out.reshape(N, Ho, Wo, O), (x.shape, cols, w, stride, padding)


def conv_nhwc_backward(grad_out, cache):
    """Returns (grad_x, grad_w, grad_b) for :func:`conv_nhwc_forward`."""
    x_shape, cols, w, stride, padding = cache
    O, C, k, _ = w.shape
    g2 = grad_out.reshape(-1, O)
    c2 = cols.reshape(-1, k * k * C)
    grad_w = (c2.T @ g2).reshape(k, k, C, O).transpose(3, 2, 0, 1)
    grad_b = g2.sum(axis=0)
    wmat = w.transpose(2, 3, 1, 0).reshape(k * k * C, O)
    gcols = (g2 @ wmat.T).reshape(cols.shape)
    return _col2im(gcols, x_shape, k, stride, padding), grad_w, grad_b


def conv2d_forward(x, w, b, stride=1, padding=0):
    """x: (N, C, H, W), w: (O, C, k, k), b: (O,). Returns (out, cache)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv input {x.shape} incompatible with kernel {w.shape}")
    out, cache = conv_nhwc_forward(x.transpose(0, 2, 3, 1), w, b, stride, padding)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def conv2d_backward(grad_out, cache):
    """Returns (grad_x, grad_w, grad_b) for :func:`conv2d_forward`."""
    gx, gw, gb = conv_nhwc_backward(grad_out.transpose(0, 2, 3, 1), cache)
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(grad, y):
    return np.where(y > 0, grad, 0.0)


def sigmoid(x):
    """Stable logistic: never evaluates exp of a large positive number."""
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad, y):
    return grad * y * (1.0 - y)


def spatial_avg_pool(x):
    """(N, C, H, W) -> (N, C) mean over all spatial positions."""
    return x.mean(axis=(2, 3))


def spatial_avg_pool_backward(grad, shape):
    H, W = shape[2], shape[3]
    return np.broadcast_to((grad / (H * W))[:, :, None, None], shape).copy()


def avg_pool2x2(x):
    """Channels-last 2x2 mean pooling; an odd trailing row/column is dropped."""
    N, H, W, C = x.shape
    H2, W2 = H // 2, W // 2
    return x[:, : 2 * H2, : 2 * W2].reshape(N, H2, 2, W2, 2, C).mean(axis=(2, 4))


def avg_pool2x2_backward(grad, shape):
    g = np.zeros(shape, dtype=grad.dtype)
    H2, W2 = grad.shape[1:3]
    g[:, : 2 * H2, : 2 * W2] = np.repeat(np.repeat(grad / 4.0, 2, axis=1), 2, axis=2)
    return g


def gaussian_downsampler_init(channels: int = 3, dtype=np.float64) -> np.ndarray:
    """3x3 binomial low-pass on the matching channel, zero elsewhere."""
    w = np.zeros((channels, channels, 3, 3), dtype=dtype)
    for c in range(channels):
        w[c, c] = BINOMIAL_3x3
    return w


# ---------------------------------------------------------------- layers


class Conv2d:
    """Convolution layer on channels-last activations; weights stored (O, C, k, k)."""

    def __init__(self, name, c_in, c_out, k=3, stride=1, padding=1, rng=None, dtype=np.float64):
        fan_in = c_in * k * k
        if rng is not None:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
        else:
            w = np.zeros((c_out, c_in, k, k))
        self.w = Param(f"{name}.w", w.astype(dtype), "he_normal")
        self.b = Param(f"{name}.b", np.zeros(c_out, dtype=dtype), "zeros")
        self.stride, self.padding = stride, padding

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        out, self._cache = conv_nhwc_forward(x, self.w.value, self.b.value, self.stride, self.padding)
        return out

    def backward(self, grad):
        gx, gw, gb = conv_nhwc_backward(grad, self._cache)
        self.w.grad += gw
        self.b.grad += gb
        return gx


class BatchNorm2d:
    """Per-channel batch normalisation (channels-last); batch statistics while training."""

    def __init__(self, name, channels, momentum=0.1, eps=1e-5, dtype=np.float64):
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype), "ones")
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype), "zeros")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps
        self.training = True

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        if self.training:
            mu = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mu
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * var
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, grad):
        xhat, inv = self._cache
        self.gamma.grad += (grad * xhat).sum(axis=(0, 1, 2))
        self.beta.grad += grad.sum(axis=(0, 1, 2))
        gx_hat = grad * self.gamma.value
        if not self.training:
            return gx_hat * inv
        m = grad.shape[0] * grad.shape[1] * grad.shape[2]
        s1 = gx_hat.sum(axis=(0, 1, 2))
        s2 = (gx_hat * xhat).sum(axis=(0, 1, 2))
        return inv / m * (m * gx_hat - s1 - xhat * s2)


class DenseLayer:
    def __init__(self, name, c_in, growth, batchnorm, rng, dtype):
        self.conv = Conv2d(f"{name}.conv", c_in, growth, 3, 1, 1, rng, dtype)
        self.bn = BatchNorm2d(f"{name}.bn", growth, dtype=dtype) if batchnorm else None

    def params(self):
        return self.conv.params() + (self.bn.params() if self.bn else [])

    def forward(self, x):
        z = self.conv.forward(x)
        if self.bn:
            z = self.bn.forward(z)
        self._y = relu_forward(z)
        return self._y

    def backward(self, grad):
        g = relu_backward(grad, self._y)
        if self.bn:
            g = self.bn.backward(g)
        return self.conv.backward(g)


class DenseBlock:
    """Each layer sees the channel concatenation of the block input and all earlier outputs."""

    def __init__(self, name, c_in, n_layers, growth, batchnorm=False, rng=None, dtype=np.float64):
        self.c_in, self.growth = c_in, growth
        self.layers = [
            DenseLayer(f"{name}.l{i}", c_in + i * growth, growth, batchnorm, rng, dtype)
            for i in range(n_layers)
        ]

    @property
    def c_out(self):
        return self.c_in + len(self.layers) * self.growth

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        feats = x
        for layer in self.layers:
            feats = np.concatenate([feats, layer.forward(feats)], axis=-1)
        return feats

    def backward(self, grad):
        g = grad
        for i in range(len(self.layers) - 1, -1, -1):
            split = self.c_in + i * self.growth
            g = g[..., :split] + self.layers[i].backward(np.ascontiguousarray(g[..., split:]))
        return g


def dense_block_forward(x, block: DenseBlock):
    """NCHW wrapper around :meth:`DenseBlock.forward`."""
    return np.ascontiguousarray(block.forward(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2))


def dense_block_backward(grad, block: DenseBlock):
    return np.ascontiguousarray(block.backward(grad.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2))


class Linear:
    def __init__(self, name, n_in, n_out, rng=None, dtype=np.float64):
        if rng is not None:
            w = rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, n_out))
        else:
            w = np.zeros((n_in, n_out))
        self.w = Param(f"{name}.w", w.astype(dtype), "lecun_normal")
        self.b = Param(f"{name}.b", np.zeros(n_out, dtype=dtype), "zeros")

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, grad):
        self.w.grad += self._x.T @ grad
        self.b.grad += grad.sum(axis=0)
        return grad @ self.w.value.T


# ---------------------------------------------------------------- model


class DenseNetLoc:
    """Downsampler -> dense blocks -> global average pool -> linear -> sigmoid.

    Inputs and input gradients are NCHW; activations are kept channels-last
    internally.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        dtype = np.dtype(spec.dtype)
        rng = np.random.default_rng(seed)
        self.down = []
        for i in range(spec.down_layers):
            conv = Conv2d(f"down{i}", spec.in_channels, spec.down_filters, 3, 2, 1, None, dtype)
            conv.w.value[...] = gaussian_downsampler_init(spec.in_channels, dtype)
            conv.w.init = "gaussian_binomial"
            self.down.append(conv)
        self.blocks = []
        c = spec.down_filters
        for i in range(spec.blocks):
            block = DenseBlock(f"block{i}", c, spec.layers_per_block, spec.growth, spec.batchnorm, rng, dtype)
            self.blocks.append(block)
            c = block.c_out
        self.head = Linear("head", c, spec.n_classes, rng, dtype)
        self.training = True

    def params(self) -> list[Param]:
        ps = [p for conv in self.down for p in conv.params()]
        ps += [p for b in self.blocks for p in b.params()]
        return ps + self.head.params()

    def batchnorms(self) -> list[tuple[str, BatchNorm2d]]:
        return [(l.bn.gamma.name.rsplit(".", 1)[0], l.bn) for b in self.blocks for l in b.layers if l.bn]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        for _, bn in self.batchnorms():
            bn.training = mode

    def eval(self):
        self.train(False)

    def forward_logits(self, x):
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.height, s.width):
            raise ShapeError(f"expected (N, {s.in_channels}, {s.height}, {s.width}) input, got {x.shape}")
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=s.dtype)
        for conv in self.down:
            h = conv.forward(h)
        self._shapes = []
        for i, block in enumerate(self.blocks):
            if i:
                self._shapes.append(h.shape)
                h = avg_pool2x2(h)
            h = block.forward(h)
        self._feat_shape = h.shape
        return self.head.forward(h.mean(axis=(1, 2)))

    def forward(self, x):
        self._p = sigmoid(self.forward_logits(x))
        return self._p

    def backward_logits(self, grad_logits):
        g = self.head.backward(grad_logits.astype(self.spec.dtype, copy=False))
        N, H, W, C = self._feat_shape
        g = np.broadcast_to((g / (H * W))[:, None, None, :], self._feat_shape)
        for i in range(len(self.blocks) - 1, -1, -1):
            g = self.blocks[i].backward(g)
            if i:
                g = avg_pool2x2_backward(g, self._shapes[i - 1])
        for conv in reversed(self.down):
            g = conv.backward(g)
        return np.ascontiguousarray(g.transpose(0, 3, 1, 2))

    def backward(self, grad_preds):
        """Accumulate parameter gradients from d(loss)/d(predictions)."""
        return self.backward_logits(sigmoid_backward(grad_preds, self._p))

    def predict(self, x, chunk: int = 256):
        was = self.training
        self.eval()
        try:
            return np.concatenate([self.forward(x[i : i + chunk]) for i in range(0, len(x), chunk)])
        finally:
            self.train(was)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.params()}
        for name, bn in self.batchnorms():
            for k, v in bn.buffers().items():
                out[f"{name}.{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, arr in self.state_arrays().items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing {name}")
            if arrays[name].shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != model {arr.shape}")
            arr[...] = arrays[name]


def model_forward(model: DenseNetLoc, images):
    return model.forward(images)


def model_backward(model: DenseNetLoc, grad_preds):
    model.backward(grad_preds)
    return {p.name: p.grad for p in model.params()}


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: str
    n_checked: int
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(f, params, tolerance=1e-4, h=1e-6, n_probe=None, seed=0, floor=1e-5) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f()`` must zero the gradients, run forward and backward, fill
    ``param.grad`` and return the scalar loss. A random subset of
    ``n_probe`` entries per parameter is probed (all entries if None).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    f()
    analytic = {p.name: p.grad.copy() for p in params}
    worst, worst_err, count = "", 0.0, 0
    errors = {}
    for p in params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size) if n_probe is None or n_probe >= flat.size else rng.choice(flat.size, n_probe, replace=False)
        a_flat = analytic[p.name].reshape(-1)
        perr = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            perr = max(perr, err)
            count += 1
            if err > worst_err:
                worst_err, worst = err, f"{p.name}[{i}]"
        errors[p.name] = perr
    f()
    return GradCheckReport(worst_err, worst, count, tolerance, errors)


# ---------------------------------------------------------------- checkpoint

MAGIC = b"DNLCKPT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: DenseNetLoc, optimizer=None, extra: dict | None = None):
    """Binary layout: MAGIC | uint64 LE header length | JSON header | raw arrays.

    Each array entry in the header lists name, dtype, shape and byte offset
    relative to the end of the header. Output bytes depend only on the state.
    """
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    meta = {}
    if optimizer is not None:
        opt_arrays, meta = optimizer.state_dict()
        arrays.update({f"optim/{k}": v for k, v in opt_arrays.items()})
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "optimizer": meta,
        "extra": extra or {},
        "arrays": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(hb).to_bytes(8, "little"))
        fh.write(hb)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    n = int.from_bytes(data[8:16], "little")
    header = json.loads(data[16 : 16 + n])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 16 + n
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(data, dt, count, base + e["offset"]).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path, optimizer=None):
    """Returns (model, header); restores optimizer state in place when given."""
    header, arrays = read_checkpoint(path)
    model = DenseNetLoc(ModelSpec.from_dict(header["spec"]))
    model.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    if optimizer is not None:
        optimizer.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("optim/")}, header["optimizer"])
    return model, header
