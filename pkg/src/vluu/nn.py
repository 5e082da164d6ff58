"""Small reverse-mode network core: layers, the three fixed networks, losses, Adam.

Layers work on NHWC arrays. Each layer caches what it needs in ``forward`` and
consumes it in ``backward``; gradients land in ``layer.grads`` under the same
keys as ``layer.params``. Public helpers (``seg_forward``, the losses) accept
channel-first arrays, ``(C, H, W)`` or ``(N, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vluu import kernels

LOG_DELTA = 1e-8


class ShapeError(ValueError):
    """Input shape does not match the configured architecture."""


# ---------------------------------------------------------------------------
# layers


class Layer:
    name = ""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


class Conv2d(Layer):
    """3x3 (padding 1) or 1x1 convolution, weight stored as (out, in, k, k)."""

    def __init__(self, name, in_ch, out_ch, ksize=3, stride=1, dtype=np.float32):
        super().__init__()
        if ksize not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        if ksize == 1 and stride != 1:
            raise ValueError("1x1 convolutions are stride 1")
        self.name = name
        self.in_ch, self.out_ch, self.ksize, self.stride = in_ch, out_ch, ksize, stride
        self.params = {
            "weight": np.zeros((out_ch, in_ch, ksize, ksize), dtype=dtype),
            "bias": np.zeros(out_ch, dtype=dtype),
        }

    @property
    def fan_in(self):
        return self.in_ch * self.ksize * self.ksize

    def _wmat(self):
        # (O, C, kh, kw) -> (kh*kw*C, O), matching the (ki, kj, c) patch layout
        w = self.params["weight"]
        return w.transpose(2, 3, 1, 0).reshape(-1, self.out_ch)

    def forward(self, x):
        n, h, w, c = x.shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        if self.ksize == 3:
            cols = kernels.im2col3x3(x, self.stride)
        else:
            cols = np.ascontiguousarray(x)
        ho, wo = cols.shape[1], cols.shape[2]
        flat = cols.reshape(n * ho * wo, -1)
        y = flat @ self._wmat() + self.params["bias"]
        self._cache = (flat, x.shape, (n, ho, wo))
        return y.reshape(n, ho, wo, self.out_ch)

    def backward(self, dy, need_dx=True):
        flat, xshape, (n, ho, wo) = self._take_cache()
        dy2 = dy.reshape(n * ho * wo, self.out_ch)
        dw = flat.T @ dy2
        k = self.ksize
        self.grads["weight"] = np.ascontiguousarray(
            dw.reshape(k, k, self.in_ch, self.out_ch).transpose(3, 2, 0, 1))
        self.grads["bias"] = dy2.sum(axis=0)
        if not need_dx:
            return None
        dcols = dy2 @ self._wmat().T
        if k == 1:
            return dcols.reshape(xshape)
        dcols = dcols.reshape(n, ho, wo, 3, 3, self.in_ch)
        return kernels.col2im3x3(dcols, xshape[1], xshape[2], self.stride)


class ReLU(Layer):
    def __init__(self, name="relu"):
        super().__init__()
        self.name = name

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy, need_dx=True):
        mask = self._take_cache()
        return np.where(mask, dy, 0).astype(dy.dtype, copy=False)


class MaxPool2(Layer):
    def __init__(self, name="pool"):
        super().__init__()
        self.name = name

    def forward(self, x):
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError(f"{self.name}: spatial size {x.shape[1:3]} not divisible by 2")
        y, arg = kernels.maxpool2_forward(x)
        self._cache = arg
        return y

    def backward(self, dy, need_dx=True):
        return kernels.maxpool2_backward(dy, self._take_cache())


class Upsample2(Layer):
    """Nearest-neighbour upsampling by 2."""

    def __init__(self, name="up"):
        super().__init__()
        self.name = name

    def forward(self, x):
        self._cache = True
        return kernels.upsample2_forward(x)

    def backward(self, dy, need_dx=True):
        self._take_cache()
        return kernels.upsample2_backward(dy)


class GlobalAvgPool(Layer):
    def __init__(self, name="gap"):
        super().__init__()
        self.name = name

    def forward(self, x):
        self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dy, need_dx=True):
        n, h, w, c = self._take_cache()
        return np.broadcast_to(dy[:, None, None, :] / (h * w), (n, h, w, c)).copy()


class Dense(Layer):
    def __init__(self, name, in_features, out_features, dtype=np.float32):
        super().__init__()
        self.name = name
        self.params = {
            "weight": np.zeros((out_features, in_features), dtype=dtype),
            "bias": np.zeros(out_features, dtype=dtype),
        }

    @property
    def fan_in(self):
        return self.params["weight"].shape[1]

    def forward(self, x):
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy, need_dx=True):
        x = self._take_cache()
        self.grads["weight"] = dy.T @ x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"] if need_dx else None


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy, need_dx=False):
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            dy = self.layers[i].backward(dy, need_dx=need_dx or i > 0)
        return dy

    def named(self, prefix=""):
        for layer in self.layers:
            for key in layer.params:
                yield f"{prefix}{layer.name}.{key}", layer, key

    def params(self, prefix=""):
        return {name: layer.params[key] for name, layer, key in self.named(prefix)}

    def grads(self, prefix=""):
        return {name: layer.grads[key] for name, layer, key in self.named(prefix)}


# ---------------------------------------------------------------------------
# element-wise ops


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, dp, axis=-1):
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


def masked_softmax(logits, allowed, axis=-1):
    """Softmax over the ``allowed`` channels only; the rest get probability 0."""
    z = np.where(allowed, logits, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(allowed, np.exp(z), 0)
    return (e / e.sum(axis=axis, keepdims=True)).astype(logits.dtype, copy=False)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# losses


def _pixels(arr, axis):
    return arr.size // arr.shape[axis]


def soft_cross_entropy(pred, target, axis=-3):
    """Mean over pixels (and batch) of -sum_c target_c * log(pred_c + 1e-8)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    return float(-(target * np.log(pred + LOG_DELTA)).sum() / _pixels(pred, axis))


def soft_cross_entropy_grad(pred, target, axis=-3):
    """Gradient of :func:`soft_cross_entropy` with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    return -target / (pred + LOG_DELTA) / _pixels(pred, axis)


def binary_cross_entropy(score, label):
    """-[y log s + (1-y) log(1-s)] with s clamped to [1e-8, 1-1e-8]; elementwise."""
    s = np.clip(score, LOG_DELTA, 1 - LOG_DELTA)
    return -(label * np.log(s) + (1 - label) * np.log(1 - s))


def binary_cross_entropy_grad(score, label):
    inside = (score > LOG_DELTA) & (score < 1 - LOG_DELTA)
    s = np.clip(score, LOG_DELTA, 1 - LOG_DELTA)
    return np.where(inside, -label / s + (1 - label) / (1 - s), 0).astype(
        np.asarray(score).dtype, copy=False)


# ---------------------------------------------------------------------------
# networks


@dataclass(frozen=True)
class ArchConfig:
    """Network input/output geometry; layer widths are fixed."""

    in_channels: int
    num_classes: int  # K foreground classes; the segmenter outputs K + 1
    height: int = 64
    width: int = 64

    def to_dict(self):
        return {"in_channels": self.in_channels, "num_classes": self.num_classes,
                "height": self.height, "width": self.width}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["in_channels"]), int(d["num_classes"]),
                   int(d["height"]), int(d["width"]))


def _init_layers(layers, rng):
    for layer in layers:
        if "weight" not in layer.params:
            continue
        w = layer.params["weight"]
        bound = np.sqrt(6.0 / layer.fan_in)
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        layer.params["bias"][...] = 0


class _Net:
    """Shared plumbing: NHWC entry, parameter dict, geometry checks."""

    kind = ""

    def __init__(self, arch, dtype):
        self.arch = arch
        self.dtype = np.dtype(dtype)

    def _check(self, x):
        if x.ndim != 4 or x.shape[1:] != (self.arch.height, self.arch.width, self._in_ch):
            raise ShapeError(
                f"{self.kind}: expected (N, {self.arch.height}, {self.arch.width}, "
                f"{self._in_ch}) input, got {x.shape}")
        return np.ascontiguousarray(x, dtype=self.dtype)

    @property
    def params(self):
        return {name: arr for name, _, arr in self._named()}

    @property
    def grads(self):
        return {name: layer.grads[key] for name, layer, key in self._named_keys()}

    def _named(self):
        for name, layer, key in self._named_keys():
            yield name, layer, layer.params[key]

    def param_count(self):
        return sum(a.size for a in self.params.values())


class SegNet(_Net):
    """conv16-pool-conv32-pool-conv64-up-conv32-up-conv16-conv1x1(K+1), ReLU between."""

    kind = "segnet"

    def __init__(self, arch, dtype=np.float32):
        super().__init__(arch, dtype)
        if arch.height % 4 or arch.width % 4:
            raise ShapeError("height and width must be divisible by 4")
        self._in_ch = arch.in_channels
        d = self.dtype
        self.body = Sequential([
            Conv2d("conv1", arch.in_channels, 16, dtype=d), ReLU(), MaxPool2(),
            Conv2d("conv2", 16, 32, dtype=d), ReLU(), MaxPool2(),
            Conv2d("conv3", 32, 64, dtype=d), ReLU(), Upsample2(),
            Conv2d("conv4", 64, 32, dtype=d), ReLU(), Upsample2(),
            Conv2d("conv5", 32, 16, dtype=d), ReLU(),
            Conv2d("conv6", 16, arch.num_classes + 1, ksize=1, dtype=d),
        ])

    def _named_keys(self):
        return self.body.named()

    def init(self, rng):
        _init_layers(self.body.layers, rng)
        return self

    def logits(self, x_nhwc):
        return self.body.forward(self._check(x_nhwc))

    def backward(self, dlogits, need_dx=False):
        """Backpropagate ``dlogits``; returns the input gradient if requested."""
        return self.body.backward(np.ascontiguousarray(dlogits, dtype=self.dtype), need_dx)


class Discriminator(_Net):
    """conv16/2-conv32/2-global average pool-dense(1)-sigmoid over a (K+1)-channel mask."""

    kind = "discriminator"

    def __init__(self, arch, dtype=np.float32):
        super().__init__(arch, dtype)
        self._in_ch = arch.num_classes + 1
        d = self.dtype
        self.body = Sequential([
            Conv2d("conv1", self._in_ch, 16, stride=2, dtype=d), ReLU(),
            Conv2d("conv2", 16, 32, stride=2, dtype=d), ReLU(),
            GlobalAvgPool(),
            Dense("fc", 32, 1, dtype=d),
        ])

    def _named_keys(self):
        return self.body.named()

    def init(self, rng):
        _init_layers(self.body.layers, rng)
        return self

    def logit(self, mask_nhwc):
        return self.body.forward(self._check(mask_nhwc))[:, 0]

    def backward(self, dlogit, need_dx=True):
        d = np.ascontiguousarray(np.asarray(dlogit, dtype=self.dtype)[:, None])
        return self.body.backward(d, need_dx)


class KTNet(_Net):
    """Shared encoder with K independent binary decoder heads."""

    kind = "kt"

    def __init__(self, arch, dtype=np.float32):
        super().__init__(arch, dtype)
        if arch.height % 4 or arch.width % 4:
            raise ShapeError("height and width must be divisible by 4")
        self._in_ch = arch.in_channels
        d = self.dtype
        self.encoder = Sequential([
            Conv2d("conv1", arch.in_channels, 16, dtype=d), ReLU(), MaxPool2(),
            Conv2d("conv2", 16, 32, dtype=d), ReLU(), MaxPool2(),
            Conv2d("conv3", 32, 64, dtype=d), ReLU(),
        ])
        self.heads = [
            Sequential([
                Upsample2(), Conv2d("conv4", 64, 32, dtype=d), ReLU(),
                Upsample2(), Conv2d("conv5", 32, 16, dtype=d), ReLU(),
                Conv2d("conv6", 16, 1, ksize=1, dtype=d),
            ])
            for _ in range(arch.num_classes)
        ]

    def _named_keys(self):
        yield from self.encoder.named("encoder.")
        for k, head in enumerate(self.heads, start=1):
            yield from head.named(f"head{k}.")

    def init(self, rng):
        _init_layers(self.encoder.layers, rng)
        for head in self.heads:
            _init_layers(head.layers, rng)
        return self

    def head_logits(self, x_nhwc, head):
        """Pre-sigmoid output of one head, shape (N, H, W)."""
        feats = self.encoder.forward(self._check(x_nhwc))
        return self.heads[head].forward(feats)[..., 0]

    def all_head_probs(self, x_nhwc):
        feats = self.encoder.forward(self._check(x_nhwc))
        return np.stack([sigmoid(h.forward(feats)[..., 0]) for h in self.heads], axis=-1)

    def backward(self, dlogits, head, need_dx=False):
        d = np.ascontiguousarray(np.asarray(dlogits, dtype=self.dtype)[..., None])
        dfeat = self.heads[head].backward(d, need_dx=True)
        return self.encoder.backward(dfeat, need_dx)

    def grads_for(self, head):
        """Gradients touched by a step on ``head``: the encoder plus that head."""
        out = self.encoder.grads("encoder.")
        out.update(self.heads[head].grads(f"head{head + 1}."))
        return out


def init_params(seed, arch, kind="segnet", dtype=np.float32):
    """Build a network of ``kind`` with fan-in uniform weights and zero biases."""
    cls = {"segnet": SegNet, "discriminator": Discriminator, "kt": KTNet}[kind]
    return cls(arch, dtype).init(np.random.default_rng(seed))


def to_nhwc(x):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x):
    return np.ascontiguousarray(np.asarray(x).transpose(0, 3, 1, 2))


def seg_forward(net, image):
    """Per-pixel class probabilities for a (C,H,W) or (N,C,H,W) input, channel-first."""
    single = np.ndim(image) == 3
    probs = to_nchw(softmax(net.logits(to_nhwc(image)), axis=-1))
    return probs[0] if single else probs


def disc_forward(disc, mask):
    """Critic score in (0, 1) for a (K+1,H,W) mask, or a vector for a batch."""
    single = np.ndim(mask) == 3
    score = sigmoid(disc.logit(to_nhwc(mask)))
    return float(score[0]) if single else score


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr=None):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Only the names present in ``grads`` are touched, so a KT step on one head
    leaves the other heads' moments alone. The step counter is shared.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
