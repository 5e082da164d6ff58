"""Central finite-difference checks for every differentiable operator and graph.

Each check builds a small random double-precision problem with a scalar
objective and returns ``(analytic, numeric)`` gradient pairs for a sample of
coordinates. The error of a pair is ``max|a - n| / max|a_full|``: the worst
deviation relative to the largest analytic gradient entry in that tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vluu import nn

STEP = 1e-5
TOLERANCE = 1e-4
SAMPLES_PER_TENSOR = 12
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def _pick(shape, rng, n=SAMPLES_PER_TENSOR):
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= n else rng.choice(size, n, replace=False)
    return [np.unravel_index(i, shape) for i in np.sort(flat)]


def _numeric(f, arr, idx):
    old = arr[idx]
    arr[idx] = old + STEP
    fp = f()
    arr[idx] = old - STEP
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * STEP)


def _pairs(f, tensors, grads, rng):
    """Sampled (analytic, numeric, full-analytic) triples for each tensor."""
    out = []
    for arr, g in zip(tensors, grads):
        idxs = _pick(arr.shape, rng)
        a = np.array([g[i] for i in idxs])
        num = np.array([_numeric(f, arr, i) for i in idxs])
        out.append((a, num, g))
    return out


def _size(rng):
    return int(rng.choice([4, 6, 8])), int(rng.choice([4, 6, 8]))


# ---------------------------------------------------------------------------
# single operators


def _layer_check(layer, x, rng):
    """Objective sum(R * layer(x)); gradients for x and every layer parameter."""
    r = rng.standard_normal(layer.forward(x).shape)
    layer._cache = None

    def f():
        y = layer.forward(x)
        layer._cache = None
        return float((r * y).sum())

    layer.forward(x)
    dx = layer.backward(r, need_dx=True)
    tensors = [x] + list(layer.params.values())
    grads = [dx] + [layer.grads[k] for k in layer.params]
    return _pairs(f, tensors, grads, rng)


def _init(layer, rng):
    for v in layer.params.values():
        v[...] = rng.standard_normal(v.shape) * 0.5
    return layer


def check_conv3x3(rng):
    h, w = _size(rng)
    layer = _init(nn.Conv2d("c", 3, 4, dtype=F64), rng)
    return _layer_check(layer, rng.standard_normal((2, h, w, 3)), rng)


def check_conv3x3_stride2(rng):
    h, w = _size(rng)
    layer = _init(nn.Conv2d("c", 3, 4, stride=2, dtype=F64), rng)
    return _layer_check(layer, rng.standard_normal((2, h, w, 3)), rng)


def check_conv1x1(rng):
    h, w = _size(rng)
    layer = _init(nn.Conv2d("c", 5, 4, ksize=1, dtype=F64), rng)
    return _layer_check(layer, rng.standard_normal((2, h, w, 5)), rng)


def check_relu(rng):
    h, w = _size(rng)
    x = rng.standard_normal((2, h, w, 3))
    x[np.abs(x) < 1e-3] = 0.5  # stay off the kink
    return _layer_check(nn.ReLU(), x, rng)


def check_maxpool2(rng):
    h, w = _size(rng)
    # a permutation keeps window entries well separated
    x = rng.permutation(2 * h * w * 3).reshape(2, h, w, 3) * 0.01
    return _layer_check(nn.MaxPool2(), x.astype(F64), rng)


def check_upsample2(rng):
    h, w = _size(rng)
    return _layer_check(nn.Upsample2(), rng.standard_normal((2, h // 2, w // 2, 3)), rng)


def check_global_avg_pool(rng):
    h, w = _size(rng)
    return _layer_check(nn.GlobalAvgPool(), rng.standard_normal((2, h, w, 3)), rng)


def check_dense(rng):
    layer = _init(nn.Dense("fc", 6, 3, dtype=F64), rng)
    return _layer_check(layer, rng.standard_normal((4, 6)), rng)


def check_softmax(rng):
    h, w = _size(rng)
    z = rng.standard_normal((2, h, w, 4)) * 2
    r = rng.standard_normal(z.shape)

    def f():
        return float((r * nn.softmax(z)).sum())

    g = nn.softmax_backward(nn.softmax(z), r)
    return _pairs(f, [z], [g], rng)


def check_sigmoid(rng):
    z = rng.standard_normal((3, 5)) * 3
    r = rng.standard_normal(z.shape)

    def f():
        return float((r * nn.sigmoid(z)).sum())

    s = nn.sigmoid(z)
    return _pairs(f, [z], [r * s * (1 - s)], rng)


def check_soft_cross_entropy(rng):
    h, w = _size(rng)
    p = rng.uniform(0.05, 1.0, (2, 4, h, w))
    t = rng.uniform(0.0, 1.0, (2, 4, h, w))
    t /= t.sum(axis=1, keepdims=True)

    def f():
        return nn.soft_cross_entropy(p, t)

    return _pairs(f, [p], [nn.soft_cross_entropy_grad(p, t)], rng)


def check_binary_cross_entropy(rng):
    s = rng.uniform(0.05, 0.95, 6)
    y = (rng.random(6) < 0.5).astype(F64)

    def f():
        return float(nn.binary_cross_entropy(s, y).sum())

    return _pairs(f, [s], [nn.binary_cross_entropy_grad(s, y)], rng)


def check_masked_cross_entropy(rng):
    """Cross-entropy over a per-image channel subset, the IMBP objective."""
    from vluu.train import masked_ce_and_grad

    h, w = _size(rng)
    z = rng.standard_normal((3, h, w, 4))
    allowed = np.zeros((3, 1, 1, 4), dtype=bool)
    allowed[:, 0, 0, 0] = True
    for n, k in enumerate((1, 2, 3)):
        allowed[n, 0, 0, k] = True
    lab = (rng.random((3, h, w)) < 0.5) * np.array([1, 2, 3])[:, None, None]
    t = np.zeros_like(z)
    np.put_along_axis(t, lab[..., None], 1.0, axis=-1)

    def f():
        return masked_ce_and_grad(z, t, allowed)[0]

    return _pairs(f, [z], [masked_ce_and_grad(z, t, allowed)[1]], rng)


# ---------------------------------------------------------------------------
# full graphs


def _small_arch(rng):
    h = int(rng.choice([4, 8]))
    w = int(rng.choice([4, 8]))
    return nn.ArchConfig(in_channels=3, num_classes=3, height=h, width=w)


def _random_target(rng, shape):
    t = rng.uniform(0, 1, shape)
    return t / t.sum(axis=-1, keepdims=True)


def check_segnet_graph(rng):
    """Soft cross-entropy of the segmenter against a random soft target."""
    arch = _small_arch(rng)
    net = nn.SegNet(arch, dtype=F64).init(rng)
    x = rng.standard_normal((2, arch.height, arch.width, 3))
    t = _random_target(rng, (2, arch.height, arch.width, 4))

    def f():
        return nn.soft_cross_entropy(nn.softmax(net.logits(x)), t, axis=-1)

    p = nn.softmax(net.logits(x))
    dx = net.backward(nn.softmax_backward(p, nn.soft_cross_entropy_grad(p, t, axis=-1)),
                      need_dx=True)
    params = net.params
    grads = net.grads
    names = list(params)
    return _pairs(f, [x] + [params[k] for k in names], [dx] + [grads[k] for k in names], rng)


def check_adversarial_seg_graph(rng, lam=0.5):
    """Segmenter objective with the critic term, critic frozen."""
    from vluu.adversarial import seg_objective

    arch = _small_arch(rng)
    net = nn.SegNet(arch, dtype=F64).init(rng)
    disc = nn.Discriminator(arch, dtype=F64).init(rng)
    x = rng.standard_normal((2, arch.height, arch.width, 3))
    t = _random_target(rng, (2, arch.height, arch.width, 4))

    def f():
        return seg_objective(net, disc, x, t, lam, backward=False)[0]

    seg_objective(net, disc, x, t, lam, backward=True)
    params, grads = net.params, net.grads
    names = list(params)
    return _pairs(f, [params[k] for k in names], [grads[k] for k in names], rng)


def check_discriminator_graph(rng):
    """Critic objective -log g(real) - log(1 - g(fake)) over its own parameters."""
    from vluu.adversarial import disc_objective

    arch = _small_arch(rng)
    disc = nn.Discriminator(arch, dtype=F64).init(rng)
    real = _random_target(rng, (2, arch.height, arch.width, 4))
    fake = _random_target(rng, (2, arch.height, arch.width, 4))

    def f():
        return disc_objective(disc, real, fake, backward=False)[0]

    disc_objective(disc, real, fake, backward=True)
    params, grads = disc.params, disc.grads
    names = list(params)
    return _pairs(f, [params[k] for k in names], [grads[k] for k in names], rng)


def check_kt_head_graph(rng):
    """Pixel-wise binary cross-entropy of one KT head, encoder shared."""
    from vluu.train import kt_loss_and_grad

    arch = _small_arch(rng)
    net = nn.KTNet(arch, dtype=F64).init(rng)
    x = rng.standard_normal((2, arch.height, arch.width, 3))
    y = (rng.random((2, arch.height, arch.width)) < 0.4).astype(F64)
    head = 1

    def f():
        return kt_loss_and_grad(net.head_logits(x, head), y)[0]

    _, d = kt_loss_and_grad(net.head_logits(x, head), y)
    net.backward(d, head)
    grads = net.grads_for(head)
    params = net.params
    names = list(grads)
    return _pairs(f, [params[k] for k in names], [grads[k] for k in names], rng)


CHECKS = {
    "conv3x3": check_conv3x3,
    "conv3x3_stride2": check_conv3x3_stride2,
    "conv1x1": check_conv1x1,
    "relu": check_relu,
    "maxpool2": check_maxpool2,
    "upsample2": check_upsample2,
    "global_avg_pool": check_global_avg_pool,
    "dense": check_dense,
    "softmax": check_softmax,
    "sigmoid": check_sigmoid,
    "soft_cross_entropy": check_soft_cross_entropy,
    "binary_cross_entropy": check_binary_cross_entropy,
    "masked_cross_entropy": check_masked_cross_entropy,
    "segnet_graph": check_segnet_graph,
    "adversarial_seg_graph": check_adversarial_seg_graph,
    "discriminator_graph": check_discriminator_graph,
    "kt_head_graph": check_kt_head_graph,
}


def rel_error(pairs):
    worst = 0.0
    for a, num, full in pairs:
        scale = float(np.max(np.abs(full))) if full.size else 0.0
        err = float(np.max(np.abs(a - num))) if a.size else 0.0
        worst = max(worst, err / scale if scale > 0 else err)
    return worst


def run_gradcheck(names=None, seed=0, tolerance=TOLERANCE, tamper=None):
    """Run the named checks (all by default); ``tamper(name, pairs)`` injects faults."""
    results = []
    for i, name in enumerate(names or CHECKS):
        rng = np.random.default_rng([seed, i])
        pairs = CHECKS[name](rng)
        if tamper is not None:
            pairs = tamper(name, pairs)
        err = rel_error(pairs)
        results.append(CheckResult(name, err, err < tolerance))
    return results


def format_report(results):
    lines = [f"{'operator':<24}{'max rel err':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<24}{r.max_rel_error:>14.3e}  {'ok' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} passed")
    return "\n".join(lines)
