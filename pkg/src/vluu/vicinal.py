"""Vicinal examples: Dirichlet weights, fused soft labels, concatenated inputs.

A vicinal example is built from one partially labeled sample per class. The
images are stacked channel-wise in class order; the labels are mixed with
Dirichlet weights into a soft label whose background channel is the residual
mass, so every pixel keeps some background probability once any class is
present.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vluu.data import check_ordered, sample_tuple

DEFAULT_EPSILON = 1e-3


def _log_gamma_variates(alpha, n, rng):
    """log of ``n`` Gamma(alpha, 1) draws (Marsaglia-Tsang, boosted for alpha < 1).

    The boost ``G(a) = G(a + 1) * U**(1/a)`` is applied in log space so tiny
    variates at small alpha keep their relative size instead of underflowing.
    """
    a = alpha + 1.0 if alpha < 1.0 else alpha
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        m = todo.size
        x = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * x) ** 3
        pos = v > 0
        logv = np.log(np.where(pos, v, 1.0))
        with np.errstate(divide="ignore"):
            logu = np.log(u)
        accept = pos & ((u < 1.0 - 0.0331 * x ** 4)
                        | (logu < 0.5 * x * x + d * (1.0 - v + logv)))
        out[todo[accept]] = np.log(d) + logv[accept]
        todo = todo[~accept]
    if alpha < 1.0:
        u = rng.random(n)
        while (u == 0).any():  # log(0) would poison the draw
            zero = u == 0
            u[zero] = rng.random(int(zero.sum()))
        out += np.log(u) / alpha
    return out


def sample_dirichlet_many(alpha, k, size, rng):
    """``size`` symmetric Dirichlet(alpha) draws over ``k`` components, shape (size, k)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if k < 1:
        raise ValueError(f"need at least one component, got k={k}")
    if np.isinf(alpha):
        return np.full((size, k), 1.0 / k)
    out = np.empty((size, k))
    todo = np.arange(size)
    while todo.size:
        logg = _log_gamma_variates(alpha, todo.size * k, rng).reshape(todo.size, k)
        logg -= logg.max(axis=1, keepdims=True)
        g = np.exp(logg)
        w = g / g.sum(axis=1, keepdims=True)
        ok = (w > 0).all(axis=1)  # resample draws with an underflowed component
        out[todo[ok]] = w[ok]
        todo = todo[~ok]
    return out


def sample_dirichlet(alpha, k, rng):
    """One weight vector ``w`` with ``w_i > 0`` and ``sum(w) == 1``."""
    return sample_dirichlet_many(alpha, k, 1, rng)[0]


def fuse_labels(labels, weights, epsilon=DEFAULT_EPSILON):
    """Mix K single-class masks into a (K+1, H, W) soft label.

    Class ``k`` gets ``w_k m_k / (sum_j w_j m_j + epsilon)``; channel 0 takes
    whatever mass is left.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    k = len(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ValueError(f"expected {k} weights, got shape {weights.shape}")
    for i, lab in enumerate(labels, start=1):
        if lab.class_index != i:
            raise ValueError(f"labels must be in class order 1..K, position {i} has "
                             f"class {lab.class_index}")
    shapes = {lab.mask.shape for lab in labels}
    if len(shapes) != 1:
        raise ValueError(f"mask shapes differ: {sorted(shapes)}")
    masks = np.stack([lab.mask for lab in labels]).astype(np.float64)
    num = weights[:, None, None] * masks
    fg = num / (num.sum(axis=0) + epsilon)
    bg = 1.0 - fg.sum(axis=0)
    return np.concatenate([bg[None], fg], axis=0)


def concat_images(images):
    """Stack K (C, H, W) images into one (K*C, H, W) tensor, blocks in tuple order."""
    images = [np.asarray(im) for im in images]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"image shapes differ: {sorted(shapes)}")
    return np.concatenate(images, axis=0)


def inference_input(image, k):
    """Repeat a single image into all K channel blocks."""
    return np.concatenate([np.asarray(image)] * k, axis=0)


@dataclass
class VicinalExample:
    input: np.ndarray   # (K*C, H, W)
    target: np.ndarray  # (K+1, H, W)


def make_vicinal_example(datasets, alpha, epsilon, rng):
    pairs = sample_tuple(datasets, rng)
    w = sample_dirichlet(alpha, len(datasets), rng)
    return VicinalExample(concat_images([im for im, _ in pairs]),
                          fuse_labels([lab for _, lab in pairs], w, epsilon))


def make_vicinal_batch(datasets, batch_size, alpha, epsilon=DEFAULT_EPSILON, rng=None):
    """``batch_size`` examples, each with its own sample tuple and its own weights."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    check_ordered(datasets)
    rng = np.random.default_rng() if rng is None else rng
    return [make_vicinal_example(datasets, alpha, epsilon, rng) for _ in range(batch_size)]
