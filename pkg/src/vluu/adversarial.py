"""VLUU with a mask critic, trained by alternating updates.

Per iteration, on one vicinal batch:

1. segmenter step, critic frozen: minimize
   ``CE(f(x), y) - lam * mean log g(f(x))``
2. critic step, segmenter frozen: minimize
   ``mean[-log g(y) - log(1 - g(f(x)))]``, where ``f(x)`` is the prediction
   from step 1 (before the segmenter update).

The critic sees masks only, never the image.
"""

from __future__ import annotations

import numpy as np

from vluu import nn
from vluu.data import check_ordered
from vluu.train import (
    DATA_STREAM, DISC_STREAM, HELDOUT_STREAM, INIT_STREAM,
    TrainResult, _check_finite, _run, architecture, ce_and_grad, stream, vicinal_arrays,
)
from vluu.vicinal import make_vicinal_batch


def _scores(disc, masks):
    # float64 sigmoid so confident critics still report values strictly inside (0, 1)
    return nn.sigmoid(disc.logit(masks).astype(np.float64))


def seg_objective(net, disc, x, target, lam, backward=True):
    """Segmenter loss with the adversarial term; fills ``net`` grads when ``backward``.

    Returns ``(loss, probs)``. The critic's parameters are not updated; its
    grads are scratch.
    """
    logits = net.logits(x)
    loss, _, p = ce_and_grad(logits, target)
    dp = nn.soft_cross_entropy_grad(p, target, axis=-1)
    if lam:
        g = _scores(disc, p)
        n = len(g)
        loss += lam * float(nn.binary_cross_entropy(g, 1.0).mean())
        if backward:
            dg = nn.binary_cross_entropy_grad(g, 1.0) * g * (1 - g) * (lam / n)
            dp = dp + disc.backward(dg, need_dx=True)
    if backward:
        net.backward(nn.softmax_backward(p, dp))
    return loss, p


def disc_objective(disc, real, fake, backward=True):
    """Critic loss averaged over (real, fake) pairs; returns ``(loss, scores)``."""
    n = len(real)
    batch = np.concatenate([real, fake]).astype(disc.dtype, copy=False)
    g = _scores(disc, batch)
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    loss = float(nn.binary_cross_entropy(g, labels).sum() / n)
    if backward:
        dg = nn.binary_cross_entropy_grad(g, labels) * g * (1 - g) / n
        disc.backward(dg, need_dx=False)
    return loss, g


def train_vluu_adv(datasets, config, on_checkpoint=None):
    """VLUU-ADV; with ``lam == 0`` the segmenter trajectory equals plain VLUU."""
    check_ordered(datasets)
    arch = architecture(datasets)
    net = nn.SegNet(arch).init(stream(config.seed, INIT_STREAM))
    disc = nn.Discriminator(arch).init(stream(config.seed, DISC_STREAM))
    seg_opt = nn.AdamState(lr=config.learning_rate)
    disc_opt = nn.AdamState(lr=config.disc_lr)
    rng = stream(config.seed, DATA_STREAM)
    hx, ht = vicinal_arrays(make_vicinal_batch(
        datasets, config.batch_size, config.alpha, config.epsilon,
        stream(config.seed, HELDOUT_STREAM)))
    disc_losses = []
    score_range = [1.0, 0.0]

    def step_fn(step):
        x, t = vicinal_arrays(make_vicinal_batch(
            datasets, config.batch_size, config.alpha, config.epsilon, rng))
        loss, p = seg_objective(net, disc, x, t, config.lam)
        _check_finite(loss, config.strategy, step, "segmenter")
        nn.adam_step(net.params, net.grads, seg_opt)
        dloss, g = disc_objective(disc, t, p)
        _check_finite(dloss, config.strategy, step, "discriminator")
        nn.adam_step(disc.params, disc.grads, disc_opt)
        disc_losses.append(dloss)
        score_range[0] = min(score_range[0], float(g.min()))
        score_range[1] = max(score_range[1], float(g.max()))
        return loss

    def heldout():
        return ce_and_grad(net.logits(hx), ht)[0]

    history = _run(config, net, step_fn, heldout, on_checkpoint)
    history.disc_losses = disc_losses
    history.disc_score_range = score_range
    return TrainResult(net, history, disc)
