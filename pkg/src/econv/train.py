"""Minibatch SGD training and full-resolution evaluation."""

import numpy as np

from .densify import aligned_labels, interior_mask, receptive_field
from .network import (
    GLOBAL_CE,
    PIXEL_CE,
    backward,
    forward,
    loss_forward,
    output_dims,
    sgd_step,
)
from .synthdata import image_label, mean_iou, pixel_accuracy


def targets_for(net, samples, loss_kind):
    if loss_kind == PIXEL_CE:
        return [aligned_labels(net, s.labels) for s in samples]
    if loss_kind == GLOBAL_CE:
        return [image_label(s.labels) for s in samples]
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def train(net, params, samples, epochs, lr, rng, loss_kind=PIXEL_CE,
          batch_size=8, fast=False, log=None):
    """Returns ``(params, per_epoch_losses)``; ``params`` itself is not modified.

    Each epoch visits the samples in an order drawn from ``rng``.  Gradients
    are averaged over a minibatch before each step; the epoch loss is the
    mean of the per-sample losses seen during that epoch.
    """
    net = net.with_input(samples[0].image.shape)
    targets = targets_for(net, samples, loss_kind)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            acc = None
            for i in batch:
                out, cache = forward(net, params, samples[i].image, fast=fast)
                loss, g = loss_forward(out, targets[i], loss_kind)
                grads, _ = backward(net, params, cache, g)
                total += loss
                if acc is None:
                    acc = grads
                else:
                    for key in acc:
                        acc[key] += grads[key]
            scale = 1.0 / len(batch)
            params = sgd_step(params, {k: v * scale for k, v in acc.items()}, lr)
        history.append(total / len(order))
        if log is not None:
            log(epoch + 1, history[-1])
    return params, history


def predict_map(net, params, image, fast=False):
    """Per-pixel class map: each pixel takes the prediction of the output
    position whose receptive-field centre is nearest (first on ties)."""
    net = net.with_input(image.shape)
    out, _ = forward(net, params, image, fast=fast)
    cls = out.argmax(axis=2)
    rf = receptive_field(net)
    inside = interior_mask(net)
    rows_ok = np.nonzero(inside.any(axis=1))[0]
    cols_ok = np.nonzero(inside.any(axis=0))[0]
    r_c = rf.offset[0] + rows_ok * rf.step[0] + (rf.size[0] - 1) // 2
    c_c = rf.offset[1] + cols_ok * rf.step[1] + (rf.size[1] - 1) // 2
    h, w = image.shape[:2]
    near_r = rows_ok[np.abs(np.arange(h)[:, None] - r_c[None, :]).argmin(axis=1)]
    near_c = cols_ok[np.abs(np.arange(w)[:, None] - c_c[None, :]).argmin(axis=1)]
    return cls[near_r[:, None], near_c[None, :]]


def evaluate(net, params, samples, num_classes=None, fast=False):
    """``(pixel_accuracy, mean_iou)`` pooled over the whole sample list.

    Networks ending in a (1, 1, C) output are scored per image against the
    dominant shape class instead.
    """
    net = net.with_input(samples[0].image.shape)
    if num_classes is None:
        num_classes = output_dims(net)[2]
    if output_dims(net)[:2] == (1, 1) and any(l.kind == "gap" for l in net.layers):
        pred = np.array([forward(net, params, s.image, fast=fast)[0].argmax() for s in samples])
        truth = np.array([image_label(s.labels) for s in samples])
    else:
        pred = np.stack([predict_map(net, params, s.image, fast=fast) for s in samples])
        truth = np.stack([s.labels for s in samples])
    return pixel_accuracy(pred, truth), mean_iou(pred, truth, num_classes)


def train_to_plateau(net, params, samples, lr, rng, window=5, rel_tol=0.05,
                     max_epochs=150, **kwargs):
    """Train in blocks of ``window`` epochs until the loss levels off.

    Stops once the mean loss of the latest block improves on the block
    before it by less than ``rel_tol`` (relative), or after ``max_epochs``.
    Extra keyword arguments go to :func:`train`.
    """
    history = []
    while len(history) < max_epochs:
        params, block = train(net, params, samples, min(window, max_epochs - len(history)),
                              lr, rng, **kwargs)
        history += block
        if len(history) >= 2 * window:
            before = float(np.mean(history[-2 * window : -window]))
            latest = float(np.mean(history[-window:]))
            if before - latest < rel_tol * before:
                break
    return params, history
