"""Mini-batch Adam training with per-epoch snapshots and best-validation selection."""
import logging

import numpy as np

from .model import Model, evaluate, loss_and_grads
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


def train(model, train_set, val_set, epochs=10, batch_size=64, lr=1e-4, seed=0, on_epoch=None):
    """Train on ``(pixels, labels)`` arrays.

    Returns ``(best_model, history)``; ``best_model`` is the epoch snapshot
    with the smallest validation loss and ``history`` holds one dict per epoch.
    The input model is not modified.
    """
    x, y = train_set
    xv, yv = val_set
    if len(x) == 0 or len(xv) == 0:
        raise ValueError("training and validation sets must be non-empty")
    k = model.config.num_classes
    if max(y.max(), yv.max()) >= k or min(y.min(), yv.min()) < 0:
        raise ValueError(f"labels must lie in [0, {k})")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")

    rng = np.random.default_rng(seed)
    params = dict(model.parameters)
    state = AdamState(lr=lr)
    history = []
    best, best_loss = None, np.inf
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            current = Model(model.config, params)
            loss, grads = loss_and_grads(current, x[idx], y[idx])
            params, state = adam_step(params, grads, state)
            losses.append(loss * len(idx))
        snapshot = Model(model.config, params)
        train_loss = float(np.sum(losses) / len(x))
        val_loss, val_acc = evaluate(snapshot, xv, yv)
        row = {"epoch": epoch, "loss": train_loss, "val_loss": val_loss, "val_accuracy": val_acc}
        history.append(row)
        log.info("epoch %d loss %.4f val_loss %.4f val_acc %.4f", epoch, train_loss, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(row)
        if val_loss < best_loss:
            best, best_loss = snapshot, val_loss
    return best, history
