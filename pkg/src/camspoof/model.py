"""
Densely connected patch classifier.

Layout: 3x3 stem conv -> ``num_blocks`` dense blocks -> relu -> global
average pool -> affine head -> softmax. Inside a block every layer is
relu -> 3x3 conv producing ``growth_rate`` maps, concatenated onto the
running state. Consecutive blocks are joined by a transition
(relu -> 1x1 conv halving the channels -> 2x2 average pool).
No batch normalisation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad

CHUNK = 256


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    num_blocks: int = 2
    layers_per_block: int = 3
    growth_rate: int = 12
    initial_channels: int = 16
    seed: int = 0
    input_size: int = 32

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.growth_rate < 1 or self.layers_per_block < 1 or self.num_blocks < 1:
            raise ValueError("growth_rate, layers_per_block and num_blocks must be >= 1")
        if self.initial_channels < 1:
            raise ValueError("initial_channels must be >= 1")
        if self.input_size % (2 ** (self.num_blocks - 1)):
            raise ValueError(f"input_size {self.input_size} cannot be pooled {self.num_blocks - 1} times")

    @property
    def conv_layers(self):
        return 1 + self.num_blocks * self.layers_per_block + (self.num_blocks - 1)

    @property
    def depth(self):
        """Weighted layers, counting the head (the paper-scale 3x12 net gives 40)."""
        return self.conv_layers + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    parameters: dict = field(default_factory=dict)

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters.values()))


def parameter_shapes(config):
    """Ordered name -> shape table implied by a config."""
    shapes = {}
    k = config.growth_rate
    ch = config.initial_channels
    shapes["stem.weight"] = (ch, 3, 3, 3)
    shapes["stem.bias"] = (ch,)
    for b in range(config.num_blocks):
        for i in range(config.layers_per_block):
            shapes[f"block{b}.layer{i}.weight"] = (k, ch, 3, 3)
            shapes[f"block{b}.layer{i}.bias"] = (k,)
            ch += k
        if b < config.num_blocks - 1:
            out = ch // 2
            shapes[f"transition{b}.weight"] = (out, ch, 1, 1)
            shapes[f"transition{b}.bias"] = (out,)
            ch = out
    shapes["head.weight"] = (ch, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def build_model(config):
    """He-initialised model; (config, config.seed) determine every parameter."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = shape[0] if name == "head.weight" else int(np.prod(shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return Model(config, params)


def logits_graph(model, x, param_grad=False):
    """Build the forward graph on an input Tensor.

    Returns ``(logits, params)`` where ``params`` maps names to the leaf
    tensors used, so callers can ask for parameter gradients.
    """
    cfg = model.config
    P = {name: ad.Tensor(arr, requires_grad=param_grad, _owned=True) for name, arr in model.parameters.items()}
    h = ad.conv2d(x, P["stem.weight"], P["stem.bias"])
    for b in range(cfg.num_blocks):
        for i in range(cfg.layers_per_block):
            y = ad.conv2d(ad.relu(h), P[f"block{b}.layer{i}.weight"], P[f"block{b}.layer{i}.bias"])
            h = ad.concat_channels(h, y)
        if b < cfg.num_blocks - 1:
            h = ad.conv2d(ad.relu(h), P[f"transition{b}.weight"], P[f"transition{b}.bias"])
            h = ad.avg_pool2d(h)
    feat = ad.global_avg_pool(ad.relu(h))
    return ad.dense(feat, P["head.weight"], P["head.bias"]), P


def _check_batch(model, batch):
    batch = np.asarray(batch)
    s = model.config.input_size
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4 or batch.shape[1:] != (3, s, s):
        raise ad.ShapeError(f"expected a batch shaped [N, 3, {s}, {s}], got {batch.shape}")
    if batch.size and (batch.min() < 0 or batch.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return batch


def forward_probs(model, batch):
    """Class probabilities for a [N,3,S,S] batch of pixels in [0,1]."""
    batch = _check_batch(model, batch)
    out = []
    for start in range(0, len(batch), CHUNK):
        logits, _ = logits_graph(model, ad.Tensor(batch[start:start + CHUNK]))
        out.append(ad.softmax(logits).data)
    if not out:
        return np.zeros((0, model.config.num_classes), dtype=np.float32)
    return np.concatenate(out)


def predict(model, batch):
    """``(labels, confidences)``: argmax (lowest index on ties) and its probability."""
    probs = forward_probs(model, batch)
    labels = probs.argmax(axis=1)
    return labels, probs[np.arange(len(probs)), labels]


def loss_and_grads(model, x, y):
    """Mean cross-entropy on a batch and its gradient for every parameter."""
    logits, P = logits_graph(model, ad.Tensor(x), param_grad=True)
    loss = ad.cross_entropy(ad.softmax(logits), y)
    grads = ad.backward(loss)
    return float(loss.data), {name: grads[t.id] for name, t in P.items()}


def evaluate(model, x, y):
    """``(mean loss, accuracy)`` without building gradients."""
    total, correct = 0.0, 0
    for start in range(0, len(x), CHUNK):
        xb, yb = x[start:start + CHUNK], y[start:start + CHUNK]
        logits, _ = logits_graph(model, ad.Tensor(xb))
        probs = ad.softmax(logits)
        total += float(ad.cross_entropy(probs, yb).data) * len(xb)
        correct += int((probs.data.argmax(axis=1) == yb).sum())
    return total / len(x), correct / len(x)


def input_gradients(model, batch, labels):
    """Per-patch gradient of the cross-entropy loss w.r.t. the input pixels."""
    batch = _check_batch(model, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(batch),):
        raise ValueError(f"{labels.shape} labels for a batch of {len(batch)}")
    out = []
    for start in range(0, len(batch), CHUNK):
        xb = ad.Tensor(batch[start:start + CHUNK], requires_grad=True)
        logits, _ = logits_graph(model, xb)
        loss = ad.cross_entropy(ad.softmax(logits), labels[start:start + CHUNK])
        (g,) = ad.grad(loss, xb)
        # the loss is a batch mean; undo the 1/N so each row is its own dJ/dx
        out.append(g * len(xb.data))
    return np.concatenate(out)


def input_gradient(model, patch, label):
    """dJ/dx for one [3,S,S] patch and the given label."""
    if not 0 <= label < model.config.num_classes:
        raise ValueError(f"label {label} outside [0, {model.config.num_classes})")
    return input_gradients(model, np.asarray(patch)[None], [label])[0]


def class_jacobians(model, batch):
    """Softmax Jacobians for a batch: [B, num_classes, 3*S*S].

    Each patch is replicated once per class and the terminal scalar is the
    sum of ``probs[copy_j, j]``, so the single reverse sweep carries one
    independent per-class backward pass in every replica.
    """
    batch = _check_batch(model, batch)
    k = model.config.num_classes
    b = len(batch)
    d = int(np.prod(batch.shape[1:]))
    jac = np.empty((b, k, d), dtype=np.float32)
    per_chunk = max(1, CHUNK // k)
    for start in range(0, b, per_chunk):
        xb = batch[start:start + per_chunk]
        rep = ad.Tensor(np.repeat(xb, k, axis=0), requires_grad=True)
        logits, _ = logits_graph(model, rep)
        probs = ad.softmax(logits)
        terminal = ad.sum_all(ad.pick(probs, np.tile(np.arange(k), len(xb))))
        (g,) = ad.grad(terminal, rep)
        jac[start:start + len(xb)] = g.reshape(len(xb), k, d)
    return jac


def class_jacobian(model, patch):
    """Row j is dC_j/dx (flattened) where C_j is the softmax output."""
    return class_jacobians(model, np.asarray(patch)[None])[0]


def target_gradients(model, batch, target):
    """``(probs, dC_t/dx, d(sum_{j!=t} C_j)/dx)`` for a batch, flattened per patch.

    Two replicas per patch instead of one per class: the first ends in the
    target probability, the second in the summed probability of the others.
    """
    batch = _check_batch(model, batch)
    k = model.config.num_classes
    b = len(batch)
    d = int(np.prod(batch.shape[1:]))
    probs_out = np.empty((b, k), dtype=np.float32)
    dt = np.empty((b, d), dtype=np.float32)
    others = np.empty((b, d), dtype=np.float32)
    weights = np.zeros((2, k), dtype=np.float32)
    weights[0, target] = 1
    weights[1] = 1 - weights[0]
    per_chunk = max(1, CHUNK // 2)
    for start in range(0, b, per_chunk):
        xb = batch[start:start + per_chunk]
        n = len(xb)
        rep = ad.Tensor(np.repeat(xb, 2, axis=0), requires_grad=True)
        logits, _ = logits_graph(model, rep)
        probs = ad.softmax(logits)
        terminal = ad.sum_all(ad.mul(probs, ad.Tensor(np.tile(weights, (n, 1)))))
        (g,) = ad.grad(terminal, rep)
        g = g.reshape(n, 2, d)
        dt[start:start + n] = g[:, 0]
        others[start:start + n] = g[:, 1]
        probs_out[start:start + n] = probs.data[::2]
    return probs_out, dt, others
