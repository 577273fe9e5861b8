"""
Adversarial image generator.

Untargeted mode: one fast-gradient-sign step using the labels the detector
itself assigns to the clean patches. Targeted mode: Jacobian saliency map
iterations that push pixel pairs toward a chosen camera model.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import write_png8
from .model import forward_probs, input_gradients, predict, target_gradients


class SearchExhausted(Exception):
    """Fewer than two features are left to perturb."""


@dataclass(frozen=True)
class FgsmConfig:
    epsilon: float
    label_mode: str = "predicted"

    def __post_init__(self):
        if not 0 < self.epsilon <= 0.1:
            raise ValueError("epsilon must lie in (0, 0.1]")
        if self.label_mode not in ("predicted", "true"):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")


@dataclass(frozen=True)
class JsmaConfig:
    target_class: int
    theta: float = 1.0
    gamma: float = 0.10
    max_iterations: int | None = None
    num_features: int = 3 * 32 * 32

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("only positive theta (pixel increase) is supported")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        cap = self.budget // 2
        if self.max_iterations is None:
            object.__setattr__(self, "max_iterations", cap)
        elif not 0 <= self.max_iterations <= cap:
            raise ValueError(f"max_iterations must lie in [0, {cap}] for gamma={self.gamma}")

    @property
    def budget(self):
        """Largest number of features the attack may modify."""
        return int(np.floor(self.gamma * self.num_features))


@dataclass
class AttackOutcome:
    kind: str
    original: np.ndarray
    adversarial: np.ndarray
    label_before: int
    label_after: int
    confidence_after: float
    target: int | None = None
    iterations: int = 0
    pixels_modified: int = 0
    success: bool = False
    params: dict = field(default_factory=dict)

    def log_row(self, image_id=None, patch_index=None, true_label=None):
        return {
            "image_id": image_id,
            "patch_index": patch_index,
            "attack": self.kind,
            "params": self.params,
            "true_label": true_label,
            "label_before": self.label_before,
            "label_after": self.label_after,
            "target": self.target,
            "confidence": round(self.confidence_after, 8),
            "iterations": self.iterations,
            "pixels_modified": self.pixels_modified,
            "linf": round(float(np.abs(self.adversarial.astype(np.float64) - self.original).max()), 8),
            "success": self.success,
        }


# --------------------------------------------------------------------------
# FGSM


def _clip_linf(adv, x, epsilon):
    """Clamp to [0,1] and nudge float32 rounding so |adv - x| <= epsilon holds exactly."""
    adv = np.clip(adv, 0.0, 1.0).astype(x.dtype)
    x64 = x.astype(np.float64)
    over = np.abs(adv.astype(np.float64) - x64) > epsilon
    while over.any():
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv.astype(np.float64) - x64) > epsilon
    return adv


def fgsm_perturb(model, patch, label, epsilon):
    """x* = clamp(x + epsilon * sign(dJ/dx)) for a single patch or a batch."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(patch, dtype=np.float32)
    single = x.ndim == 3
    xb = x[None] if single else x
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    g = input_gradients(model, xb, labels)
    adv = _clip_linf(xb + np.float32(epsilon) * np.sign(g).astype(np.float32), xb, epsilon)
    return adv[0] if single else adv


def fgsm_attack_set(model, patches, epsilon, labels=None):
    """Untargeted attack on a batch of clean patches.

    Without ``labels`` the gradient is taken w.r.t. the detector's own clean
    prediction, so no ground truth is needed. Passing ``labels`` switches to
    true-label mode.
    """
    x = np.asarray(patches, dtype=np.float32)
    if len(x) == 0:
        return []
    cfg = FgsmConfig(epsilon, "predicted" if labels is None else "true")
    before, _ = predict(model, x)
    y = before if labels is None else np.asarray(labels, dtype=np.int64)
    adv = fgsm_perturb(model, x, y, epsilon)
    after, conf = predict(model, adv)
    params = {"epsilon": epsilon, "label_mode": cfg.label_mode}
    return [
        AttackOutcome(
            "fgsm", x[i], adv[i], int(before[i]), int(after[i]), float(conf[i]),
            success=bool(after[i] != before[i]), params=params,
        )
        for i in range(len(x))
    ]


# --------------------------------------------------------------------------
# JSMA


def saliency_scores(dt, others, domain=None):
    """Per-feature saliency from the target derivative and the others' summed derivative.

    A feature scores dt * |others| when dt >= 0 and others <= 0, else 0.
    Features outside ``domain`` (boolean mask) score -inf.
    """
    dt = np.asarray(dt)
    others = np.asarray(others)
    scores = np.where((dt < 0) | (others > 0), 0.0, dt * np.abs(others))
    if domain is not None:
        domain = np.asarray(domain, dtype=bool)
        if not domain.any():
            raise SearchExhausted("empty search domain")
        scores = np.where(domain, scores, -np.inf)
    return scores


def jsma_saliency(jacobian, target, domain=None):
    """Saliency toward ``target`` from a full [classes, features] Jacobian."""
    jac = np.asarray(jacobian)
    if not 0 <= target < jac.shape[0]:
        raise ValueError(f"target {target} outside [0, {jac.shape[0]})")
    others = np.delete(jac, target, axis=0).sum(axis=0)
    return saliency_scores(jac[target], others, domain)


def jsma_select_pair(scores):
    """Admissible pair (i < j) maximising scores[i] + scores[j], lexicographically first on ties."""
    s = np.asarray(scores, dtype=np.float64)
    admissible = np.flatnonzero(np.isfinite(s))
    if admissible.size < 2:
        raise SearchExhausted("fewer than two admissible features")
    vals = s[admissible]
    top = np.argsort(-vals, kind="stable")[:2]
    best = vals[top[0]] + vals[top[1]]
    # float sums can tie even when the values differ; every element of a tying pair
    # is at least best - max, up to rounding of that difference, so scan only those
    floor = best - vals[top[0]] - 4 * np.spacing(abs(best))
    cand = admissible[vals >= floor]
    cs = s[cand]
    for a in range(cand.size - 1):
        hits = np.flatnonzero(cs[a] + cs[a + 1:] == best)
        if hits.size:
            return int(cand[a]), int(cand[a + 1 + hits[0]])
    raise AssertionError("unreachable: the top pair always attains the maximum")


@dataclass
class JsmaTrace:
    adversarial: np.ndarray
    label_before: np.ndarray
    label_after: np.ndarray
    confidence_after: np.ndarray
    iterations: np.ndarray
    modified: np.ndarray
    pairs: list


def jsma_run(gradients, x0, config):
    """Saliency-map iterations on flattened inputs ``x0`` [n, D].

    ``gradients(x)`` returns ``(probs, dC_t/dx, d(sum_{j!=t} C_j)/dx)`` for a
    batch. Iterations run in lock-step over the still-active rows only to
    share matrix products; every row follows the trajectory a single-row run
    would follow.
    """
    t = config.target_class
    adv = np.array(x0, dtype=np.float32)
    n, d = adv.shape
    # a feature already at the upper bound cannot move in the theta direction
    domain = adv < 1.0
    modified = np.zeros((n, d), dtype=bool)
    iterations = np.zeros(n, dtype=np.int64)
    pairs = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    before = None

    while not done.all():
        active = np.flatnonzero(~done)
        probs, dt, others = gradients(adv[active])
        labels = probs.argmax(axis=1)
        if before is None:
            before = labels
        for row, i in enumerate(active):
            if labels[row] == t or iterations[i] >= config.max_iterations or modified[i].sum() + 2 > config.budget:
                done[i] = True
                continue
            try:
                a, b = jsma_select_pair(saliency_scores(dt[row], others[row], domain[i]))
            except SearchExhausted:
                done[i] = True
                continue
            for f in (a, b):
                adv[i, f] = min(1.0, max(0.0, adv[i, f] + config.theta))
                modified[i, f] = True
                if adv[i, f] <= 0.0 or adv[i, f] >= 1.0:
                    domain[i, f] = False
            pairs[i].append((a, b))
            iterations[i] += 1

    probs, _, _ = gradients(adv)
    after = probs.argmax(axis=1)
    conf = probs[np.arange(n), after]
    return JsmaTrace(adv, before, after, conf, iterations, modified, pairs)


def jsma_attack_batch(model, patches, config):
    """Run the saliency attack on every patch of a batch; each patch is independent."""
    x0 = np.asarray(patches, dtype=np.float32)
    n = len(x0)
    if n == 0:
        return []
    t = config.target_class
    k = model.config.num_classes
    if not 0 <= t < k:
        raise ValueError(f"target {t} outside [0, {k})")
    shape = x0.shape[1:]
    d = int(np.prod(shape))
    if d != config.num_features:
        config = JsmaConfig(t, config.theta, config.gamma, None, d)

    def gradients(x):
        return target_gradients(model, x.reshape(-1, *shape), t)

    run = jsma_run(gradients, x0.reshape(n, d), config)
    final = run.adversarial.reshape(n, *shape)
    after, conf = predict(model, final)
    params = {"target": t, "theta": config.theta, "gamma": config.gamma, "max_iterations": config.max_iterations}
    return [
        AttackOutcome(
            "jsma", x0[i], final[i], int(run.label_before[i]), int(after[i]), float(conf[i]),
            target=t, iterations=int(run.iterations[i]), pixels_modified=int(run.modified[i].sum()),
            success=bool(after[i] == t), params=params,
        )
        for i in range(n)
    ]


def jsma_attack(model, patch, config):
    """Targeted saliency attack on one patch."""
    return jsma_attack_batch(model, np.asarray(patch)[None], config)[0]


# --------------------------------------------------------------------------
# sign image export


def sign_image(gradient):
    """uint8 image: negative gradient -> 0, zero or positive -> 255."""
    g = np.asarray(gradient)
    return np.where(g < 0, 0, 255).astype(np.uint8)


def export_sign_image(gradient, path):
    img = sign_image(gradient)
    write_png8(img, path)
    return img


def to_u8(patch):
    return np.round(np.clip(np.asarray(patch, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def requantize_u8(patch):
    """Round-trip a float patch through 8-bit storage."""
    return (to_u8(patch).astype(np.float32) / 255.0).astype(np.float32)


def export_triptych(model, patch, label, epsilon, path, gap=4):
    """Clean patch | sign of the loss gradient | adversarial patch, side by side."""
    from .model import input_gradient

    g = input_gradient(model, patch, label)
    adv = fgsm_perturb(model, patch, label, epsilon)
    h = patch.shape[1]
    spacer = np.full((3, h, gap), 255, dtype=np.uint8)
    strip = np.concatenate([to_u8(patch), spacer, sign_image(g), spacer, to_u8(adv)], axis=2)
    write_png8(strip, path)
    return strip


def verify_targets(model, outcomes):
    """Recompute argmax on every recorded success; returns the number that disagree."""
    hits = [o for o in outcomes if o.success]
    if not hits:
        return 0
    probs = forward_probs(model, np.stack([o.adversarial for o in hits]))
    labels = probs.argmax(axis=1)
    return int(sum(int(lbl) != o.target for lbl, o in zip(labels, hits)))
