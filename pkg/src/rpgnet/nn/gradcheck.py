"""Central finite-difference check of ring gradients against backprop."""

from dataclasses import dataclass, field

import numpy as np

from . import functional as F


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: list = field(default_factory=list)
    kinks: int = 0

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _pattern(model):
    """Bytes identifying the active ReLU units and maxpool winners."""
    parts = []
    for layer, cache in zip(model.config.layers, model._caches):
        if layer.kind == "relu":
            parts.append(np.packbits(cache > 0).tobytes())
        elif layer.kind == "maxpool":
            parts.append(cache[1].tobytes())
    return b"".join(parts)


def grad_check(model, x, labels, tolerance=1e-4, loss_fn=F.softmax_cross_entropy,
               rel_step=1e-6, floor=None, n_worst=5, retries=2):
    """Compare analytic ring gradients with central differences of the loss.

    Every ring element ``w`` is perturbed by ``h = rel_step * max(1, |w|)``.
    Batch-norm runs in train mode without touching running statistics, so
    all evaluations see the same function.  ``floor`` bounds the relative
    error denominator from below; by default it is ``1e-6`` times the largest
    analytic gradient magnitude, which keeps round-off on near-zero
    components from dominating.

    A ring element feeds many kernel entries, so a perturbation can flip a
    ReLU or maxpool decision and the difference quotient then straddles a
    kink.  When the activation pattern at ``w +- h`` differs from the one at
    ``w`` the step is divided by 10, up to ``retries`` times; elements that
    still straddle a kink are counted in ``report.kinks``.
    """
    if model.generator is None:
        raise ValueError("grad_check needs a ring-generated model")
    if model.dtype != np.float64:
        raise ValueError("grad_check needs a 64-bit model")

    def loss_at():
        logits = model.forward(x, train=True, update_stats=False)
        return loss_fn(logits, labels)[0], _pattern(model)

    logits = model.forward(x, train=True, update_stats=False)
    base = _pattern(model)
    _, g = loss_fn(logits, labels)
    model.backward(g)
    analytic = [p.grad.copy() for p in model.ring_params]

    numeric = []
    kinks = 0
    for p in model.ring_params:
        w = p.data
        num = np.zeros_like(w)
        for k in range(w.size):
            orig = w[k]
            step = rel_step * max(1.0, abs(orig))
            for attempt in range(retries + 1):
                h = step / 10 ** attempt
                w[k] = orig + h
                plus, pat_plus = loss_at()
                w[k] = orig - h
                minus, pat_minus = loss_at()
                w[k] = orig
                smooth = pat_plus == base and pat_minus == base
                if smooth:
                    break
            kinks += not smooth
            num[k] = (plus - minus) / (2 * h)
        numeric.append(num)

    a = np.concatenate(analytic)
    n = np.concatenate(numeric)
    if floor is None:
        floor = max(1e-6 * float(np.abs(a).max()), 1e-300)
    err = relative_error(a, n, floor)
    order = np.argsort(-err, kind="stable")[:n_worst]
    worst = [(int(i), float(a[i]), float(n[i]), float(err[i])) for i in order]
    return GradCheckReport(float(err.max()) if err.size else 0.0, tolerance,
                           int(a.size), worst, kinks)
