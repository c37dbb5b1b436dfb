"""AdamW optimizer and learning-rate schedules for the two retraining stages."""

import math

from . import kernels
from .errors import ParameterError, StateError


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter collection.

    Moment buffers are float32 and flat, one pair per parameter, iterated in
    insertion order so updates are reproducible. `step` consumes gradients and
    zeroes them in place afterward; a parameter without an allocated gradient
    buffer is a state error (the training loop allocates buffers up front so
    parameters untouched by a sparse batch legitimately carry zero gradient).
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise ParameterError("learning rate must be > 0, got %r" % lr)
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ParameterError("betas must lie in [0, 1), got %r" % (betas,))
        if isinstance(params, dict):
            items = list(params.items())
        else:
            items = [(p.name or ("param%d" % i), p) for i, p in enumerate(params)]
        self.params = items
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {}
        self._v = {}
        import numpy as np

        for name, p in items:
            self._m[name] = np.zeros(p.size, dtype=np.float32)
            self._v[name] = np.zeros(p.size, dtype=np.float32)
            p.ensure_grad()

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        """One update over all parameters; gradients are zeroed afterward."""
        use_lr = self.lr if lr is None else float(lr)
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            if p.grad is None:
                raise StateError("parameter %r has no gradient buffer" % name)
            kernels.adamw_update(
                p.data.reshape(-1),
                p.grad.reshape(-1),
                self._m[name],
                self._v[name],
                use_lr,
                self.beta1,
                self.beta2,
                self.eps,
                self.weight_decay,
                c1,
                c2,
            )
            p.grad.fill(0.0)


def constant_lr(base_lr):
    """Schedule used by router (dense-gate) training: flat learning rate."""
    base = float(base_lr)

    def lr_at(step):
        return base

    return lr_at


def cosine_warmup_lr(base_lr, final_lr, total_steps, warmup_ratio=0.03):
    """Linear warmup then cosine decay from base_lr to final_lr.

    `step` is 1-based. The warmup span is round(total_steps * warmup_ratio),
    at least 1 step; the cosine covers the remainder and lands exactly on
    final_lr at total_steps.
    """
    if total_steps < 1:
        raise ParameterError("total_steps must be >= 1, got %r" % total_steps)
    if not 0.0 <= warmup_ratio < 1.0:
        raise ParameterError("warmup_ratio must be in [0, 1), got %r" % warmup_ratio)
    base = float(base_lr)
    final = float(final_lr)
    warmup = max(1, int(round(total_steps * warmup_ratio)))

    def lr_at(step):
        if step <= warmup:
            return base * step / warmup
        span = max(1, total_steps - warmup)
        prog = min(1.0, (step - warmup) / span)
        return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * prog))

    return lr_at
