"""First-order optimizers over named DiffArray parameters."""
import math

import numpy as np


class MissingGradError(RuntimeError):
    pass


class Optimizer:
    def __init__(self, params, lr, clip_norm=None, lr_scale=None, warmup=0, decay_steps=None):
        if isinstance(params, dict):
            params = list(params.items())
        else:
            params = [(getattr(p, "name", None) or f"p{i}", p) for i, p in enumerate(params)]
        self.params = params
        self.lr = float(lr)
        self.clip_norm = clip_norm
        self.lr_scale = dict(lr_scale or {})  # per-parameter-name multiplier
        self.warmup = int(warmup)
        self.decay_steps = decay_steps
        self.t = 0

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def _grads(self):
        grads = []
        for name, p in self.params:
            if p.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient; run backward first")
            grads.append(p.grad)
        if self.clip_norm:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.clip_norm:
                grads = [g * (self.clip_norm / total) for g in grads]
        return grads

    def current_lr(self):
        """Linear warmup, then cosine decay to zero at ``decay_steps`` when set."""
        if self.warmup and self.t <= self.warmup:
            return self.lr * self.t / self.warmup
        if self.decay_steps:
            frac = min(1.0, (self.t - self.warmup) / max(1, self.decay_steps - self.warmup))
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.lr

    def step(self):
        grads = self._grads()
        self.t += 1
        lr = self.current_lr()
        for (name, p), g in zip(self.params, grads):
            self._update(p, g, lr * self.lr_scale.get(name, 1.0))

    def _update(self, p, g, lr):
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, p, g, lr):
        p.data -= lr * g


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, warmup=0, clip_norm=None, lr_scale=None,
                 decay_steps=None):
        super().__init__(params, lr, clip_norm, lr_scale, warmup, decay_steps)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {id(p): np.zeros_like(p.data) for _, p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for _, p in self.params}

    def _update(self, p, g, lr):
        m = self.m[id(p)]
        v = self.v[id(p)]
        m *= self.b1
        m += (1.0 - self.b1) * g
        v *= self.b2
        v += (1.0 - self.b2) * g * g
        mhat = m / (1.0 - self.b1 ** self.t)
        vhat = v / (1.0 - self.b2 ** self.t)
        p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name, params, lr, **kw):
    common = {k: kw.get(k) for k in ("clip_norm", "lr_scale", "decay_steps")}
    if name == "sgd":
        return SGD(params, lr, warmup=kw.get("warmup", 0), **common)
    if name == "adam":
        return Adam(params, lr, warmup=kw.get("warmup", 0), **common)
    raise ValueError(f"unknown optimizer {name!r}")
