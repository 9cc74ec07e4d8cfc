"""AdamW and RMSprop with per-step learning-rate decay."""

from __future__ import annotations

import numpy as np

from .autodiff import Var

__all__ = ["AdamW", "RMSprop", "OptimizerError"]


class OptimizerError(FloatingPointError):
    pass


def _check(grads, params):
    if len(grads) != len(params):
        raise OptimizerError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise OptimizerError(f"gradient shape {g.shape} != parameter shape {p.value.shape} ({p.name})")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {p.name!r}")


class AdamW:
    """Adam with decoupled weight decay (applied as ``p -= lr * wd * p``)."""

    kind = "AdamW"

    def __init__(self, params: list[Var], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads) -> None:
        _check(grads, self.params)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p.value = p.value * (1.0 - self.lr * self.weight_decay)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(self.step_count), "lr": np.array(self.lr)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"], out[f"v{i}"] = m.copy(), v.copy()
        return out

    def load_state(self, state) -> None:
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        self.m = [np.array(state[f"m{i}"]) for i in range(len(self.params))]
        self.v = [np.array(state[f"v{i}"]) for i in range(len(self.params))]


class RMSprop:
    """RMSprop; the learning rate is multiplied by ``decay`` after every step.

    With ``warmup = n > 0`` it also ramps linearly over the first ``n`` steps,
    which tempers the large early steps taken while the squared-gradient
    average is still near zero.
    """

    kind = "RMSprop"

    def __init__(self, params: list[Var], lr=1e-2, alpha=0.99, eps=1e-8, decay=1.0, warmup=0):
        self.params = list(params)
        self.lr0 = float(lr)
        self.warmup = int(warmup)
        self.alpha = alpha
        self.eps = eps
        self.decay = float(decay)
        self.step_count = 0
        self.sq = [np.zeros_like(p.value) for p in self.params]

    @property
    def lr(self) -> float:
        ramp = min(1.0, (self.step_count + 1) / self.warmup) if self.warmup > 0 else 1.0
        return self.lr0 * self.decay**self.step_count * ramp

    def step(self, grads) -> None:
        _check(grads, self.params)
        lr = self.lr
        for p, g, s in zip(self.params, grads, self.sq):
            s *= self.alpha
            s += (1.0 - self.alpha) * g * g
            p.value = p.value - lr * g / (np.sqrt(s) + self.eps)
        self.step_count += 1

    def state(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(self.step_count), "lr0": np.array(self.lr0)}
        for i, s in enumerate(self.sq):
            out[f"sq{i}"] = s.copy()
        return out

    def load_state(self, state) -> None:
        self.step_count = int(state["step"])
        self.lr0 = float(state["lr0"])
        self.sq = [np.array(state[f"sq{i}"]) for i in range(len(self.params))]
