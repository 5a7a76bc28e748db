"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class AdamConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors.

    The learning rate can be changed between steps (``opt.lr = ...``) to follow
    a schedule. Weight decay is applied as ``p -= lr * wd * p`` outside the
    adaptive update.
    """

    def __init__(self, params: list[Tensor], config: AdamConfig | None = None):
        self.params = list(params)
        self.config = config or AdamConfig()
        self.lr = self.config.lr
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        lr = self.lr
        for p, m, v in zip(self.params, self.m, self.v):
            if cfg.weight_decay:
                p.data *= p.dtype.type(1.0 - lr * cfg.weight_decay)
            if p.grad is None:
                continue
            g = p.grad
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * (g * g)
            step = (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= step.astype(p.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def optimizer_step(params: list[Tensor], opt: Adam) -> None:
    """Apply one Adam update using the gradients currently stored on ``params``."""
    if [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ValueError("optimizer was built for a different parameter list")
    opt.step()
