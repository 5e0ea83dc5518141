"""AdamW with decoupled weight decay, operating on autodiff Tensors."""

import numpy as np

from .autodiff import NumericError, Tensor


class AdamW:
    """Standard AdamW. Defaults follow the training recipe used throughout
    this project: constant lr 1e-4, weight decay 0.01."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        if not self.params:
            raise ValueError("AdamW: no parameters")
        for p in self.params:
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ValueError("AdamW: parameters must be Tensors with requires_grad")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """Apply one update. Every registered parameter must carry a grad."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"AdamW: parameter {i} has no grad")
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"AdamW: non-finite grad for parameter {i}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            upd = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * upd).astype(p.data.dtype)
