"""Adam optimizer over explicit Tensor parameter lists."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam with bias correction; betas (0.9, 0.999), eps 1e-8.

    A parameter whose grad is None (or all-zero) is left unchanged by step()
    apart from the shared step counter.
    """

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / np.float32(bc1)
            vhat = self.v[i] / np.float32(bc2)
            p.data = p.data - np.float32(self.lr) * mhat / (np.sqrt(vhat) + np.float32(self.eps))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers keyed by parameter index, for checkpointing."""
        out = {"t": np.array([self.t], dtype=np.float32)}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self.m[i] = arrays[f"m.{i}"].astype(np.float32).reshape(self.m[i].shape)
            self.v[i] = arrays[f"v.{i}"].astype(np.float32).reshape(self.v[i].shape)
