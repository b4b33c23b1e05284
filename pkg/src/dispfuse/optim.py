"""Adam over lists of engine tensors."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: list[Tensor], beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm  # rescale the joint gradient to at most this norm; 0 = off
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        """One update from the accumulated ``.grad`` fields; missing grads count as zero."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        scale = 1.0
        if self.clip_norm > 0:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad.data, dtype=p.dtype)
            if scale != 1.0:
                g = (g * scale).astype(p.dtype)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0:
                continue
            step = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step).astype(p.dtype)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad.data, dtype=np.float64)))
                                 for p in self.params if p.grad is not None)))

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m/{i:04d}"] = m
            out[f"v/{i:04d}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(state[f"m/{i:04d}"], dtype=p.dtype)
            self.v[i] = np.array(state[f"v/{i:04d}"], dtype=p.dtype)
