"""Minimal Adam over a growing list of numpy parameter arrays.

Parameters registered later (pyramid levels appended mid-run) keep
their own step counter so bias correction starts fresh for them.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._slots: list[dict] = []

    def add_param(self, param: np.ndarray) -> int:
        """Register an array (updated in place); returns its slot index."""
        self._slots.append({
            "param": param,
            "m": np.zeros_like(param),
            "v": np.zeros_like(param),
            "t": 0,
        })
        return len(self._slots) - 1

    def __len__(self) -> int:
        return len(self._slots)

    def step(self, grads: list) -> None:
        """Apply one update; grads align with registration order."""
        if len(grads) != len(self._slots):
            raise ValueError(f"expected {len(self._slots)} grads, got {len(grads)}")
        for slot, g in zip(self._slots, grads):
            g = np.asarray(g, dtype=slot["param"].dtype)
            slot["t"] += 1
            t = slot["t"]
            slot["m"] *= self.b1
            slot["m"] += (1 - self.b1) * g
            slot["v"] *= self.b2
            slot["v"] += (1 - self.b2) * np.square(g)
            mhat = slot["m"] / (1 - self.b1 ** t)
            vhat = slot["v"] / (1 - self.b2 ** t)
            slot["param"] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
