"""Adam with decoupled weight decay and a linear warmup/decay learning rate."""

from __future__ import annotations

import numpy as np

from .numerics import Tensor


def linear_warmup_decay(step: int, total_steps: int, peak_lr: float, warmup_fraction: float) -> float:
    """0 at step 0, ``peak_lr`` at the end of warmup, 0 at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0.0 <= warmup_fraction < 1.0:
        raise ValueError("warmup_fraction must be in [0, 1)")
    warmup = int(round(warmup_fraction * total_steps))
    step = min(max(step, 0), total_steps)
    if warmup and step < warmup:
        return peak_lr * step / warmup
    return peak_lr * (total_steps - step) / max(1, total_steps - warmup)


def no_decay(name: str) -> bool:
    """Biases, layernorm parameters and the head bias are not weight-decayed."""
    return name.endswith(".bias") or ".ln" in name or name.startswith("embeddings.ln")


class Adam:
    """Adam over a name -> Tensor mapping, reading ``.grad`` of each tensor.

    Moments are kept per name so pruning can zero them in step with weights.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-6,
                 weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values() if p.grad is not None)))

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        clip = 1.0
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                clip = self.grad_clip / (norm + 1e-12)
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * clip
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and not no_decay(name):
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def mask_state(self, name: str, mask: np.ndarray) -> None:
        if name in self.m:
            self.m[name] *= mask
            self.v[name] *= mask

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()
        self.step_count = step_count
