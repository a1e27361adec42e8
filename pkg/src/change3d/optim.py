"""Adam with bias correction and decoupled multiplicative weight decay, plus
the polynomial learning-rate schedule."""

from __future__ import annotations

import numpy as np

from change3d.config import OptimizerConfig, ScheduleConfig
from change3d.tensor import Tensor


def lr_at(curr_iter: int, schedule: ScheduleConfig, lr0: float) -> float:
    """(1 - curr/max)^alpha * lr0; monotone non-increasing, 0 at max_iter."""
    if curr_iter < 0 or curr_iter > schedule.max_iter:
        raise ValueError(f"curr_iter {curr_iter} outside [0, {schedule.max_iter}]")
    return float((1.0 - curr_iter / schedule.max_iter) ** schedule.alpha * lr0)


def _decayed(name: str) -> bool:
    """Norm scale/shift parameters and biases are excluded from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("bias", "gamma", "beta")


class Adam:
    """State lives per parameter name so it can round-trip through checkpoints."""

    def __init__(self, named_params: list[tuple[str, Tensor]], cfg: OptimizerConfig):
        self.cfg = cfg
        self.named_params = list(named_params)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for name, p in self.named_params:
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise FloatingPointError(f"NaN gradient in parameter {name}")
            if cfg.weight_decay and (cfg.decay_norm_and_bias or _decayed(name)):
                p.data *= np.asarray(1.0 - lr * cfg.weight_decay, dtype=p.dtype)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= np.asarray(lr, dtype=p.dtype) * update.astype(p.dtype)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray([self.t], dtype=np.int64)}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for name, _ in self.named_params:
            self.m[name] = arrays[f"m.{name}"].copy()
            self.v[name] = arrays[f"v.{name}"].copy()
