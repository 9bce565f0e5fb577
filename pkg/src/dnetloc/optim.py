"""Adam and reduce-on-plateau learning-rate control."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

logger = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self):
        """One bias-corrected update from ``param.grad``.

        A non-finite gradient anywhere rejects the whole step and leaves
        parameters and moments untouched.
        """
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in {p.name}; step rejected")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            m, v, g = self.m[p.name], self.v[p.name], p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {f"m/{k}": v for k, v in self.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.v.items()})
        meta = {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        return arrays, meta

    def load_state_dict(self, arrays: dict[str, np.ndarray], meta: dict):
        self.t = int(meta["t"])
        self.lr = float(meta["lr"])
        self.beta1, self.beta2, self.eps = float(meta["beta1"]), float(meta["beta2"]), float(meta["eps"])
        for name in self.m:
            self.m[name][...] = arrays[f"m/{name}"]
            self.v[name][...] = arrays[f"v/{name}"]


def adam_step(params, optimizer: Adam):
    optimizer.step()
    return params


@dataclass
class PlateauPolicy:
    lr: float = 1e-3
    factor: float = 0.1
    patience: int = 3
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    best: float = float("inf")
    bad_epochs: int = 0

    def update(self, val_loss: float) -> float:
        """Feed one epoch's validation loss; returns the (possibly reduced) lr."""
        if not np.isfinite(val_loss):
            raise ValueError(f"validation loss is not finite: {val_loss}")
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                new = max(self.lr * self.factor, self.min_lr)
                if new < self.lr:
                    logger.info("validation loss plateaued; lr %.3g -> %.3g", self.lr, new)
                self.lr = new
                self.bad_epochs = 0
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)


def plateau_update(policy: PlateauPolicy, epoch_val_loss: float) -> float:
    return policy.update(epoch_val_loss)
