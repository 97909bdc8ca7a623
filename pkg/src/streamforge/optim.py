"""Parameter containers, AdamW on flat vectors, and EMA."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class ParamSet:
    """Mixin for dataclasses whose ``FIELDS`` name the trainable arrays."""

    FIELDS: tuple = ()

    def arrays(self):
        return [getattr(self, f) for f in self.FIELDS]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def from_vector(self, vec):
        out, i = {}, 0
        for name, a in zip(self.FIELDS, self.arrays()):
            out[name] = np.asarray(vec[i : i + a.size], dtype=float).reshape(a.shape)
            i += a.size
        if i != len(vec):
            raise ValueError(f"vector has {len(vec)} entries, parameters need {i}")
        return replace(self, **out)

    def copy(self):
        return replace(self, **{f: a.copy() for f, a in zip(self.FIELDS, self.arrays())})

    def zeros_like(self):
        return replace(self, **{f: np.zeros_like(a) for f, a in zip(self.FIELDS, self.arrays())})

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class AdamW:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    t: int = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        theta = theta * (1.0 - self.lr * self.weight_decay)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "weight_decay": self.weight_decay, "t": self.t,
            "m": None if self.m is None else self.m.copy(),
            "v": None if self.v is None else self.v.copy(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "AdamW":
        return cls(
            lr=float(state["lr"]), beta1=float(state["beta1"]), beta2=float(state["beta2"]),
            eps=float(state["eps"]), weight_decay=float(state["weight_decay"]),
            m=None if state["m"] is None else np.array(state["m"], dtype=float),
            v=None if state["v"] is None else np.array(state["v"], dtype=float),
            t=int(state["t"]),
        )


def ema_update(ema, params, decay: float):
    """``ema <- decay * ema + (1 - decay) * params``, elementwise.

    Works on arrays or on any parameter container with ``to_vector`` /
    ``from_vector``.
    """
    if hasattr(ema, "to_vector"):
        e, p = ema.to_vector(), params.to_vector()
        if e.shape != p.shape:
            raise ValueError("EMA and parameter shapes differ")
        return ema.from_vector(decay * e + (1.0 - decay) * p)
    e, p = np.asarray(ema, dtype=float), np.asarray(params, dtype=float)
    if e.shape != p.shape:
        raise ValueError("EMA and parameter shapes differ")
    return decay * e + (1.0 - decay) * p
