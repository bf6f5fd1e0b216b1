"""Bias-corrected adaptive first-order optimizer (Adam) over ParamSets."""

from __future__ import annotations

import numpy as np

from .autodiff import ParamSet

__all__ = ["AdamState", "adam_step"]


class AdamState:
    """Per-parameter first/second moments plus step counter and hyperparameters.

    Moments are allocated lazily on the first step so a state can be built
    before knowing which entries are trainable.
    """

    def __init__(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
            "shapes": {k: list(v.shape) for k, v in self.m.items()},
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "AdamState":
        out = cls(d["lr"], d["beta1"], d["beta2"], d["eps"])
        out.t = int(d["t"])
        for k, flat in d["m"].items():
            out.m[k] = np.asarray(flat, dtype=np.float64).reshape(d["shapes"][k])
        for k, flat in d["v"].items():
            out.v[k] = np.asarray(flat, dtype=np.float64).reshape(d["shapes"][k])
        return out


def adam_step(
    state: AdamState, params: ParamSet, grads: dict[str, np.ndarray]
) -> None:
    """One in-place Adam update of the trainable entries of `params`.

    Frozen entries are untouched; entries without a gradient are treated as
    zero-gradient (their moments still decay).  Deterministic: identical
    (state, params, grads) produce bitwise-identical results.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.trainable_items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.value.shape} for {name!r}"
            )
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
