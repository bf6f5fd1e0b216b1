"""Central-finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, backward

__all__ = ["gradcheck"]


def gradcheck(
    f,
    tensors: list[Tensor],
    eps: float = 1e-5,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` is a no-argument callable returning a scalar Tensor built from ops on
    `tensors`; it is re-evaluated under perturbed entries.  `n_samples`
    coordinates are drawn across all tensors (every coordinate is checked
    when there are fewer than `n_samples`).  Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if rng is None:
        rng = np.random.default_rng(0)

    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)

    sizes = [t.value.size for t in tensors]
    coords = np.concatenate(
        [np.full(s, i, dtype=np.int64) for i, s in enumerate(sizes)]
    )
    flat_idx = np.concatenate([np.arange(s, dtype=np.int64) for s in sizes])
    totaln = coords.shape[0]
    if totaln > n_samples:
        pick = rng.choice(totaln, size=n_samples, replace=False)
        coords, flat_idx = coords[pick], flat_idx[pick]

    worst = 0.0
    for which, j in zip(coords, flat_idx):
        t = tensors[which]
        flat = t.value.reshape(-1)
        saved = flat[j]
        flat[j] = saved + eps
        hi = float(f().value)
        flat[j] = saved - eps
        lo = float(f().value)
        flat[j] = saved
        numeric = (hi - lo) / (2.0 * eps)
        g = grads.get(t)
        analytic = 0.0 if g is None else float(g.reshape(-1)[j])
        if not (np.isfinite(numeric) and np.isfinite(analytic)):
            raise FloatingPointError("non-finite value during gradcheck")
        err = abs(analytic - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
