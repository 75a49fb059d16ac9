"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .optim import ParamStore
from .tensor import backward


def check_gradients(fn, store: ParamStore, step: float = 1e-4,
                    max_entries_per_param: int = 0, rng=None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `fn` maps the store to a scalar Tensor and must be deterministic. With
    max_entries_per_param > 0 only that many coordinates per parameter are
    probed (chosen by the rng), which keeps the check tractable for MLP-sized
    stores. Relative error per coordinate is |ad - fd| / max(|ad|, |fd|, 1e-6);
    two exact zeros compare as 0.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    root = fn(store)
    if not np.isfinite(root.data).all():
        raise FloatingPointError("objective is not finite")
    grads = backward(root, params=store)

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in store.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param and n > max_entries_per_param:
            idx = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idx = np.arange(n)
        g_ad = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn(store).data)
            flat[i] = orig - step
            f_minus = float(fn(store).data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("objective is not finite under perturbation")
            fd = (f_plus - f_minus) / (2.0 * step)
            ad = g_ad[i]
            denom = max(abs(ad), abs(fd), 1e-6)
            err = abs(ad - fd) / denom
            if err > worst:
                worst = err
    return worst
