"""Central finite-difference verification of analytic backward passes."""

from __future__ import annotations

import numpy as np

from ..numerics import SeededRng


def _as_tuple(x):
    return x if isinstance(x, tuple) else (x,)


def grad_check(module, inputs, extras: dict | None = None, n_coords: int = 200,
               step: float = 1e-5, seed: int = 0, check_inputs: bool = True,
               floor: float = 1e-5) -> float:
    """Maximum relative error between analytic and finite-difference gradients.

    The scalar probed is ``sum(R * module(*inputs))`` for a fixed random
    ``R``. At least ``n_coords`` coordinates are sampled (all of them when
    fewer exist), spread over trainable parameters and, optionally, the
    inputs. Frozen parameters are skipped.

    Parameters
    ----------
    module
        Object with ``forward(*inputs, **extras)`` and ``backward(dy)``;
        ``backward`` returns the input gradient (a tuple for several inputs).
    floor
        Lower bound on the denominator. Coordinates whose true gradient is
        exactly zero (e.g. key biases under softmax shift invariance) still
        show ~1e-10 of difference-quotient roundoff; the floor keeps that
        from reading as a relative error of order one.
    """
    extras = extras or {}
    inputs = tuple(np.array(x, dtype=float) for x in _as_tuple(inputs))
    rng = SeededRng(seed, 7)

    y = module.forward(*inputs, **extras)
    R = rng.gen.standard_normal(np.shape(y))

    def loss():
        return float(np.sum(R * module.forward(*inputs, **extras)))

    if hasattr(module, "zero_grad"):
        module.zero_grad()
    module.forward(*inputs, **extras)
    dx = _as_tuple(module.backward(R))

    targets = []
    if hasattr(module, "named_params"):
        for _, p in module.named_params():
            if p.trainable:
                targets.append((p.value, p.grad.copy()))
    if check_inputs:
        for x, g in zip(inputs, dx):
            if g is not None:
                targets.append((x, np.asarray(g)))
    total = sum(t[0].size for t in targets)
    if total == 0:
        return 0.0

    # sample coordinates proportionally to size, at least one per target
    picks = []
    for arr, g in targets:
        k = min(arr.size, max(1, int(np.ceil(n_coords * arr.size / total))))
        idx = rng.gen.choice(arr.size, size=k, replace=False)
        picks.append((arr, g, idx))

    worst = 0.0
    for arr, g, idx in picks:
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            fp = loss()
            flat[i] = old - step
            fm = loss()
            flat[i] = old
            num = (fp - fm) / (2 * step)
            ana = gflat[i]
            err = abs(num - ana) / max(abs(num), abs(ana), floor)
            worst = max(worst, err)
    return worst
