"""Shared test oracles, independent of the library code paths they check."""

import numpy as np

from coderec import autodiff as ad


def finite_difference(loss_fn, params, step=1e-4):
    """Central finite differences of a scalar loss w.r.t. each parameter tensor.

    loss_fn takes no arguments and reads the current param values; params are
    mutated in place and restored. Everything runs in the params' own dtype,
    so callers should build f64 params for tight comparisons.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(loss_fn())
            flat[i] = orig - step
            lo = float(loss_fn())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-4):
    """Elementwise |a-b| / max(|a|, |b|, floor), reduced to the max."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def check_gradients(build_loss, params, step=1e-4, tol=1e-3):
    """Compare reverse-mode grads against central differences for every param.

    build_loss() must construct the full forward pass from scratch (so finite
    differences see parameter perturbations) and return a scalar Tensor.
    Returns the worst relative error observed.
    """
    ad.zero_grads(params)
    with ad.Tape() as tape:
        loss = build_loss()
    ad.backward(tape, loss)
    analytic = [p.grad_or_zero().copy() for p in params]
    numeric = finite_difference(lambda: build_loss().data, params, step=step)
    worst = 0.0
    for p, ga, gn in zip(params, analytic, numeric):
        err = relative_error(ga, gn)
        if err > worst:
            worst = err
        assert err < tol, f"gradient mismatch for {p.name or p.shape}: rel err {err:.3e}"
    return worst
