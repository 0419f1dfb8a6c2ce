"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tensor, precision

__all__ = ["grad_check"]

MAX_SCALARS = 10_000


def grad_check(fn, inputs, step: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued ``fn`` against central
    finite differences.

    ``inputs`` is a sequence of tensors to perturb; they are copied into
    double precision before the check. Returns the worst relative error over
    every coordinate, with denominator max(|a|, |b|, 1e-8).
    """
    probes = []
    for t in inputs:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        probes.append(Tensor(arr, requires_grad=True, dtype=np.float64))
    total = sum(p.size for p in probes)
    if total > MAX_SCALARS:
        raise ValueError(f"grad_check limited to {MAX_SCALARS} scalars, got {total}")

    with precision(np.float64):
        out = fn(*probes)
        if not np.isfinite(out.data).all():
            raise NumericError("non-finite value in grad_check forward pass")
        out.backward()
        analytic = [
            p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in probes
        ]

        worst = 0.0
        for p, an in zip(probes, analytic):
            flat = p.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = fn(*probes).item()
                flat[i] = orig - step
                f_minus = fn(*probes).item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * step)
                if not (np.isfinite(fd) and np.isfinite(an_flat[i])):
                    raise NumericError("non-finite value during finite differencing")
                err = abs(fd - an_flat[i]) / max(abs(fd), abs(an_flat[i]), 1e-8)
                worst = max(worst, err)
    return worst
