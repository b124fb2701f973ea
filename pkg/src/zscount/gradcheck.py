"""Central-difference gradient checking against the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


class GradCheckError(RuntimeError):
    """The checked function produced a non-finite value."""


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28s} max_rel_err={self.max_rel_error:.3e}  checked={self.n_checked}"


def _evaluate(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    value = f(*inputs)
    out = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(out):
        raise GradCheckError(f"function value is not finite: {out}")
    return out


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    n_directions: int = 0,
    probe_inputs: int | None = None,
    rng: np.random.Generator | None = None,
    name: str = "grad_check",
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    Each input's ``data`` is perturbed in place and restored.  With
    ``max_coords`` set, only that many randomly chosen coordinates per input
    are probed, and with ``probe_inputs`` set only that many randomly chosen
    inputs get coordinate probes at all; ``n_directions`` adds random directional-derivative probes
    over all inputs jointly, which is how large parameter sets are covered.

    The relative error of a probe is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = 1e-5 * max(1, |f(x)|)``.  With ``h = 1e-5`` the difference
    quotient carries roughly ``1e-10 * |f|`` of float64 rounding noise, so
    gradients that are exactly zero would otherwise fail on noise alone;
    below the floor the comparison is effectively absolute at ``tol * floor``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    rng = rng if rng is not None else np.random.default_rng(0)

    for t in inputs:
        t.grad = None
    value = f(*inputs)
    if not isinstance(value, Tensor) or value.size != 1:
        raise GradCheckError("checked function must return a scalar Tensor")
    f0 = value.item()
    if not np.isfinite(f0):
        raise GradCheckError(f"function value is not finite: {f0}")
    backward(value)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    floor = 1e-5 * max(1.0, abs(f0))

    worst, checked = 0.0, 0

    def record(a: float, n: float) -> None:
        nonlocal worst, checked
        err = abs(a - n) / max(abs(a), abs(n), floor)
        worst = max(worst, err) if np.isfinite(err) else float("inf")
        checked += 1

    probed = range(len(inputs))
    if probe_inputs is not None and probe_inputs < len(inputs):
        probed = np.sort(rng.choice(len(inputs), size=probe_inputs, replace=False))
    for k in probed:
        t, g = inputs[k], analytic[k]
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = _evaluate(f, inputs)
            flat[i] = orig - h
            fm = _evaluate(f, inputs)
            flat[i] = orig
            record(g.reshape(-1)[i], (fp - fm) / (2 * h))

    for _ in range(n_directions):
        dirs = [rng.standard_normal(t.shape) for t in inputs]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        originals = [t.data.copy() for t in inputs]
        for t, d, o in zip(inputs, dirs, originals):
            t.data[...] = o + h * d
        fp = _evaluate(f, inputs)
        for t, d, o in zip(inputs, dirs, originals):
            t.data[...] = o - h * d
        fm = _evaluate(f, inputs)
        for t, o in zip(inputs, originals):
            t.data[...] = o
        directional = sum(float((g * d).sum()) for g, d in zip(analytic, dirs))
        record(directional, (fp - fm) / (2 * h))

    for t in inputs:
        t.grad = None
    return GradCheckReport(name=name, max_rel_error=float(worst), n_checked=checked, tol=tol)
