"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, gradients, no_grad

SCALE_FLOOR = 1e-6  # below this, central-difference roundoff dominates the relative error


@dataclass
class ParamCheck:
    max_rel_error: float
    max_abs_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    params: dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.params.values())

    @property
    def worst(self) -> float:
        return max((c.max_rel_error for c in self.params.values()), default=0.0)

    def __str__(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'} {name}: rel={c.max_rel_error:.2e}"
                 for name, c in self.params.items()]
        return "\n".join(lines) or "(no parameters)"


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, step: float) -> np.ndarray:
    out = np.zeros(param.shape)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
    return out


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                    step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backprop gradients with central differences, per parameter.

    ``loss_fn`` rebuilds the graph from the current parameter values each
    call. The error of a parameter is the largest elementwise deviation
    divided by the larger of the two gradients' max-abs magnitudes, floored
    at ``SCALE_FLOOR``; an identically-zero gradient must therefore match to
    ``tol * SCALE_FLOOR`` absolute.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    report = GradCheckReport(tol=tol)
    if not params:
        return report
    for p in params.values():
        p.grad = None
    analytic = gradients(loss_fn(), params)
    for name, p in params.items():
        numeric = numerical_gradient(loss_fn, p, step)
        diff = np.abs(analytic[name] - numeric)
        scale = max(np.abs(analytic[name]).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        abs_err = float(diff.max(initial=0.0))
        rel = abs_err / max(scale, SCALE_FLOOR)
        report.params[name] = ParamCheck(rel, abs_err, rel <= tol)
    return report
