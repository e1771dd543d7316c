"""Finite-difference gradient verification for tensor programs.

The checker evaluates a scalar-valued f64 program, computes analytic
gradients via the tape, and compares them entrywise against central
differences with h = h_scale * max(1, |theta|).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    rel_tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def lines(self):
        for p in self.params:
            yield f"{'PASS' if p.passed else 'FAIL'}  {p.name:<40s} max_rel_err={p.max_rel_err:.3e}"


def _rel_err(a: float, n: float) -> float:
    # absolute comparison against a small floor when both grads are tiny,
    # relative otherwise
    return abs(a - n) / max(abs(a), abs(n), 1e-3)


def grad_check(
    f,
    params: list[Tensor],
    rel_tol: float = 1e-4,
    h_scale: float = 1e-5,
    max_entries_per_param: int | None = None,
    names: list[str] | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar program `f(params)` to central FD.

    `f` must rebuild its graph from `params` on every call; all params must
    be f64. When `max_entries_per_param` is set, a random subset of entries
    is probed per parameter (for end-to-end model checks).
    """
    for p in params:
        if p.dtype != "f64":
            raise ValueError("grad_check requires f64 parameters")
    names = names or [f"param{i}" for i in range(len(params))]
    rng = rng or np.random.default_rng(0)

    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f(params)
        backward(loss, tape, leaves=params)
    analytic = [p.grad.copy() for p in params]

    report = GradCheckReport(rel_tol=rel_tol)
    for p, a, name in zip(params, analytic, names):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idxs = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(flat.size)
        worst = 0.0
        for i in idxs:
            theta = flat[i]
            h = h_scale * max(1.0, abs(theta))
            with no_grad():
                flat[i] = theta + h
                fp = float(f(params).data)
                flat[i] = theta - h
                fm = float(f(params).data)
                flat[i] = theta
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, _rel_err(float(aflat[i]), numeric))
        report.params.append(ParamCheck(name=name, max_rel_err=worst, passed=worst <= rel_tol))
    return report
