"""Finite-difference verification of autodiff gradients.

The checker is the independent oracle for every backward rule in this
package: central differences of the forward function, evaluated twice per
perturbed element, compared against the taped gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from change3d.tensor import GradTape, Tensor, backward

# Relative error uses max(|analytic|, |numeric|, 1.0) as denominator, so for
# sub-unit gradients it degrades gracefully into an absolute comparison and
# finite-difference noise on near-zero entries cannot trip the check.
_DENOM_FLOOR = 1.0


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    eps: float
    entries: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> ParamCheck:
        return max(self.entries, key=lambda e: e.max_rel_err)

    def failing(self) -> list[str]:
        return [e.name for e in self.entries if not e.passed]

    def __str__(self) -> str:
        lines = [f"gradient check: eps={self.eps:g} tolerance={self.tolerance:g}"]
        for e in self.entries:
            status = "ok  " if e.passed else "FAIL"
            lines.append(f"  [{status}] {e.name:40s} max_rel_err={e.max_rel_err:.3e}")
        lines.append("PASSED" if self.passed else "FAILED: " + ", ".join(self.failing()))
        return "\n".join(lines)


def _default_eps(dtype) -> float:
    return 1e-5 if dtype == np.float64 else 1e-3


def gradient_check(f, params, eps: float | None = None,
                   tolerance: float = 1e-5) -> GradCheckReport:
    """Compare taped gradients of scalar ``f()`` against central differences.

    ``params`` is a sequence of Tensors or (name, Tensor) pairs; every element
    of every parameter is perturbed by +-eps.  Non-deterministic ``f`` is
    rejected via a double-evaluation mismatch.
    """
    named: list[tuple[str, Tensor]] = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            named.append(p)
        else:
            named.append((f"param{i}", p))
    if not named:
        raise ValueError("gradient_check needs at least one parameter")
    if eps is None:
        eps = _default_eps(named[0][1].dtype)

    y0, y1 = float(f().data), float(f().data)
    if np.isnan(y0) or np.isnan(y1):
        raise ValueError("f evaluated to NaN")
    if y0 != y1:
        raise ValueError(f"non-deterministic f: double evaluation mismatch "
                         f"({y0!r} != {y1!r})")

    for _, p in named:
        p.zero_grad()
    with GradTape() as tape:
        loss = f()
        backward(loss, tape)

    report = GradCheckReport(tolerance=tolerance, eps=eps)
    for name, p in named:
        if p.grad is None:
            raise ValueError(f"parameter {name} received no gradient")
        analytic = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic[i])
            denom = max(abs(a), abs(numeric), _DENOM_FLOOR)
            worst = max(worst, abs(a - numeric) / denom)
        report.entries.append(ParamCheck(name, worst, worst < tolerance))
    return report
