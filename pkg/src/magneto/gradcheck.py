"""Central finite-difference oracle for the autodiff engine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from .errors import ContractError
from .params import ParamStore
from .tensor import Tensor, backward, precision, trace_kinks

__all__ = ["CheckReport", "finite_difference_check", "relative_error"]

# evaluation roundoff assumed per loss value; intermediate sums exceed |loss|
ROUNDOFF_ULPS = 100


@dataclass
class CheckReport:
    max_rel_error: Dict[str, float]
    passed: bool
    skipped: List[Tuple[str, tuple]] = field(default_factory=list)
    failures: List[Tuple[str, tuple, float]] = field(default_factory=list)
    tol: float = 1e-4
    checked: int = 0
    floor: float = 1e-6

    def rows(self):
        for name, err in self.max_rel_error.items():
            n_skip = sum(1 for s in self.skipped if s[0] == name)
            yield name, err, n_skip, err <= self.tol

    def format_table(self) -> str:
        lines = [f"{'parameter':<48} {'max_rel_err':>12} {'skipped':>8}  status"]
        for name, err, n_skip, ok in self.rows():
            lines.append(f"{name:<48} {err:>12.3e} {n_skip:>8d}  {'ok' if ok else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} ({self.checked} coordinates)")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    if not (math.isfinite(analytic) and math.isfinite(numeric)):
        return math.inf
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _evaluate(build, store):
    with trace_kinks() as kinks:
        out = build(store)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("finite_difference_check: build must return a scalar Tensor")
    return float(out.data.reshape(-1)[0]), kinks


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_check(
    build: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> CheckReport:
    """Compare backward() against central differences on every trainable coordinate.

    ``build`` must be a pure function of the store.  The check runs in 64-bit
    mode on a float64 copy of ``params``.  A coordinate whose perturbation
    flips the sign pattern of any relu/clip input is reported as skipped.

    The relative-error denominator never drops below ``floor``, raised if
    needed so that ``ROUNDOFF_ULPS`` ulps of loss roundoff, divided by ``2 * eps``, stay
    within ``tol``: gradients smaller than that are not measurable by a
    difference quotient.
    """
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    with precision("float64"):
        store = params.astype(np.float64)
        base_out = build(store)
        if base_out.data.size != 1:
            raise ContractError("finite_difference_check: build must return a scalar Tensor")
        grads = backward(base_out)
        f0, base_kinks = _evaluate(build, store)
        noise = ROUNDOFF_ULPS * np.finfo(np.float64).eps * max(abs(f0), 1.0) / (2 * eps)
        floor = max(floor, noise / tol)

        report = CheckReport(max_rel_error={}, passed=True, tol=tol, floor=floor)
        for name, tensor in store.trainable_items():
            analytic = grads.of(tensor)
            data = tensor.data
            worst = 0.0
            for idx in np.ndindex(data.shape):
                original = data[idx]
                data[idx] = original + eps
                f_plus, k_plus = _evaluate(build, store)
                data[idx] = original - eps
                f_minus, k_minus = _evaluate(build, store)
                data[idx] = original
                report.checked += 1
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    report.failures.append((name, idx, math.inf))
                    worst = math.inf
                    continue
                if not (_same_pattern(k_plus, base_kinks) and _same_pattern(k_minus, base_kinks)):
                    report.skipped.append((name, idx))
                    continue
                numeric = (f_plus - f_minus) / (2 * eps)
                err = relative_error(float(analytic[idx]), numeric, floor)
                if err > tol:
                    report.failures.append((name, idx, err))
                worst = max(worst, err)
            report.max_rel_error[name] = worst
        report.passed = not report.failures
    return report
