"""Small damped least-squares solver shared by model fitting and pose estimation.

Hand-rolled (rather than scipy) so the per-iteration objective history is
available: callers assert the accepted objective never increases, and the
pose steps need exact control over the convergence policy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class NonFiniteResidualError(RuntimeError):
    """Residuals went non-finite: the input data is corrupt."""


@dataclass
class LMResult:
    params: np.ndarray
    cost: float
    cost_history: list[float]
    iterations: int
    converged: bool


def numeric_jacobian(residual_fn: Callable[[np.ndarray], np.ndarray],
                     params: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    r0 = residual_fn(params)
    jac = np.empty((r0.size, params.size))
    for i in range(params.size):
        step = eps * max(1.0, abs(params[i]))
        p = params.copy()
        p[i] += step
        jac[:, i] = (residual_fn(p) - r0) / step
    return jac


def levenberg_marquardt(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    jacobian_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    max_iterations: int = 50,
    step_tol: float = 1e-8,
    damping: float = 1e-3,
) -> LMResult:
    """Minimize sum(residual^2) with Levenberg-Marquardt.

    Steps that would increase the objective are rejected and retried with a
    larger damping factor, so the recorded cost history is non-increasing.
    """
    jac_fn = jacobian_fn or (lambda p: numeric_jacobian(residual_fn, p))
    x = np.asarray(x0, dtype=float).copy()
    r = residual_fn(x)
    if not np.all(np.isfinite(r)):
        raise NonFiniteResidualError("initial residuals are non-finite")
    cost = float(r @ r)
    history = [cost]
    lam = damping
    converged = False
    iterations = 0

    for iterations in range(1, max_iterations + 1):
        jac = jac_fn(x)
        if not np.all(np.isfinite(jac)):
            raise NonFiniteResidualError("jacobian is non-finite")
        jtj = jac.T @ jac
        jtr = jac.T @ r
        accepted = False
        for _ in range(20):
            try:
                step = np.linalg.solve(jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12)), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            r_new = residual_fn(x_new)
            if not np.all(np.isfinite(r_new)):
                raise NonFiniteResidualError("residuals became non-finite")
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        history.append(cost)
        if not accepted or float(np.linalg.norm(step)) < step_tol:
            converged = True
            break

    return LMResult(params=x, cost=cost, cost_history=history,
                    iterations=iterations, converged=converged)
