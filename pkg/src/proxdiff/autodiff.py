"""Derivative engines for proximal gradient iterations.

Four ways to differentiate ``x*(u) = argmin_x f(x, u) + g(x, u)``:

* :func:`ad_forward` / :func:`ad_reverse` differentiate the recorded
  iterations of the solver itself (unrolled forward and reverse mode).
* :func:`fpad_forward` / :func:`fpad_reverse` run the same linear
  recursions with every Jacobian frozen at one approximate fixed point, the
  anchor. Reverse mode then needs no tape.
* :func:`implicit_diff` solves the linearized fixed-point equation
  ``(I - R) X = S u_dot`` directly.

Engines work with any problem object exposing ``grad``, ``hvp``,
``cross_jvp``, ``cross_vjp``, ``prox``, ``prox_jvp``, ``prox_vjp`` and
``subgrad_project`` (see :class:`proxdiff.problems.ProblemInstance`).
Parameter cotangents may be :class:`~proxdiff.problems.ParamPack` or arrays;
``prox_vjp`` may return ``None`` for its parameter part.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .core import ConvergenceWarning
from .oracle import conjugate_gradient_normal

__all__ = [
    "FpadAnchor",
    "build_anchor",
    "anchor_from_trace",
    "ad_forward",
    "ad_reverse",
    "FpadForwardResult",
    "FpadReverseResult",
    "fpad_forward",
    "fpad_reverse",
    "ImplicitResult",
    "implicit_diff",
]


def _acc(a, b):
    if b is None:
        return a
    if a is None:
        return b
    return a + b


def _state_bytes(*arrays) -> int:
    total = 0
    for a in arrays:
        if a is None:
            continue
        if isinstance(a, np.ndarray):
            total += a.nbytes
        elif hasattr(a, "design"):
            total += sum(f.nbytes for f in (a.design, a.target) if isinstance(f, np.ndarray)) + 8
        else:
            total += 8
    return total


# ---------------------------------------------------------------------------
# unrolled AD


def ad_forward(problem, trace, du):
    """Forward-mode derivative of every iterate of a recorded solve.

    Returns an array ``xdot`` with ``xdot[k] = d x(k) / du . du`` for
    ``k = 0..K``; ``xdot[0] = 0``.
    """
    if not trace.recorded:
        raise ValueError("ad_forward needs a recorded trace (record_trace=True)")
    K = trace.iterations
    shape = trace.x.shape[1:]
    out = np.zeros((K + 1,) + shape)
    dx = np.zeros(shape)
    dx_prev = dx
    for k in range(K):
        a, b = trace.alphas[k], trace.betas[k]
        y = trace.y[k]
        dy = (1.0 + b) * dx - b * dx_prev
        dw = dy - a * (problem.hvp(y, dy) + problem.cross_jvp(y, du))
        dx_prev, dx = dx, problem.prox_jvp(trace.w[k], a, dw, du)
        out[k + 1] = dx
    return out


def ad_reverse(problem, trace, xbar, on_step: Callable | None = None,
               memory_probe: Callable[[int], None] | None = None):
    """Reverse-mode derivative ``xbar . d x(K) / du`` through a recorded solve.

    Parameters
    ----------
    problem : ProblemInstance or compatible
    trace : SolveTrace
        Tape from a solve with ``record_trace=True``.
    xbar : ndarray
        Cotangent of the final iterate.
    on_step : callable, optional
        Called as ``on_step(n, u_bar_n)`` after each of the ``K`` backward
        steps with the partial accumulation.
    memory_probe : callable, optional
        Receives the number of bytes retained by the backward pass (tape
        plus running state) once per step.

    Returns
    -------
    u_bar : parameter cotangent
    """
    if not trace.recorded:
        raise ValueError("ad_reverse needs a recorded trace (record_trace=True)")
    K = trace.iterations
    xb = np.array(xbar, dtype=np.float64)
    yb_next = np.zeros_like(xb)
    ub = problem.zero_cotangent()
    for n in range(K):
        k = K - n - 1
        a, b = trace.alphas[k], trace.betas[k]
        # x(k) enters y(k) with weight 1 + beta_k and y(k+1) with -beta_{k+1}
        b_next = trace.betas[k + 1] if k + 1 < K else 0.0
        wb, ub_prox = problem.prox_vjp(trace.w[k], a, xb)
        y = trace.y[k]
        yb = wb - a * problem.hvp(y, wb)
        ub = _acc(ub, ub_prox)
        ub = _acc(ub, (-a) * problem.cross_vjp(y, wb))
        xb = (1.0 + b) * yb - b_next * yb_next
        yb_next = yb
        if memory_probe is not None:
            memory_probe(trace.nbytes + _state_bytes(xb, yb_next, ub))
        if on_step is not None:
            on_step(n + 1, ub)
    return ub


# ---------------------------------------------------------------------------
# fixed-point AD


@dataclass(frozen=True)
class FpadAnchor:
    """Frozen linearization point ``(x, nu, w, step, beta)``.

    ``nu`` is the projection of ``-grad_x f(x)`` onto ``∂g(x)`` and
    ``w = x + step * nu``, so that ``prox(w) = x`` holds exactly.
    """

    x: np.ndarray
    nu: np.ndarray
    w: np.ndarray
    step: float
    beta: float = 0.0


def build_anchor(problem, x, step: float, beta: float = 0.0) -> FpadAnchor:
    x = np.array(x, dtype=np.float64)
    nu = problem.subgrad_project(x, -problem.grad(x))
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"anchor momentum must lie in [0, 1), got {beta}")
    return FpadAnchor(x=x, nu=nu, w=x + step * nu, step=float(step), beta=float(beta))


def anchor_from_trace(problem, x, trace) -> FpadAnchor:
    """Anchor at a solver output, with the solver's last step and ``beta_K``."""
    return build_anchor(problem, x, trace.final_step, trace.next_beta)


class FpadForwardResult(NamedTuple):
    limit: np.ndarray
    iterates: np.ndarray | None
    iterations: int
    converged: bool
    contraction: float


class FpadReverseResult(NamedTuple):
    u_bar: object
    iterations: int
    converged: bool
    contraction: float


def fpad_forward(problem, anchor: FpadAnchor, du, iters: int = 20000, tol: float = 1e-12,
                 record: bool = False) -> FpadForwardResult:
    """Forward fixed-point AD at a frozen anchor.

    Iterates ``xhat(k+1) = Dprox(w)(yhat - step (H yhat + C du), du)`` with
    ``yhat = (1 + beta) xhat(k) - beta xhat(k-1)`` from zero until the
    increment satisfies ``||xhat(k+1) - xhat(k)|| <= tol * ||xhat(k+1)||``.

    Returns
    -------
    FpadForwardResult
        `iterates` holds ``xhat(0..k)`` when `record` is set.
        `contraction` is the ratio of the last two increment norms.
    """
    a, b, x, w = anchor.step, anchor.beta, anchor.x, anchor.w
    c = a * problem.cross_jvp(x, du)
    dx = np.zeros_like(x)
    dx_prev = dx
    seq = [dx] if record else None
    last_inc = prev_inc = np.inf
    converged = False
    k = 0
    for k in range(1, iters + 1):
        dy = (1.0 + b) * dx - b * dx_prev
        dw = dy - a * problem.hvp(x, dy) - c
        dx_prev, dx = dx, problem.prox_jvp(w, a, dw, du)
        if record:
            seq.append(dx)
        prev_inc, last_inc = last_inc, float(np.linalg.norm(dx - dx_prev))
        if last_inc <= tol * np.linalg.norm(dx):
            converged = True
            break
    ratio = last_inc / prev_inc if np.isfinite(prev_inc) and prev_inc > 0 else 0.0
    if not converged:
        warnings.warn(
            f"fpad_forward did not converge in {iters} iterations "
            f"(last increment {last_inc:.3e}, contraction {ratio:.6f})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return FpadForwardResult(dx, np.array(seq) if record else None, k, converged, ratio)


def fpad_reverse(problem, anchor: FpadAnchor, xbar_star, tol: float = 1e-12,
                 max_iters: int = 20000, on_step: Callable | None = None,
                 memory_probe: Callable[[int], None] | None = None) -> FpadReverseResult:
    """Reverse fixed-point AD at a frozen anchor.

    Runs the transposed recursion until ``||xtilde|| <= tol * ||xbar_star||``
    or `max_iters`. Only the current state is kept: the parameter
    cotangent is linear in the summed adjoints, so those sums are carried
    and mapped to parameter space once at the end (or at each step if
    `on_step` wants partial results).
    """
    a, b, x, w = anchor.step, anchor.beta, anchor.x, anchor.w
    xb = np.array(xbar_star, dtype=np.float64)
    scale = float(np.linalg.norm(xb))
    yb_next = np.zeros_like(xb)
    sum_xb = np.zeros_like(xb)
    sum_wb = np.zeros_like(xb)

    def u_of(sx, sw):
        _, up = problem.prox_vjp(w, a, sx)
        return _acc((-a) * problem.cross_vjp(x, sw), up)

    converged = scale == 0.0
    norm_prev = norm_now = scale
    n = 0
    if not converged:
        for n in range(1, max_iters + 1):
            wb, _ = problem.prox_vjp(w, a, xb)
            sum_xb += xb
            sum_wb += wb
            yb = wb - a * problem.hvp(x, wb)
            xb = (1.0 + b) * yb - b * yb_next
            yb_next = yb
            if memory_probe is not None:
                memory_probe(_state_bytes(xb, yb_next, sum_xb, sum_wb))
            if on_step is not None:
                on_step(n, u_of(sum_xb, sum_wb))
            norm_prev, norm_now = norm_now, float(np.linalg.norm(xb))
            if norm_now <= tol * scale:
                converged = True
                break
    ratio = norm_now / norm_prev if norm_prev > 0 else 0.0
    if not converged:
        warnings.warn(
            f"fpad_reverse did not converge in {max_iters} iterations "
            f"(|x_tilde| = {norm_now:.3e}, contraction {ratio:.6f})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return FpadReverseResult(u_of(sum_xb, sum_wb), n, converged, ratio)


# ---------------------------------------------------------------------------
# implicit differentiation


class ImplicitResult(NamedTuple):
    value: object
    method: str
    iterations: int
    converged: bool
    contraction_estimate: float


def _contraction_estimate(apply, like, iters=300, seed=0):
    """Power-iteration estimate of the spectral radius of a linear action."""
    v = np.random.default_rng(seed).standard_normal(like.shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        u = apply(v)
        nrm = float(np.linalg.norm(u))
        if nrm == 0.0:
            return 0.0
        if abs(nrm - est) <= 1e-10 * nrm:
            est = nrm
            break
        est = nrm
        v = u / nrm
    return est


def implicit_diff(problem, anchor: FpadAnchor, direction, mode: str = "jvp",
                  method: str = "auto", cg_tol: float = 1e-12, max_iters: int | None = None
                  ) -> ImplicitResult:
    """Differentiate the fixed-point equation ``x = pgd(x, u)`` at an anchor.

    With ``R v = D_w prox((I - step H) v)`` and
    ``S du = D prox(-step C du, du)``, solves ``(I - R) X = S du`` (``mode="jvp"``,
    `direction` is ``du``) or ``(I - R)^T Z = xbar`` followed by ``S^T Z``
    (``mode="vjp"``, `direction` is ``xbar``).

    ``method`` is ``"neumann"`` (sum of powers of ``R``), ``"cg"`` (conjugate
    gradient on the normal equations) or ``"auto"``: Neumann when a power
    estimate of ``rho(R)`` is below 0.999, CG otherwise.
    """
    if mode not in ("jvp", "vjp"):
        raise ValueError(f"mode must be 'jvp' or 'vjp', got {mode!r}")
    a, x, w = anchor.step, anchor.x, anchor.w
    zero_du = problem.zero_tangent()

    def R(v):
        return problem.prox_jvp(w, a, v - a * problem.hvp(x, v), zero_du)

    def RT(v):
        wb, _ = problem.prox_vjp(w, a, v)
        return wb - a * problem.hvp(x, wb)

    if mode == "jvp":
        rhs = problem.prox_jvp(w, a, -a * problem.cross_jvp(x, direction), direction)
        op, op_t = R, RT
    else:
        rhs = np.array(direction, dtype=np.float64)
        op, op_t = RT, R

    rho = np.nan
    if method == "auto":
        rho = _contraction_estimate(op, rhs)
        method = "neumann" if rho < 0.999 else "cg"
    n = rhs.size
    if method == "neumann":
        cap = max_iters or 100000
        X = rhs.copy()
        term = rhs
        converged = not np.any(rhs)
        it = 0
        bound = cg_tol * float(np.linalg.norm(rhs))
        while not converged and it < cap:
            it += 1
            term = op(term)
            X = X + term
            if np.linalg.norm(term) <= bound:
                converged = True
    elif method == "cg":
        cap = max_iters or 20 * n + 100
        res = conjugate_gradient_normal(lambda v: v - op(v), lambda v: v - op_t(v), rhs,
                                        tol=cg_tol, max_iters=cap)
        X, it, converged = res.x, res.iterations, res.converged
    else:
        raise ValueError(f"unknown method {method!r}")
    if not converged:
        warnings.warn(f"implicit_diff ({method}) stopped after {it} iterations before tol={cg_tol:g}",
                      ConvergenceWarning, stacklevel=2)
    if mode == "jvp":
        return ImplicitResult(X, method, it, converged, rho)
    wb, up = problem.prox_vjp(w, a, X)
    ub = _acc((-a) * problem.cross_vjp(x, wb), up)
    return ImplicitResult(ub, method, it, converged, rho)
