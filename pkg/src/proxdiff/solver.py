"""Proximal gradient descent and its accelerated (inertial) variant.

One iteration of the accelerated method reads::

    y(k)   = (1 + beta_k) x(k) - beta_k x(k-1)
    w(k)   = y(k) - alpha_k grad_x f(y(k), u)
    x(k+1) = prox_{alpha_k g}(w(k), u)

with ``x(-1) = x(0)``. Setting every ``beta_k`` to zero gives plain proximal
gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "DivergenceError",
    "nesterov_beta",
    "shifted_nesterov_beta",
    "SolverConfig",
    "SolveTrace",
    "apg_solve",
    "pgd_solve",
    "pgd_map",
    "fixed_point_residual",
]


class DivergenceError(RuntimeError):
    """The objective blew up during a solve."""


def nesterov_beta(k: int, q: float = 5.0) -> float:
    """``(k - 1) / (k + q)`` clamped to ``[0, 1]``."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    return min(max((k - 1.0) / (k + q), 0.0), 1.0)


def shifted_nesterov_beta(k: int, q: float = 5.0) -> float:
    """``(k - q) / (k + 1)`` clamped to ``[0, 1]``; the rule used by the denoising solver."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    return min(max((k - q) / (k + 1.0), 0.0), 1.0)


MomentumRule = Union[str, float, Callable[[int], float]]


@dataclass(frozen=True)
class SolverConfig:
    """Settings for :func:`apg_solve`.

    Parameters
    ----------
    step : float, sequence of float or None
        Constant step ``alpha`` or one step per iteration. ``None`` means
        ``1 / L`` with ``L`` the Lipschitz constant of the gradient.
    momentum : {"zero", "nesterov"}, float or callable
        ``"zero"`` gives PGD, ``"nesterov"`` uses :func:`nesterov_beta` with
        parameter `q`, a float is a constant ``beta`` and a callable maps
        ``k`` to ``beta_k``.
    max_iters : int
    tol : float
        Stop once ``||x(k) - pgd(x(k))|| < tol``. Zero disables the test.
    record_trace : bool
        Keep ``x(k), y(k), w(k)`` for reverse-mode differentiation.
    """

    step: Union[float, Sequence[float], None] = None
    momentum: MomentumRule = "nesterov"
    q: float = 5.0
    max_iters: int = 1000
    tol: float = 0.0
    record_trace: bool = False

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if self.momentum == "nesterov" and not self.q > 2:
            raise ValueError(f"nesterov momentum needs q > 2, got {self.q}")
        if isinstance(self.momentum, str) and self.momentum not in ("zero", "nesterov"):
            raise ValueError(f"unknown momentum rule {self.momentum!r}")

    def beta(self, k: int) -> float:
        m = self.momentum
        if m == "zero":
            return 0.0
        if m == "nesterov":
            return nesterov_beta(k, self.q)
        if callable(m):
            return float(m(k))
        return float(m)

    def alpha(self, k: int, default: float) -> float:
        s = self.step
        if s is None:
            return default
        if np.isscalar(s):
            return float(s)
        return float(s[k]) if k < len(s) else float(s[-1])


@dataclass
class SolveTrace:
    """Record of a solve; also the tape for unrolled reverse differentiation.

    ``x[k]`` for ``k = 0..K``, ``y[k]``, ``w[k]``, ``alphas[k]`` and
    ``betas[k]`` for ``k = 0..K-1``; ``residuals[k] = ||x(k) - pgd(x(k))||``
    where computed (NaN otherwise). Array fields are ``None`` when the trace
    was not recorded.
    """

    iterations: int
    final_step: float
    final_beta: float
    next_beta: float
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    w: np.ndarray | None = None
    alphas: np.ndarray | None = None
    betas: np.ndarray | None = None
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def recorded(self) -> bool:
        return self.x is not None

    @property
    def nbytes(self) -> int:
        """Bytes held by the per-iteration arrays."""
        return sum(a.nbytes for a in (self.x, self.y, self.w, self.alphas, self.betas)
                   if a is not None)

    def extrapolated(self, k: int):
        """Recompute ``y(k)`` from the stored iterates."""
        prev = self.x[k - 1] if k > 0 else self.x[0]
        b = self.betas[k]
        return (1.0 + b) * self.x[k] - b * prev


def pgd_map(problem, x, alpha: float):
    """``prox_{alpha g}(x - alpha grad_x f(x))``."""
    return problem.prox(x - alpha * problem.grad(x), alpha)


def fixed_point_residual(problem, x, alpha: float) -> float:
    """``||x - pgd(x)||_2``."""
    return float(np.linalg.norm(x - pgd_map(problem, x, alpha)))


def _default_step(problem) -> float:
    return 1.0 / problem.lipschitz()


def _check_step(problem, alpha):
    if not alpha > 0:
        raise ValueError(f"step must be positive, got {alpha}")
    L = problem.lipschitz()
    if L > 0 and alpha * L >= 2.0:
        raise ValueError(f"step {alpha:g} violates alpha < 2/L = {2.0 / L:g}")


_GUARD_EVERY = 16


def apg_solve(problem, x0, cfg: SolverConfig = SolverConfig()):
    """Run the accelerated proximal gradient method.

    Parameters
    ----------
    problem : ProblemInstance or compatible
    x0 : ndarray
        Starting point; ``x(-1)`` is set to the same value.
    cfg : SolverConfig

    Returns
    -------
    x : ndarray
        Final iterate.
    trace : SolveTrace

    Raises
    ------
    DivergenceError
        If the objective exceeds ``1e6 * max(|F(x0)|, 1)``.
    """
    x = np.array(x0, dtype=np.float64)
    x_prev = x
    K = cfg.max_iters
    default = _default_step(problem) if cfg.step is None else None
    want_res = cfg.tol > 0 or cfg.record_trace
    rec = cfg.record_trace

    if rec:
        xs = np.empty((K + 1,) + x.shape)
        ys = np.empty((K,) + x.shape)
        ws = np.empty((K,) + x.shape)
        xs[0] = x
    alphas = np.empty(K)
    betas = np.empty(K)
    residuals = np.full(K + 1, np.nan)

    f0 = problem.objective(x)
    limit = 1e6 * max(abs(f0), 1.0)
    checked_alphas = set()
    k = 0
    for k in range(K):
        alpha = cfg.alpha(k, default)
        if alpha not in checked_alphas:
            _check_step(problem, alpha)
            checked_alphas.add(alpha)
        beta = cfg.beta(k)
        y = (1.0 + beta) * x - beta * x_prev
        gy = problem.grad(y)
        if want_res:
            # residual of x(k); reuses the gradient when y(k) == x(k)
            gx = gy if beta == 0.0 else problem.grad(x)
            residuals[k] = np.linalg.norm(x - problem.prox(x - alpha * gx, alpha))
            if cfg.tol > 0 and residuals[k] < cfg.tol:
                break
        w = y - alpha * gy
        x_prev, x = x, problem.prox(w, alpha)
        alphas[k] = alpha
        betas[k] = beta
        if rec:
            ys[k] = y
            ws[k] = w
            xs[k + 1] = x
        if (k + 1) % _GUARD_EVERY == 0 or k + 1 == K:
            fk = problem.objective(x)
            if not np.isfinite(fk) or fk > limit:
                raise DivergenceError(
                    f"objective {fk:.3e} exceeds {limit:.3e} at iteration {k + 1} "
                    f"(alpha={alpha:g}, beta={beta:g})"
                )
    else:
        k = K
    iters = k
    if want_res and iters == K and K > 0:
        a_last = alphas[K - 1]
        residuals[K] = fixed_point_residual(problem, x, a_last)

    final_step = float(alphas[iters - 1]) if iters else cfg.alpha(0, default if default else 1.0)
    trace = SolveTrace(
        iterations=iters,
        final_step=final_step,
        final_beta=float(betas[iters - 1]) if iters else 0.0,
        next_beta=cfg.beta(iters),
        residuals=residuals[: iters + 1],
    )
    if rec:
        trace.x = xs[: iters + 1]
        trace.y = ys[:iters]
        trace.w = ws[:iters]
        trace.alphas = alphas[:iters]
        trace.betas = betas[:iters]
    return x, trace


def pgd_solve(problem, x0, cfg: SolverConfig = SolverConfig()):
    """Proximal gradient descent: :func:`apg_solve` with every ``beta_k = 0``.

    Uses a loop without extrapolation; the trace it produces is bitwise
    identical to the accelerated path run with zero momentum.
    """
    x = np.array(x0, dtype=np.float64)
    K = cfg.max_iters
    default = _default_step(problem) if cfg.step is None else None
    want_res = cfg.tol > 0 or cfg.record_trace
    rec = cfg.record_trace
    if rec:
        xs = np.empty((K + 1,) + x.shape)
        ws = np.empty((K,) + x.shape)
        xs[0] = x
    alphas = np.empty(K)
    residuals = np.full(K + 1, np.nan)
    f0 = problem.objective(x)
    limit = 1e6 * max(abs(f0), 1.0)
    checked = set()
    k = 0
    for k in range(K):
        alpha = cfg.alpha(k, default)
        if alpha not in checked:
            _check_step(problem, alpha)
            checked.add(alpha)
        g = problem.grad(x)
        w = x - alpha * g
        if want_res:
            residuals[k] = np.linalg.norm(x - problem.prox(w, alpha))
            if cfg.tol > 0 and residuals[k] < cfg.tol:
                break
        x = problem.prox(w, alpha)
        alphas[k] = alpha
        if rec:
            ws[k] = w
            xs[k + 1] = x
        if (k + 1) % _GUARD_EVERY == 0 or k + 1 == K:
            fk = problem.objective(x)
            if not np.isfinite(fk) or fk > limit:
                raise DivergenceError(f"objective {fk:.3e} exceeds {limit:.3e} at iteration {k + 1}")
    else:
        k = K
    iters = k
    if want_res and iters == K and K > 0:
        residuals[K] = fixed_point_residual(problem, x, alphas[K - 1])
    trace = SolveTrace(
        iterations=iters,
        final_step=float(alphas[iters - 1]) if iters else cfg.alpha(0, default if default else 1.0),
        final_beta=0.0,
        next_beta=0.0,
        residuals=residuals[: iters + 1],
    )
    if rec:
        trace.x = xs[: iters + 1]
        trace.y = xs[:iters].copy()
        trace.w = ws[:iters]
        trace.alphas = alphas[:iters]
        trace.betas = np.zeros(iters)
    return x, trace
