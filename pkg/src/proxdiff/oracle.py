"""Reference derivatives of the solution mapping.

On an affine active manifold the derivative of ``x*(u)`` solves a small
symmetric positive definite system on the tangent space::

    H_T z = -r_T,   H_T = P (grad^2 f + lam * Hess_M R) P,
                    r_T = P (D_u grad f . du) + dlam * grad_M R(x*)

Both the Hessian and right-hand side are assembled as dense matrices of
tangent dimension and solved with conjugate gradients. Finite differences
of re-solved problems provide an independent check.
"""

from __future__ import annotations

import warnings
from typing import Callable, NamedTuple

import numpy as np

from .core import ConvergenceWarning
from .problems import ActivePattern, ParamPack
from .solver import SolverConfig, apg_solve, fixed_point_residual, pgd_solve

__all__ = [
    "CGResult",
    "conjugate_gradient",
    "conjugate_gradient_normal",
    "ReducedSystem",
    "SingularSystemError",
    "build_reduced_system",
    "solve_dpsi_jvp",
    "solve_dpsi_vjp",
    "solve_reference",
    "PatternChangeError",
    "finite_difference_jvp",
    "finite_difference_vjp_pairing",
]


class CGResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float
    breakdown: bool = False


def conjugate_gradient(apply_A: Callable, b, tol: float = 1e-12, max_iters: int | None = None,
                       x0=None) -> CGResult:
    """Solve ``A x = b`` for a symmetric positive definite action `apply_A`.

    Stops when ``||b - A x|| <= tol * ||b||``. A non-positive curvature
    ``<p, A p> <= 0`` stops the iteration with ``breakdown=True``.
    """
    b = np.asarray(b, dtype=np.float64)
    if max_iters is None:
        max_iters = 10 * b.size + 10
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply_A(x) if x0 is not None else b.copy()
    bnorm = float(np.linalg.norm(b))
    target = tol * bnorm
    rr = float(np.vdot(r, r))
    if np.sqrt(rr) <= target:
        return CGResult(x, True, 0, float(np.sqrt(rr)))
    p = r.copy()
    for it in range(1, max_iters + 1):
        Ap = apply_A(p)
        curv = float(np.vdot(p, Ap))
        if curv <= 0.0:
            return CGResult(x, False, it, float(np.sqrt(rr)), True)
        step = rr / curv
        x = x + step * p
        r = r - step * Ap
        rr_new = float(np.vdot(r, r))
        if np.sqrt(rr_new) <= target:
            return CGResult(x, True, it, float(np.sqrt(rr_new)))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(x, False, max_iters, float(np.sqrt(rr)))


def conjugate_gradient_normal(apply_A: Callable, apply_At: Callable, b, tol: float = 1e-12,
                              max_iters: int | None = None) -> CGResult:
    """Conjugate gradients on ``A^T A x = A^T b`` (CGLS form) for square or
    nonsymmetric ``A``.

    The stopping test uses the residual of the original system,
    ``||b - A x|| <= tol * ||b||``.
    """
    b = np.asarray(b, dtype=np.float64)
    if max_iters is None:
        max_iters = 20 * b.size + 20
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = float(np.linalg.norm(b))
    target = tol * bnorm
    if bnorm == 0.0:
        return CGResult(x, True, 0, 0.0)
    s = apply_At(r)
    p = s.copy()
    gamma = float(np.vdot(s, s))
    rnorm = bnorm
    for it in range(1, max_iters + 1):
        q = apply_A(p)
        qq = float(np.vdot(q, q))
        if qq == 0.0 or gamma == 0.0:
            return CGResult(x, False, it, rnorm, True)
        step = gamma / qq
        x = x + step * p
        r = r - step * q
        rnorm = float(np.linalg.norm(r))
        if rnorm <= target:
            return CGResult(x, True, it, rnorm)
        s = apply_At(r)
        gamma_new = float(np.vdot(s, s))
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return CGResult(x, False, max_iters, rnorm)


# ---------------------------------------------------------------------------
# reduced system


class SingularSystemError(np.linalg.LinAlgError):
    """The reduced Hessian is not positive definite (restricted positive
    definiteness fails at this solution)."""


class ReducedSystem(NamedTuple):
    pattern: ActivePattern
    hessian_reduced: np.ndarray
    rhs_jvp: np.ndarray | None
    min_eigenvalue: float
    var_shape: tuple


def _regularizer_hessian(problem, x, pattern: ActivePattern) -> np.ndarray:
    """Riemannian Hessian of ``lam * R`` on the tangent space, flattened
    row-major over the active entries/rows."""
    d = pattern.dim_tangent
    if pattern.kind == "entrywise":
        return np.zeros((d, d))
    lam = problem.nonsmooth.weight
    L = pattern.row_length
    rows = np.asarray(x)[pattern.mask]
    blocks = np.zeros((d, d))
    for i, xr in enumerate(rows):
        n = np.linalg.norm(xr)
        sl = slice(i * L, (i + 1) * L)
        blocks[sl, sl] = lam * (np.eye(L) / n - np.outer(xr, xr) / n**3)
    return blocks


def build_reduced_system(problem, x_star, du: ParamPack | None = None,
                         atol: float = 1e-10) -> ReducedSystem:
    """Assemble the tangent-space Hessian and (optionally) the JVP right-hand side.

    Raises
    ------
    SingularSystemError
        If the reduced Hessian has a nonpositive eigenvalue.
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    pattern = problem.identify_pattern(x_star, atol)
    A = problem.smooth.design
    S = pattern.mask
    d = pattern.dim_tangent
    if d == 0:
        rhs = None if du is None else np.zeros(0)
        return ReducedSystem(pattern, np.zeros((0, 0)), rhs, np.inf, x_star.shape)
    gram = A[:, S].T @ A[:, S]
    if pattern.kind == "rowwise":
        gram = np.kron(gram, np.eye(pattern.row_length))
    H = gram + _regularizer_hessian(problem, x_star, pattern)
    H = 0.5 * (H + H.T)
    min_eig = float(np.linalg.eigvalsh(H)[0])
    if not min_eig > 0:
        raise SingularSystemError(
            f"reduced Hessian has smallest eigenvalue {min_eig:.3e}; restricted positive "
            "definiteness fails at this solution"
        )
    rhs = None
    if du is not None:
        rhs = _rhs(problem, x_star, pattern, du)
    return ReducedSystem(pattern, H, rhs, min_eig, x_star.shape)


def _rhs(problem, x, pattern, du):
    full = problem.cross_jvp(x, du)
    if du.reg_weight:
        full = full + float(du.reg_weight) * problem.nonsmooth.riemannian_grad(x, pattern)
    return pattern.restrict(full)


def _cg_dense(H, rhs, tol):
    res = conjugate_gradient(lambda v: H @ v, rhs, tol=tol, max_iters=10 * rhs.size + 10)
    if not res.converged:
        warnings.warn(f"reduced-system CG stopped at residual {res.residual_norm:.3e}",
                      ConvergenceWarning, stacklevel=3)
    return res.x


def solve_dpsi_jvp(sys: ReducedSystem, tol: float = 1e-13):
    """``D psi(u) . du`` in full space (zeros off the pattern)."""
    if sys.rhs_jvp is None:
        raise ValueError("reduced system was built without a tangent direction")
    if sys.pattern.dim_tangent == 0:
        return np.zeros(sys.var_shape)
    z = _cg_dense(sys.hessian_reduced, -sys.rhs_jvp, tol)
    return sys.pattern.embed(z, sys.var_shape)


def solve_dpsi_vjp(problem, x_star, xbar, tol: float = 1e-13, atol: float = 1e-10) -> ParamPack:
    """``xbar . D psi(u)`` as a parameter cotangent."""
    sys = build_reduced_system(problem, x_star, None, atol)
    pattern = sys.pattern
    x_star = np.asarray(x_star, dtype=np.float64)
    if pattern.dim_tangent == 0:
        return ParamPack(design=np.zeros_like(problem.smooth.design),
                         target=np.zeros_like(problem.smooth.target), reg_weight=0.0)
    z = _cg_dense(sys.hessian_reduced, pattern.restrict(xbar), tol)
    zf = pattern.embed(z, x_star.shape)
    ub = problem.cross_vjp(x_star, zf)
    lam_bar = float(np.vdot(zf, problem.nonsmooth.riemannian_grad(x_star, pattern)))
    return (-1.0) * (ub + ParamPack(reg_weight=lam_bar))


# ---------------------------------------------------------------------------
# reference solutions and finite differences


def solve_reference(problem, x0=None, tol: float = 1e-12, max_iters: int = 200000):
    """Minimizer with fixed-point residual below `tol` at step ``1/L``.

    Runs the accelerated method and finishes with plain proximal gradient
    steps if the accelerated run stalls above `tol`.

    Returns
    -------
    x : ndarray
    residual : float
    """
    x = problem.zeros() if x0 is None else np.array(x0, dtype=np.float64)
    alpha = 1.0 / problem.lipschitz()
    x, _ = apg_solve(problem, x, SolverConfig(step=alpha, momentum="nesterov",
                                               max_iters=max_iters // 2, tol=tol))
    res = fixed_point_residual(problem, x, alpha)
    if res >= tol:
        x, _ = pgd_solve(problem, x, SolverConfig(step=alpha, momentum="zero",
                                                  max_iters=max_iters // 2, tol=tol))
        res = fixed_point_residual(problem, x, alpha)
    if res >= tol:
        warnings.warn(f"reference solve reached residual {res:.3e} > {tol:g}",
                      ConvergenceWarning, stacklevel=2)
    return x, res


class PatternChangeError(RuntimeError):
    """Perturbed re-solves identified a different active pattern."""


def finite_difference_jvp(problem, x_star, du: ParamPack, h: float = 1e-5,
                          tol: float = 1e-13, atol: float = 1e-10):
    """Central difference ``(psi(u + h du) - psi(u - h du)) / 2h`` by re-solving."""
    base = problem.identify_pattern(x_star, atol)
    sols = []
    for sgn in (1.0, -1.0):
        p = problem.perturbed(du, sgn * h)
        x, _ = solve_reference(p, x_star, tol=tol)
        if p.identify_pattern(x, atol) != base:
            raise PatternChangeError("active pattern changed under the perturbation")
        sols.append(x)
    return (sols[0] - sols[1]) / (2.0 * h)


def finite_difference_vjp_pairing(problem, x_star, xbar, du: ParamPack, h: float = 1e-5,
                                  tol: float = 1e-13) -> float:
    """``<xbar, D psi(u) du>`` by central differences, to test a VJP along `du`."""
    return float(np.vdot(xbar, finite_difference_jvp(problem, x_star, du, h, tol)))
