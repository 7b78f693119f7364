"""Parameterized composite problems ``min_x f(x, u) + g(x, u)``.

The smooth part is the least-squares data term ``0.5 * ||A x - b||^2`` and the
nonsmooth part is ``lam * ||x||_1`` (Lasso) or ``lam * ||X||_{2,1}`` (Group
Lasso, rows of an ``(N, L)`` matrix). Iterates keep their natural shape:
``(N,)`` for Lasso and ``(N, L)`` for Group Lasso.

Parameters ``u = (A, b, lam)`` are bundled in :class:`ParamPack`. The same
class carries tangents ``u_dot`` and cotangents ``u_bar``; a field set to
``None`` stands for an exact zero, which keeps the common ``lam``-only
direction cheap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import as_matrix, spectral_radius

__all__ = [
    "ProxKinkWarning",
    "ParamPack",
    "param_vdot",
    "LeastSquares",
    "lasso_smooth",
    "l1_prox",
    "l1_prox_jvp",
    "group_prox",
    "group_prox_jvp",
    "ActivePattern",
    "L1Norm",
    "GroupL21Norm",
    "ProblemInstance",
    "lasso_problem",
    "group_lasso_problem",
    "subgrad_project",
    "identify_pattern",
    "NondegeneracyReport",
    "check_nondegeneracy",
]


class ProxKinkWarning(UserWarning):
    """A prox derivative was requested exactly on a kink of the prox."""


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _scale(c, a):
    return None if a is None else c * a


@dataclass(frozen=True)
class ParamPack:
    """Parameters ``(A, b, lam)`` or a tangent/cotangent of the same shape.

    `design` is ``A`` (M x N), `target` is ``b`` (length M) or ``B``
    (M x L), `reg_weight` is ``lam``. Any field may be ``None`` for a zero
    tangent/cotangent component.
    """

    design: np.ndarray | None = None
    target: np.ndarray | None = None
    reg_weight: float | None = None

    def __add__(self, other: "ParamPack") -> "ParamPack":
        if not isinstance(other, ParamPack):
            return NotImplemented
        return ParamPack(_add(self.design, other.design), _add(self.target, other.target),
                         _add(self.reg_weight, other.reg_weight))

    def __sub__(self, other: "ParamPack") -> "ParamPack":
        return self + (-1.0) * other

    def __mul__(self, c) -> "ParamPack":
        c = float(c)
        return ParamPack(_scale(c, self.design), _scale(c, self.target), _scale(c, self.reg_weight))

    __rmul__ = __mul__

    def vdot(self, other: "ParamPack") -> float:
        """Euclidean pairing of two packs; ``None`` fields contribute zero."""
        total = 0.0
        if self.design is not None and other.design is not None:
            total += float(np.vdot(self.design, other.design))
        if self.target is not None and other.target is not None:
            total += float(np.vdot(self.target, other.target))
        if self.reg_weight is not None and other.reg_weight is not None:
            total += float(self.reg_weight) * float(other.reg_weight)
        return total

    def norm(self) -> float:
        return float(np.sqrt(self.vdot(self)))

    def as_vector(self, like: "ParamPack") -> np.ndarray:
        """Flatten into one vector, using `like` to size ``None`` fields."""
        parts = []
        for mine, ref in ((self.design, like.design), (self.target, like.target)):
            if ref is None:
                continue
            parts.append(np.zeros(np.size(ref)) if mine is None else np.ravel(mine))
        parts.append(np.array([0.0 if self.reg_weight is None else float(self.reg_weight)]))
        return np.concatenate(parts)


def param_vdot(a, b) -> float:
    """Pairing for parameter tangents: :class:`ParamPack` or plain arrays."""
    if isinstance(a, ParamPack):
        return a.vdot(b)
    return float(np.vdot(a, b))


# ---------------------------------------------------------------------------
# smooth term


class LeastSquares:
    """``f(x, u) = 0.5 * ||A x - b||^2`` with derivatives in ``x`` and ``u``.

    Works for a vector target (``x`` of shape ``(N,)``) and for a matrix
    target (``X`` of shape ``(N, L)``, Frobenius norm).
    """

    def __init__(self, params: ParamPack):
        A = as_matrix(params.design, "design")
        b = np.asarray(params.target, dtype=np.float64)
        if b.ndim not in (1, 2) or b.shape[0] != A.shape[0]:
            raise ValueError(f"target shape {b.shape} incompatible with design shape {A.shape}")
        if not np.all(np.isfinite(b)):
            raise ValueError("target contains non-finite entries")
        self.design = A
        self.target = b
        self._lipschitz = None

    @property
    def var_shape(self) -> tuple:
        return (self.design.shape[1],) + self.target.shape[1:]

    def residual(self, x):
        return self.design @ x - self.target

    def value(self, x) -> float:
        r = self.residual(x)
        return 0.5 * float(np.vdot(r, r))

    def grad(self, x):
        return self.design.T @ self.residual(x)

    def hvp(self, x, v):
        return self.design.T @ (self.design @ v)

    def cross_jvp(self, x, du: ParamPack):
        """``D_u grad_x f(x, u) . du`` for ``du = (dA, db, dlam)``."""
        out = np.zeros(self.var_shape)
        if du.design is not None:
            dA = du.design
            out += dA.T @ self.residual(x) + self.design.T @ (dA @ x)
        if du.target is not None:
            out -= self.design.T @ du.target
        return out

    def cross_vjp(self, x, v) -> ParamPack:
        """Row-vector form ``v . D_u grad_x f(x, u)`` as a parameter cotangent."""
        r = self.residual(x)
        Av = self.design @ v
        if v.ndim == 1:
            dA = np.outer(r, v) + np.outer(Av, x)
        else:
            dA = r @ v.T + Av @ x.T
        return ParamPack(design=dA, target=-Av, reg_weight=None)

    def lipschitz(self) -> float:
        """``||A^T A||_op`` by power iteration on the Gram matrix."""
        if self._lipschitz is None:
            self._lipschitz = spectral_radius(self.design.T @ self.design)
        return self._lipschitz


def lasso_smooth(params: ParamPack) -> LeastSquares:
    return LeastSquares(params)


# ---------------------------------------------------------------------------
# prox maps and their derivatives


def _check_threshold(t):
    if t < 0:
        raise ValueError(f"threshold must be nonnegative, got {t}")


def l1_prox(w, t: float):
    """Soft-thresholding ``sign(w) * max(|w| - t, 0)``."""
    _check_threshold(t)
    w = np.asarray(w, dtype=np.float64)
    return np.sign(w) * np.maximum(np.abs(w) - t, 0.0)


def _warn_ties(count, what):
    if count:
        warnings.warn(f"{count} {what} exactly on the prox threshold; treated as inactive",
                      ProxKinkWarning, stacklevel=3)


def l1_prox_jvp(w, t: float, dw, dt: float = 0.0):
    """Directional derivative of soft-thresholding.

    Entries with ``|w_i| == t`` count as inactive (derivative zero).
    """
    w = np.asarray(w, dtype=np.float64)
    absw = np.abs(w)
    if t > 0:
        _warn_ties(int(np.count_nonzero(absw == t)), "entries")
    active = absw > t
    out = np.where(active, dw, 0.0)
    if dt:
        out = out - np.where(active, np.sign(w), 0.0) * dt
    return out


def l1_prox_vjp(w, t: float, xbar):
    """Transpose of :func:`l1_prox_jvp`: returns ``(w_bar, t_bar)``."""
    w = np.asarray(w, dtype=np.float64)
    active = np.abs(w) > t
    wbar = np.where(active, xbar, 0.0)
    tbar = -float(np.sum(np.sign(w[active]) * np.asarray(xbar)[active]))
    return wbar, tbar


def _row_norms(W):
    return np.sqrt(np.sum(W * W, axis=1))


def group_prox(W, t: float):
    """Row-wise block soft-thresholding ``max(1 - t/||W_r||, 0) W_r``."""
    _check_threshold(t)
    W = np.asarray(W, dtype=np.float64)
    norms = _row_norms(W)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norms > t, 1.0 - t / norms, 0.0)
    return factor[:, None] * W


def group_prox_jvp(W, t: float, dW, dt: float = 0.0):
    """Directional derivative of :func:`group_prox`; rows with ``||W_r|| == t`` are inactive."""
    W = np.asarray(W, dtype=np.float64)
    dW = np.asarray(dW, dtype=np.float64)
    norms = _row_norms(W)
    if t > 0:
        _warn_ties(int(np.count_nonzero(norms == t)), "rows")
    active = norms > t
    out = np.zeros_like(W)
    n = norms[active][:, None]
    Wa, dWa = W[active], dW[active]
    inner = np.sum(Wa * dWa, axis=1, keepdims=True)
    out[active] = (1.0 - t / n) * dWa + (t / n**3) * inner * Wa - (Wa / n) * dt
    return out


def group_prox_vjp(W, t: float, Xbar):
    """Transpose of :func:`group_prox_jvp` (the ``W`` Jacobian is symmetric)."""
    W = np.asarray(W, dtype=np.float64)
    Xbar = np.asarray(Xbar, dtype=np.float64)
    norms = _row_norms(W)
    active = norms > t
    n = norms[active][:, None]
    Wa, Xa = W[active], Xbar[active]
    inner = np.sum(Wa * Xa, axis=1, keepdims=True)
    Wbar = np.zeros_like(W)
    Wbar[active] = (1.0 - t / n) * Xa + (t / n**3) * inner * Wa
    tbar = -float(np.sum(inner / n))
    return Wbar, tbar


# ---------------------------------------------------------------------------
# active patterns


@dataclass(frozen=True)
class ActivePattern:
    """Support (entrywise) or row support (rowwise) of a point.

    For an affine active manifold the tangent space is the set of points
    vanishing off the mask, so projection is masking.
    """

    kind: str
    mask: np.ndarray
    row_length: int = 1

    def __post_init__(self):
        if self.kind not in ("entrywise", "rowwise"):
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @property
    def dim_tangent(self) -> int:
        return int(np.count_nonzero(self.mask)) * self.row_length

    def project(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "entrywise":
            return np.where(self.mask, v, 0.0)
        return np.where(self.mask[:, None], v, 0.0)

    def restrict(self, v):
        """Coordinates of `v` on the tangent space, as a flat vector."""
        return np.asarray(v)[self.mask].ravel()

    def embed(self, z, shape):
        """Inverse of :meth:`restrict`: zero-fill off the mask."""
        out = np.zeros(shape)
        out[self.mask] = np.reshape(z, out[self.mask].shape)
        return out

    def __eq__(self, other):
        if not isinstance(other, ActivePattern):
            return NotImplemented
        return (self.kind == other.kind and self.row_length == other.row_length
                and np.array_equal(self.mask, other.mask))

    def __hash__(self):
        return hash((self.kind, self.row_length, self.mask.tobytes()))


# ---------------------------------------------------------------------------
# nonsmooth terms


class L1Norm:
    """``g(x) = lam * ||x||_1``."""

    kind = "entrywise"

    def __init__(self, weight: float):
        self.weight = float(weight)

    def value(self, x) -> float:
        return self.weight * float(np.sum(np.abs(x)))

    def prox(self, w, step):
        return l1_prox(w, step * self.weight)

    def prox_jvp(self, w, step, dw, dweight=None):
        dt = 0.0 if dweight is None else step * float(dweight)
        return l1_prox_jvp(w, step * self.weight, dw, dt)

    def prox_vjp(self, w, step, xbar):
        """Returns ``(w_bar, weight_bar)``."""
        wbar, tbar = l1_prox_vjp(w, step * self.weight, xbar)
        return wbar, step * tbar

    def subgrad_project(self, x, v):
        x = np.asarray(x, dtype=np.float64)
        lam = self.weight
        return np.where(x != 0, lam * np.sign(x), np.clip(v, -lam, lam))

    def identify_pattern(self, x, atol=1e-10) -> ActivePattern:
        if atol < 0:
            raise ValueError("atol must be nonnegative")
        return ActivePattern("entrywise", np.abs(np.asarray(x)) > atol)

    def riemannian_grad(self, x, pattern: ActivePattern):
        """Gradient of the norm along its active manifold (divided by ``lam``)."""
        return pattern.project(np.sign(x))

    def dual_magnitudes(self, v):
        """Per-coordinate magnitudes used by the nondegeneracy test."""
        return np.abs(v)

    def is_subgradient(self, x, v, tol=1e-10) -> bool:
        x = np.asarray(x)
        on = x != 0
        lam = self.weight
        return bool(np.all(np.abs(v[on] - lam * np.sign(x[on])) <= tol * max(1.0, lam))
                    and np.all(np.abs(v[~on]) <= lam * (1 + tol)))


class GroupL21Norm:
    """``g(X) = lam * sum_r ||X_r||_2`` over the rows of ``X``."""

    kind = "rowwise"

    def __init__(self, weight: float):
        self.weight = float(weight)

    def value(self, X) -> float:
        return self.weight * float(np.sum(_row_norms(np.asarray(X))))

    def prox(self, W, step):
        return group_prox(W, step * self.weight)

    def prox_jvp(self, W, step, dW, dweight=None):
        dt = 0.0 if dweight is None else step * float(dweight)
        return group_prox_jvp(W, step * self.weight, dW, dt)

    def prox_vjp(self, W, step, Xbar):
        Wbar, tbar = group_prox_vjp(W, step * self.weight, Xbar)
        return Wbar, step * tbar

    def subgrad_project(self, X, V):
        X = np.asarray(X, dtype=np.float64)
        V = np.asarray(V, dtype=np.float64)
        lam = self.weight
        xn = _row_norms(X)
        vn = _row_norms(V)
        on = xn > 0
        out = np.empty_like(X)
        out[on] = lam * X[on] / xn[on][:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            shrink = np.where(vn > lam, lam / vn, 1.0)
        out[~on] = V[~on] * shrink[~on][:, None]
        return out

    def identify_pattern(self, X, atol=1e-10) -> ActivePattern:
        if atol < 0:
            raise ValueError("atol must be nonnegative")
        X = np.asarray(X)
        return ActivePattern("rowwise", _row_norms(X) > atol, row_length=X.shape[1])

    def riemannian_grad(self, X, pattern: ActivePattern):
        X = np.asarray(X, dtype=np.float64)
        n = _row_norms(X)
        out = np.zeros_like(X)
        m = pattern.mask
        out[m] = X[m] / n[m][:, None]
        return out

    def dual_magnitudes(self, V):
        return _row_norms(np.asarray(V))

    def is_subgradient(self, X, V, tol=1e-10) -> bool:
        X = np.asarray(X)
        V = np.asarray(V)
        lam = self.weight
        xn = _row_norms(X)
        on = xn > 0
        expected = lam * X[on] / xn[on][:, None]
        return bool(np.all(np.abs(V[on] - expected) <= tol * max(1.0, lam))
                    and np.all(_row_norms(V[~on]) <= lam * (1 + tol)))


# ---------------------------------------------------------------------------
# composite problem


class ProblemInstance:
    """``F(x, u) = 0.5 * ||A x - b||^2 + lam * R(x)`` bound to parameters ``u``.

    This is the interface the solvers and derivative engines consume:
    ``grad``, ``hvp``, ``cross_jvp``, ``cross_vjp`` for the smooth part and
    ``prox``, ``prox_jvp``, ``prox_vjp``, ``subgrad_project`` for the
    nonsmooth part. Parameter tangents/cotangents are :class:`ParamPack`.
    """

    def __init__(self, params: ParamPack, regularizer: str = "l1"):
        if params.reg_weight is None or not np.isfinite(params.reg_weight) or params.reg_weight <= 0:
            raise ValueError(f"reg_weight must be positive, got {params.reg_weight}")
        self.smooth = LeastSquares(params)
        target = self.smooth.target
        if regularizer == "l1":
            if target.ndim != 1:
                raise ValueError("l1 problems need a vector target")
            self.nonsmooth = L1Norm(params.reg_weight)
        elif regularizer == "l21":
            if target.ndim != 2:
                raise ValueError("l2,1 problems need a matrix target")
            self.nonsmooth = GroupL21Norm(params.reg_weight)
        else:
            raise ValueError(f"unknown regularizer {regularizer!r}")
        self.regularizer = regularizer
        self.params = ParamPack(self.smooth.design, target, float(params.reg_weight))

    @property
    def var_shape(self) -> tuple:
        return self.smooth.var_shape

    def zeros(self):
        return np.zeros(self.var_shape)

    def with_params(self, params: ParamPack) -> "ProblemInstance":
        return ProblemInstance(params, self.regularizer)

    def perturbed(self, du: ParamPack, h: float) -> "ProblemInstance":
        """Instance at ``u + h * du``."""
        p = self.params
        return ProblemInstance(
            ParamPack(
                p.design if du.design is None else p.design + h * du.design,
                p.target if du.target is None else p.target + h * du.target,
                p.reg_weight if du.reg_weight is None else p.reg_weight + h * du.reg_weight,
            ),
            self.regularizer,
        )

    def objective(self, x) -> float:
        return self.smooth.value(x) + self.nonsmooth.value(x)

    def grad(self, x):
        return self.smooth.grad(x)

    def hvp(self, x, v):
        return self.smooth.hvp(x, v)

    def cross_jvp(self, x, du: ParamPack):
        return self.smooth.cross_jvp(x, du)

    def cross_vjp(self, x, v) -> ParamPack:
        return self.smooth.cross_vjp(x, v)

    def lipschitz(self) -> float:
        return self.smooth.lipschitz()

    def prox(self, w, step):
        return self.nonsmooth.prox(w, step)

    def prox_jvp(self, w, step, dw, du: ParamPack):
        return self.nonsmooth.prox_jvp(w, step, dw, du.reg_weight)

    def prox_vjp(self, w, step, xbar):
        """Returns ``(w_bar, u_bar)`` with ``u_bar`` a :class:`ParamPack`."""
        wbar, lbar = self.nonsmooth.prox_vjp(w, step, xbar)
        return wbar, ParamPack(reg_weight=lbar)

    def zero_cotangent(self) -> ParamPack:
        return ParamPack(reg_weight=0.0)

    def zero_tangent(self) -> ParamPack:
        return ParamPack()

    def subgrad_project(self, x, v):
        return self.nonsmooth.subgrad_project(x, v)

    def identify_pattern(self, x, atol=1e-10) -> ActivePattern:
        return self.nonsmooth.identify_pattern(x, atol)


def lasso_problem(A, b, lam) -> ProblemInstance:
    return ProblemInstance(ParamPack(np.asarray(A, float), np.asarray(b, float), float(lam)), "l1")


def group_lasso_problem(A, B, lam) -> ProblemInstance:
    return ProblemInstance(ParamPack(np.asarray(A, float), np.asarray(B, float), float(lam)), "l21")


def subgrad_project(term, x, v):
    """Project `v` onto ``∂g(x)`` for a nonsmooth term (or a problem instance)."""
    return term.subgrad_project(x, v)


def identify_pattern(term, x, atol: float = 1e-10) -> ActivePattern:
    return term.identify_pattern(x, atol)


class NondegeneracyReport(NamedTuple):
    ok: bool
    min_gap: float


def check_nondegeneracy(params: ParamPack, x_star, margin: float = 0.0,
                        atol: float = 1e-10) -> NondegeneracyReport:
    """Check that off-pattern dual magnitudes stay below ``1 - margin``.

    With ``v = A^T (b - A x*) / lam`` the off-support entries (Lasso) or row
    norms (Group Lasso) of ``v`` must be strictly inside the unit ball. The
    regularizer is inferred from the shape of `x_star`.
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    term = L1Norm(1.0) if x_star.ndim == 1 else GroupL21Norm(1.0)
    smooth = LeastSquares(params)
    v = -smooth.grad(x_star) / params.reg_weight
    pattern = term.identify_pattern(x_star, atol)
    off = term.dual_magnitudes(v)[~pattern.mask]
    worst = float(off.max()) if off.size else 0.0
    gap = 1.0 - worst
    return NondegeneracyReport(ok=bool(worst <= 1.0 - margin and worst < 1.0), min_gap=gap)
