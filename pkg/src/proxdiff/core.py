"""Dense linear-algebra helpers, linear fixed-point iterations and rate fitting."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np

__all__ = [
    "ConvergenceWarning",
    "as_matrix",
    "as_vector",
    "LinearFPISchedule",
    "glfpi_run",
    "PowerIterationResult",
    "power_iteration",
    "spectral_radius",
    "RateReport",
    "fit_linear_rate",
]


class ConvergenceWarning(UserWarning):
    """An iterative routine stopped before meeting its tolerance."""


def as_matrix(entries, name="matrix") -> np.ndarray:
    """Return `entries` as a finite 2-D float64 array.

    Raises
    ------
    ValueError
        If the input is not two dimensional or holds NaN/Inf.
    """
    arr = np.array(entries, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_vector(entries, name="vector") -> np.ndarray:
    arr = np.array(entries, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


OperatorSeq = Union[Sequence[np.ndarray], Callable[[int], np.ndarray]]


@dataclass(frozen=True)
class LinearFPISchedule:
    """Operators ``B_k`` and offsets ``b(k)`` of ``x(k+1) = B_k x(k) + b(k)``.

    `operators` and `offsets` are either sequences indexed by ``k`` or
    callables ``k -> array``. Sequences shorter than the requested number of
    iterations are extended with the limits.
    """

    operators: OperatorSeq
    offsets: OperatorSeq
    limit_operator: np.ndarray
    limit_offset: np.ndarray

    def __post_init__(self):
        B = as_matrix(self.limit_operator, "limit_operator")
        b = as_vector(self.limit_offset, "limit_offset")
        if B.shape[0] != B.shape[1]:
            raise ValueError(f"limit_operator must be square, got {B.shape}")
        if b.shape[0] != B.shape[0]:
            raise ValueError("limit_offset dimension does not match limit_operator")
        object.__setattr__(self, "limit_operator", B)
        object.__setattr__(self, "limit_offset", b)

    @property
    def dim(self) -> int:
        return self.limit_offset.shape[0]

    def operator(self, k: int) -> np.ndarray:
        return _pick(self.operators, k, self.limit_operator)

    def offset(self, k: int) -> np.ndarray:
        return _pick(self.offsets, k, self.limit_offset)

    def fixed_point(self) -> np.ndarray:
        """Limit ``(I - B)^{-1} b`` by a direct dense solve."""
        n = self.dim
        return np.linalg.solve(np.eye(n) - self.limit_operator, self.limit_offset)


def _pick(seq, k, default):
    if callable(seq):
        return seq(k)
    if k < len(seq):
        return seq[k]
    return default


def glfpi_run(schedule: LinearFPISchedule, x0, iters: int) -> list[np.ndarray]:
    """Run ``x(k+1) = B_k x(k) + b(k)`` and return ``[x(0), ..., x(iters)]``."""
    x = as_vector(x0, "x0")
    n = schedule.dim
    if x.shape[0] != n:
        raise ValueError(f"x0 has dimension {x.shape[0]}, schedule has {n}")
    out = [x]
    for k in range(iters):
        B = np.asarray(schedule.operator(k), dtype=np.float64)
        b = np.asarray(schedule.offset(k), dtype=np.float64)
        if B.shape != (n, n) or b.shape != (n,):
            raise ValueError(f"operator/offset at step {k} have shapes {B.shape}, {b.shape}")
        x = B @ x + b
        out.append(x)
    return out


class PowerIterationResult(NamedTuple):
    radius: float
    vector: np.ndarray
    converged: bool
    iterations: int


def power_iteration(M, tol: float = 1e-12, max_iters: int = 10000, seed: int = 0) -> PowerIterationResult:
    """Estimate the largest eigenvalue magnitude of a square matrix.

    Starts from the normalized all-ones vector. If that vector is annihilated
    (or the iteration stagnates at zero) a single restart from a fixed
    pseudo-random vector drawn with `seed` is made.

    The estimate at each step is ``||M x||`` for the current unit vector
    ``x``; iteration stops when consecutive estimates agree to
    ``tol * max(1, estimate)``.
    """
    M = as_matrix(M, "M")
    n, m = M.shape
    if n != m:
        raise ValueError(f"spectral radius needs a square matrix, got {M.shape}")
    x = np.full(n, 1.0 / np.sqrt(n))
    restarted = False
    prev = np.inf
    est = 0.0
    for it in range(1, max_iters + 1):
        y = M @ x
        est = float(np.linalg.norm(y))
        if est == 0.0:
            if restarted:
                return PowerIterationResult(0.0, x, True, it)
            restarted = True
            x = np.random.default_rng(seed).standard_normal(n)
            x /= np.linalg.norm(x)
            prev = np.inf
            continue
        x = y / est
        if abs(est - prev) <= tol * max(1.0, est):
            return PowerIterationResult(est, x, True, it)
        prev = est
    return PowerIterationResult(est, x, False, max_iters)


def spectral_radius(M, tol: float = 1e-12, max_iters: int = 10000, seed: int = 0) -> float:
    """Power-iteration estimate of ``max |eig(M)|``.

    Reliable when the dominant eigenvalue is real and simple in modulus
    (symmetric matrices, Gram operators). A complex dominant pair makes
    the iteration oscillate; it then stops at `max_iters` and warns.
    Emits a :class:`ConvergenceWarning` if `max_iters` is exhausted.
    """
    res = power_iteration(M, tol=tol, max_iters=max_iters, seed=seed)
    if not res.converged:
        warnings.warn(
            f"power iteration did not reach tol={tol:g} in {max_iters} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )
    return res.radius


@dataclass(frozen=True)
class RateReport:
    """Least-squares fit of ``log10(error)`` against the iteration index.

    `slope` is the decrease of ``log10(error)`` per iteration (negative for a
    converging sequence); `window` is the inclusive index range used.
    """

    slope: float
    window: tuple[int, int]
    residual_floor: float
    r_squared: float

    @property
    def factor(self) -> float:
        """Per-iteration contraction factor ``10**slope``."""
        return 10.0 ** self.slope


def fit_linear_rate(errors, floor: float = 1e-11, start: int = 0, stop: int | None = None,
                    min_points: int = 10) -> RateReport:
    """Fit a linear convergence rate to an error sequence.

    The window starts at `start` (typically the iteration after which the
    active pattern is stable) and ends at the last index before the error
    first drops to `floor` or below (or at `stop`, if earlier).

    Raises
    ------
    ValueError
        If fewer than `min_points` errors are usable.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim != 1:
        raise ValueError("errors must be a 1-D sequence")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite and nonnegative")
    end = e.shape[0] if stop is None else min(stop + 1, e.shape[0])
    below = np.nonzero(e[start:end] <= floor)[0]
    if below.size:
        end = start + int(below[0])
    n = end - start
    if n < min_points:
        raise ValueError(
            f"only {max(n, 0)} errors above floor {floor:g} after index {start}; need {min_points}"
        )
    k = np.arange(start, end, dtype=np.float64)
    logs = np.log10(e[start:end])
    kc = k - k.mean()
    lc = logs - logs.mean()
    sxx = float(kc @ kc)
    slope = float(kc @ lc) / sxx
    ss_tot = float(lc @ lc)
    resid = lc - slope * kc
    ss_res = float(resid @ resid)
    r2 = 1.0 if ss_tot <= 1e-300 else max(0.0, min(1.0, 1.0 - ss_res / ss_tot))
    return RateReport(slope=slope, window=(start, end - 1), residual_floor=floor, r_squared=r2)
