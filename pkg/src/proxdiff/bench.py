"""Error-curve experiments on random Lasso and Group Lasso instances.

For one instance the harness produces ten error sequences of length
``K + 1``: iterate errors of PGD and APG, and the errors of unrolled forward
and reverse AD and of forward and reverse fixed-point AD for both solvers,
measured against reduced-system reference derivatives.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import ad_forward, ad_reverse, anchor_from_trace, fpad_forward, fpad_reverse
from .core import ConvergenceWarning, RateReport, fit_linear_rate
from .oracle import build_reduced_system, solve_dpsi_jvp, solve_dpsi_vjp, solve_reference
from .problems import ParamPack, ProblemInstance, check_nondegeneracy
from .solver import SolverConfig, apg_solve, pgd_solve

__all__ = [
    "CURVE_COLUMNS",
    "STREAMS",
    "DegenerateInstanceError",
    "ExperimentSpec",
    "Instance",
    "ErrorCurves",
    "stream_rng",
    "generate_instance",
    "run_error_curves",
    "emit_csv",
    "read_csv",
    "default_directions",
    "identification_index",
    "curve_rates",
    "RateComparison",
    "compare_rates",
]

CURVE_COLUMNS = (
    "pgd_x", "apg_x",
    "pgd_fwd_ad", "apg_fwd_ad",
    "pgd_rev_ad", "apg_rev_ad",
    "pgd_fwd_fpad", "apg_fwd_fpad",
    "pgd_rev_fpad", "apg_rev_fpad",
)

# independent random streams, one per purpose
STREAMS = {"matrix": 0, "target": 1, "direction": 2}


class DegenerateInstanceError(RuntimeError):
    """No nondegenerate regularization weight was found."""


def stream_rng(seed: int, purpose: str) -> np.random.Generator:
    """PCG64 generator for one named purpose, derived from `seed`."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[purpose],))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class ExperimentSpec:
    """One error-curve experiment.

    `reg_weight` of ``None`` triggers the automatic selection rule:
    start at ``0.1 * max_i ||(A^T b)_i||`` and multiply by 1.5 until the
    solution has a nonempty support and nondegeneracy margin
    ``>= min_margin`` (at most `max_retries` increases).
    """

    problem: str = "lasso"
    m: int = 100
    n: int = 25
    group_size: int = 8
    seed: int = 0
    iters: int = 2000
    q: float = 5.0
    reg_weight: float | None = None
    min_margin: float = 0.02
    max_retries: int = 10

    def __post_init__(self):
        if self.problem not in ("lasso", "group_lasso"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if min(self.m, self.n, self.group_size, self.iters) <= 0:
            raise ValueError("dimensions and iteration count must be positive")

    @classmethod
    def desk(cls, problem="lasso", seed=0, **kw):
        """Desk-scale defaults: Lasso 100x25, K=2000; Group Lasso 100x10x8, K=800."""
        if problem == "lasso":
            base = dict(m=100, n=25, iters=2000)
        else:
            base = dict(m=100, n=10, group_size=8, iters=800)
        base.update(kw)
        return cls(problem=problem, seed=seed, **base)


class Instance(NamedTuple):
    problem: ProblemInstance
    x_star: np.ndarray
    residual: float
    reg_weight: float
    attempts: int
    min_gap: float
    min_singular_value: float


def _min_singular_value(A) -> float:
    """Smallest singular value of `A` as a column map; zero if ``M < N``."""
    m, n = A.shape
    if m < n:
        return 0.0
    return float(np.linalg.svd(A, compute_uv=False)[-1])


def generate_instance(spec: ExperimentSpec, ref_tol: float = 1e-12) -> Instance:
    """Random instance with ``A ~ U(0, 1)`` and ``b ~ N(0, 1)``, deterministic per seed.

    Raises
    ------
    DegenerateInstanceError
        If no weight passes the nondegeneracy margin within the retries.
    """
    A = stream_rng(spec.seed, "matrix").uniform(0.0, 1.0, size=(spec.m, spec.n))
    tshape = (spec.m,) if spec.problem == "lasso" else (spec.m, spec.group_size)
    b = stream_rng(spec.seed, "target").standard_normal(tshape)
    smin = _min_singular_value(A)
    if smin <= 1e-8:
        raise DegenerateInstanceError(f"design matrix is rank deficient (sigma_min={smin:.2e})")
    reg = "l1" if spec.problem == "lasso" else "l21"
    corr = A.T @ b
    mags = np.abs(corr) if corr.ndim == 1 else np.sqrt(np.sum(corr * corr, axis=1))
    lam = 0.1 * float(mags.max()) if spec.reg_weight is None else float(spec.reg_weight)
    tries = 1 if spec.reg_weight is not None else spec.max_retries + 1
    last = None
    for attempt in range(1, tries + 1):
        prob = ProblemInstance(ParamPack(A, b, lam), reg)
        x, res = solve_reference(prob, tol=ref_tol)
        report = check_nondegeneracy(prob.params, x, spec.min_margin)
        nonempty = prob.identify_pattern(x).dim_tangent > 0
        last = (lam, report.min_gap, nonempty)
        if report.ok and nonempty:
            return Instance(prob, x, res, lam, attempt, report.min_gap, smin)
        lam *= 1.5
    raise DegenerateInstanceError(
        f"no nondegenerate weight after {tries} attempts (last lam={last[0]:.4g}, "
        f"gap={last[1]:.3g}, nonempty support={last[2]})"
    )


@dataclass
class ErrorCurves:
    """Ten labelled error sequences of equal length ``K + 1``."""

    columns: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"curves have unequal lengths {sorted(lengths)}")

    def __getitem__(self, key):
        return self.columns[key]

    @property
    def length(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0


def default_directions(prob: ProblemInstance, seed: int):
    """``(du, xbar)``: the ``lam`` direction and a fixed-seed normal cotangent."""
    du = ParamPack(reg_weight=1.0)
    xbar = stream_rng(seed, "direction").standard_normal(prob.var_shape)
    return du, xbar


def _pack_dist(a: ParamPack, b: ParamPack) -> float:
    return (a - b).norm()


def _run_method(prob, x0, K, momentum, q, alpha, du, xbar, dx_ref, ub_ref, x_ref):
    cfg = SolverConfig(step=alpha, momentum=momentum, q=q, max_iters=K, record_trace=True)
    solve = pgd_solve if momentum == "zero" else apg_solve
    xK, trace = solve(prob, x0, cfg)
    out = {}
    out["x"] = np.linalg.norm((trace.x - x_ref).reshape(K + 1, -1), axis=1)
    fwd = ad_forward(prob, trace, du)
    out["fwd_ad"] = np.linalg.norm((fwd - dx_ref).reshape(K + 1, -1), axis=1)
    rev = np.empty(K + 1)
    rev[0] = ub_ref.norm()

    def rec_rev(n, ub):
        rev[n] = _pack_dist(ub, ub_ref)

    ad_reverse(prob, trace, xbar, on_step=rec_rev)
    out["rev_ad"] = rev

    anchor = anchor_from_trace(prob, xK, trace)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        ff = fpad_forward(prob, anchor, du, iters=K, tol=0.0, record=True)
    out["fwd_fpad"] = np.linalg.norm((ff.iterates - dx_ref).reshape(K + 1, -1), axis=1)
    frev = np.empty(K + 1)
    frev[0] = ub_ref.norm()

    def rec_frev(n, ub):
        frev[n] = _pack_dist(ub, ub_ref)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        fpad_reverse(prob, anchor, xbar, tol=0.0, max_iters=K, on_step=rec_frev)
    out["rev_fpad"] = frev
    return out, trace, anchor


def run_error_curves(spec: ExperimentSpec, instance: Instance | None = None) -> ErrorCurves:
    """Compute the ten error sequences for one experiment.

    Reference derivatives come from the reduced-system oracle at the
    reference minimizer (fixed-point residual below 1e-12). Both solvers
    start from zero with step ``1 / ||A^T A||``; the APG momentum is
    ``(k - 1) / (k + q)``. Fixed-point AD uses each solver's own output as
    anchor, with ``beta = beta_K`` for APG.
    """
    inst = generate_instance(spec) if instance is None else instance
    prob, x_ref = inst.problem, inst.x_star
    du, xbar = default_directions(prob, spec.seed)
    sys = build_reduced_system(prob, x_ref, du)
    dx_ref = solve_dpsi_jvp(sys)
    ub_ref = solve_dpsi_vjp(prob, x_ref, xbar)
    alpha = 1.0 / prob.lipschitz()
    x0 = prob.zeros()
    K = spec.iters
    columns = {}
    for name, momentum in (("pgd", "zero"), ("apg", "nesterov")):
        res, _, _ = _run_method(prob, x0, K, momentum, spec.q, alpha, du, xbar, dx_ref, ub_ref, x_ref)
        for key, val in res.items():
            columns[f"{name}_{key}"] = val
    ordered = {c: columns[c] for c in CURVE_COLUMNS}
    meta = dict(reg_weight=inst.reg_weight, min_gap=inst.min_gap, attempts=inst.attempts,
                reference_residual=inst.residual, step=alpha,
                support=int(prob.identify_pattern(x_ref).mask.sum()),
                dx_norm=float(np.linalg.norm(dx_ref)), ubar_norm=ub_ref.norm(),
                x_norm=float(np.linalg.norm(x_ref)))
    return ErrorCurves(ordered, meta)


# ---------------------------------------------------------------------------
# CSV


def _fmt(v: float) -> str:
    return f"{v:.16e}"


def emit_csv(curves: ErrorCurves, path) -> None:
    """Write ``iter`` plus the ten columns, 17 significant digits each."""
    if curves.length == 0:
        raise ValueError("refusing to write empty curves")
    header = ("iter",) + CURVE_COLUMNS
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(curves.length):
                w.writerow([str(k)] + [_fmt(float(curves[c][k])) for c in CURVE_COLUMNS])
    except OSError as exc:
        raise OSError(f"cannot write curves to {path}: {exc}") from exc


def read_csv(path) -> ErrorCurves:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read curves from {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != ("iter",) + CURVE_COLUMNS:
        raise ValueError(f"{path}: unexpected header")
    data = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    return ErrorCurves({c: data[:, i] for i, c in enumerate(CURVE_COLUMNS)})


# ---------------------------------------------------------------------------
# rates


def identification_index(problem, iterates, x_star, atol: float = 1e-10) -> int | None:
    """Smallest ``K0`` with ``pattern(x(k)) == pattern(x*)`` for all ``k >= K0``.

    Returns ``None`` if the final iterate does not have the reference
    pattern.
    """
    target = problem.identify_pattern(x_star, atol)
    k0 = None
    for k in range(len(iterates) - 1, -1, -1):
        if problem.identify_pattern(iterates[k], atol) != target:
            break
        k0 = k
    return k0


def curve_rates(curves: ErrorCurves, floor: float = 1e-11, start: dict | None = None) -> dict:
    """Fit a :class:`RateReport` per column; columns with too few usable
    points map to ``None``.

    `floor` is relative to each column's first positive value. `start`
    optionally gives a per-column first index of the fitting window.
    """
    out = {}
    for c in CURVE_COLUMNS:
        e = np.asarray(curves[c], dtype=float)
        pos = e[e > 0]
        scale = float(pos[0]) if pos.size else 1.0
        s = 0 if start is None else int(start.get(c, 0))
        try:
            out[c] = fit_linear_rate(e / scale, floor=floor, start=s)
        except ValueError:
            out[c] = None
    return out


class RateComparison(NamedTuple):
    """Fitted rates for one solver on one instance."""

    method: str
    identification: int | None
    iterate: RateReport | None
    fpad: RateReport | None
    beta: float


def compare_rates(spec: ExperimentSpec, instance: Instance | None = None, floor: float = 1e-11,
                  fpad_factor: int = 5) -> dict:
    """Iterate rate after identification vs the forward FPAD rate, per solver.

    Iterate errors ``||x(k) - x*|| / ||x*||`` are fitted from the
    identification index on. FPAD errors are measured against the FPAD
    limit itself (converged to 1e-14), over ``fpad_factor * K`` steps, so
    the fit sees the linear rate of the frozen iteration rather than the
    anchor bias. Both fits stop at the relative `floor`.

    Returns
    -------
    dict
        ``{"pgd": RateComparison, "apg": RateComparison}``
    """
    inst = generate_instance(spec) if instance is None else instance
    prob, x_ref = inst.problem, inst.x_star
    du, _ = default_directions(prob, spec.seed)
    alpha = 1.0 / prob.lipschitz()
    K = spec.iters
    out = {}
    for name, momentum in (("pgd", "zero"), ("apg", "nesterov")):
        cfg = SolverConfig(step=alpha, momentum=momentum, q=spec.q, max_iters=K, record_trace=True)
        solve = pgd_solve if momentum == "zero" else apg_solve
        xK, trace = solve(prob, prob.zeros(), cfg)
        k0 = identification_index(prob, trace.x, x_ref)
        err = np.linalg.norm((trace.x - x_ref).reshape(K + 1, -1), axis=1) / np.linalg.norm(x_ref)
        try:
            it_rate = fit_linear_rate(err, floor=floor, start=k0 or 0) if k0 is not None else None
        except ValueError:
            it_rate = None
        anchor = anchor_from_trace(prob, xK, trace)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            limit = fpad_forward(prob, anchor, du, iters=max(200000, 50 * K), tol=1e-14).limit
            ff = fpad_forward(prob, anchor, du, iters=fpad_factor * K, tol=0.0, record=True)
        scale = np.linalg.norm(limit)
        ef = np.linalg.norm((ff.iterates - limit).reshape(len(ff.iterates), -1), axis=1) / scale
        try:
            fp_rate = fit_linear_rate(ef, floor=floor)
        except ValueError:
            fp_rate = None
        out[name] = RateComparison(name, k0, it_rate, fp_rate, anchor.beta)
    return out
