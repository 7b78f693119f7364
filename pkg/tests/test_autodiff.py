import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SmoothQuadratic, rel_err
from proxdiff.autodiff import (
    ad_forward,
    ad_reverse,
    anchor_from_trace,
    build_anchor,
    fpad_forward,
    fpad_reverse,
    implicit_diff,
)
from proxdiff.core import ConvergenceWarning
from proxdiff.oracle import build_reduced_system, solve_dpsi_jvp, solve_dpsi_vjp
from proxdiff.problems import ParamPack
from proxdiff.solver import SolverConfig, apg_solve, pgd_solve

LAM = ParamPack(reg_weight=1.0)


def _oracle(inst, du, xbar):
    sys = build_reduced_system(inst.problem, inst.x_star, du)
    return solve_dpsi_jvp(sys), solve_dpsi_vjp(inst.problem, inst.x_star, xbar)


def _random_pack(prob, rng):
    p = prob.params
    return ParamPack(rng.standard_normal(p.design.shape), rng.standard_normal(p.target.shape),
                     float(rng.standard_normal()))


# ---------------------------------------------------------------------------
# unrolled AD


def test_ad_forward_identity_map():
    prob = SmoothQuadratic(np.eye(1), np.eye(1), [0.7])
    _, tr = apg_solve(prob, np.zeros(1), SolverConfig(step=0.5, max_iters=200, record_trace=True))
    dx = ad_forward(prob, tr, np.ones(1))
    assert dx[0, 0] == 0.0 and abs(dx[-1, 0] - 1.0) < 1e-12


def test_ad_forward_zero_direction(desk_lasso):
    prob = desk_lasso.problem
    _, tr = apg_solve(prob, prob.zeros(), SolverConfig(max_iters=100, record_trace=True))
    assert not np.any(ad_forward(prob, tr, ParamPack(reg_weight=0.0)))


def test_ad_needs_tape(desk_lasso):
    prob = desk_lasso.problem
    _, tr = apg_solve(prob, prob.zeros(), SolverConfig(max_iters=5))
    with pytest.raises(ValueError):
        ad_forward(prob, tr, LAM)
    with pytest.raises(ValueError):
        ad_reverse(prob, tr, np.ones(prob.var_shape))


def test_ad_reverse_one_step_by_hand():
    # x1 = x0 - alpha (x0 - u)  =>  d x1 / du = alpha
    prob = SmoothQuadratic(np.eye(2), np.eye(2), [1.0, 2.0])
    _, tr = pgd_solve(prob, np.array([3.0, -1.0]), SolverConfig(step=0.3, max_iters=1, record_trace=True))
    xbar = np.array([1.5, -2.0])
    np.testing.assert_allclose(ad_reverse(prob, tr, xbar), 0.3 * xbar, rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", ["lasso", "group"])
@pytest.mark.parametrize("K", [1, 2, 7, 60])
@pytest.mark.parametrize("momentum", ["zero", "nesterov"])
def test_ad_adjoint_identity(kind, K, momentum, desk_lasso, desk_group_lasso):
    inst = desk_lasso if kind == "lasso" else desk_group_lasso
    prob = inst.problem
    rng = np.random.default_rng(K)
    _, tr = apg_solve(prob, rng.standard_normal(prob.var_shape),
                      SolverConfig(momentum=momentum, max_iters=K, record_trace=True))
    du = _random_pack(prob, rng)
    xbar = rng.standard_normal(prob.var_shape)
    lhs = ad_reverse(prob, tr, xbar).vdot(du)
    rhs = float(np.vdot(xbar, ad_forward(prob, tr, du)[-1]))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))


def test_ad_reverse_on_step_partials(desk_lasso):
    prob = desk_lasso.problem
    _, tr = apg_solve(prob, prob.zeros(), SolverConfig(max_iters=20, record_trace=True))
    seen = []
    ub = ad_reverse(prob, tr, np.ones(prob.var_shape), on_step=lambda n, u: seen.append((n, u.norm())))
    assert [n for n, _ in seen] == list(range(1, 21))
    assert seen[-1][1] == ub.norm()


def test_ad_apg_matches_oracle(desk_lasso):
    prob = desk_lasso.problem
    xbar = np.random.default_rng(0).standard_normal(prob.var_shape)
    dx_ref, ub_ref = _oracle(desk_lasso, LAM, xbar)
    _, tr = apg_solve(prob, prob.zeros(), SolverConfig(max_iters=5000, record_trace=True))
    assert rel_err(ad_forward(prob, tr, LAM)[-1], dx_ref) < 1e-6
    ub = ad_reverse(prob, tr, xbar)
    assert (ub - ub_ref).norm() / ub_ref.norm() < 1e-5


# ---------------------------------------------------------------------------
# fixed-point AD


def test_fpad_scalar_ift():
    # f = 0.5 * 3 x^2 - 2 u x: psi(u) = 2u/3
    prob = SmoothQuadratic([[3.0]], [[2.0]], [0.4])
    anchor = build_anchor(prob, prob.solution(), 0.2)
    res = fpad_forward(prob, anchor, np.ones(1))
    assert res.converged and abs(res.limit[0] - 2.0 / 3.0) < 1e-12
    rev = fpad_reverse(prob, anchor, np.array([1.5]))
    assert abs(rev.u_bar[0] - 1.5 * 2.0 / 3.0) < 1e-12


def test_fpad_anchor_properties(desk_lasso):
    prob = desk_lasso.problem
    anchor = build_anchor(prob, desk_lasso.x_star, 1.0 / prob.lipschitz())
    assert prob.nonsmooth.is_subgradient(anchor.x, anchor.nu / prob.params.reg_weight * prob.params.reg_weight)
    np.testing.assert_allclose(prob.prox(anchor.w, anchor.step), anchor.x, atol=1e-14)
    with pytest.raises(ValueError):
        build_anchor(prob, desk_lasso.x_star, 0.1, beta=1.0)


@pytest.mark.parametrize("beta", [0.0, 0.5, 0.95])
def test_fpad_tangent_confinement(desk_lasso, desk_group_lasso, beta):
    for inst in (desk_lasso, desk_group_lasso):
        prob = inst.problem
        anchor = build_anchor(prob, inst.x_star, 1.0 / prob.lipschitz(), beta)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            res = fpad_forward(prob, anchor, LAM, iters=50, tol=0.0, record=True)
        off = ~prob.identify_pattern(inst.x_star).mask
        assert np.all(res.iterates[1:, off] == 0.0)


@pytest.mark.parametrize("beta", [0.0, 0.9])
def test_fpad_reverse_adjoint_of_forward(desk_group_lasso, beta):
    prob = desk_group_lasso.problem
    rng = np.random.default_rng(1)
    anchor = build_anchor(prob, desk_group_lasso.x_star, 1.0 / prob.lipschitz(), beta)
    du = _random_pack(prob, rng)
    xbar = rng.standard_normal(prob.var_shape)
    fwd = fpad_forward(prob, anchor, du, tol=1e-14, iters=100000)
    rev = fpad_reverse(prob, anchor, xbar, tol=1e-14, max_iters=100000)
    assert fwd.converged and rev.converged
    rhs = float(np.vdot(xbar, fwd.limit))
    assert abs(rev.u_bar.vdot(du) - rhs) < 1e-10 * max(1.0, abs(rhs))


def test_fpad_reverse_group_lasso_oracle(desk_group_lasso):
    prob = desk_group_lasso.problem
    xbar = np.random.default_rng(2).standard_normal(prob.var_shape)
    _, ub_ref = _oracle(desk_group_lasso, LAM, xbar)
    anchor = build_anchor(prob, desk_group_lasso.x_star, 1.0 / prob.lipschitz())
    rev = fpad_reverse(prob, anchor, xbar)
    assert (rev.u_bar - ub_ref).norm() / ub_ref.norm() < 1e-6


def test_fpad_nonconvergence_flagged(desk_lasso):
    prob = desk_lasso.problem
    anchor = build_anchor(prob, desk_lasso.x_star, 1.0 / prob.lipschitz())
    with pytest.warns(ConvergenceWarning):
        res = fpad_forward(prob, anchor, LAM, iters=3)
    assert not res.converged and 0 < res.contraction < 1
    with pytest.warns(ConvergenceWarning):
        assert not fpad_reverse(prob, anchor, np.ones(prob.var_shape), max_iters=3).converged


def test_fpad_memory_probe_constant(desk_lasso):
    prob = desk_lasso.problem
    anchor = build_anchor(prob, desk_lasso.x_star, 1.0 / prob.lipschitz())
    sizes = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        fpad_reverse(prob, anchor, np.ones(prob.var_shape), tol=0.0, max_iters=50,
                     memory_probe=sizes.append)
    assert len(set(sizes)) == 1


def test_anchor_consistency_monotone(desk_group_lasso):
    # the l2,1 limit depends smoothly on the anchor, so it improves with it
    prob = desk_group_lasso.problem
    dx_ref, _ = _oracle(desk_group_lasso, LAM, np.ones(prob.var_shape))
    errs = []
    for K in (10, 100, 1000):
        x, tr = apg_solve(prob, prob.zeros(), SolverConfig(max_iters=K))
        anchor = anchor_from_trace(prob, x, tr)
        errs.append(rel_err(fpad_forward(prob, anchor, LAM, iters=200000, tol=1e-14).limit, dx_ref))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-9


def test_lasso_limit_exact_once_identified(desk_lasso):
    # with l1 the frozen operators depend on the anchor only through its support
    prob = desk_lasso.problem
    dx_ref, _ = _oracle(desk_lasso, LAM, np.ones(prob.var_shape))
    for K in (10, 100, 1000):
        x, tr = apg_solve(prob, prob.zeros(), SolverConfig(max_iters=K))
        anchor = anchor_from_trace(prob, x, tr)
        err = rel_err(fpad_forward(prob, anchor, LAM, iters=200000, tol=1e-14).limit, dx_ref)
        if prob.identify_pattern(x) == prob.identify_pattern(desk_lasso.x_star):
            assert err < 1e-9
        else:
            assert err > 1e-3


# ---------------------------------------------------------------------------
# implicit differentiation


def test_implicit_smooth_quadratic_dense():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((4, 4))
    Q = M @ M.T + np.eye(4)
    C = rng.standard_normal((4, 2))
    prob = SmoothQuadratic(Q, C, [0.3, -1.0])
    anchor = build_anchor(prob, prob.solution(), 1.0 / prob.lipschitz())
    du = np.array([1.0, 2.0])
    for method in ("neumann", "cg", "auto"):
        res = implicit_diff(prob, anchor, du, method=method)
        assert rel_err(res.value, prob.dpsi() @ du) < 1e-10
        v = implicit_diff(prob, anchor, np.ones(4), mode="vjp", method=method)
        assert rel_err(v.value, prob.dpsi().T @ np.ones(4)) < 1e-10


@pytest.mark.parametrize("method", ["neumann", "cg"])
def test_implicit_matches_fpad_desk(desk_lasso, method):
    prob = desk_lasso.problem
    anchor = build_anchor(prob, desk_lasso.x_star, 1.0 / prob.lipschitz())
    ref = fpad_forward(prob, anchor, LAM, tol=1e-15, iters=200000).limit
    assert rel_err(implicit_diff(prob, anchor, LAM, method=method).value, ref) < 1e-10


def test_implicit_zero_direction_and_errors(desk_lasso):
    prob = desk_lasso.problem
    anchor = build_anchor(prob, desk_lasso.x_star, 1.0 / prob.lipschitz())
    assert not np.any(implicit_diff(prob, anchor, ParamPack(reg_weight=0.0)).value)
    with pytest.raises(ValueError):
        implicit_diff(prob, anchor, LAM, mode="hvp")
    with pytest.raises(ValueError):
        implicit_diff(prob, anchor, LAM, method="lu")


def test_implicit_auto_picks_method(desk_lasso):
    prob = desk_lasso.problem
    anchor = build_anchor(prob, desk_lasso.x_star, 1.0 / prob.lipschitz())
    res = implicit_diff(prob, anchor, LAM)
    assert res.method == ("neumann" if res.contraction_estimate < 0.999 else "cg")
    assert res.converged


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_implicit_vjp_is_transpose(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((3, 3))
    prob = SmoothQuadratic(M @ M.T + 0.5 * np.eye(3), rng.standard_normal((3, 2)), [0.1, 0.2])
    anchor = build_anchor(prob, prob.solution(), 1.0 / prob.lipschitz())
    du, xbar = rng.standard_normal(2), rng.standard_normal(3)
    j = implicit_diff(prob, anchor, du, method="cg").value
    v = implicit_diff(prob, anchor, xbar, mode="vjp", method="cg").value
    assert abs(np.vdot(v, du) - np.vdot(xbar, j)) < 1e-9 * (1 + abs(np.vdot(xbar, j)))
