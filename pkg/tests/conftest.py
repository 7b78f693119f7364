import numpy as np
import pytest

from proxdiff.bench import ExperimentSpec, generate_instance
from proxdiff.problems import ParamPack, ProblemInstance


@pytest.fixture(scope="session")
def desk_lasso():
    return generate_instance(ExperimentSpec.desk("lasso", seed=0))


@pytest.fixture(scope="session")
def desk_group_lasso():
    return generate_instance(ExperimentSpec.desk("group_lasso", seed=0))


def small_problem(kind="l1", m=8, n=5, L=3, lam=0.3, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, n))
    b = rng.standard_normal(m) if kind == "l1" else rng.standard_normal((m, L))
    return ProblemInstance(ParamPack(A, b, lam), kind)


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


class SmoothQuadratic:
    """``f(x, u) = 0.5 x^T Q x - (C u)^T x`` with ``g = 0``.

    The solution map is ``psi(u) = Q^{-1} C u``; the parameter is a plain
    array. `lip` overrides the reported Lipschitz constant (to provoke
    divergence in tests).
    """

    def __init__(self, Q, C, u, lip=None):
        self.Q = np.atleast_2d(np.asarray(Q, float))
        self.C = np.atleast_2d(np.asarray(C, float))
        self.u = np.atleast_1d(np.asarray(u, float))
        self._lip = lip

    @property
    def var_shape(self):
        return (self.Q.shape[0],)

    def zeros(self):
        return np.zeros(self.var_shape)

    def solution(self):
        return np.linalg.solve(self.Q, self.C @ self.u)

    def dpsi(self):
        return np.linalg.solve(self.Q, self.C)

    def objective(self, x):
        return 0.5 * float(x @ self.Q @ x) - float((self.C @ self.u) @ x)

    def grad(self, x):
        return self.Q @ x - self.C @ self.u

    def hvp(self, x, v):
        return self.Q @ v

    def cross_jvp(self, x, du):
        return -(self.C @ du)

    def cross_vjp(self, x, v):
        return -(self.C.T @ v)

    def lipschitz(self):
        return self._lip if self._lip is not None else float(np.max(np.abs(np.linalg.eigvalsh(self.Q))))

    def prox(self, w, step):
        return np.array(w, dtype=float)

    def prox_jvp(self, w, step, dw, du):
        return np.array(dw, dtype=float)

    def prox_vjp(self, w, step, xbar):
        return np.array(xbar, dtype=float), None

    def zero_cotangent(self):
        return np.zeros_like(self.u)

    def zero_tangent(self):
        return np.zeros_like(self.u)

    def subgrad_project(self, x, v):
        return np.zeros_like(x)
