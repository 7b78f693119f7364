"""Bilevel learning of filter weights for variational denoising.

Lower level: ``x*(theta) = argmin_x 0.5 ||x - x_noisy||^2 + ||A(theta) x||_{2,1}``
solved through its dual

    min_p 0.5 ||x_noisy - A^* p||^2   s.t.  ||p_ij|| <= 1 for every pixel,

where ``p_ij`` groups all channels and filters at pixel ``(i, j)``. The
primal solution is recovered as ``x = x_noisy - A^* p``. Upper level:
``J(theta) = 0.5 ||x*(theta) - x_ground||^2``, minimized by SGD with momentum.
Gradients through the dual solve use reverse fixed-point AD.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..autodiff import build_anchor, fpad_reverse
from ..core import ConvergenceWarning
from ..solver import SolverConfig, apg_solve, shifted_nesterov_beta
from .filters import FilterBank, basis_responses, conv_adjoint, conv_apply, dct_basis_5x5
from .imageio import psnr

__all__ = [
    "dual_project",
    "DenoiseDual",
    "DualSolve",
    "denoise_dual_apg",
    "bilevel_loss",
    "bilevel_grad",
    "TrainConfig",
    "TrainResult",
    "init_weights",
    "train",
    "add_noise",
    "synthetic_patches",
]

BOUNDARY_TOL = 1e-12


def _pixel_norms(p):
    H, W = p.shape[:2]
    return np.sqrt(np.sum(p.reshape(H, W, -1) ** 2, axis=2))


def dual_project(p, norm_kind: str = "l21_dual"):
    """Project each pixel's (channel, filter) block onto the unit ball."""
    if norm_kind != "l21_dual":
        raise ValueError(f"unsupported norm_kind {norm_kind!r}")
    p = np.asarray(p, dtype=np.float64)
    n = _pixel_norms(p)
    scale = np.where(n > 1.0, 1.0 / np.where(n > 1.0, n, 1.0), 1.0)
    return p * scale[:, :, None, None]


def _gram(q, img_resp):
    """``G[f, s] = <q[..., f], (B_s img)>`` summed over pixels and channels."""
    return np.tensordot(q, img_resp, axes=([0, 1, 2], [0, 1, 2]))


class DenoiseDual:
    """The dual denoising problem in the form the solvers and FPAD consume.

    The variable is the dual field ``p`` of shape ``(H, W, C, N_f)``; the
    parameter is the weight matrix ``theta``; tangents and cotangents of the
    parameter are arrays shaped like ``theta``.
    """

    def __init__(self, bank: FilterBank, noisy):
        self.bank = bank
        self.noisy = np.asarray(noisy, dtype=np.float64)
        self._bound = bank.norm_bound()

    @property
    def var_shape(self):
        return self.noisy.shape + (self.bank.n_filters,)

    def zeros(self):
        return np.zeros(self.var_shape)

    def primal(self, p):
        return self.noisy - conv_adjoint(self.bank, p)

    def objective(self, p) -> float:
        r = self.primal(p)
        return 0.5 * float(np.vdot(r, r))

    def grad(self, p):
        return -conv_apply(self.bank, self.primal(p))

    def hvp(self, p, v):
        return conv_apply(self.bank, conv_adjoint(self.bank, v))

    def lipschitz(self) -> float:
        """Bound ``L^2`` on ``||A A^*||`` from the kernels' weighted l1 norms."""
        return self._bound ** 2

    def cross_jvp(self, p, dtheta):
        dbank = self.bank.with_weights(dtheta)
        z = conv_adjoint(self.bank, p) - self.noisy
        return conv_apply(dbank, z) + conv_apply(self.bank, conv_adjoint(dbank, p))

    def cross_vjp(self, p, v):
        basis = self.bank.basis
        z = conv_adjoint(self.bank, p) - self.noisy
        return _gram(v, basis_responses(basis, z)) + _gram(p, basis_responses(basis, conv_adjoint(self.bank, v)))

    def prox(self, w, step):
        return dual_project(w)

    def prox_jvp(self, w, step, dw, dtheta=None):
        """Derivative of the projection: identity inside the ball,
        ``(I - n n^T) / ||w||`` for pixels on or outside the sphere."""
        n = _pixel_norms(w)
        out = np.array(dw, dtype=np.float64, copy=True)
        on = n >= 1.0
        if np.any(on):
            wn = w[on] / n[on][:, None, None]
            inner = np.sum(wn * dw[on], axis=(1, 2))
            out[on] = (dw[on] - inner[:, None, None] * wn) / n[on][:, None, None]
        return out

    def prox_vjp(self, w, step, xbar):
        return self.prox_jvp(w, step, xbar), None

    def subgrad_project(self, p, v):
        """Projection onto the normal cone of the feasible set at `p`."""
        n = _pixel_norms(p)
        out = np.zeros_like(p)
        on = n >= 1.0 - BOUNDARY_TOL
        if np.any(on):
            pn = p[on] / n[on][:, None, None]
            c = np.maximum(np.sum(pn * v[on], axis=(1, 2)), 0.0)
            out[on] = c[:, None, None] * pn
        return out

    def zero_cotangent(self):
        return np.zeros_like(self.bank.weights)

    def zero_tangent(self):
        return np.zeros_like(self.bank.weights)


class DualSolve(NamedTuple):
    denoised: np.ndarray
    dual: np.ndarray
    step: float
    beta: float
    iterations: int


def denoise_dual_apg(bank: FilterBank, noisy, K: int = 500, q: float = 5.0,
                     momentum: bool = True) -> DualSolve:
    """Run ``K`` accelerated projected-gradient steps on the dual from ``p0 = A noisy``.

    Momentum follows ``beta_k = (k - q) / (k + 1)`` (clamped at zero);
    ``momentum=False`` gives plain projected gradient. The returned `beta`
    is the rule evaluated at ``K``, the constant used by the backward pass.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    prob = DenoiseDual(bank, noisy)
    L2 = prob.lipschitz()
    if L2 == 0.0:
        # no regularization: the dual variable is irrelevant
        p = prob.zeros()
        return DualSolve(prob.noisy.copy(), p, 1.0, 0.0, 0)
    rule = (lambda k: shifted_nesterov_beta(k, q)) if momentum else "zero"
    cfg = SolverConfig(step=1.0 / L2, momentum=rule, max_iters=K)
    p0 = conv_apply(bank, prob.noisy)
    p, trace = apg_solve(prob, p0, cfg)
    return DualSolve(prob.primal(p), p, 1.0 / L2, trace.next_beta, trace.iterations)


def bilevel_loss(bank: FilterBank, noisy, ground, K: int = 500, q: float = 5.0) -> float:
    sol = denoise_dual_apg(bank, noisy, K, q)
    r = sol.denoised - ground
    return 0.5 * float(np.vdot(r, r))


class GradResult(NamedTuple):
    grad: np.ndarray
    loss: float
    denoised: np.ndarray
    fpad_iterations: int
    fpad_converged: bool


def bilevel_grad(bank: FilterBank, noisy, ground, K: int = 500, fpad_iters: int | None = None,
                 tol: float = 1e-12, q: float = 5.0, solve: DualSolve | None = None) -> GradResult:
    """Gradient of ``J(theta) = 0.5 ||x(theta) - ground||^2`` with ``x = noisy - A^* p``.

    ``dJ = -<A(theta') r, p> - <A r, p'>`` with ``r = x - ground``: the first
    term is the explicit dependence of ``A^*`` on ``theta``; the second goes
    through the dual solution and is evaluated by reverse fixed-point AD
    anchored at the final dual iterate.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    if solve is None:
        solve = denoise_dual_apg(bank, noisy, K, q)
    prob = DenoiseDual(bank, noisy)
    p = solve.dual
    r = solve.denoised - ground
    loss = 0.5 * float(np.vdot(r, r))
    explicit = -_gram(p, basis_responses(bank.basis, r))
    if not np.any(r) or solve.iterations == 0:
        return GradResult(explicit, loss, solve.denoised, 0, True)
    anchor = build_anchor(prob, p, solve.step, solve.beta)
    pbar = -conv_apply(bank, r)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        rev = fpad_reverse(prob, anchor, pbar, tol=tol, max_iters=fpad_iters or K)
    return GradResult(explicit + rev.u_bar, loss, solve.denoised, rev.iterations, rev.converged)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    """Outer-loop settings.

    The learning rate at epoch ``l`` (counting from zero) is
    ``lr / (floor(l / lr_decay_every) + 1)``.
    """

    epochs: int = 30
    inner_iters: int = 500
    q: float = 5.0
    lr: float = 1e-4
    lr_decay_every: int = 4
    momentum: float = 0.75
    n_filters: int = 24
    seed: int = 1
    noise_std: float = 40.0 / 255.0
    init_high: float = 0.01

    def __post_init__(self):
        if self.epochs < 0 or self.inner_iters < 1 or self.n_filters < 1:
            raise ValueError("epochs, inner_iters and n_filters must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr < 0 or self.noise_std < 0 or self.lr_decay_every < 1:
            raise ValueError("lr, noise_std must be nonnegative; lr_decay_every positive")

    def learning_rate(self, epoch: int) -> float:
        return self.lr / (epoch // self.lr_decay_every + 1)


@dataclass
class TrainResult:
    bank: FilterBank
    log: list = field(default_factory=list)

    def epoch_mean(self, epoch: int) -> float:
        vals = [row["loss"] for row in self.log if row["epoch"] == epoch]
        return float(np.mean(vals)) if vals else float("nan")


def _rng(seed, stream):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(stream,))))


def init_weights(n_filters: int, n_basis: int, seed: int, high: float = 0.01) -> np.ndarray:
    """Weights drawn from ``U(0, high)``."""
    return _rng(seed, 10).uniform(0.0, high, size=(n_filters, n_basis))


def add_noise(images, std: float, seed: int):
    """Gaussian noise added once per image, deterministic per seed (values not clipped)."""
    rng = _rng(seed, 11)
    return [np.asarray(im, dtype=np.float64) + std * rng.standard_normal(np.shape(im)) for im in images]


def synthetic_patches(count: int = 5, size: int = 16, channels: int = 1, seed: int = 0):
    """Deterministic piecewise-smooth test patches in ``[0, 1]``.

    Each patch is a smooth background ramp with a few constant rectangles
    and a disk, a stand-in for natural image crops.
    """
    rng = _rng(seed, 12)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    out = []
    for _ in range(count):
        img = np.empty((size, size, channels))
        for c in range(channels):
            g = rng.uniform(-0.3, 0.3, size=2)
            base = 0.5 + g[0] * (xx - 0.5) + g[1] * (yy - 0.5)
            for _ in range(3):
                y0, x0 = rng.integers(0, size - 3, size=2)
                h, w = rng.integers(3, max(4, size // 2), size=2)
                base[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.1, 0.9)
            cy, cx, rad = rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(0.1, 0.25)
            base[(yy - cy) ** 2 + (xx - cx) ** 2 < rad**2] = rng.uniform(0.1, 0.9)
            img[:, :, c] = base
        out.append(np.clip(img, 0.0, 1.0))
    return out


def train(dataset, cfg: TrainConfig, probe=None, probe_every: int = 5) -> TrainResult:
    """SGD with momentum on ``sum_i J_i(theta)``, one image per step.

    Parameters
    ----------
    dataset : list of (noisy, ground) pairs
    cfg : TrainConfig
    probe : callable, optional
        ``probe(step, bank)`` is called every `probe_every` optimizer steps,
        before the update (used for finite-difference spot checks).

    Returns
    -------
    TrainResult
        `log` holds one row per image and epoch: epoch 0 evaluates the
        initial weights; for later epochs each row is the loss at the step
        that used that image, before the update.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    basis = dct_basis_5x5()
    bank = FilterBank(init_weights(cfg.n_filters, basis.shape[0], cfg.seed, cfg.init_high), basis)
    order_rng = _rng(cfg.seed, 13)
    log = []
    for i, (noisy, ground) in enumerate(dataset):
        sol = denoise_dual_apg(bank, noisy, cfg.inner_iters, cfg.q)
        r = sol.denoised - ground
        log.append(dict(epoch=0, step=i, image_id=i, loss=0.5 * float(np.vdot(r, r)),
                        psnr=psnr(np.clip(sol.denoised, 0, 1), ground).value))
    velocity = np.zeros_like(bank.weights)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate(epoch - 1)
        for i in order_rng.permutation(len(dataset)):
            noisy, ground = dataset[i]
            if probe is not None and step % probe_every == 0:
                probe(step, bank)
            g = bilevel_grad(bank, noisy, ground, cfg.inner_iters, q=cfg.q)
            log.append(dict(epoch=epoch, step=step, image_id=int(i), loss=g.loss,
                            psnr=psnr(np.clip(g.denoised, 0, 1), ground).value))
            velocity = cfg.momentum * velocity + g.grad
            bank = bank.with_weights(bank.weights - lr * velocity)
            step += 1
    return TrainResult(bank, log)
