"""DCT filter banks and their convolution operators with replicate boundaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "dct_basis_5x5",
    "dct_basis",
    "FilterBank",
    "conv_apply",
    "conv_adjoint",
    "basis_responses",
    "basis_responses_adjoint",
]


def _dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row ``i`` is the ``i``-th cosine atom."""
    k = np.arange(n)
    D = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n))
    D[0] *= np.sqrt(1.0 / n)
    D[1:] *= np.sqrt(2.0 / n)
    return D


def dct_basis(size: int = 5) -> np.ndarray:
    """2-D DCT-II kernels without the constant one, shape ``(size**2 - 1, size, size)``."""
    D = _dct_matrix(size)
    kernels = [np.outer(D[i], D[j]) for i in range(size) for j in range(size) if (i, j) != (0, 0)]
    out = np.array(kernels)
    return out / np.sqrt(np.sum(out * out, axis=(1, 2)))[:, None, None]


def dct_basis_5x5() -> np.ndarray:
    """The 24 non-constant 5x5 DCT kernels, Frobenius-orthonormal."""
    return dct_basis(5)


@dataclass(frozen=True)
class FilterBank:
    """Filters ``K_r = sum_s theta[r, s] * basis[s]``.

    `basis` has shape ``(N_b, k, k)`` with odd ``k``; `weights` has shape
    ``(N_f, N_b)``.
    """

    weights: np.ndarray
    basis: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=np.float64)
        B = np.asarray(self.basis, dtype=np.float64)
        if B.ndim != 3 or B.shape[1] != B.shape[2] or B.shape[1] % 2 == 0:
            raise ValueError(f"basis must have shape (N_b, k, k) with odd k, got {B.shape}")
        if W.ndim != 2 or W.shape[1] != B.shape[0]:
            raise ValueError(f"weights shape {W.shape} does not match {B.shape[0]} basis kernels")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(B))):
            raise ValueError("filter bank contains non-finite values")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "basis", B)

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def n_basis(self) -> int:
        return self.basis.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.basis.shape[1]

    def kernels(self) -> np.ndarray:
        """Combined kernels, shape ``(N_f, k, k)``."""
        return np.tensordot(self.weights, self.basis, axes=1)

    def with_weights(self, weights) -> "FilterBank":
        return FilterBank(weights, self.basis)

    def norm_bound(self) -> float:
        """Upper bound on the operator norm of :func:`conv_apply`.

        With replicate padding a shift by ``(a, b)`` maps up to
        ``(|a| + 1)(|b| + 1)`` pixels onto one, so each kernel contributes
        at most ``sum |c_ab| sqrt((|a| + 1)(|b| + 1))``; the stacked operator
        is bounded by the root of the summed squares.
        """
        k = self.kernel_size
        off = np.abs(np.arange(k) - k // 2)
        mult = np.sqrt(np.outer(off + 1, off + 1))
        per = np.sum(np.abs(self.kernels()) * mult, axis=(1, 2))
        return float(np.sqrt(np.sum(per * per)))


def _check_fits(bank: FilterBank, shape):
    k = bank.kernel_size
    if shape[0] < k or shape[1] < k:
        raise ValueError(f"image {shape[:2]} is smaller than the {k}x{k} kernel")


def basis_responses(basis: np.ndarray, img) -> np.ndarray:
    """Correlate `img` ``(H, W, C)`` with every basis kernel, replicate
    boundary. Returns ``(H, W, C, N_b)``."""
    img = np.asarray(img, dtype=np.float64)
    nb, k, _ = basis.shape
    r = k // 2
    H, W = img.shape[:2]
    pad = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    out = np.zeros(img.shape + (nb,))
    for a in range(k):
        for b in range(k):
            out += pad[a : a + H, b : b + W, :, None] * basis[:, a, b]
    return out


def basis_responses_adjoint(basis: np.ndarray, field) -> np.ndarray:
    """Adjoint of :func:`basis_responses`: ``(H, W, C, N_b)`` to ``(H, W, C)``."""
    field = np.asarray(field, dtype=np.float64)
    nb, k, _ = basis.shape
    r = k // 2
    H, W, C = field.shape[:3]
    pad = np.zeros((H + 2 * r, W + 2 * r, C))
    for a in range(k):
        for b in range(k):
            pad[a : a + H, b : b + W] += field @ basis[:, a, b]
    # fold the replicated border back onto the edge pixels
    pad[r] += pad[:r].sum(axis=0)
    pad[r + H - 1] += pad[r + H :].sum(axis=0)
    pad = pad[r : r + H]
    pad[:, r] += pad[:, :r].sum(axis=1)
    pad[:, r + W - 1] += pad[:, r + W :].sum(axis=1)
    return pad[:, r : r + W].copy()


def conv_apply(bank: FilterBank, img) -> np.ndarray:
    """Feature field ``(H, W, C, N_f)`` of filter responses."""
    img = np.asarray(img, dtype=np.float64)
    _check_fits(bank, img.shape)
    return basis_responses(bank.basis, img) @ bank.weights.T


def conv_adjoint(bank: FilterBank, field) -> np.ndarray:
    """Adjoint of :func:`conv_apply`, back to an ``(H, W, C)`` image."""
    field = np.asarray(field, dtype=np.float64)
    _check_fits(bank, field.shape)
    if field.ndim != 4 or field.shape[3] != bank.n_filters:
        raise ValueError(f"field shape {field.shape} does not match {bank.n_filters} filters")
    return basis_responses_adjoint(bank.basis, field @ bank.weights)
