"""Kernel ridge interpolation over conditions and the spacetime supervisory path.

Given anchor conditions ``c_1..c_m`` and a tuple of targets ``x_1..x_m``, the
regressor ``psi_hat(c) = sum_j A_j k(c, c_j)`` solves ``(G + lam I) A = X``.
The spacetime path is ``psi(t, c) = (1 - t) x0 + t psi_hat(c)`` with the
analytic Jacobian in ``(t, c)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import pdist

from .errors import IllPosedError, InvalidConfigError

KERNEL_KINDS = ("rbf", "linear")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel on condition space.

    ``rbf``: ``exp(-|c - c'|^2 / (2 h^2))``.  ``linear``: the affine kernel
    ``1 + c . c'`` so that the fitted regressor spans affine functions.
    ``bandwidth`` is a positive float or ``"median-heuristic"``.
    """

    kind: str = "rbf"
    bandwidth: float | str = "median-heuristic"
    ridge_lambda: float = 1e-8

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvalidConfigError(f"unknown kernel kind {self.kind!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median-heuristic":
                raise InvalidConfigError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise InvalidConfigError("bandwidth must be positive")
        if not self.ridge_lambda >= 0:
            raise InvalidConfigError("ridge_lambda must be nonnegative")

    def resolve(self, anchors):
        """Return a copy with a numeric bandwidth (median pairwise anchor distance)."""
        if not isinstance(self.bandwidth, str):
            return self
        anchors = np.asarray(anchors, dtype=float)
        h = 1.0
        if len(anchors) > 1:
            h = float(np.median(pdist(anchors)))
            if not h > 0:
                h = 1.0
        return replace(self, bandwidth=h)

    def to_dict(self):
        return {"kind": self.kind, "bandwidth": self.bandwidth, "ridge_lambda": self.ridge_lambda}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def kernel_matrix(kernel, a, b):
    """``K[i, j] = k(a_i, b_j)`` for a resolved kernel."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if kernel.kind == "linear":
        return 1.0 + a @ b.T
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * kernel.bandwidth**2))


def kernel_grad(kernel, c, anchors):
    """Gradient of ``k(c, anchor_j)`` in ``c``; shape ``(B, m, k)`` for ``c`` of shape ``(B, k)``."""
    c = np.asarray(c, dtype=float)
    anchors = np.asarray(anchors, dtype=float)
    if kernel.kind == "linear":
        return np.broadcast_to(anchors[None, :, :], (len(c), *anchors.shape)).copy()
    diff = c[:, None, :] - anchors[None, :, :]
    kv = kernel_matrix(kernel, c, anchors)
    return -diff / kernel.bandwidth**2 * kv[:, :, None]


class KernelRegression:
    """Target-independent part of the regressor for a fixed anchor set.

    Caches ``S = (G + lam I)^{-1}`` so that ``psi_hat(c) = w(c) @ X`` with
    ``w(c) = S k(C, c)``; many target tuples share one factorization.  The
    linear kernel uses the equivalent primal form over features ``[1, c]``.
    """

    def __init__(self, anchors, kernel):
        anchors = np.asarray(anchors, dtype=float)
        if anchors.ndim != 2 or len(anchors) < 1:
            raise IllPosedError("at least one anchor condition is required")
        self.anchors = anchors
        self.kernel = kernel.resolve(anchors)
        lam = self.kernel.ridge_lambda
        if lam == 0 and len(np.unique(anchors, axis=0)) < len(anchors):
            raise IllPosedError("duplicate anchor conditions with ridge_lambda=0; use ridge_lambda > 0")
        if self.kernel.kind == "linear":
            # Affine Gram has rank <= k+1 and would amplify lam-sized modes;
            # use the primal form w(c) = [1, c] (F^T F + lam I)^{-1} F^T instead.
            feats = np.hstack([np.ones((len(anchors), 1)), anchors])
            A = feats.T @ feats + lam * np.eye(feats.shape[1])
            self.primal = np.linalg.pinv(A, hermitian=True) @ feats.T
            self.solve_matrix = None
        else:
            gram = kernel_matrix(self.kernel, anchors, anchors) + lam * np.eye(len(anchors))
            self.primal = None
            try:
                self.solve_matrix = np.linalg.inv(gram)
            except np.linalg.LinAlgError:
                raise IllPosedError("singular kernel system; use ridge_lambda > 0") from None
            if not np.all(np.isfinite(self.solve_matrix)):
                raise IllPosedError("singular kernel system; use ridge_lambda > 0")

    @property
    def num_anchors(self):
        return len(self.anchors)

    def weights(self, c):
        """Interpolation weights ``(B, m)`` at conditions ``c`` of shape ``(B, k)``."""
        c = np.atleast_2d(np.asarray(c, dtype=float))
        if self.primal is not None:
            return self.primal[0][None, :] + c @ self.primal[1:]
        return kernel_matrix(self.kernel, c, self.anchors) @ self.solve_matrix

    def weight_jacobian(self, c):
        """``dw_j / dc_l`` with shape ``(B, m, k)``."""
        c = np.atleast_2d(np.asarray(c, dtype=float))
        if self.primal is not None:
            return np.broadcast_to(self.primal[1:].T[None], (len(c), self.num_anchors, c.shape[1])).copy()
        g = kernel_grad(self.kernel, c, self.anchors)
        return np.einsum("bjl,ji->bil", g, self.solve_matrix)

    def fit(self, targets):
        targets = np.asarray(targets, dtype=float)
        if targets.ndim != 2 or targets.shape[0] != self.num_anchors:
            raise IllPosedError(f"targets must have shape ({self.num_anchors}, d)")
        return InterpolantBasis(
            anchor_conditions=self.anchors,
            targets=targets,
            kernel=self.kernel,
            regression=self,
        )


@dataclass
class InterpolantBasis:
    anchor_conditions: np.ndarray
    targets: np.ndarray
    kernel: KernelSpec
    regression: KernelRegression


def fit_regressor(conditions, targets, kernel=None):
    """Fit ``psi_hat`` through ``(conditions[i], targets[i])``.

    Parameters
    ----------
    conditions : ndarray, shape (m, k)
    targets : ndarray, shape (m, d)
    kernel : KernelSpec, optional
        Defaults to RBF with the median heuristic and ``ridge_lambda=1e-8``.

    Raises
    ------
    IllPosedError
        Duplicate conditions with ``ridge_lambda == 0`` or a singular Gram.
    """
    conditions = np.asarray(conditions, dtype=float)
    if conditions.ndim == 1:
        conditions = conditions[:, None]
    return KernelRegression(conditions, kernel or KernelSpec()).fit(targets)


def eval_regressor(basis, c):
    c = np.asarray(c, dtype=float)
    single = c.ndim <= 1
    out = basis.regression.weights(np.atleast_2d(c).reshape(-1, basis.anchor_conditions.shape[1])) @ basis.targets
    return out[0] if single else out


def grad_regressor(basis, c):
    """Jacobian ``d psi_hat / dc`` of shape ``(d, k)`` (``(B, d, k)`` for a batch)."""
    c = np.asarray(c, dtype=float)
    single = c.ndim <= 1
    dw = basis.regression.weight_jacobian(np.atleast_2d(c).reshape(-1, basis.anchor_conditions.shape[1]))
    out = np.einsum("jd,bjl->bdl", basis.targets, dw)
    return out[0] if single else out


def spacetime_psi(x0, basis, t, c, source_weight=None):
    """Value and ``(d, 1+k)`` Jacobian of ``(1 - t) x0 + t psi_hat(c)``.

    Column 0 is ``d/dt``; columns ``1..k`` are ``d/dc``.  By default ``x0`` is
    held fixed in ``c``.  Passing the source regressor's ``weight`` adds the
    drift ``(1 - t) * weight`` that arises when ``x0 = R(c) + z``.
    """
    x0 = np.asarray(x0, dtype=float)
    target = eval_regressor(basis, c)
    value = (1.0 - t) * x0 + t * target
    dc = t * grad_regressor(basis, c)
    if source_weight is not None:
        dc = dc + (1.0 - t) * np.asarray(source_weight, dtype=float)
    jac = np.concatenate([(target - x0)[:, None], dc], axis=1)
    return value, jac


def spacetime_psi_batch(x0, targets, w, dw, t, source_weight=None):
    """Vectorized :func:`spacetime_psi` for many tuples sharing one anchor set.

    ``x0`` (B, d), ``targets`` (B, m, d), ``w`` (B, m), ``dw`` (B, m, k),
    ``t`` (B,).  Returns values (B, d) and Jacobians (B, d, 1+k).
    """
    psi_hat = np.einsum("bj,bjd->bd", w, targets)
    grad = np.einsum("bjd,bjl->bdl", targets, dw)
    tt = t[:, None]
    value = (1.0 - tt) * x0 + tt * psi_hat
    dc = tt[:, :, None] * grad
    if source_weight is not None:
        dc = dc + (1.0 - tt)[:, :, None] * np.asarray(source_weight, dtype=float)[None]
    jac = np.concatenate([(psi_hat - x0)[:, :, None], dc], axis=2)
    return value, jac
