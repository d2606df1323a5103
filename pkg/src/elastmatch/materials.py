"""Hyperelastic material models: stored energy, Piola-Kirchhoff stresses,
and fourth-order tangent tensors.

Three isotropic homogeneous models are supported:

* ``linear``       -- quadratic in the symmetrized displacement gradient,
* ``svk``          -- Saint Venant-Kirchhoff, quadratic in Green strain,
* ``neo_hookean``  -- reduced-invariant form, valid for large strain.

All derivatives are analytic. Functions accept a single 3x3 deformation
gradient or any leading batch shape (..., 3, 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MaterialDomainError",
    "MaterialModel",
    "StressPair",
    "invariants",
    "reduced_invariants",
    "energy",
    "first_pk_stress",
    "second_pk_stress",
    "stress_pair",
    "tangent_tensor",
    "energy_batch",
    "first_pk_batch",
    "tangent_batch",
]

# evaluation rejects det F below this instead of exactly <= 0 to avoid
# catastrophic cancellation near element inversion
MIN_DET = 1e-10

_KINDS = ("linear", "svk", "neo_hookean")


class MaterialDomainError(ValueError):
    """Deformation gradient outside the model's admissible set."""


@dataclass(frozen=True)
class MaterialModel:
    """Tagged material choice with parameters.

    ``lame_lambda``/``lame_mu`` are read for linear and svk,
    ``alpha``/``beta`` for neo_hookean.
    """

    kind: str
    lame_lambda: float = 0.0
    lame_mu: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown material kind {self.kind!r}, expected one of {_KINDS}")
        if self.kind in ("linear", "svk"):
            if self.lame_lambda < 0 or self.lame_mu < 0:
                raise ValueError("Lame constants must be nonnegative")
        else:
            if self.alpha <= 0 or self.beta <= 0:
                raise ValueError("alpha and beta must be positive")

    @classmethod
    def linear(cls, lame_lambda=1.0, lame_mu=1.0):
        return cls("linear", lame_lambda=lame_lambda, lame_mu=lame_mu)

    @classmethod
    def svk(cls, lame_lambda=1.0, lame_mu=1.0):
        return cls("svk", lame_lambda=lame_lambda, lame_mu=lame_mu)

    @classmethod
    def neo_hookean(cls, alpha=1.0, beta=1.0):
        return cls("neo_hookean", alpha=alpha, beta=beta)

    @property
    def needs_positive_det(self):
        return self.kind in ("svk", "neo_hookean")

    @property
    def stress_scale(self):
        """Characteristic stress magnitude, used for tolerances."""
        if self.kind == "neo_hookean":
            return self.alpha
        return max(self.lame_mu, self.lame_lambda, 1e-300)


@dataclass(frozen=True)
class StressPair:
    first_pk: np.ndarray
    second_pk: np.ndarray


def invariants(C):
    """Principal invariants (trace, trace of cofactor, determinant)."""
    C = np.asarray(C, dtype=np.float64)
    i1 = np.trace(C, axis1=-2, axis2=-1)
    i2 = 0.5 * (i1**2 - np.trace(C @ C, axis1=-2, axis2=-1))
    i3 = np.linalg.det(C)
    return i1, i2, i3


def reduced_invariants(C):
    """Volume-normalized invariants (I1, I2, J); requires det C > 0."""
    i1, i2, i3 = invariants(C)
    if np.any(i3 <= 0.0):
        raise MaterialDomainError("reduced invariants need det C > 0")
    return i3 ** (-1.0 / 3.0) * i1, i3 ** (-2.0 / 3.0) * i2, np.sqrt(i3)


def _check_det(model, F):
    if model.needs_positive_det:
        det = np.linalg.det(F)
        if np.any(det < MIN_DET):
            raise MaterialDomainError(
                f"det F = {float(np.min(det)):.3e} below {MIN_DET:g} for {model.kind}"
            )


def _eye_like(F):
    return np.broadcast_to(np.eye(3), F.shape)


def energy_batch(model, F):
    """Stored energy density for deformation gradients of shape (..., 3, 3)."""
    F = np.asarray(F, dtype=np.float64)
    _check_det(model, F)
    if model.kind == "linear":
        eps = 0.5 * (F + np.swapaxes(F, -1, -2)) - _eye_like(F)
        tr = np.trace(eps, axis1=-2, axis2=-1)
        return 0.5 * model.lame_lambda * tr**2 + model.lame_mu * np.trace(
            eps @ eps, axis1=-2, axis2=-1
        )
    if model.kind == "svk":
        E = 0.5 * (np.swapaxes(F, -1, -2) @ F - _eye_like(F))
        tr = np.trace(E, axis1=-2, axis2=-1)
        return 0.5 * model.lame_lambda * tr**2 + model.lame_mu * np.trace(
            E @ E, axis1=-2, axis2=-1
        )
    J = np.linalg.det(F)
    nF2 = np.einsum("...ij,...ij->...", F, F)
    return model.alpha * (J ** (-2.0 / 3.0) * nF2 - 3.0) + model.beta * (J - 1.0) ** 2


def first_pk_batch(model, F):
    """First Piola-Kirchhoff stress dW/dF, batched."""
    F = np.asarray(F, dtype=np.float64)
    _check_det(model, F)
    if model.kind == "linear":
        eps = 0.5 * (F + np.swapaxes(F, -1, -2)) - _eye_like(F)
        tr = np.trace(eps, axis1=-2, axis2=-1)
        return model.lame_lambda * tr[..., None, None] * _eye_like(F) + 2.0 * model.lame_mu * eps
    if model.kind == "svk":
        E = 0.5 * (np.swapaxes(F, -1, -2) @ F - _eye_like(F))
        tr = np.trace(E, axis1=-2, axis2=-1)
        sigma = model.lame_lambda * tr[..., None, None] * _eye_like(F) + 2.0 * model.lame_mu * E
        return F @ sigma
    J = np.linalg.det(F)[..., None, None]
    B = np.swapaxes(np.linalg.inv(F), -1, -2)  # F^{-T}
    nF2 = np.einsum("...ij,...ij->...", F, F)[..., None, None]
    c1 = 2.0 * model.alpha * J ** (-2.0 / 3.0)
    return c1 * (F - (nF2 / 3.0) * B) + 2.0 * model.beta * (J - 1.0) * J * B


def tangent_batch(model, F):
    """Fourth-order tangent A[..., i, j, k, l] = d(first_pk)_ij / dF_kl."""
    F = np.asarray(F, dtype=np.float64)
    _check_det(model, F)
    eye = np.eye(3)
    batch = F.shape[:-2]
    if model.kind == "linear":
        lam, mu = model.lame_lambda, model.lame_mu
        A = (
            lam * np.einsum("ij,kl->ijkl", eye, eye)
            + mu * np.einsum("ik,jl->ijkl", eye, eye)
            + mu * np.einsum("il,jk->ijkl", eye, eye)
        )
        return np.broadcast_to(A, batch + (3, 3, 3, 3)).copy()
    if model.kind == "svk":
        lam, mu = model.lame_lambda, model.lame_mu
        E = 0.5 * (np.swapaxes(F, -1, -2) @ F - _eye_like(F))
        tr = np.trace(E, axis1=-2, axis2=-1)
        sigma = lam * tr[..., None, None] * _eye_like(F) + 2.0 * mu * E
        Bl = F @ np.swapaxes(F, -1, -2)  # left Cauchy-Green
        A = np.einsum("ik,...lj->...ijkl", eye, sigma)
        A += lam * np.einsum("...ij,...kl->...ijkl", F, F)
        A += mu * np.einsum("...il,...kj->...ijkl", F, F)
        A += mu * np.einsum("...ik,lj->...ijkl", Bl, eye)
        return A
    alpha, beta = model.alpha, model.beta
    J = np.linalg.det(F)
    B = np.swapaxes(np.linalg.inv(F), -1, -2)
    nF2 = np.einsum("...ij,...ij->...", F, F)
    c1 = 2.0 * alpha * J ** (-2.0 / 3.0)
    bb_coef = (2.0 / 9.0) * c1 * nF2 + 2.0 * beta * (2.0 * J - 1.0) * J
    bkbi_coef = c1 * nF2 / 3.0 - 2.0 * beta * (J - 1.0) * J
    A = np.einsum("...,ik,jl->...ijkl", c1, eye, eye)
    A -= (2.0 / 3.0) * np.einsum("...,...ij,...kl->...ijkl", c1, F, B)
    A -= (2.0 / 3.0) * np.einsum("...,...ij,...kl->...ijkl", c1, B, F)
    A += np.einsum("...,...ij,...kl->...ijkl", bb_coef, B, B)
    A += np.einsum("...,...kj,...il->...ijkl", bkbi_coef, B, B)
    return A


def energy(model, F):
    """Stored energy density W(F) for a single 3x3 gradient."""
    return float(energy_batch(model, np.asarray(F, dtype=np.float64)))


def first_pk_stress(model, F):
    """First Piola-Kirchhoff stress T(F) = dW/dF."""
    return first_pk_batch(model, np.asarray(F, dtype=np.float64))


def second_pk_stress(model, F):
    """Second Piola-Kirchhoff stress F^{-1} T(F); symmetric."""
    F = np.asarray(F, dtype=np.float64)
    if abs(np.linalg.det(F)) < MIN_DET:
        raise MaterialDomainError("second PK stress needs an invertible F")
    return np.linalg.solve(F, first_pk_stress(model, F))


def stress_pair(model, F):
    first = first_pk_stress(model, F)
    return StressPair(first_pk=first, second_pk=second_pk_stress(model, F))


def tangent_tensor(model, F):
    """Second derivative of W at F, with major symmetry A[ijkl] = A[klij]."""
    return tangent_batch(model, np.asarray(F, dtype=np.float64))
