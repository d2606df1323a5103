"""P1 tetrahedral finite elements: residual/tangent assembly and a
Newton solver for the pure-Dirichlet equilibrium problem.

Nodal fields are flattened node-major, (x0, y0, z0, x1, ...). Basis
gradients are constant per tet, so one-point quadrature integrates the
element contributions exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .materials import (
    MIN_DET,
    energy_batch,
    first_pk_batch,
    tangent_batch,
)

__all__ = [
    "AssemblyError",
    "NewtonError",
    "AssembledSystem",
    "NewtonResult",
    "node_dofs",
    "boundary_dofs",
    "interior_dofs",
    "deformation_gradients",
    "assemble",
    "total_energy",
    "newton_solve",
]


class AssemblyError(RuntimeError):
    """Raised when elements are inverted under the given deformation."""

    def __init__(self, tet_indices):
        self.tet_indices = list(tet_indices)
        super().__init__(
            f"{len(self.tet_indices)} flipped tets (det F < {MIN_DET:g}): "
            f"{self.tet_indices[:20]}"
        )


class NewtonError(RuntimeError):
    """Non-convergence; carries the last iterate and residual history."""

    def __init__(self, message, phi, residuals):
        self.phi = phi
        self.residuals = list(residuals)
        super().__init__(message)


def node_dofs(nodes):
    """Interleaved dof indices (3*n, 3*n+1, 3*n+2) for given nodes."""
    nodes = np.asarray(nodes, dtype=np.int64)
    return (3 * nodes[:, None] + np.arange(3)).reshape(-1)


def boundary_dofs(mesh):
    return node_dofs(mesh.boundary_nodes)


def interior_dofs(mesh):
    return node_dofs(mesh.interior_nodes)


def _basis_gradients(mesh):
    """Per-tet volume and (4, 3) barycentric basis gradients."""
    x = mesh.nodes[mesh.tets]  # (T, 4, 3)
    Dm = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)
    inv = np.linalg.inv(Dm)  # rows of inv are gradients of lambda_1..3
    grads = np.empty((len(mesh.tets), 4, 3))
    grads[:, 1:, :] = inv
    grads[:, 0, :] = -inv.sum(axis=1)
    return mesh.volumes, grads


def deformation_gradients(mesh, phi):
    """F = grad(phi) per tet for a flattened nodal field phi."""
    pts = np.asarray(phi, dtype=np.float64).reshape(-1, 3)
    _, grads = _basis_gradients(mesh)
    return np.einsum("tal,tai->tli", pts[mesh.tets], grads)


@dataclass
class AssembledSystem:
    """Tangent stiffness and residual of the discrete equilibrium at phi0."""

    tangent: sparse.csr_matrix
    residual: np.ndarray
    phi0: np.ndarray


def assemble(mesh, model, phi0):
    """Assemble tangent stiffness and residual at the deformation phi0.

    Raises AssemblyError listing the flipped tets if any element has
    det(grad phi0) < MIN_DET under svk/neo_hookean.
    """
    pts = np.asarray(phi0, dtype=np.float64).reshape(-1, 3)
    if len(pts) != mesh.n_nodes:
        raise ValueError(f"phi0 has {len(pts)} nodes, mesh has {mesh.n_nodes}")
    vol, grads = _basis_gradients(mesh)
    F = np.einsum("tal,tai->tli", pts[mesh.tets], grads)
    if model.needs_positive_det:
        det = np.linalg.det(F)
        bad = np.nonzero(det < MIN_DET)[0]
        if bad.size:
            raise AssemblyError(bad.tolist())
    P = first_pk_batch(model, F)
    A = tangent_batch(model, F)

    r_el = np.einsum("t,tli,tai->tal", vol, P, grads)
    k_el = np.einsum("t,tlimj,tai,tbj->talbm", vol, A, grads, grads)

    n = mesh.n_nodes
    residual = np.zeros(3 * n)
    dof = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)  # (T, 12)
    np.add.at(residual, dof.reshape(-1), r_el.reshape(-1))

    rows = np.repeat(dof, 12, axis=1).reshape(-1)
    cols = np.tile(dof, (1, 12)).reshape(-1)
    K = sparse.coo_matrix(
        (k_el.reshape(-1), (rows, cols)), shape=(3 * n, 3 * n)
    ).tocsr()
    return AssembledSystem(tangent=K, residual=residual, phi0=np.asarray(phi0, dtype=np.float64).copy())


def total_energy(mesh, model, phi):
    """Total stored energy; +inf if any element is inverted (svk/neo)."""
    pts = np.asarray(phi, dtype=np.float64).reshape(-1, 3)
    vol, grads = _basis_gradients(mesh)
    F = np.einsum("tal,tai->tli", pts[mesh.tets], grads)
    if model.needs_positive_det and np.any(np.linalg.det(F) < MIN_DET):
        return np.inf
    return float(vol @ energy_batch(model, F))


def assemble_residual(mesh, model, phi):
    """Residual only (no tangent); returns None if elements are inverted."""
    pts = np.asarray(phi, dtype=np.float64).reshape(-1, 3)
    vol, grads = _basis_gradients(mesh)
    F = np.einsum("tal,tai->tli", pts[mesh.tets], grads)
    if model.needs_positive_det and np.any(np.linalg.det(F) < MIN_DET):
        return None
    P = first_pk_batch(model, F)
    r_el = np.einsum("t,tli,tai->tal", vol, P, grads)
    residual = np.zeros(3 * mesh.n_nodes)
    dof = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1)
    np.add.at(residual, dof, r_el.reshape(-1))
    return residual


def default_newton_tol(mesh, model):
    """Interior residual tolerance scaled by stress and element size."""
    return 1e-8 * model.stress_scale * float(np.mean(mesh.volumes)) ** (2.0 / 3.0)


@dataclass
class NewtonResult:
    phi: np.ndarray
    residuals: list = field(default_factory=list)
    iterations: int = 0
    step_sizes: list = field(default_factory=list)


def _solve_interior(K_ii, rhs, shift):
    """Sparse LU of K + shift*I; None on breakdown."""
    try:
        mat = K_ii if shift == 0.0 else K_ii + shift * sparse.eye(K_ii.shape[0])
        x = splu(mat.tocsc()).solve(rhs)
        return x if np.all(np.isfinite(x)) else None
    except RuntimeError:
        return None


def newton_solve(mesh, model, dirichlet, phi_init, tol=None, max_iter=50):
    """Equilibrate interior nodes with the boundary pinned to `dirichlet`.

    `dirichlet` is either a mapping node -> position or a (K, 3) array
    aligned with mesh.boundary_nodes; it must cover every boundary node.
    Returns a NewtonResult whose phi matches dirichlet exactly on the
    boundary and has interior residual inf-norm below `tol`.
    """
    if isinstance(dirichlet, dict):
        missing = [int(n) for n in mesh.boundary_nodes if int(n) not in dirichlet]
        if missing:
            raise ValueError(f"dirichlet data missing for boundary nodes {missing[:10]}")
        bvals = np.array([dirichlet[int(n)] for n in mesh.boundary_nodes], dtype=np.float64)
    else:
        bvals = np.asarray(dirichlet, dtype=np.float64).reshape(-1, 3)
        if len(bvals) != len(mesh.boundary_nodes):
            raise ValueError(
                f"dirichlet rows ({len(bvals)}) != boundary nodes ({len(mesh.boundary_nodes)})"
            )
    if tol is None:
        tol = default_newton_tol(mesh, model)

    phi = np.asarray(phi_init, dtype=np.float64).reshape(-1, 3).copy()
    phi[mesh.boundary_nodes] = bvals
    phi = phi.reshape(-1)
    idof = interior_dofs(mesh)
    result = NewtonResult(phi=phi)
    if idof.size == 0:
        sys0 = assemble(mesh, model, phi)
        result.residuals.append(0.0)
        result.phi = phi
        return result

    for it in range(max_iter + 1):
        sys0 = assemble(mesh, model, phi)
        r_i = sys0.residual[idof]
        norm = float(np.abs(r_i).max())
        result.residuals.append(norm)
        if norm < tol:
            result.phi = phi
            return result
        if it == max_iter:
            break
        K_ii = sys0.tangent[idof, :][:, idof]
        shift_base = K_ii.diagonal().sum() / max(K_ii.shape[0], 1)
        e0 = total_energy(mesh, model, phi)
        accepted = False
        # escalate a diagonal shift when the plain Newton direction is
        # unusable (singular factorization or an indefinite tangent whose
        # step neither lowers the energy nor the residual)
        for shift_frac in (0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0):
            delta = _solve_interior(K_ii, -r_i, shift_frac * shift_base)
            if delta is None:
                continue
            alpha = 1.0
            while alpha >= 1e-8:
                trial = phi.copy()
                trial[idof] += alpha * delta
                e1 = total_energy(mesh, model, trial)
                if np.isfinite(e1):
                    if e1 <= e0 + 1e-10 * (abs(e0) + 1.0):
                        accepted = True
                        break
                    # equilibria can be saddle points of the energy for
                    # strongly compressed states; accept on residual decrease
                    r_trial = assemble_residual(mesh, model, trial)
                    if r_trial is not None and float(
                        np.abs(r_trial[idof]).max()
                    ) < norm * (1.0 - 1e-4 * alpha):
                        accepted = True
                        break
                alpha *= 0.5
            if accepted:
                break
        if not accepted:
            raise NewtonError(
                f"line search failed at iteration {it} (residual {norm:.3e})",
                phi,
                result.residuals,
            )
        phi = trial
        result.iterations += 1
        result.step_sizes.append(alpha)

    raise NewtonError(
        f"no convergence in {max_iter} iterations (residual {result.residuals[-1]:.3e})",
        phi,
        result.residuals,
    )
