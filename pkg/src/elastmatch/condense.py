"""Static condensation of the linearized equilibrium to boundary DOFs.

The assembled system at phi0 defines the affine boundary-force map

    force(phi_b) = offset + schur @ phi_b

where `offset` folds the zero-order term of the linearization and the
interior elimination, and `schur` is the Schur complement of the
interior block. Forces returned are consistent nodal forces (the
boundary residual after equilibrating interior rows).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import onenormest, splu

from .fem import node_dofs

__all__ = ["CondenseError", "CondensedSystem", "condense", "boundary_force", "write_condensed"]

_MAGIC = b"ELCOND01"


class CondenseError(RuntimeError):
    """Interior block factorization failed."""


@dataclass
class CondensedSystem:
    schur: np.ndarray          # (3K, 3K) dense
    offset: np.ndarray         # (3K,)
    phi0: np.ndarray           # full base deformation (3N,)
    boundary_nodes: np.ndarray

    @property
    def n_boundary(self):
        return len(self.boundary_nodes)


def _partition_nodes(partition):
    if hasattr(partition, "boundary_nodes"):
        return partition.boundary_nodes, partition.interior_nodes
    b, i = partition
    return np.asarray(b, dtype=np.int64), np.asarray(i, dtype=np.int64)


def condense(sys, partition):
    """Schur-condense an AssembledSystem to its boundary DOFs.

    `partition` is a TetMesh or a (boundary_nodes, interior_nodes)
    pair. One sparse factorization of the interior block serves all 3K
    right-hand sides.
    """
    bnodes, inodes = _partition_nodes(partition)
    bdof = node_dofs(bnodes)
    idof = node_dofs(inodes)
    A = sys.tangent
    # zero-order coefficient of the linearization: residual minus A phi0
    B = sys.residual - A @ sys.phi0
    A_bb = A[bdof, :][:, bdof].toarray()
    if idof.size == 0:
        return CondensedSystem(
            schur=A_bb,
            offset=B[bdof].copy(),
            phi0=sys.phi0.copy(),
            boundary_nodes=np.asarray(bnodes, dtype=np.int64).copy(),
        )
    A_ii = A[idof, :][:, idof].tocsc()
    A_ib = A[idof, :][:, bdof].toarray()
    A_bi = A[bdof, :][:, idof]
    try:
        lu = splu(A_ii)
        X = lu.solve(A_ib)
        y = lu.solve(B[idof])
    except RuntimeError as exc:
        raise CondenseError(
            f"interior block factorization failed ({exc}); "
            f"onenormest(A_II) = {onenormest(A_ii):.3e}"
        ) from exc
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise CondenseError(
            f"interior block is numerically singular; "
            f"onenormest(A_II) = {onenormest(A_ii):.3e}"
        )
    schur = A_bb - A_bi @ X
    offset = B[bdof] - A_bi @ y
    return CondensedSystem(
        schur=np.asarray(schur),
        offset=np.asarray(offset).ravel(),
        phi0=sys.phi0.copy(),
        boundary_nodes=np.asarray(bnodes, dtype=np.int64).copy(),
    )


def complete_interior(sys, partition, phi_b):
    """Interior completion of a boundary deformation under the linearization.

    Returns the full nodal field whose interior rows of the linearized
    system vanish for the given boundary values. Used as the Newton
    initial guess after a boundary update.
    """
    bnodes, inodes = _partition_nodes(partition)
    bdof = node_dofs(bnodes)
    idof = node_dofs(inodes)
    phi = np.empty_like(sys.phi0)
    phi[bdof] = np.asarray(phi_b, dtype=np.float64).ravel()
    if idof.size:
        A = sys.tangent
        B = sys.residual - A @ sys.phi0
        A_ii = A[idof, :][:, idof].tocsc()
        A_ib = A[idof, :][:, bdof]
        lu = splu(A_ii)
        phi[idof] = -lu.solve(B[idof] + A_ib @ phi[bdof])
    return phi


def boundary_force(cs, phi_b):
    """Per-node boundary forces (K, 3) for boundary positions phi_b (3K,)."""
    phi_b = np.asarray(phi_b, dtype=np.float64).ravel()
    if phi_b.size != cs.schur.shape[0]:
        raise ValueError(
            f"phi_b has {phi_b.size} entries, expected {cs.schur.shape[0]}"
        )
    return (cs.offset + cs.schur @ phi_b).reshape(-1, 3)


def write_condensed(cs, path):
    """Binary dump: 16-byte header (magic, K), then S and offset as
    little-endian float64, row-major."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<q", cs.n_boundary))
        fh.write(np.ascontiguousarray(cs.schur, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cs.offset, dtype="<f8").tobytes())
