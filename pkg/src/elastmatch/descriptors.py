"""Heat kernel signatures and descriptor-guided correspondence search.

The HKS at vertex x and time t is sum_j exp(-lambda_j t) phi_j(x)^2 over
the Laplace-Beltrami eigenpairs, normalized per time slice by its
surface integral so that descriptors are invariant to uniform scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh as dense_eigh
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from scipy.spatial import cKDTree

from .mesh import closest_point_barycentric, cotan_matrices

__all__ = [
    "SpectralBasis",
    "HKSField",
    "CorrespondenceSet",
    "spectral_basis",
    "default_times",
    "hks",
    "knn_candidates",
    "confidence_from_distance",
    "find_correspondences",
]


@dataclass
class SpectralBasis:
    """Mass-orthonormal Laplace-Beltrami eigenpairs, ascending."""

    eigenvalues: np.ndarray   # (m,)
    functions: np.ndarray     # (n_vertices, m)
    mass: np.ndarray          # lumped vertex areas (n_vertices,)

    @property
    def n_modes(self):
        return len(self.eigenvalues)


@dataclass
class HKSField:
    values: np.ndarray        # (n_vertices, s)
    times: np.ndarray         # (s,)


def spectral_basis(mesh, m):
    """Smallest-m generalized eigenpairs of (cotan stiffness, lumped mass)."""
    W, M, _ = cotan_matrices(mesh)
    n = W.shape[0]
    if m < 1 or m > n:
        raise ValueError(f"m = {m} out of range for {n} vertices")
    ncomp, _ = connected_components(W != 0, directed=False)
    if ncomp > 1:
        raise ValueError(f"mesh has {ncomp} connected components, expected 1")
    mass = M.diagonal()
    lam_scale = (W.diagonal().sum() / n) / (mass.sum() / n)
    if n < 300 or m > n - 2:
        evals, evecs = dense_eigh(W.toarray(), M.toarray())
        evals, evecs = evals[:m], evecs[:, :m]
    else:
        try:
            evals, evecs = eigsh(W, k=m, M=M, sigma=-1e-8 * lam_scale, which="LM")
        except ArpackNoConvergence as exc:
            attained = len(exc.eigenvalues)
            raise RuntimeError(
                f"eigensolver converged only {attained} of {m} pairs"
            ) from exc
    order = np.argsort(evals)
    evals = evals[order]
    evecs = evecs[:, order]
    evals[np.abs(evals) < 1e-8 * lam_scale] = np.maximum(
        evals[np.abs(evals) < 1e-8 * lam_scale], 0.0
    )
    return SpectralBasis(eigenvalues=evals, functions=evecs, mass=mass)


def default_times(basis, s=10):
    """Log-spaced times spanning [4 ln10 / lambda_m, 4 ln10 / lambda_2]."""
    lam = basis.eigenvalues
    if len(lam) < 2 or lam[-1] <= 0 or lam[1] <= 0:
        raise ValueError("need at least two positive eigenvalues for a time range")
    t_min = 4.0 * np.log(10.0) / lam[-1]
    t_max = 4.0 * np.log(10.0) / lam[1]
    return np.geomspace(t_min, t_max, s)


def hks(basis, times):
    """Heat kernel signature field, per-slice normalized."""
    times = np.asarray(times, dtype=np.float64).ravel()
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    decay = np.exp(-np.outer(basis.eigenvalues, times))      # (m, s)
    values = (basis.functions**2) @ decay                    # (n, s)
    integrals = basis.mass @ values                          # (s,)
    values = values / integrals
    return HKSField(values=values, times=times)


def knn_candidates(points, queries, k):
    """Exact k nearest neighbours with ties broken by lowest index.

    Returns an (n_queries, k) index array sorted by (distance, index).
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("empty point set")
    k = min(int(k), len(points))
    tree = cKDTree(points)
    dist, _ = tree.query(queries, k=k)
    kth = np.atleast_2d(dist)[:, -1] if k > 1 else np.asarray(dist).ravel()
    radii = kth * (1.0 + 1e-9) + 1e-300
    balls = tree.query_ball_point(queries, radii)
    out = np.empty((len(queries), k), dtype=np.int64)
    for i, cand in enumerate(balls):
        cand = np.asarray(cand, dtype=np.int64)
        d2 = np.sum((points[cand] - queries[i]) ** 2, axis=1)
        order = np.lexsort((cand, d2))
        out[i] = cand[order[:k]]
    return out


def confidence_from_distance(d, sigma):
    """Monotone map from descriptor distance to confidence in (0, 1]."""
    if sigma <= 0:
        return np.ones_like(np.asarray(d, dtype=np.float64))
    return np.exp(-np.asarray(d, dtype=np.float64) / sigma)


@dataclass
class CorrespondenceSet:
    """Per source vertex: a target surface point, normal, and confidence."""

    target_points: np.ndarray     # (n_source, 3)
    target_normals: np.ndarray    # (n_source, 3)
    confidences: np.ndarray       # (n_source,) in [0, 1]
    target_faces: np.ndarray      # (n_source,)
    target_bary: np.ndarray       # (n_source, 3)

    @property
    def n_points(self):
        return len(self.target_points)


def _vertex_face_adjacency(target):
    """Per target vertex, ascending list of incident face indices."""
    t = target.triangles
    faces = np.repeat(np.arange(len(t)), 3)
    verts = t.reshape(-1)
    order = np.lexsort((faces, verts))
    verts, faces = verts[order], faces[order]
    starts = np.searchsorted(verts, np.arange(target.n_vertices))
    ends = np.searchsorted(verts, np.arange(target.n_vertices) + 1)
    return verts, faces, starts, ends


def find_correspondences(source, target, source_hks, target_hks, knn, threshold=0.0):
    """Match each source vertex to a point on the target surface.

    `source` is a SurfaceMesh (its deformed state) or an (n, 3) position
    array. With knn > 1 the knn Euclidean-nearest target vertices are
    reranked by HKS distance and the winner projected onto its incident
    triangles; confidence is exp(-d/median d), zeroed below `threshold`.
    knn = 1 is plain Euclidean nearest neighbour with confidence 1.
    """
    if knn < 1:
        raise ValueError("knn must be >= 1")
    src = source.vertices if hasattr(source, "vertices") else np.asarray(source, dtype=np.float64)
    if target.n_vertices == 0 or target.n_triangles == 0:
        raise ValueError("empty target mesh")
    cand = knn_candidates(target.vertices, src, knn)
    if knn == 1:
        best = cand[:, 0]
        conf = np.ones(len(src))
    else:
        if source_hks is None or target_hks is None:
            raise ValueError("HKS fields are required for knn > 1")
        diffs = source_hks.values[:, None, :] - target_hks.values[cand]
        d_hks = np.linalg.norm(diffs, axis=2)                 # (n_src, k)
        pick = np.argmin(d_hks, axis=1)                       # ties: nearest first
        rows = np.arange(len(src))
        best = cand[rows, pick]
        sigma = float(np.median(d_hks))
        conf = confidence_from_distance(d_hks[rows, pick], sigma)
        conf[conf < threshold] = 0.0

    # project each source vertex onto the chosen vertex's incident faces
    _, adj_faces, starts, ends = _vertex_face_adjacency(target)
    counts = ends[best] - starts[best]
    if np.any(counts == 0):
        bad = int(np.nonzero(counts == 0)[0][0])
        raise ValueError(f"target vertex {int(best[bad])} has no incident faces")
    pair_rows = np.repeat(np.arange(len(src)), counts)
    offsets = np.concatenate(
        [np.arange(c) + starts[b] for b, c in zip(best, counts)]
    )
    pair_faces = adj_faces[offsets]
    tri = target.vertices[target.triangles[pair_faces]]
    bary, d2 = closest_point_barycentric(tri, src[pair_rows])
    order = np.lexsort((pair_faces, d2, pair_rows))
    first = np.searchsorted(pair_rows[order], np.arange(len(src)))
    sel = order[first]
    faces = pair_faces[sel]
    bary = bary[sel]
    points = np.einsum("nj,njk->nk", bary, target.vertices[target.triangles[faces]])
    normals = target.face_normals()[faces]
    return CorrespondenceSet(
        target_points=points,
        target_normals=normals,
        confidences=conf,
        target_faces=faces,
        target_bary=bary,
    )
