"""Outer matching loop: alternate correspondence estimation, convex
boundary optimization, and Newton re-equilibration on the coarse mesh,
prolonging each boundary update to the fine surface.

One iteration: (1) correspondences on the fine scale, (2) assemble and
condense at the current deformation, (3) cone program for the boundary,
(4) Newton solve with the optimized boundary as Dirichlet data,
(5) prolong to the fine scale, (6) advance the spring and metric
schedules. Terminates on a small spring residual, a stagnating force
norm, or the iteration cap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import descriptors as desc_mod
from . import fem as fem_mod
from . import socp as socp_mod
from .condense import CondenseError, boundary_force, complete_interior, condense
from .materials import MaterialModel
from .mesh import build_prolongation, embed_surface, laplace_beltrami

logger = logging.getLogger(__name__)

__all__ = [
    "MatchConfig",
    "MatchState",
    "MatchResult",
    "run",
    "pullback_forces",
    "force_l1",
]


@dataclass
class MatchConfig:
    """All knobs of the outer loop. Scalars are nondimensional; inputs
    are expected pre-scaled (the CLI rescales to unit bounding box)."""

    material: MaterialModel = field(default_factory=MaterialModel.neo_hookean)
    spring_k0: float = 1.0
    spring_growth: float = 1.5
    spring_k_max: float = 1e6
    lambda_t: float = 1.0
    lambda_ratio0: float = 1.0
    lambda_ratio_decay: float = 0.8
    lambda_ratio_floor: float = 0.1
    descriptor_iters: int = 5
    knn_frac: float = 0.03
    confidence_threshold: float = 0.3
    hks_eigs: int = 100
    hks_times: int = 10
    smooth_steps: int = 3
    smooth_damping: float = 0.5
    step_cap_frac: float = 0.5
    max_outer: int = 30
    match_tol: float = 1e-4
    force_stall_tol: float = 1e-4
    force_stall_window: int = 3
    socp_tol: float = 1e-7
    socp_max_iter: int = 200
    newton_max_iter: int = 50

    def __post_init__(self):
        positive = (
            "spring_k0", "spring_k_max", "lambda_t", "lambda_ratio0",
            "knn_frac", "match_tol", "force_stall_tol", "socp_tol",
            "step_cap_frac",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.spring_growth < 1.0:
            raise ValueError("spring_growth must be >= 1")
        if not (0.0 < self.lambda_ratio_decay <= 1.0):
            raise ValueError("lambda_ratio_decay must be in (0, 1]")
        if self.lambda_ratio_floor <= 0:
            raise ValueError("lambda_ratio_floor must be positive")
        if self.smooth_steps < 0 or self.descriptor_iters < 0:
            raise ValueError("step counts must be nonnegative")
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise ValueError("confidence_threshold must be in [0, 1]")


@dataclass
class LogRow:
    iteration: int
    force_l1: float
    spring_residual: float
    newton_iters: int
    socp_gap: float
    spring_k: float
    lambda_ratio: float

    HEADER = ("iteration", "force_l1", "spring_residual", "newton_iters",
              "socp_gap", "spring_k", "lambda_ratio")

    def as_tuple(self):
        return (self.iteration, self.force_l1, self.spring_residual,
                self.newton_iters, self.socp_gap, self.spring_k, self.lambda_ratio)


@dataclass
class MatchState:
    iteration: int
    phi: np.ndarray               # coarse deformation (3N,)
    fine: np.ndarray              # fine vertex positions (n_fine, 3)
    correspondences: object
    log: list


@dataclass
class MatchResult:
    fine: np.ndarray              # (n_fine, 3)
    phi: np.ndarray               # (3N,)
    forces: np.ndarray            # equilibrated boundary forces (K, 3)
    socp_forces: np.ndarray       # forces of the last convex step (K, 3)
    pulled_back: np.ndarray       # rotation-invariant forces (K, 3)
    log: list
    termination: str
    boundary_nodes: np.ndarray
    prolongation: object
    embedding_rms: float
    embedding_max: float

    @property
    def converged(self):
        return self.termination == "converged"


def force_l1(forces):
    """Sum of Euclidean norms of the per-node force vectors."""
    forces = np.asarray(forces, dtype=np.float64).reshape(-1, 3)
    return float(np.linalg.norm(forces, axis=1).sum())


def pullback_forces(forces, phi, mesh):
    """Pull boundary forces back through the averaged deformation gradient.

    Per boundary node the gradient is the rest-volume-weighted average
    over incident tets; the output solves F_avg x = force.
    """
    forces = np.asarray(forces, dtype=np.float64).reshape(-1, 3)
    if len(forces) != len(mesh.boundary_nodes):
        raise ValueError("one force per boundary node required")
    F = fem_mod.deformation_gradients(mesh, phi)
    acc = np.zeros((mesh.n_nodes, 3, 3))
    wsum = np.zeros(mesh.n_nodes)
    for corner in range(4):
        np.add.at(acc, mesh.tets[:, corner], F * mesh.volumes[:, None, None])
        np.add.at(wsum, mesh.tets[:, corner], mesh.volumes)
    out = np.empty_like(forces)
    for i, node in enumerate(mesh.boundary_nodes):
        favg = acc[node] / wsum[node]
        det = np.linalg.det(favg)
        if abs(det) < 1e-12:
            raise ValueError(f"singular averaged gradient at boundary node {int(node)}")
        out[i] = np.linalg.solve(favg, forces[i])
    return out


def _newton_with_substeps(mesh, model, system, phi_b_old, phi_b_new, phi, max_iter):
    """Newton solve after a boundary update, with two safety nets.

    The interior is initialized from the linearized completion of the
    new boundary; on failure the boundary motion is applied in substeps
    (falling back to the previous interior when a completion is
    inverted).
    """
    last_exc = None
    for pieces in (1, 2, 4, 8):
        cur = phi.copy()
        iters = 0
        try:
            for j in range(1, pieces + 1):
                t = j / pieces
                target = (1.0 - t) * phi_b_old + t * phi_b_new
                inits = [complete_interior(system, mesh, target), cur]
                for attempt, init in enumerate(inits):
                    try:
                        res = fem_mod.newton_solve(
                            mesh, model, target.reshape(-1, 3), init, max_iter=max_iter
                        )
                        break
                    except (fem_mod.NewtonError, fem_mod.AssemblyError):
                        if attempt == len(inits) - 1:
                            raise
                cur = res.phi
                iters += res.iterations
            return cur, iters
        except (fem_mod.NewtonError, fem_mod.AssemblyError) as exc:
            last_exc = exc
            logger.info("newton failed with %d substeps: %s", pieces, exc)
    raise last_exc


def _apply_boundary_step(mesh, model, system, phi_b_old, phi_b_new, phi, max_iter):
    """Equilibrate toward the optimized boundary, contracting on failure.

    If even substepping cannot reach the endpoint (the optimized
    boundary itself inverts fully pinned elements), the step is shrunk
    toward the previous boundary and retried. Returns the applied
    boundary values, the equilibrated field, and the Newton iteration
    count.
    """
    last_exc = None
    for shrink in (1.0, 0.5, 0.25, 0.125, 1.0 / 16.0):
        target = phi_b_old + shrink * (phi_b_new - phi_b_old)
        try:
            phi_out, iters = _newton_with_substeps(
                mesh, model, system, phi_b_old, target, phi, max_iter
            )
            return target, phi_out, iters
        except (fem_mod.NewtonError, fem_mod.AssemblyError) as exc:
            last_exc = exc
            logger.info("boundary step shrink %.4g failed: %s", shrink, exc)
    raise last_exc


def run(config, source, target, coarse, initial=None, callback=None):
    """Match `source` onto `target` measuring forces on `coarse`.

    `initial` optionally warm-starts the coarse deformation (flattened,
    3N). `callback(state)` is invoked after every iteration.
    """
    model = config.material
    embedding = embed_surface(source, coarse)
    emb_rms, emb_max = embedding.residual_stats()
    lb = laplace_beltrami(source)
    prolong = build_prolongation(
        embedding, lb, steps=config.smooth_steps, damping=config.smooth_damping
    )
    bdof = fem_mod.boundary_dofs(coarse)
    X = coarse.nodes.reshape(-1)
    phi = X.copy() if initial is None else np.asarray(initial, dtype=np.float64).copy()
    if phi.shape != X.shape:
        raise ValueError("initial deformation has wrong length")

    hks_s = hks_t = None
    knn_count = 1
    if config.descriptor_iters > 0:
        m = min(config.hks_eigs, source.n_vertices - 2, target.n_vertices - 2)
        basis_s = desc_mod.spectral_basis(source, m)
        basis_t = desc_mod.spectral_basis(target, m)
        times = desc_mod.default_times(basis_s, config.hks_times)
        hks_s = desc_mod.hks(basis_s, times)
        hks_t = desc_mod.hks(basis_t, times)
        knn_count = max(1, round(config.knn_frac * target.n_vertices))

    scale = max(target.bbox_diagonal(), coarse.bbox_diagonal(), 1e-300)
    h_char = float(np.mean(np.cbrt(6.0 * coarse.volumes)))
    k = config.spring_k0
    ratio = config.lambda_ratio0
    fine = prolong.apply_points(phi[bdof].reshape(-1, 3))
    log = []
    termination = "max_iterations"
    corr = None
    last_sol = None
    last_forces = None

    for it in range(1, config.max_outer + 1):
        use_knn = knn_count if it <= config.descriptor_iters else 1
        corr = desc_mod.find_correspondences(
            fine, target, hks_s, hks_t, use_knn, config.confidence_threshold
        )
        if corr.confidences.max() <= 0.0:
            # all candidates rejected: fall back to Euclidean projection
            corr = desc_mod.find_correspondences(fine, target, None, None, 1)

        try:
            system = fem_mod.assemble(coarse, model, phi)
            cs = condense(system, coarse)
            triples = list(
                zip(range(len(fine)), corr.target_points, corr.target_normals)
            )
            # the decaying ratio raises the normal penalty relative to the
            # tangential one, constraining the search to the target surface
            # while leaving tangential sliding cheap
            metric = socp_mod.build_metric(
                triples, config.lambda_t / ratio, config.lambda_t, corr.confidences
            )
            prog = socp_mod.build_program(cs, prolong, corr.target_points, metric, k)
            sol = socp_mod.solve_socp(prog, tol=config.socp_tol, max_iter=config.socp_max_iter)
            phi_b_new = sol.phi_b
            # trust region of the linearization: cap the boundary step at a
            # fraction of the characteristic element size
            step = (phi_b_new - phi[bdof]).reshape(-1, 3)
            step_max = float(np.linalg.norm(step, axis=1).max())
            cap = config.step_cap_frac * h_char
            if step_max > cap:
                phi_b_new = phi[bdof] + (cap / step_max) * (phi_b_new - phi[bdof])
            phi_b_new, phi_new, newton_iters = _apply_boundary_step(
                coarse, model, system, phi[bdof], phi_b_new, phi, config.newton_max_iter
            )
        except (fem_mod.NewtonError, fem_mod.AssemblyError,
                CondenseError, socp_mod.SocpError) as exc:
            termination = f"error: {exc}"
            logger.warning("aborting at iteration %d: %s", it, exc)
            break

        phi = phi_new
        # forces of the boundary state actually applied (equals the
        # optimized forces once the step cap is inactive)
        applied_forces = boundary_force(cs, phi_b_new)
        last_sol = sol
        last_forces = applied_forces
        fine = prolong.apply_points(phi_b_new.reshape(-1, 3))
        # by construction the fine state is exactly the prolonged boundary
        assert np.array_equal(
            fine.ravel(), prolong.apply(phi[bdof])
        ), "fine state out of sync with prolongation"

        active = corr.confidences > 0.0
        if not active.any():
            active = np.ones(len(fine), dtype=bool)
        spring_rms = float(
            np.sqrt(np.mean(np.sum((fine[active] - corr.target_points[active]) ** 2, axis=1)))
        )
        spring_rel = spring_rms / scale
        l1 = force_l1(applied_forces)
        row = LogRow(
            iteration=it,
            force_l1=l1,
            spring_residual=spring_rel,
            newton_iters=newton_iters,
            socp_gap=sol.relative_gap,
            spring_k=k,
            lambda_ratio=ratio,
        )
        log.append(row)
        if callback is not None:
            callback(MatchState(iteration=it, phi=phi, fine=fine, correspondences=corr, log=log))

        if spring_rel < config.match_tol:
            termination = "converged"
            break
        if len(log) > config.force_stall_window:
            window = [r.force_l1 for r in log[-(config.force_stall_window + 1):]]
            ref = max(abs(window[-1]), 1e-300)
            if max(abs(window[i + 1] - window[i]) for i in range(len(window) - 1)) < (
                config.force_stall_tol * ref
            ):
                termination = "stagnated"
                break

        k = min(k * config.spring_growth, config.spring_k_max)
        ratio = max(ratio * config.lambda_ratio_decay, config.lambda_ratio_floor)

    # final equilibrated boundary forces: boundary residual at phi
    final_sys = fem_mod.assemble(coarse, model, phi)
    forces = final_sys.residual[bdof].reshape(-1, 3)
    pulled = pullback_forces(forces, phi, coarse)
    socp_forces = last_forces if last_forces is not None else np.zeros_like(forces)
    return MatchResult(
        fine=fine,
        phi=phi,
        forces=forces,
        socp_forces=socp_forces,
        pulled_back=pulled,
        log=log,
        termination=termination,
        boundary_nodes=coarse.boundary_nodes.copy(),
        prolongation=prolong,
        embedding_rms=emb_rms,
        embedding_max=emb_max,
    )
