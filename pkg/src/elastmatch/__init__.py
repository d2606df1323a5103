"""Two-scale hyperelastic surface matching with sparse boundary forces.

A source triangle mesh is matched onto a target by optimizing the
Dirichlet boundary data of a hyperelastic volumetric deformation so
that the explaining boundary forces are sparse and isotropic. Forces
are measured on a coarse tetrahedral mesh; the correspondence springs
act on the fine surface through a linear prolongation operator.
"""

__version__ = "0.1.0"

from .condense import CondensedSystem, boundary_force, condense
from .descriptors import (
    CorrespondenceSet,
    SpectralBasis,
    default_times,
    find_correspondences,
    hks,
    spectral_basis,
)
from .fem import AssembledSystem, NewtonResult, assemble, newton_solve
from .materials import (
    MaterialModel,
    StressPair,
    energy,
    first_pk_stress,
    invariants,
    reduced_invariants,
    second_pk_stress,
    tangent_tensor,
)
from .matcher import MatchConfig, MatchResult, force_l1, pullback_forces, run
from .mesh import (
    EmbeddingMap,
    Prolongation,
    SurfaceMesh,
    TetMesh,
    build_prolongation,
    embed_surface,
    laplace_beltrami,
    load_surface_mesh,
    load_tet_mesh,
)
from .socp import ConeProgram, ConeSolution, SpringMetric, build_metric, build_program, solve_socp

__all__ = [
    "__version__",
    "AssembledSystem",
    "CondensedSystem",
    "ConeProgram",
    "ConeSolution",
    "CorrespondenceSet",
    "EmbeddingMap",
    "MatchConfig",
    "MatchResult",
    "MaterialModel",
    "NewtonResult",
    "Prolongation",
    "SpectralBasis",
    "SpringMetric",
    "StressPair",
    "SurfaceMesh",
    "TetMesh",
    "assemble",
    "boundary_force",
    "build_metric",
    "build_program",
    "build_prolongation",
    "condense",
    "default_times",
    "embed_surface",
    "energy",
    "find_correspondences",
    "first_pk_stress",
    "force_l1",
    "hks",
    "invariants",
    "laplace_beltrami",
    "load_surface_mesh",
    "load_tet_mesh",
    "newton_solve",
    "pullback_forces",
    "reduced_invariants",
    "run",
    "second_pk_stress",
    "solve_socp",
    "spectral_basis",
    "tangent_tensor",
]
