"""Surface and tetrahedral meshes, barycentric embedding, and the
coarse-to-fine prolongation operator.

Conventions used throughout the package:

* vertex/node coordinates are float64 arrays of shape (n, 3),
* flattened nodal fields are node-major: (x0, y0, z0, x1, y1, z1, ...),
* boundary node columns are ordered by ascending global node index.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

__all__ = [
    "MeshFormatError",
    "MeshValidationError",
    "SurfaceMesh",
    "TetMesh",
    "EmbeddingMap",
    "Prolongation",
    "load_surface_mesh",
    "load_tet_mesh",
    "write_surface_obj",
    "embed_surface",
    "laplace_beltrami",
    "build_prolongation",
    "export_prolongation",
]


class MeshFormatError(ValueError):
    """File does not parse in the declared format."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class MeshValidationError(ValueError):
    """Parsed data violates a mesh invariant."""


# ---------------------------------------------------------------------------
# surface meshes


def _face_normals_areas(vertices, triangles):
    p0 = vertices[triangles[:, 0]]
    cross = np.cross(vertices[triangles[:, 1]] - p0, vertices[triangles[:, 2]] - p0)
    norms = np.linalg.norm(cross, axis=1)
    areas = 0.5 * norms
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = cross / np.where(norms > 0.0, norms, 1.0)[:, None]
    return normals, areas


def _vertex_normals(vertices, triangles):
    """Area-weighted average of incident face normals, unit length.

    Vertices not referenced by any triangle get the +z axis.
    """
    normals, areas = _face_normals_areas(vertices, triangles)
    acc = np.zeros_like(vertices)
    weighted = normals * areas[:, None]
    for c in range(3):
        np.add.at(acc, triangles[:, c], weighted)
    lens = np.linalg.norm(acc, axis=1)
    out = np.where(lens[:, None] > 0.0, acc / np.where(lens > 0.0, lens, 1.0)[:, None], 0.0)
    out[lens == 0.0] = (0.0, 0.0, 1.0)
    return out


class SurfaceMesh:
    """Triangular surface mesh with per-vertex normals.

    Parameters
    ----------
    vertices : (n, 3) float array
    triangles : (m, 3) int array of vertex indices
    """

    def __init__(self, vertices, triangles):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshValidationError("vertices must have shape (n, 3)")
        if self.triangles.size and self.triangles.ndim != 2 or (
            self.triangles.size and self.triangles.shape[1] != 3
        ):
            raise MeshValidationError("triangles must have shape (m, 3)")
        self.triangles = self.triangles.reshape(-1, 3)
        n = len(self.vertices)
        if self.triangles.size:
            bad = np.nonzero((self.triangles < 0) | (self.triangles >= n))[0]
            if bad.size:
                raise MeshValidationError(
                    f"triangle {bad[0]} references vertex index out of range "
                    f"(indices {self.triangles[bad[0]].tolist()}, {n} vertices)"
                )
            t = self.triangles
            rep = np.nonzero(
                (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            )[0]
            if rep.size:
                raise MeshValidationError(
                    f"triangle {rep[0]} has repeated vertices: {t[rep[0]].tolist()}"
                )
        self.vertex_normals = _vertex_normals(self.vertices, self.triangles)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def face_areas(self):
        return _face_normals_areas(self.vertices, self.triangles)[1]

    def face_normals(self):
        return _face_normals_areas(self.vertices, self.triangles)[0]

    def edges(self):
        """Undirected edges as a sorted unique (e, 2) array."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def with_vertices(self, vertices):
        """Same connectivity over new vertex positions."""
        return SurfaceMesh(vertices, self.triangles)

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


def _check_degenerate(mesh, path):
    areas = mesh.face_areas()
    if not len(areas):
        return
    tiny = np.nonzero(areas < 1e-14 * areas.mean())[0]
    if tiny.size:
        raise MeshValidationError(
            f"{path}: degenerate (zero-area) triangles: {tiny.tolist()[:20]}"
        )


def _data_lines(path):
    """Yield (lineno, stripped line) skipping blanks and '#' comments."""
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _load_off(path):
    lines = list(_data_lines(path))
    if not lines:
        raise MeshFormatError(path, 1, "empty OFF file")
    idx = 0
    lineno, header = lines[idx]
    if header.upper().startswith("OFF"):
        rest = header[3:].strip()
        idx += 1
        if rest:
            counts = rest.split()
        else:
            lineno, counts_line = lines[idx]
            counts = counts_line.split()
            idx += 1
    else:
        raise MeshFormatError(path, lineno, "missing OFF header")
    if len(counts) < 2:
        raise MeshFormatError(path, lineno, "expected vertex/face counts")
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except ValueError:
        raise MeshFormatError(path, lineno, f"bad counts {counts!r}") from None
    verts = np.empty((nv, 3))
    for i in range(nv):
        if idx >= len(lines):
            raise MeshFormatError(path, lines[-1][0], "unexpected end of vertex list")
        lineno, line = lines[idx]
        idx += 1
        parts = line.split()
        if len(parts) < 3:
            raise MeshFormatError(path, lineno, f"expected 3 coordinates, got {line!r}")
        try:
            verts[i] = [float(p) for p in parts[:3]]
        except ValueError:
            raise MeshFormatError(path, lineno, f"bad coordinate in {line!r}") from None
    tris = []
    for _ in range(nf):
        if idx >= len(lines):
            raise MeshFormatError(path, lines[-1][0], "unexpected end of face list")
        lineno, line = lines[idx]
        idx += 1
        parts = line.split()
        try:
            cnt = int(parts[0])
            poly = [int(p) for p in parts[1 : 1 + cnt]]
        except (ValueError, IndexError):
            raise MeshFormatError(path, lineno, f"bad face line {line!r}") from None
        if len(poly) != cnt or cnt < 3:
            raise MeshFormatError(path, lineno, f"bad face line {line!r}")
        for j in range(1, cnt - 1):  # fan-triangulate polygons
            tris.append((poly[0], poly[j], poly[j + 1]))
    return verts, np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def _load_obj(path):
    verts = []
    tris = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError(path, lineno, f"bad vertex line {line!r}")
                try:
                    verts.append([float(p) for p in parts[1:4]])
                except ValueError:
                    raise MeshFormatError(path, lineno, f"bad coordinate in {line!r}") from None
            elif parts[0] == "f":
                try:
                    poly = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise MeshFormatError(path, lineno, f"bad face line {line!r}") from None
                if len(poly) < 3:
                    raise MeshFormatError(path, lineno, "face with fewer than 3 vertices")
                # OBJ is 1-based; negative indices count from the end
                poly = [p - 1 if p > 0 else len(verts) + p for p in poly]
                for j in range(1, len(poly) - 1):
                    tris.append((poly[0], poly[j], poly[j + 1]))
            # vn/vt/usemtl/... are ignored
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(
        tris, dtype=np.int64
    ).reshape(-1, 3)


def _load_ply(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        text = blob.decode("ascii")
    except UnicodeDecodeError:
        raise MeshFormatError(path, 1, "binary PLY is not supported (ASCII only)") from None
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError(path, 1, "missing 'ply' magic")
    nv = nf = None
    elements = []  # (name, count) in declaration order
    vertex_props = []
    in_vertex = False
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise MeshFormatError(path, lineno, "only 'format ascii 1.0' is supported")
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            try:
                elements.append((parts[1], int(parts[2])))
            except (ValueError, IndexError):
                raise MeshFormatError(path, lineno, f"bad element line {line!r}") from None
            if parts[1] == "vertex":
                nv = int(parts[2])
            elif parts[1] == "face":
                nf = int(parts[2])
        elif parts[0] == "property" and in_vertex and parts[1] != "list":
            vertex_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
    if body_start is None or nv is None or nf is None:
        raise MeshFormatError(path, len(lines), "incomplete PLY header")
    try:
        ix, iy, iz = (vertex_props.index(c) for c in ("x", "y", "z"))
    except ValueError:
        raise MeshFormatError(path, body_start, "vertex element lacks x/y/z properties") from None
    cursor = body_start  # 0-based index into `lines` of the first body line
    verts = np.empty((0, 3))
    tris = []
    for name, count in elements:
        rows = lines[cursor : cursor + count]
        if len(rows) < count:
            raise MeshFormatError(path, len(lines), f"truncated element '{name}'")
        if name == "vertex":
            verts = np.empty((count, 3))
            for i, row in enumerate(rows):
                parts = row.split()
                try:
                    verts[i] = (float(parts[ix]), float(parts[iy]), float(parts[iz]))
                except (ValueError, IndexError):
                    raise MeshFormatError(
                        path, cursor + i + 1, f"bad vertex row {row!r}"
                    ) from None
        elif name == "face":
            for i, row in enumerate(rows):
                parts = row.split()
                try:
                    cnt = int(parts[0])
                    poly = [int(p) for p in parts[1 : 1 + cnt]]
                except (ValueError, IndexError):
                    raise MeshFormatError(path, cursor + i + 1, f"bad face row {row!r}") from None
                for j in range(1, cnt - 1):
                    tris.append((poly[0], poly[j], poly[j + 1]))
        cursor += count
    return verts, np.asarray(tris, dtype=np.int64).reshape(-1, 3)


_SURFACE_LOADERS = {"off": _load_off, "obj": _load_obj, "ply": _load_ply}


def load_surface_mesh(path, format=None):
    """Load an ASCII OFF/OBJ/PLY triangle mesh.

    `format` defaults to the file extension. Degenerate triangles (area
    below 1e-14 of the mean) and out-of-range indices raise
    MeshValidationError; malformed files raise MeshFormatError with a
    line number.
    """
    fmt = (format or str(path).rsplit(".", 1)[-1]).lower()
    if fmt not in _SURFACE_LOADERS:
        raise ValueError(f"unsupported surface format {fmt!r} (OFF, OBJ, PLY)")
    verts, tris = _SURFACE_LOADERS[fmt](path)
    mesh = SurfaceMesh(verts, tris)
    _check_degenerate(mesh, path)
    return mesh


def write_surface_obj(path, mesh_or_vertices, triangles=None):
    """Write an OBJ file with 17-significant-digit coordinates.

    Accepts a SurfaceMesh or a (vertices, triangles) pair. Coordinates
    survive a write/load round trip bit-identically.
    """
    if triangles is None:
        vertices, triangles = mesh_or_vertices.vertices, mesh_or_vertices.triangles
    else:
        vertices = mesh_or_vertices
    with open(path, "w") as fh:
        for v in np.asarray(vertices, dtype=np.float64):
            fh.write("v %.17g %.17g %.17g\n" % (v[0], v[1], v[2]))
        for t in np.asarray(triangles, dtype=np.int64):
            fh.write("f %d %d %d\n" % (t[0] + 1, t[1] + 1, t[2] + 1))


# ---------------------------------------------------------------------------
# tetrahedral meshes

# outward-oriented faces of a positively oriented tet (a, b, c, d)
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], dtype=np.int64)


def tet_volumes(nodes, tets):
    """Signed volumes, positive for right-handed node ordering."""
    a = nodes[tets[:, 0]]
    d1 = nodes[tets[:, 1]] - a
    d2 = nodes[tets[:, 2]] - a
    d3 = nodes[tets[:, 3]] - a
    return np.einsum("ij,ij->i", np.cross(d1, d2), d3) / 6.0


class TetMesh:
    """Tetrahedral mesh with boundary/interior node partition.

    boundary_faces are outward oriented; boundary_nodes and
    interior_nodes are sorted ascending and partition the node set.
    """

    def __init__(self, nodes, tets):
        self.nodes = np.ascontiguousarray(nodes, dtype=np.float64)
        self.tets = np.ascontiguousarray(tets, dtype=np.int64).reshape(-1, 4)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise MeshValidationError("nodes must have shape (n, 3)")
        n = len(self.nodes)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= n):
            raise MeshValidationError("tet references node index out of range")
        vols = tet_volumes(self.nodes, self.tets)
        bad = np.nonzero(vols <= 0.0)[0]
        if bad.size:
            raise MeshValidationError(
                f"tets with non-positive volume: {bad.tolist()[:20]}"
            )
        self.volumes = vols
        self._extract_boundary()

    def _extract_boundary(self):
        T = len(self.tets)
        faces = self.tets[:, _TET_FACES.reshape(-1)].reshape(T * 4, 3)
        key = np.sort(faces, axis=1)
        _, inv, counts = np.unique(
            key, axis=0, return_inverse=True, return_counts=True
        )
        on_boundary = counts[inv] == 1
        over = counts > 2
        if over.any():
            raise MeshValidationError(
                f"{int(over.sum())} faces shared by more than two tets"
            )
        order = np.nonzero(on_boundary)[0]
        self.boundary_faces = faces[order]
        self.boundary_face_tets = order // 4
        self.boundary_nodes = np.unique(self.boundary_faces)
        mask = np.ones(len(self.nodes), dtype=bool)
        mask[self.boundary_nodes] = False
        self.interior_nodes = np.nonzero(mask)[0]
        normals, _ = _face_normals_areas(self.nodes, self.boundary_faces)
        self.boundary_normals = normals
        # non-manifold boundary: an edge in more than two boundary faces
        bf = self.boundary_faces
        if len(bf):
            e = np.concatenate([bf[:, [0, 1]], bf[:, [1, 2]], bf[:, [2, 0]]])
            e.sort(axis=1)
            _, ecnt = np.unique(e, axis=0, return_counts=True)
            if (ecnt > 2).any():
                raise MeshValidationError(
                    f"non-manifold boundary: {int((ecnt > 2).sum())} edges in "
                    "more than two boundary faces"
                )

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_tets(self):
        return len(self.tets)

    def boundary_surface(self):
        """Boundary as a SurfaceMesh over the full node array."""
        return SurfaceMesh(self.nodes, self.boundary_faces)

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.nodes.max(axis=0) - self.nodes.min(axis=0)))


def _read_numeric_table(path, expected_cols):
    rows = []
    header = None
    for lineno, line in _data_lines(path):
        parts = line.split()
        if header is None:
            header = parts
            continue
        rows.append((lineno, parts))
    if header is None:
        raise MeshFormatError(path, 1, "missing header line")
    return header, rows


def load_tet_mesh(node_path, ele_path):
    """Load a tet mesh from .node/.ele text files (1-based by default).

    Negative-volume tets are repaired by swapping two nodes. Index base
    is taken from the first node record (0 or 1).
    """
    header, rows = _read_numeric_table(node_path, 4)
    try:
        n_nodes = int(header[0])
    except (ValueError, IndexError):
        raise MeshFormatError(node_path, 1, f"bad node header {header!r}") from None
    if len(rows) < n_nodes:
        raise MeshFormatError(node_path, rows[-1][0] if rows else 1, "truncated node list")
    ids = np.empty(n_nodes, dtype=np.int64)
    nodes = np.empty((n_nodes, 3))
    for i, (lineno, parts) in enumerate(rows[:n_nodes]):
        if len(parts) < 4:
            raise MeshFormatError(node_path, lineno, f"expected 'id x y z', got {parts!r}")
        try:
            ids[i] = int(parts[0])
            nodes[i] = [float(p) for p in parts[1:4]]
        except ValueError:
            raise MeshFormatError(node_path, lineno, f"bad node record {parts!r}") from None
    base = int(ids.min())
    if base not in (0, 1):
        raise MeshFormatError(node_path, rows[0][0], f"unsupported index base {base}")

    header, rows = _read_numeric_table(ele_path, 5)
    try:
        n_tets = int(header[0])
    except (ValueError, IndexError):
        raise MeshFormatError(ele_path, 1, f"bad element header {header!r}") from None
    if len(rows) < n_tets:
        raise MeshFormatError(ele_path, rows[-1][0] if rows else 1, "truncated element list")
    tets = np.empty((n_tets, 4), dtype=np.int64)
    for i, (lineno, parts) in enumerate(rows[:n_tets]):
        if len(parts) < 5:
            raise MeshFormatError(ele_path, lineno, f"expected 'id n0 n1 n2 n3', got {parts!r}")
        try:
            tets[i] = [int(p) - base for p in parts[1:5]]
        except ValueError:
            raise MeshFormatError(ele_path, lineno, f"bad element record {parts!r}") from None

    vols = tet_volumes(nodes, tets)
    flipped = vols < 0.0
    if flipped.any():
        tets[flipped] = tets[flipped][:, [0, 1, 3, 2]]
        logger.info("reoriented %d inverted tets from %s", int(flipped.sum()), ele_path)
    zero = np.nonzero(tet_volumes(nodes, tets) == 0.0)[0]
    if zero.size:
        raise MeshValidationError(f"{ele_path}: zero-volume tets: {zero.tolist()[:20]}")
    return TetMesh(nodes, tets)


# ---------------------------------------------------------------------------
# barycentric embedding


def closest_point_barycentric(tri_verts, points):
    """Barycentric coordinates of the closest point on each triangle.

    tri_verts: (..., 3, 3) triangle corners; points: (..., 3), broadcast
    against each other. Returns (bary (..., 3), sqdist (...)). The region
    tests follow the standard closest-point-on-triangle case analysis.
    """
    a = tri_verts[..., 0, :]
    b = tri_verts[..., 1, :]
    c = tri_verts[..., 2, :]
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = points - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = points - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def safe_div(num, den):
        return num / np.where(den != 0.0, den, 1.0)

    # region tests in the sequential order of the standard algorithm;
    # the raw conditions overlap, so the order is load-bearing
    conds = [
        (d1 <= 0.0) & (d2 <= 0.0),                       # vertex a
        (d3 >= 0.0) & (d4 <= d3),                        # vertex b
        (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0),         # edge ab
        (d6 >= 0.0) & (d5 <= d6),                        # vertex c
        (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0),         # edge ac
        (va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0),  # edge bc
    ]
    v_ab = safe_div(d1, d1 - d3)
    w_ac = safe_div(d2, d2 - d6)
    w_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    denom = safe_div(np.ones_like(va), va + vb + vc)
    v_in = vb * denom
    w_in = vc * denom

    zeros = np.zeros_like(d1)
    ones = np.ones_like(d1)
    v = np.select(conds, [zeros, ones, v_ab, zeros, zeros, zeros], default=v_in)
    w = np.select(conds, [zeros, zeros, zeros, ones, w_ac, w_bc], default=w_in)
    u = 1.0 - v - w
    bary = np.stack([u, v, w], axis=-1)
    closest = (
        a * u[..., None] + b * v[..., None] + c * w[..., None]
    )
    diff = points - closest
    return bary, np.einsum("...i,...i->...", diff, diff)


class EmbeddingMap:
    """Per fine vertex: host boundary face and clamped barycentric weights."""

    def __init__(self, face_indices, face_nodes, weights, boundary_nodes, sqdist):
        self.face_indices = np.asarray(face_indices, dtype=np.int64)
        self.face_nodes = np.asarray(face_nodes, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.boundary_nodes = np.asarray(boundary_nodes, dtype=np.int64)
        self.sqdist = np.asarray(sqdist, dtype=np.float64)
        wsum = self.weights.sum(axis=1)
        if self.weights.size and (
            np.abs(wsum - 1.0).max() > 1e-12 or self.weights.min() < -1e-12
        ):
            raise MeshValidationError("barycentric weights out of tolerance")

    @property
    def n_fine(self):
        return len(self.face_indices)

    def residual_stats(self):
        """(rms, max) distance from fine vertices to their projections."""
        d = np.sqrt(self.sqdist)
        if not d.size:
            return 0.0, 0.0
        return float(np.sqrt(np.mean(d**2))), float(d.max())


def embed_surface(fine, coarse, chunk=256):
    """Project every fine vertex onto the nearest coarse boundary face.

    Exhaustive scan over boundary faces, chunked over fine vertices.
    Equidistant faces resolve to the lowest face index.
    """
    faces = coarse.boundary_faces
    if not len(faces):
        raise MeshValidationError("coarse mesh has an empty boundary")
    tri = coarse.nodes[faces]  # (F, 3, 3)
    pts = fine.vertices
    n = len(pts)
    best_face = np.empty(n, dtype=np.int64)
    best_bary = np.empty((n, 3))
    best_d2 = np.empty(n)
    for start in range(0, n, chunk):
        p = pts[start : start + chunk][:, None, :]  # (P, 1, 3)
        bary, d2 = closest_point_barycentric(tri[None, :, :, :], p)
        sel = np.argmin(d2, axis=1)  # first minimum = lowest face index
        rows = np.arange(len(sel))
        best_face[start : start + chunk] = sel
        best_bary[start : start + chunk] = bary[rows, sel]
        best_d2[start : start + chunk] = d2[rows, sel]
    best_bary = np.clip(best_bary, 0.0, None)
    best_bary /= best_bary.sum(axis=1, keepdims=True)
    return EmbeddingMap(
        best_face, faces[best_face], best_bary, coarse.boundary_nodes, best_d2
    )


# ---------------------------------------------------------------------------
# Laplace-Beltrami operator

_COT_CLAMP = 1e6


def cotan_matrices(mesh):
    """Cotangent stiffness W and lumped (barycentric) mass M.

    Per-edge weights are clamped to [0, 1e6]; the number of clamped
    edges is returned. W has zero row sums; M is a positive diagonal.
    """
    t = mesh.triangles
    v = mesh.vertices
    n = len(v)
    # edge in >2 triangles means non-manifold input
    e_all = np.concatenate([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]])
    e_key = np.sort(e_all, axis=1)
    _, counts = np.unique(e_key, axis=0, return_counts=True)
    if (counts > 2).any():
        raise MeshValidationError(
            f"non-manifold surface: {int((counts > 2).sum())} edges in >2 triangles"
        )
    cots = np.empty((len(t), 3))
    for corner in range(3):
        p = v[t[:, corner]]
        q = v[t[:, (corner + 1) % 3]] - p
        r = v[t[:, (corner + 2) % 3]] - p
        cross = np.linalg.norm(np.cross(q, r), axis=1)
        cots[:, corner] = np.einsum("ij,ij->i", q, r) / np.where(cross > 0, cross, 1.0)
    # half-cot per corner contributes to the opposite edge
    rows = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    cols = np.concatenate([t[:, 2], t[:, 0], t[:, 1]])
    vals = 0.5 * np.concatenate([cots[:, 0], cots[:, 1], cots[:, 2]])
    W_off = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n))
    W_off = W_off + W_off.T  # symmetric accumulated edge weights
    W_off = W_off.tocoo()
    clamped = int(np.count_nonzero((W_off.data < 0.0) | (W_off.data > _COT_CLAMP)) // 2)
    data = np.clip(W_off.data, 0.0, _COT_CLAMP)
    A = sparse.csr_matrix((data, (W_off.row, W_off.col)), shape=(n, n))
    deg = np.asarray(A.sum(axis=1)).ravel()
    W = sparse.diags(deg) - A
    if clamped:
        logger.info("clamped %d cotangent edge weights", clamped)
    areas = mesh.face_areas()
    m = np.zeros(n)
    for c in range(3):
        np.add.at(m, t[:, c], areas / 3.0)
    if (m <= 0).any():
        # unreferenced vertices get a tiny positive mass to stay invertible
        m[m <= 0] = 1e-30 if areas.size == 0 else 1e-12 * areas.mean()
    return W.tocsr(), sparse.diags(m).tocsr(), clamped


def laplace_beltrami(mesh):
    """Mass-normalized cotangent Laplacian M^{-1} W (zero row sums)."""
    W, M, _ = cotan_matrices(mesh)
    inv_m = 1.0 / M.diagonal()
    return (sparse.diags(inv_m) @ W).tocsr()


# ---------------------------------------------------------------------------
# prolongation


class Prolongation:
    """Linear coarse-boundary-to-fine operator with Jacobi smoothing.

    The operator acts identically on each coordinate; `scalar_matrix` is
    the (n_fine, n_boundary) form, `matrix` the full interleaved
    (3 n_fine, 3 n_boundary) form.
    """

    def __init__(self, scalar_matrix, boundary_nodes, steps, damping):
        self.scalar_matrix = scalar_matrix.tocsr()
        self.boundary_nodes = np.asarray(boundary_nodes, dtype=np.int64)
        self.steps = int(steps)
        self.damping = float(damping)

    @property
    def matrix(self):
        return sparse.kron(self.scalar_matrix, sparse.eye(3, format="csr")).tocsr()

    @property
    def shape(self):
        m, k = self.scalar_matrix.shape
        return (3 * m, 3 * k)

    def apply(self, phi_b):
        """Map flattened boundary positions (3K,) to fine positions (3F,)."""
        phi_b = np.asarray(phi_b, dtype=np.float64)
        k = self.scalar_matrix.shape[1]
        return (self.scalar_matrix @ phi_b.reshape(k, 3)).ravel()

    def apply_points(self, points_b):
        """(K, 3) boundary positions -> (F, 3) fine positions."""
        return self.scalar_matrix @ np.asarray(points_b, dtype=np.float64)


def build_prolongation(embed, lb, steps=3, damping=0.5):
    """Compose barycentric interpolation with damped Jacobi smoothing.

    `lb` is the fine-mesh operator from laplace_beltrami. The result is
    linear and constant-preserving: rows sum to one per coordinate.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not (0.0 < damping <= 1.0):
        raise ValueError("damping must be in (0, 1]")
    n_fine = embed.n_fine
    col_of = {int(g): i for i, g in enumerate(embed.boundary_nodes)}
    cols = np.array(
        [col_of[int(g)] for g in embed.face_nodes.reshape(-1)], dtype=np.int64
    )
    rows = np.repeat(np.arange(n_fine, dtype=np.int64), 3)
    E = sparse.csr_matrix(
        (embed.weights.reshape(-1), (rows, cols)),
        shape=(n_fine, len(embed.boundary_nodes)),
    )
    T = E
    if steps > 0:
        d = lb.diagonal()
        inv_d = np.where(d != 0.0, 1.0 / np.where(d != 0.0, d, 1.0), 0.0)
        Sm = sparse.eye(n_fine, format="csr") - damping * (sparse.diags(inv_d) @ lb)
        for _ in range(steps):
            T = Sm @ T
    return Prolongation(T.tocsr(), embed.boundary_nodes, steps, damping)


def enclosed_volume(mesh):
    """Signed volume enclosed by a closed surface (divergence theorem)."""
    t = mesh.triangles
    v = mesh.vertices
    return float(
        np.einsum(
            "ij,ij->i", np.cross(v[t[:, 0]], v[t[:, 1]]), v[t[:, 2]]
        ).sum()
        / 6.0
    )


def export_prolongation(prolong, path):
    """Write the interleaved operator as 'row col value' text lines."""
    coo = prolong.matrix.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, val in zip(coo.row, coo.col, coo.data):
            fh.write("%d %d %.17g\n" % (r, c, val))
