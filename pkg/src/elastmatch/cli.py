"""Command-line front end.

Subcommands: match, gen-beam, diagnose, hks, embed. A match run writes a
fixed layout under the output directory: manifest.txt, log.csv,
config_resolved.cfg, iter_%04d.obj, forces_final.csv.

Configuration is a flat key = value text file with '#' comments; any key
can be overridden on the command line with --set key=value. Every
resolved value (defaults included) is recorded in the manifest and in
config_resolved.cfg, which can be passed back via --config to reproduce
a run.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import matcher as matcher_mod
from .descriptors import default_times, hks, spectral_basis
from .materials import MaterialModel
from .mesh import (
    SurfaceMesh,
    TetMesh,
    build_prolongation,
    embed_surface,
    enclosed_volume,
    export_prolongation,
    laplace_beltrami,
    load_surface_mesh,
    load_tet_mesh,
    write_surface_obj,
)

# key -> (type, default, help); the flat namespace of the config file
CONFIG_SPEC = {
    "material": (str, "neo", "material model: linear | svk | neo"),
    "lame_lambda": (float, 1.0, "first Lame constant (linear, svk)"),
    "lame_mu": (float, 1.0, "second Lame constant (linear, svk)"),
    "alpha": (float, 1.0, "neo-hookean deviatoric coefficient"),
    "beta": (float, 1.0, "neo-hookean volumetric coefficient"),
    "normalize_scale": (bool, True, "rescale inputs to unit coarse bounding-box diagonal"),
    "spring_k0": (float, 1.0, "initial spring constant"),
    "spring_growth": (float, 1.5, "per-iteration spring growth factor (>= 1)"),
    "spring_k_max": (float, 1e6, "cap for the spring constant"),
    "lambda_t": (float, 1.0, "tangential spring metric weight"),
    "lambda_ratio0": (float, 1.0, "initial normal/tangent metric ratio"),
    "lambda_ratio_decay": (float, 0.8, "per-iteration ratio decay in (0, 1]"),
    "lambda_ratio_floor": (float, 0.1, "lower bound for the metric ratio"),
    "descriptor_iters": (int, 5, "iterations using HKS-guided search (0 disables)"),
    "knn_frac": (float, 0.03, "k-NN count as a fraction of target vertices"),
    "confidence_threshold": (float, 0.3, "confidences below this are zeroed"),
    "hks_eigs": (int, 100, "Laplace-Beltrami eigenpairs for the HKS"),
    "hks_times": (int, 10, "HKS time samples"),
    "smooth_steps": (int, 3, "damped Jacobi smoothing steps of the prolongation"),
    "smooth_damping": (float, 0.5, "Jacobi damping factor in (0, 1]"),
    "max_outer": (int, 30, "outer iteration cap"),
    "match_tol": (float, 1e-4, "spring residual tolerance (relative to scale)"),
    "force_stall_tol": (float, 1e-4, "relative force change counted as stagnation"),
    "force_stall_window": (int, 3, "iterations the force must stall"),
    "socp_tol": (float, 1e-7, "cone solver relative gap tolerance"),
    "socp_max_iter": (int, 200, "cone solver iteration cap"),
    "newton_max_iter": (int, 50, "Newton iteration cap per equilibration"),
}


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config_file(path):
    """Read a flat 'key = value' file with '#' comments."""
    values = {}
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
    return values


def resolve_config(file_values=None, overrides=None):
    """Typed config dict with every default resolved explicitly."""
    resolved = {k: spec[1] for k, spec in CONFIG_SPEC.items()}
    for source in (file_values or {}), (overrides or {}):
        for key, raw in source.items():
            if key not in CONFIG_SPEC:
                raise ValueError(f"unknown config key {key!r}")
            typ = CONFIG_SPEC[key][0]
            resolved[key] = _parse_bool(raw) if typ is bool else typ(raw)
    return resolved


def material_from_config(cfg):
    kind = cfg["material"].lower()
    if kind in ("neo", "neo_hookean", "neohookean"):
        return MaterialModel.neo_hookean(alpha=cfg["alpha"], beta=cfg["beta"])
    if kind == "svk":
        return MaterialModel.svk(lame_lambda=cfg["lame_lambda"], lame_mu=cfg["lame_mu"])
    if kind == "linear":
        return MaterialModel.linear(lame_lambda=cfg["lame_lambda"], lame_mu=cfg["lame_mu"])
    raise ValueError(f"unknown material {cfg['material']!r}")


def match_config_from(cfg):
    return matcher_mod.MatchConfig(
        material=material_from_config(cfg),
        spring_k0=cfg["spring_k0"],
        spring_growth=cfg["spring_growth"],
        spring_k_max=cfg["spring_k_max"],
        lambda_t=cfg["lambda_t"],
        lambda_ratio0=cfg["lambda_ratio0"],
        lambda_ratio_decay=cfg["lambda_ratio_decay"],
        lambda_ratio_floor=cfg["lambda_ratio_floor"],
        descriptor_iters=cfg["descriptor_iters"],
        knn_frac=cfg["knn_frac"],
        confidence_threshold=cfg["confidence_threshold"],
        hks_eigs=cfg["hks_eigs"],
        hks_times=cfg["hks_times"],
        smooth_steps=cfg["smooth_steps"],
        smooth_damping=cfg["smooth_damping"],
        max_outer=cfg["max_outer"],
        match_tol=cfg["match_tol"],
        force_stall_tol=cfg["force_stall_tol"],
        force_stall_window=cfg["force_stall_window"],
        socp_tol=cfg["socp_tol"],
        socp_max_iter=cfg["socp_max_iter"],
        newton_max_iter=cfg["newton_max_iter"],
    )


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# beam generation


def structured_beam(nx, ny, nz, width=1.0, height=None):
    """Structured tet beam on [-w/2, w/2]^2 x [-H/2, H/2], 6 tets per cell.

    The cell split is the standard path subdivision of the cube, which
    is face-consistent across neighbouring cells.
    """
    if min(nx, ny, nz) < 1:
        raise ValueError("need at least one cell per axis")
    height = width * nz / nx if height is None else height
    xs = np.linspace(-width / 2, width / 2, nx + 1)
    ys = np.linspace(-width / 2, width / 2, ny + 1)
    zs = np.linspace(-height / 2, height / 2, nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def gid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    # six tets per cell along corner paths 000 -> 111
    paths = [
        (0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0),
    ]
    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                base = np.array([i, j, k])
                for order in paths:
                    c0 = base
                    c1 = c0 + np.eye(3, dtype=int)[order[0]]
                    c2 = c1 + np.eye(3, dtype=int)[order[1]]
                    c3 = c2 + np.eye(3, dtype=int)[order[2]]
                    tets.append([gid(*c0), gid(*c1), gid(*c2), gid(*c3)])
    tets = np.asarray(tets, dtype=np.int64)
    from .mesh import tet_volumes

    vols = tet_volumes(nodes, tets)
    flip = vols < 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return TetMesh(nodes, tets)


def box_surface(nx, ny, nz, width=1.0, height=None):
    """Triangulated boundary of a structured box lattice (outward winding)."""
    if min(nx, ny, nz) < 1:
        raise ValueError("need at least one cell per axis")
    height = width * nz / nx if height is None else height
    xs = np.linspace(-width / 2, width / 2, nx + 1)
    ys = np.linspace(-width / 2, width / 2, ny + 1)
    zs = np.linspace(-height / 2, height / 2, nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def gid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tris = []

    def add_side(corner_of, nu, nv, flip):
        for u in range(nu):
            for v in range(nv):
                a = corner_of(u, v)
                b = corner_of(u + 1, v)
                c = corner_of(u + 1, v + 1)
                d = corner_of(u, v + 1)
                if flip:
                    tris.extend([(a, c, b), (a, d, c)])
                else:
                    tris.extend([(a, b, c), (a, c, d)])

    add_side(lambda u, v: gid(u, v, nz), nx, ny, False)   # top (+z)
    add_side(lambda u, v: gid(u, v, 0), nx, ny, True)     # bottom (-z)
    add_side(lambda u, v: gid(nx, u, v), ny, nz, False)   # +x
    add_side(lambda u, v: gid(0, u, v), ny, nz, True)     # -x
    add_side(lambda u, v: gid(u, 0, v), nx, nz, False)    # -y
    add_side(lambda u, v: gid(u, ny, v), nx, nz, True)    # +y

    tris = np.asarray(tris, dtype=np.int64)
    used = np.unique(tris)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return SurfaceMesh(pts[used], remap[tris])


def twist_surface(mesh, angle_deg):
    """Twist about the z axis, linear in height; the bottom face is fixed."""
    v = mesh.vertices
    zmin, zmax = v[:, 2].min(), v[:, 2].max()
    frac = (v[:, 2] - zmin) / max(zmax - zmin, 1e-300)
    theta = np.deg2rad(angle_deg) * frac
    ct, st = np.cos(theta), np.sin(theta)
    out = v.copy()
    out[:, 0] = ct * v[:, 0] - st * v[:, 1]
    out[:, 1] = st * v[:, 0] + ct * v[:, 1]
    return mesh.with_vertices(out)


def beam_surface_resolution(triangles, width, height):
    """Lattice cells (nx, nz) whose boundary has about `triangles` faces."""
    area = 2.0 * width**2 + 4.0 * width * height
    ell = np.sqrt(2.0 * area / max(triangles, 12))
    nx = max(1, round(width / ell))
    nz = max(1, round(height / ell))
    return nx, nz


def write_tet_files(mesh, node_path, ele_path):
    """Write .node/.ele text files with 1-based indices."""
    with open(node_path, "w") as fh:
        fh.write(f"{mesh.n_nodes} 3 0 0\n")
        for i, p in enumerate(mesh.nodes, start=1):
            fh.write("%d %.17g %.17g %.17g\n" % (i, p[0], p[1], p[2]))
    with open(ele_path, "w") as fh:
        fh.write(f"{mesh.n_tets} 4 0\n")
        for i, t in enumerate(mesh.tets, start=1):
            fh.write("%d %d %d %d %d\n" % (i, t[0] + 1, t[1] + 1, t[2] + 1, t[3] + 1))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_beam(args):
    if args.resolution < 2:
        print("gen-beam: resolution must be >= 2", file=sys.stderr)
        return 1
    if args.frames < 1:
        print("gen-beam: frames must be >= 1", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = args.width
    height = width * args.aspect
    coarse = structured_beam(
        args.resolution, args.resolution, args.resolution * args.aspect, width, height
    )
    nx, nz = beam_surface_resolution(args.triangles, width, height)
    fine = box_surface(nx, nx, nz, width, height)
    write_tet_files(coarse, out / "coarse.node", out / "coarse.ele")
    write_surface_obj(out / "source.obj", fine)
    for j in range(1, args.frames + 1):
        angle = args.twist * j / args.frames
        write_surface_obj(out / f"frame_{j:04d}.obj", twist_surface(fine, angle))
    print(
        f"gen-beam: {coarse.n_tets} tets, {fine.n_triangles} triangles, "
        f"{args.frames} frames up to {args.twist} degrees in {out}"
    )
    return 0


def _scaled_inputs(source, target, coarse, factor):
    if factor == 1.0:
        return source, target, coarse
    return (
        source.with_vertices(source.vertices * factor),
        SurfaceMesh(target.vertices * factor, target.triangles),
        TetMesh(coarse.nodes * factor, coarse.tets),
    )


def _write_log(path, log):
    with open(path, "w") as fh:
        fh.write(",".join(matcher_mod.LogRow.HEADER) + "\n")
        for row in log:
            vals = row.as_tuple()
            fh.write(
                "%d,%.17g,%.17g,%d,%.17g,%.17g,%.17g\n"
                % (vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6])
            )


def _write_forces(path, result, coarse, factor):
    pts = result.phi.reshape(-1, 3)[result.boundary_nodes] / factor
    with open(path, "w") as fh:
        fh.write("node,x,y,z,fx,fy,fz,pbx,pby,pbz\n")
        for node, p, f, pb in zip(
            result.boundary_nodes, pts, result.forces, result.pulled_back
        ):
            fh.write(
                "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                % (node, p[0], p[1], p[2], f[0], f[1], f[2], pb[0], pb[1], pb[2])
            )


def cmd_match(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in (args.source, args.target, args.nodes, args.elements):
        if not Path(path).exists():
            print(f"match: input not found: {path}", file=sys.stderr)
            return 1
    overrides = dict(item.split("=", 1) for item in (args.set or []))
    file_values = parse_config_file(args.config) if args.config else {}
    cfg = resolve_config(file_values, overrides)

    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    source = load_surface_mesh(args.source)
    target = load_surface_mesh(args.target)
    coarse = load_tet_mesh(args.nodes, args.elements)
    factor = 1.0 / coarse.bbox_diagonal() if cfg["normalize_scale"] else 1.0
    src_s, tgt_s, coarse_s = _scaled_inputs(source, target, coarse, factor)
    config = match_config_from(cfg)

    def callback(state):
        write_surface_obj(
            out / f"iter_{state.iteration:04d}.obj", state.fine / factor, source.triangles
        )

    result = matcher_mod.run(config, src_s, tgt_s, coarse_s, callback=callback)
    finished = datetime.datetime.now(datetime.timezone.utc).isoformat()

    _write_log(out / "log.csv", result.log)
    _write_forces(out / "forces_final.csv", result, coarse_s, factor)
    with open(out / "config_resolved.cfg", "w") as fh:
        fh.write("# resolved configuration; reusable via --config\n")
        for key in CONFIG_SPEC:
            fh.write(f"{key} = {_fmt(cfg[key])}\n")
    final_l1 = result.log[-1].force_l1 if result.log else float("nan")
    with open(out / "manifest.txt", "w") as fh:
        fh.write(f"tool_version = {__version__}\n")
        fh.write(f"started_utc = {started}\n")
        fh.write(f"finished_utc = {finished}\n")
        for name, path in (
            ("source", args.source), ("target", args.target),
            ("nodes", args.nodes), ("elements", args.elements),
        ):
            fh.write(f"input.{name} = {path}\n")
            fh.write(f"input.{name}_sha256 = {_sha256(path)}\n")
        fh.write(f"scale_factor = {_fmt(factor)}\n")
        fh.write(f"termination = {result.termination}\n")
        fh.write(f"iterations = {len(result.log)}\n")
        fh.write(f"final_force_l1 = {_fmt(final_l1)}\n")
        fh.write(f"embedding_rms = {_fmt(result.embedding_rms)}\n")
        fh.write(f"embedding_max = {_fmt(result.embedding_max)}\n")
        for key in CONFIG_SPEC:
            fh.write(f"config.{key} = {_fmt(cfg[key])}\n")
    print(f"match: {result.termination} after {len(result.log)} iterations, "
          f"final force L1 {final_l1:.6g}")
    if result.termination == "converged":
        return 0
    if result.termination.startswith("error"):
        return 1
    return 2


def _read_manifest(path):
    values = {}
    with open(path, "r") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
    if "termination" not in values or "iterations" not in values:
        raise ValueError(f"{path}: not a run manifest")
    return values


def _read_log(path):
    rows = []
    with open(path, "r") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.strip().split(",")
            if parts and parts[0]:
                rows.append(dict(zip(header, parts)))
    return rows


def cmd_diagnose(args):
    summaries = []
    for run_dir in args.run_dirs:
        run = Path(run_dir)
        manifest_path = run / "manifest.txt"
        if not manifest_path.exists():
            print(f"diagnose: no manifest in {run_dir}", file=sys.stderr)
            return 1
        try:
            manifest = _read_manifest(manifest_path)
        except ValueError as exc:
            print(f"diagnose: {exc}", file=sys.stderr)
            return 1
        rows = _read_log(run / "log.csv") if (run / "log.csv").exists() else []
        print(f"run {run_dir} [{manifest.get('config.material', '?')}]")
        print("  iteration  force_l1       spring_residual")
        for row in rows:
            print(
                "  %9s  %-13.6g  %-13.6g"
                % (row["iteration"], float(row["force_l1"]), float(row["spring_residual"]))
            )
        if rows:
            first = float(rows[0]["force_l1"])
            last = float(rows[-1]["force_l1"])
            ratio = last / first if first > 0 else float("nan")
            print(f"  final/initial force ratio: {ratio:.6g}")
        print(
            "  embedding rms = %s, max = %s"
            % (manifest.get("embedding_rms", "?"), manifest.get("embedding_max", "?"))
        )
        summaries.append(
            (
                run_dir,
                manifest.get("config.material", "?"),
                manifest.get("final_force_l1", "?"),
                manifest.get("iterations", "?"),
                manifest.get("termination", "?"),
            )
        )
    print("run  material  force_l1  iterations  termination")
    for row in summaries:
        print("  ".join(str(x) for x in row))
    return 0


def cmd_hks(args):
    mesh = load_surface_mesh(args.mesh)
    basis = spectral_basis(mesh, min(args.eigs, mesh.n_vertices - 2))
    field = hks(basis, default_times(basis, args.times))
    with open(args.out, "w") as fh:
        fh.write("vertex," + ",".join("t%d" % i for i in range(len(field.times))) + "\n")
        for i, row in enumerate(field.values):
            fh.write("%d," % i + ",".join("%.17g" % x for x in row) + "\n")
    print(f"hks: wrote {len(field.values)} descriptors to {args.out}")
    return 0


def cmd_embed(args):
    fine = load_surface_mesh(args.source)
    coarse = load_tet_mesh(args.nodes, args.elements)
    embedding = embed_surface(fine, coarse)
    rms, worst = embedding.residual_stats()
    print(
        f"embed: {fine.n_vertices} vertices onto {len(coarse.boundary_faces)} faces, "
        f"residual rms {rms:.6g}, max {worst:.6g}"
    )
    if args.export:
        prolong = build_prolongation(
            embedding, laplace_beltrami(fine), steps=args.steps, damping=args.damping
        )
        export_prolongation(prolong, args.export)
        print(f"embed: prolongation written to {args.export}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="elastmatch",
        description="Two-scale hyperelastic surface matching with sparse boundary forces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match a source surface onto a target")
    p.add_argument("source", help="source surface mesh (OFF/OBJ/PLY)")
    p.add_argument("target", help="target surface mesh (OFF/OBJ/PLY)")
    p.add_argument("nodes", help="coarse tet mesh .node file")
    p.add_argument("elements", help="coarse tet mesh .ele file")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", default="run", help="output directory")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("gen-beam", help="generate the twisting-beam experiment inputs")
    p.add_argument("--out", default="beam", help="output directory")
    p.add_argument("--resolution", type=int, default=4, help="coarse cells across the width")
    p.add_argument("--aspect", type=int, default=4, help="beam height in widths")
    p.add_argument("--triangles", type=int, default=14400, help="fine surface triangle target")
    p.add_argument("--twist", type=float, default=360.0, help="total twist in degrees")
    p.add_argument("--frames", type=int, default=60, help="number of target frames")
    p.add_argument("--width", type=float, default=1.0, help="beam width")
    p.set_defaults(func=cmd_gen_beam)

    p = sub.add_parser("diagnose", help="summarize one or more run directories")
    p.add_argument("run_dirs", nargs="+", help="run directories with manifest.txt")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("hks", help="dump per-vertex heat kernel signatures as CSV")
    p.add_argument("mesh", help="surface mesh")
    p.add_argument("--eigs", type=int, default=100)
    p.add_argument("--times", type=int, default=10)
    p.add_argument("--out", default="hks.csv")
    p.set_defaults(func=cmd_hks)

    p = sub.add_parser("embed", help="report the fine-to-coarse embedding residual")
    p.add_argument("source", help="fine surface mesh")
    p.add_argument("nodes", help="coarse tet mesh .node file")
    p.add_argument("elements", help="coarse tet mesh .ele file")
    p.add_argument("--export", help="write the prolongation as sparse text")
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--damping", type=float, default=0.5)
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"{args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
