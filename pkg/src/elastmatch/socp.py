"""Second-order cone programs for the boundary optimization step, and a
self-contained primal-dual interior-point solver.

The per-iteration program minimizes the group-sparse force norm plus a
quadratic spring penalty,

    minimize  sum_i g_i + (k/2) e
    s.t.      || offset_i + S_i phi ||  <=  g_i          (one cone per node)
              || T phi - targets ||_Q^2 <=  e            (rotated cone)

with the fine-scale spring folded into an equivalent coarse-scale cone
through an eigenvalue factorization of T' Q T.

The solver handles the standard conic form

    minimize c'x   s.t.   G x + s = h,  s in K

for K a product of second-order cones, using Nesterov-Todd scaling and
a Mehrotra predictor-corrector step. Problem sizes here are a few
thousand variables, so G and the normal matrix are kept dense.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve, eigh

__all__ = [
    "SocpError",
    "SpringMetric",
    "ConeProgram",
    "ConeSolution",
    "build_metric",
    "build_program",
    "solve_socp",
    "export_program",
]


class SocpError(RuntimeError):
    """Solver failure; carries the best iterate found."""

    def __init__(self, message, best=None):
        self.best = best or {}
        super().__init__(message)


# ---------------------------------------------------------------------------
# spring metric


@dataclass
class SpringMetric:
    """Anisotropic per-correspondence penalty.

    Q_i has eigenvalue lambda_n along the target normal and lambda_t in
    the tangent plane, scaled by the correspondence confidence. Zero
    confidence entries are dropped.
    """

    indices: np.ndarray        # kept fine-vertex indices (M,)
    normals: np.ndarray        # (M, 3)
    tangents: np.ndarray       # (M, 2, 3) orthonormal completion
    weights: np.ndarray        # confidences (M,), in (0, 1]
    lambda_n: float
    lambda_t: float
    Q: np.ndarray              # (M, 3, 3)
    R: np.ndarray              # (M, 3, 3), R_i' R_i = Q_i

    @property
    def n_points(self):
        return len(self.indices)


def _tangent_frame(normals):
    """Deterministic orthonormal completion of unit normals."""
    n = normals
    pick = np.argmin(np.abs(n), axis=1)
    a = np.zeros_like(n)
    a[np.arange(len(n)), pick] = 1.0
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2], axis=1)


def build_metric(correspondences, lambda_n, lambda_t, confidences):
    """Assemble the spring metric from (index, target point, normal) triples."""
    if lambda_n <= 0 or lambda_t <= 0:
        raise ValueError("lambda_n and lambda_t must be positive")
    idx = np.array([c[0] for c in correspondences], dtype=np.int64)
    normals = np.array([c[2] for c in correspondences], dtype=np.float64).reshape(-1, 3)
    w = np.asarray(confidences, dtype=np.float64).ravel()
    if len(w) != len(idx):
        raise ValueError("confidences length does not match correspondences")
    lens = np.linalg.norm(normals, axis=1)
    if np.any(lens < 1e-12):
        raise ValueError("zero target normal in correspondences")
    normals = normals / lens[:, None]
    keep = w > 0.0
    idx, normals, w = idx[keep], normals[keep], w[keep]
    frames = _tangent_frame(normals) if len(normals) else np.zeros((0, 2, 3))
    nn = np.einsum("mi,mj->mij", normals, normals)
    eye = np.eye(3)
    Q = lambda_n * nn + lambda_t * (eye - nn)
    R = np.sqrt(lambda_n) * nn + np.sqrt(lambda_t) * (eye - nn)
    Q = Q * w[:, None, None]
    R = R * np.sqrt(w)[:, None, None]
    return SpringMetric(
        indices=idx,
        normals=normals,
        tangents=frames,
        weights=w,
        lambda_n=float(lambda_n),
        lambda_t=float(lambda_t),
        Q=Q,
        R=R,
    )


# ---------------------------------------------------------------------------
# program assembly


@dataclass
class ConeProgram:
    """Conic form data plus bookkeeping for force extraction."""

    c: np.ndarray
    G: np.ndarray
    h: np.ndarray
    dims: list
    n_phi: int = 0
    n_forces: int = 0
    schur: np.ndarray | None = None
    offset: np.ndarray | None = None
    spring_k: float = 0.0
    spring_constant_term: float = 0.0

    @classmethod
    def from_conic(cls, c, G, h, dims, n_phi=None):
        c = np.asarray(c, dtype=np.float64).ravel()
        G = np.asarray(G, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64).ravel()
        if G.shape != (h.size, c.size):
            raise ValueError(f"G shape {G.shape} inconsistent with c/h")
        if sum(dims) != h.size:
            raise ValueError("cone dimensions do not sum to row count")
        return cls(c=c, G=G, h=h, dims=list(dims), n_phi=n_phi if n_phi is not None else c.size)

    @property
    def n_vars(self):
        return self.c.size


def _blockdiag_rt(metric, t_scalar):
    """Sparse (3M, 3K) matrix of per-point R blocks times prolongation rows."""
    Tk = t_scalar[metric.indices].tocoo()
    r, cidx, v = Tk.row, Tk.col, Tk.data
    blocks = metric.R[r] * v[:, None, None]          # (nnz, 3, 3)
    rows = (3 * r[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2)
    cols = np.broadcast_to(
        3 * cidx[:, None, None] + np.arange(3)[None, None, :], blocks.shape
    )
    return sparse.coo_matrix(
        (blocks.ravel(), (rows.ravel(), cols.ravel())),
        shape=(3 * metric.n_points, 3 * t_scalar.shape[1]),
    ).tocsr()


def build_program(cs, prolong, phi_star, metric, k):
    """Fold condensation, prolongation and spring metric into conic form.

    `phi_star` holds fine-scale correspondence targets, shape (F, 3);
    only rows selected by the metric enter the spring term. The spring
    cone is expressed in boundary coordinates through an eigenvalue
    factorization of (R T)'(R T), which preserves the optimum while
    keeping the cone at boundary scale.
    """
    if k <= 0:
        raise ValueError("spring constant k must be positive")
    K = cs.n_boundary
    nb = 3 * K
    t_scalar = prolong.scalar_matrix
    if t_scalar.shape[1] != K:
        raise ValueError(
            f"prolongation has {t_scalar.shape[1]} boundary columns, condensation has {K}"
        )
    phi_star = np.asarray(phi_star, dtype=np.float64).reshape(-1, 3)
    if metric.n_points and metric.indices.max() >= len(phi_star):
        raise ValueError("metric references targets outside phi_star")

    if metric.n_points:
        B = _blockdiag_rt(metric, t_scalar)
        r_star = np.einsum(
            "mij,mj->mi", metric.R, phi_star[metric.indices]
        ).ravel()                                     # R * targets, (3M,)
        Hhat = np.asarray((B.T @ B).todense())
        c_spring = B.T @ r_star
        evals, evecs = eigh(Hhat)
        cut = max(evals.max(), 0.0) * 1e-12
        keep = evals > cut
        L = np.sqrt(evals[keep])[:, None] * evecs[:, keep].T   # (r, 3K)
        z = (evecs[:, keep].T @ c_spring) / np.sqrt(evals[keep])
        kappa = max(float(r_star @ r_star - z @ z), 0.0)
    else:
        L = np.zeros((0, nb))
        z = np.zeros(0)
        kappa = 0.0
    r_rank = L.shape[0]

    n = nb + K + 1
    m = 4 * K + r_rank + 2
    c = np.zeros(n)
    c[nb : nb + K] = 1.0
    c[-1] = 0.5 * k
    G = np.zeros((m, n))
    h = np.zeros(m)
    row = 0
    for i in range(K):
        G[row, nb + i] = -1.0
        row += 1
        G[row : row + 3, :nb] = -cs.schur[3 * i : 3 * i + 3]
        h[row : row + 3] = cs.offset[3 * i : 3 * i + 3]
        row += 3
    # rotated cone:  ||phi - targets||_Q^2 <= e  <=>
    # ||[2(L phi - z); e - kappa - 1]|| <= e - kappa + 1
    G[row, n - 1] = -1.0
    h[row] = 1.0 - kappa
    row += 1
    if r_rank:
        G[row : row + r_rank, :nb] = -2.0 * L
        h[row : row + r_rank] = -2.0 * z
        row += r_rank
    G[row, n - 1] = -1.0
    h[row] = -(1.0 + kappa)

    dims = [4] * K + [r_rank + 2]
    return ConeProgram(
        c=c,
        G=G,
        h=h,
        dims=dims,
        n_phi=nb,
        n_forces=K,
        schur=cs.schur,
        offset=cs.offset,
        spring_k=float(k),
        spring_constant_term=kappa,
    )


# ---------------------------------------------------------------------------
# cone algebra on concatenated vectors


class _Cones:
    def __init__(self, dims):
        self.dims = np.asarray(dims, dtype=np.int64)
        if np.any(self.dims < 1):
            raise ValueError("cone dimensions must be >= 1")
        self.m = int(self.dims.sum())
        self.p = len(dims)
        self.starts = np.concatenate([[0], np.cumsum(self.dims)[:-1]])
        self.cone_of = np.repeat(np.arange(self.p), self.dims)
        self.jsign = -np.ones(self.m)
        self.jsign[self.starts] = 1.0

    def rep(self, per_cone):
        return np.repeat(per_cone, self.dims)

    def dot(self, u, v):
        return np.add.reduceat(u * v, self.starts)

    def jdot(self, u, v):
        return 2.0 * u[self.starts] * v[self.starts] - self.dot(u, v)

    def prod(self, u, v):
        """Jordan product per cone."""
        w = self.rep(u[self.starts]) * v + self.rep(v[self.starts]) * u
        w[self.starts] = self.dot(u, v)
        return w

    def identity(self):
        e = np.zeros(self.m)
        e[self.starts] = 1.0
        return e

    def arrow_solve(self, lam, d):
        """Solve lam o x = d per cone."""
        l0 = lam[self.starts]
        det = self.jdot(lam, lam)
        ld = self.dot(lam, d)
        d0 = d[self.starts]
        x0 = (l0 * d0 - (ld - l0 * d0)) / det
        x = (d - self.rep(x0) * lam) / self.rep(l0)
        x[self.starts] = x0
        return x

    def interior_margin(self, u):
        """t - ||u_bar|| per cone (positive inside the cone)."""
        sq = self.dot(u, u)
        t = u[self.starts]
        tail = np.sqrt(np.maximum(sq - t * t, 0.0))
        return t - tail

    def shift_interior(self, u, margin=1.0):
        """Uniformly shift along the cone identity until strictly inside."""
        deficit = -self.interior_margin(u).min()
        if deficit > -margin * 0.5:
            u = u + self.rep((deficit + margin) * np.ones(self.p)) * self.identity()
        return u

    def max_step(self, u, du):
        """Largest alpha with u + alpha*du still in the cone (capped at 1e10)."""
        a = self.jdot(du, du)
        b = self.jdot(u, du)
        c2 = self.jdot(u, u)
        alpha = np.full(self.p, 1e10)
        # quadratic a x^2 + 2 b x + c2 = 0, c2 > 0 at a strictly interior u
        disc = b * b - a * c2
        lin = np.abs(a) < 1e-300
        with np.errstate(divide="ignore", invalid="ignore"):
            root_lin = np.where((lin) & (b < 0), -c2 / (2.0 * b), 1e10)
            sq = np.sqrt(np.maximum(disc, 0.0))
            r1 = (-b - sq) / np.where(lin, 1.0, a)
            r2 = (-b + sq) / np.where(lin, 1.0, a)
        roots = np.stack([r1, r2])
        roots[:, lin] = 1e10
        roots = np.where((roots > 0) & (disc[None, :] >= 0), roots, 1e10)
        alpha = np.minimum(alpha, roots.min(axis=0))
        alpha = np.minimum(alpha, root_lin)
        # keep the leading component nonnegative
        t, dt = u[self.starts], du[self.starts]
        with np.errstate(divide="ignore"):
            t_lim = np.where(dt < 0, -t / dt, 1e10)
        return float(np.minimum(alpha, t_lim).min())


class _NTScaling:
    """Nesterov-Todd scaling for a product of second-order cones.

    With wbar = (a; b) the normalized scaling point of a cone, the
    scaling matrix is W = eta * [[a, b'], [b, I + b b'/(1+a)]], the
    symmetric square root of 2 wbar wbar' - J. It satisfies
    W z = W^{-1} s = lambda (the scaled point).
    """

    def __init__(self, cones, s, z):
        self.cones = cones
        nus = np.sqrt(cones.jdot(s, s))
        nuz = np.sqrt(cones.jdot(z, z))
        sbar = s / cones.rep(nus)
        zbar = z / cones.rep(nuz)
        gamma = np.sqrt((1.0 + cones.dot(sbar, zbar)) / 2.0)
        jz = cones.jsign * zbar
        wbar = (sbar + jz) / cones.rep(2.0 * gamma)
        self.a = wbar[cones.starts]
        self.b = wbar.copy()
        self.b[cones.starts] = 0.0
        self.eta = np.sqrt(nus / nuz)

    def _householder(self, u, sign):
        """eta^sign * W^{sign} u via the rank-one representation."""
        c = self.cones
        u0 = u[c.starts]
        bu = c.dot(self.b, u)            # b' u_tail per cone
        if sign > 0:
            out0 = self.a * u0 + bu
            coef = u0 + bu / (1.0 + self.a)
        else:
            out0 = self.a * u0 - bu
            coef = -u0 + bu / (1.0 + self.a)
        out = u + c.rep(coef) * self.b
        out[c.starts] = out0
        if sign > 0:
            return out * c.rep(self.eta)
        return out / c.rep(self.eta)

    def apply(self, u):
        """W u."""
        return self._householder(u, +1)

    def apply_inv(self, u):
        """W^{-1} u."""
        return self._householder(u, -1)

    def apply_inv_mat(self, Gmat):
        """W^{-1} G for a dense (m, n) matrix."""
        c = self.cones
        G0 = Gmat[c.starts]                                    # (p, n)
        bu = np.add.reduceat(self.b[:, None] * Gmat, c.starts, axis=0)
        coef = -G0 + bu / (1.0 + self.a)[:, None]
        out = Gmat + self.b[:, None] * coef[c.cone_of]
        out[c.starts] = self.a[:, None] * G0 - bu
        out /= c.rep(self.eta)[:, None]
        return out


# ---------------------------------------------------------------------------
# interior-point solver


def _factor(H):
    bump = 0.0
    scale = np.mean(np.diag(H)) + 1e-300
    for _ in range(8):
        try:
            return cho_factor(H + bump * scale * np.eye(H.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            bump = 1e-12 if bump == 0.0 else bump * 100.0
    raise SocpError("normal matrix factorization failed")


@dataclass
class ConeSolution:
    phi_b: np.ndarray
    forces: np.ndarray
    objective: float
    gap: float
    relative_gap: float
    iterations: int
    x: np.ndarray
    primal_residual: float
    dual_residual: float
    slack_margin: float = 0.0

    def force_vectors(self):
        return self.forces


def solve_socp(prog, tol=1e-7, max_iter=200):
    """Solve a ConeProgram to relative gap `tol`.

    Deterministic for fixed inputs. Raises SocpError with the best
    iterate if the iteration cap is hit.
    """
    c, G, h = prog.c, prog.G, prog.h
    cones = _Cones(prog.dims)
    n, m = c.size, h.size
    if G.shape != (m, n):
        raise ValueError("inconsistent program dimensions")

    H0 = G.T @ G + 1e-12 * np.eye(n)
    f0 = _factor(H0)
    x = cho_solve(f0, G.T @ h)
    s = cones.shift_interior(h - G @ x)
    z = cones.shift_interior(-G @ cho_solve(f0, c))

    hnorm = max(1.0, np.linalg.norm(h))
    cnorm = max(1.0, np.linalg.norm(c))
    best = None
    status = None
    for it in range(max_iter):
        rp = G @ x + s - h
        rd = G.T @ z + c
        gap = float(s @ z)
        pobj = float(c @ x)
        dobj = float(-h @ z)
        pres = np.linalg.norm(rp) / hnorm
        dres = np.linalg.norm(rd) / cnorm
        relgap = gap / max(1.0, abs(pobj), abs(dobj))
        if best is None or gap < best["gap"]:
            best = dict(x=x.copy(), s=s.copy(), z=z.copy(), gap=gap, pres=pres, dres=dres)
        if pres < 10 * tol and dres < 10 * tol and relgap < tol:
            status = (it, pres, dres, gap, relgap)
            break

        scaling = _NTScaling(cones, s, z)
        lam = scaling.apply(z)
        Gt = scaling.apply_inv_mat(G)
        H = Gt.T @ Gt
        fac = _factor(H)
        mu = gap / cones.p

        def kkt(bx, bz, ds):
            u = cones.arrow_solve(lam, ds)
            rhs = bx - Gt.T @ u + Gt.T @ scaling.apply_inv(bz)
            dx = cho_solve(fac, rhs)
            dsv = bz - G @ dx
            dz = scaling.apply_inv(u - scaling.apply_inv(dsv))
            return dx, dsv, dz

        # predictor
        ds_aff = -cones.prod(lam, lam)
        dx_a, dsv_a, dz_a = kkt(-rd, -rp, ds_aff)
        alpha_a = min(1.0, cones.max_step(s, dsv_a), cones.max_step(z, dz_a))
        mu_aff = float((s + alpha_a * dsv_a) @ (z + alpha_a * dz_a)) / cones.p
        sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3

        # corrector
        corr = cones.prod(scaling.apply_inv(dsv_a), scaling.apply(dz_a))
        ds_comb = ds_aff - corr + sigma * mu * cones.identity()
        dx, dsv, dz = kkt(-rd, -rp, ds_comb)
        alpha = 0.98 * min(cones.max_step(s, dsv), cones.max_step(z, dz))
        alpha = min(1.0, alpha)
        x = x + alpha * dx
        s = s + alpha * dsv
        z = z + alpha * dz
    else:
        raise SocpError(
            f"iteration cap {max_iter} reached (gap {best['gap']:.3e}, "
            f"pres {best['pres']:.3e}, dres {best['dres']:.3e})",
            best=best,
        )

    it_count, pres, dres, gap, relgap = status
    phi = x[: prog.n_phi]
    if prog.schur is not None and prog.n_forces:
        forces = (prog.offset + prog.schur @ phi).reshape(-1, 3)
        gvals = x[prog.n_phi : prog.n_phi + prog.n_forces]
        margin = float((gvals - np.linalg.norm(forces, axis=1)).min())
    else:
        forces = np.zeros((0, 3))
        margin = float(cones.interior_margin(h - G @ x).min())
    return ConeSolution(
        phi_b=phi,
        forces=forces,
        objective=float(c @ x),
        gap=gap,
        relative_gap=relgap,
        iterations=it_count,
        x=x,
        primal_residual=pres,
        dual_residual=dres,
        slack_margin=margin,
    )


def export_program(prog, path):
    """Write the program in a plain conic text format.

    Layout: header with sizes, cone dimension list, dense c and h (one
    value per line), then nonzeros of G as 'row col value'.
    """
    with open(path, "w") as fh:
        fh.write("socp 1\n")
        fh.write(f"vars {prog.n_vars} rows {prog.h.size} cones {len(prog.dims)}\n")
        fh.write("dims " + " ".join(str(d) for d in prog.dims) + "\n")
        fh.write("c\n")
        for v in prog.c:
            fh.write("%.17g\n" % v)
        fh.write("h\n")
        for v in prog.h:
            fh.write("%.17g\n" % v)
        fh.write("G\n")
        rows, cols = np.nonzero(prog.G)
        for r, cc in zip(rows, cols):
            fh.write("%d %d %.17g\n" % (r, cc, prog.G[r, cc]))
