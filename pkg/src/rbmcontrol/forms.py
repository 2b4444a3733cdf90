"""Discrete bilinear and trilinear forms and the sparse operators behind them.

Every form is assembled once per grid as a sparse matrix (bilinear forms)
or as a sparse third-order tensor stored in coordinate form (trilinear
advection forms).  A tensor entry (r, a, b, coef) contributes
``coef * w[a] * u[b]`` to row ``r``, so both partial Jacobians of an
advection term are plain sparse matrices.  Skew variants are obtained by
antisymmetrising the tensor in its (r, b) slots, which makes
``c_sk(w, v, v) = 0`` hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .grid import (CURL_AXES, WALL_AXIS, WALL_BLOCKS, BoundaryRegion, BoxGrid, ScalarField,
                   VelocityField, region, tangential_axes)

LOW_WALL = {0: "x0", 1: "y0", 2: "bottom"}
HIGH_WALL = {0: "x1", 1: "y1"}


@dataclass(frozen=True)
class Tensor3:
    """Sparse trilinear map: out[r] = sum coef * w[a] * u[b]."""

    r: np.ndarray
    a: np.ndarray
    b: np.ndarray
    coef: np.ndarray
    shape: tuple  # (rows, len(w), len(u))

    def apply(self, w, u):
        return np.bincount(self.r, self.coef * w[self.a] * u[self.b], minlength=self.shape[0])

    def matrix_u(self, w):
        """Matrix of u -> T(w, u)."""
        return sp.csr_matrix((self.coef * w[self.a], (self.r, self.b)), shape=(self.shape[0], self.shape[2]))

    def matrix_w(self, u):
        """Matrix of w -> T(w, u)."""
        return sp.csr_matrix((self.coef * u[self.b], (self.r, self.a)), shape=(self.shape[0], self.shape[1]))

    def skew(self):
        if self.shape[0] != self.shape[2]:
            raise ValueError("skew part needs matching row and argument spaces")
        h = 0.5 * self.coef
        return Tensor3(np.concatenate([self.r, self.b]), np.concatenate([self.a, self.a]),
                       np.concatenate([self.b, self.r]), np.concatenate([h, -h]), self.shape)


def _pairs_matrix(i, j, w, n):
    """Sum of w * (e_i - e_j)(e_i - e_j)^T."""
    rows = np.concatenate([i, i, j, j])
    cols = np.concatenate([i, j, i, j])
    vals = np.concatenate([w, -w, -w, w])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _rows_matrix(rows, cols, vals, shape):
    return sp.csr_matrix((np.asarray(vals, dtype=float), (rows, cols)), shape=shape)


class FormWorkspace:
    """Per-grid cache of every assembled operator."""

    _cache: dict = {}

    def __init__(self, grid: BoxGrid):
        self.grid = grid
        self.vlay = grid.velocity_layout
        self.slay = grid.scalar_layout
        self.nU = self.vlay.size
        self.nT = self.slay.size
        self.nC = self.slay.n_cells

    @classmethod
    def for_grid(cls, grid: BoxGrid) -> "FormWorkspace":
        ws = cls._cache.get(grid)
        if ws is None:
            ws = cls._cache[grid] = cls(grid)
        return ws

    # -- neighbour tables ----------------------------------------------------
    def velocity_neighbors(self, c, d):
        """Plus/minus neighbours of comp-c faces along axis d and their distances."""
        g, lay = self.grid, self.vlay
        idx = np.moveaxis(lay.face_index(c), d, 0)
        h = g.h[d]
        plus, minus = idx.copy(), idx.copy()
        dp, dm = np.full(idx.shape, h), np.full(idx.shape, h)
        plus[:-1] = idx[1:]
        minus[1:] = idx[:-1]
        if d == c:
            dp[-1] = 0.0
            dm[0] = 0.0
        else:
            minus[0] = lay.wall_index(LOW_WALL[d], c)
            dm[0] = 0.5 * h
            if d == 2:
                dp[-1] = 0.0
            else:
                plus[-1] = lay.wall_index(HIGH_WALL[d], c)
                dp[-1] = 0.5 * h

        def back(x):
            return np.moveaxis(x, 0, d).ravel()

        return back(plus), back(dp), back(minus), back(dm)

    def scalar_neighbors(self, d):
        g, lay = self.grid, self.slay
        idx = np.moveaxis(lay.cell_index(), d, 0)
        h = g.h[d]
        plus, minus = idx.copy(), idx.copy()
        dp, dm = np.full(idx.shape, h), np.full(idx.shape, h)
        plus[:-1] = idx[1:]
        minus[1:] = idx[:-1]
        if d == 2:
            plus[-1] = lay.top_index()
            minus[0] = lay.bottom_index()
            dp[-1] = dm[0] = 0.5 * h
        else:
            dp[-1] = 0.0
            dm[0] = 0.0

        def back(x):
            return np.moveaxis(x, 0, d).ravel()

        return back(plus), back(dp), back(minus), back(dm)

    @cached_property
    def face_frac(self):
        return self.vlay.face_fraction

    @cached_property
    def face_mass(self):
        """Diagonal of the velocity L2 mass (face control volumes)."""
        return self.face_frac * self.grid.vol

    @cached_property
    def cell_mass(self):
        m = np.zeros(self.nT)
        m[self.slay.cells] = self.grid.vol
        return m

    # -- bilinear operators --------------------------------------------------
    @cached_property
    def stiffness(self):
        """Velocity Dirichlet form a(u, v) = sum of squared staggered differences."""
        g, vol = self.grid, self.grid.vol
        I, J, W = [], [], []
        for c in range(3):
            own = self.vlay.face_index(c).ravel()
            frac = self.face_frac[own]
            for d in range(3):
                plus, dp, minus, dm = self.velocity_neighbors(c, d)
                h = g.h[d]
                m = dp > 0
                if d == c:
                    w = np.full(own.shape, vol / h ** 2)
                else:
                    w = frac * vol / (h * np.where(m, dp, 1.0))
                I.append(own[m]); J.append(plus[m]); W.append(w[m])
                if d != c:
                    wall = minus >= self.vlay.n_faces
                    I.append(own[wall]); J.append(minus[wall])
                    W.append((frac * vol / (h * dm))[wall])
        return _pairs_matrix(np.concatenate(I), np.concatenate(J), np.concatenate(W), self.nU)

    @cached_property
    def scalar_stiffness(self):
        g, vol = self.grid, self.grid.vol
        own = self.slay.cell_index().ravel()
        I, J, W = [], [], []
        for d in range(3):
            plus, dp, minus, dm = self.scalar_neighbors(d)
            h = g.h[d]
            m = dp > 0
            I.append(own[m]); J.append(plus[m]); W.append((vol / (h * np.where(m, dp, 1.0)))[m])
            if d == 2:
                wall = minus >= self.nC
                I.append(own[wall]); J.append(minus[wall]); W.append((vol / (h * dm))[wall])
        return _pairs_matrix(np.concatenate(I), np.concatenate(J), np.concatenate(W), self.nT)

    @cached_property
    def divergence(self):
        """(D u)_cell = cell volume times the MAC divergence."""
        g = self.grid
        cells = self.slay.cell_index()
        R, C, V = [], [], []
        for c in range(3):
            area = g.vol / g.h[c]
            idx = self.vlay.face_index(c)
            hi = np.take(idx, np.arange(1, g.n[c] + 1), axis=c)
            lo = np.take(idx, np.arange(0, g.n[c]), axis=c)
            R += [cells.ravel(), cells.ravel()]
            C += [hi.ravel(), lo.ravel()]
            V += [np.full(cells.size, area), np.full(cells.size, -area)]
        return _rows_matrix(np.concatenate(R), np.concatenate(C), np.concatenate(V), (self.nC, self.nU))

    def _staggered_diff_matrix(self, c, d):
        """Sparse map from velocity vector to differences of comp c along axis d.

        Rows index positions with n[d] + 1 entries along d (other axes as for
        comp c).  Returns (matrix, valid mask in that shape).
        """
        g = self.grid
        shape_c = g.face_shape(c)
        ext = list(shape_c)
        ext[d] += 1
        pos = np.arange(int(np.prod(ext))).reshape(ext)
        plus, dp, minus, dm = self.velocity_neighbors(c, d)
        own = self.vlay.face_index(c).ravel()
        # position i along d sits between face i-1 (minus) and face i
        pos_own = np.take(pos, np.arange(shape_c[d]), axis=d).ravel()
        pos_last = np.take(pos, [shape_c[d]], axis=d).ravel()
        last = np.take(np.arange(own.size).reshape(shape_c), [shape_c[d] - 1], axis=d).ravel()
        R = [pos_own, pos_own, pos_last, pos_last]
        C = [own, minus, plus[last], own[last]]
        safe_dp = np.where(dp[last] > 0, dp[last], 1.0)
        V = [1.0 / dm, -1.0 / dm, 1.0 / safe_dp, -1.0 / safe_dp]
        valid = np.ones(ext, dtype=bool)
        vlast = valid.reshape(-1)
        vlast[pos_last[dp[last] == 0]] = False
        return _rows_matrix(np.concatenate(R), np.concatenate(C), np.concatenate(V),
                            (pos.size, self.nU)), valid

    @cached_property
    def curl_parts(self):
        """List of (matrix, edge weights, shape) for the three edge families."""
        g = self.grid
        out = []
        for a, p, q in CURL_AXES:
            Dpq, vq = self._staggered_diff_matrix(q, p)
            Dqp, vp = self._staggered_diff_matrix(p, q)
            keep = vq & vp
            Dm = (Dpq - Dqp).tocsr()[keep.ravel()]
            kept_shape = list(vq.shape)
            if a != 2:
                kept_shape[2] -= 1
            weights = []
            for t in range(3):
                w = np.full(kept_shape[t], g.h[t])
                if t != a:
                    w[0] *= 0.5
                    if not (t == 2 and a != 2):
                        w[-1] *= 0.5
                weights.append(w)
            W = weights[0][:, None, None] * weights[1][None, :, None] * weights[2][None, None, :]
            out.append((Dm, W.ravel(), tuple(kept_shape)))
        return out

    @cached_property
    def curl_matrix(self):
        return sp.vstack([m for m, _, _ in self.curl_parts]).tocsr()

    @cached_property
    def curl_weights(self):
        return np.concatenate([w for _, w, _ in self.curl_parts])

    @cached_property
    def vorticity_form(self):
        """Matrix K with u^T K u = ||curl u||^2."""
        C = self.curl_matrix
        return (C.T @ sp.diags(self.curl_weights) @ C).tocsr()

    # -- advection tensors ---------------------------------------------------
    def _advecting_sources(self, c, d):
        """Averaging stencil of w_d onto comp-c faces: list of (row, source, weight)."""
        g = self.grid
        own = self.vlay.face_index(c)
        if d == c:
            return own.ravel(), own.ravel(), np.ones(own.size)
        idx = np.indices(own.shape)
        src = self.vlay.face_index(d)
        rows, srcs, wts = [], [], []
        count = np.zeros(own.shape)
        entries = []
        for oc in (-1, 0):
            ic = idx[c] + oc
            ok = (ic >= 0) & (ic < g.n[c])
            for od in (0, 1):
                mi = [idx[0].copy(), idx[1].copy(), idx[2].copy()]
                mi[c] = np.clip(ic, 0, g.n[c] - 1)
                mi[d] = idx[d] + od
                entries.append((ok, src[tuple(mi)]))
                count += ok
        for ok, s in entries:
            rows.append(own[ok]); srcs.append(s[ok]); wts.append(1.0 / count[ok])
        return np.concatenate(rows), np.concatenate(srcs), np.concatenate(wts)

    @cached_property
    def advection(self):
        """Plain momentum advection tensor: c(w, u, z) = z . T(w, u)."""
        vol = self.grid.vol
        R, A, B, K = [], [], [], []
        pos = np.empty(self.nU, dtype=np.int64)
        for c in range(3):
            own = self.vlay.face_index(c).ravel()
            pos[own] = np.arange(own.size)
            for d in range(3):
                plus, dp, minus, dm = self.velocity_neighbors(c, d)
                dist = dp + dm
                rows, srcs, wts = self._advecting_sources(c, d)
                k = pos[rows]
                base = self.face_mass[rows] * wts / dist[k]
                R += [rows, rows]
                A += [srcs, srcs]
                B += [plus[k], minus[k]]
                K += [base, -base]
        assert vol > 0
        return Tensor3(np.concatenate(R), np.concatenate(A), np.concatenate(B), np.concatenate(K),
                       (self.nU, self.nU, self.nU))

    @cached_property
    def advection_skew(self):
        return self.advection.skew()

    @cached_property
    def scalar_advection(self):
        """Plain heat advection tensor: c1(w, s, r) = r . T(w, s)."""
        g = self.grid
        cells = self.slay.cell_index()
        own = cells.ravel()
        R, A, B, K = [], [], [], []
        for d in range(3):
            plus, dp, minus, dm = self.scalar_neighbors(d)
            dist = dp + dm
            fidx = self.vlay.face_index(d)
            lo = np.take(fidx, np.arange(g.n[d]), axis=d).ravel()
            hi = np.take(fidx, np.arange(1, g.n[d] + 1), axis=d).ravel()
            base = 0.5 * g.vol / dist
            for src in (lo, hi):
                R += [own, own]
                A += [src, src]
                B += [plus, minus]
                K += [base, -base]
        return Tensor3(np.concatenate(R), np.concatenate(A), np.concatenate(B), np.concatenate(K),
                       (self.nT, self.nU, self.nT))

    @cached_property
    def scalar_advection_skew(self):
        return self.scalar_advection.skew()

    # -- coupling operators --------------------------------------------------
    def _surface_tangential(self, c, extrapolate):
        """Rows: top-layer comp-c faces interior along c; returns (vel matrix, scalar matrix, weights)."""
        g = self.grid
        idx = self.vlay.face_index(c)
        n = g.n[c]
        inner = np.arange(1, n)
        top = np.take(idx[..., -1], inner, axis=c).ravel()
        below = np.take(idx[..., -2], inner, axis=c).ravel()
        tix = self.slay.top_index()
        s_hi = np.take(tix, inner, axis=c).ravel()
        s_lo = np.take(tix, inner - 1, axis=c).ravel()
        m = top.size
        rows = np.arange(m)
        if extrapolate:
            V = _rows_matrix(np.r_[rows, rows], np.r_[top, below], np.r_[np.full(m, 1.5), np.full(m, -0.5)],
                             (m, self.nU))
        else:
            V = _rows_matrix(rows, top, np.ones(m), (m, self.nU))
        S = _rows_matrix(np.r_[rows, rows], np.r_[s_hi, s_lo],
                         np.r_[np.full(m, 1.0 / g.h[c]), np.full(m, -1.0 / g.h[c])], (m, self.nT))
        return V, S, np.full(m, g.hx * g.hy)

    def _surface_operator(self, extrapolate):
        blocks = [self._surface_tangential(c, extrapolate) for c in (0, 1)]
        V = sp.vstack([b[0] for b in blocks])
        S = sp.vstack([b[1] for b in blocks])
        w = np.concatenate([b[2] for b in blocks])
        return (V.T @ sp.diags(w) @ S).tocsr()

    @cached_property
    def marangoni(self):
        """Top-surface coupling sum_faces area * d_tau(theta_top) * v_top-layer (n_U x n_T)."""
        return self._surface_operator(extrapolate=False)

    @cached_property
    def trace_lhs(self):
        """Surface integral of grad_tau(s) . v with v extrapolated to the surface."""
        return self._surface_operator(extrapolate=True)

    @cached_property
    def b1_matrix(self):
        """b1(s, v) = v^T B s, the volume form sum_i d_i s * d_3 v_i."""
        g = self.grid
        Vr, Sr, W = [], [], []
        cells = self.slay.cell_index()
        rowoff = 0
        for c in (0, 1):
            plus, dp, minus, dm = self.velocity_neighbors(c, 2)
            own = self.vlay.face_index(c)
            n = g.n[c]
            inner = np.arange(1, n)
            sel = np.take(np.arange(own.size).reshape(own.shape), inner, axis=c).ravel()
            m = sel.size
            rows = np.arange(m) + rowoff
            dist = dp[sel] + dm[sel]
            Vr.append((np.r_[rows, rows], np.r_[plus[sel], minus[sel]], np.r_[1.0 / dist, -1.0 / dist]))
            hi = np.take(cells, inner, axis=c).ravel()
            lo = np.take(cells, inner - 1, axis=c).ravel()
            Sr.append((np.r_[rows, rows], np.r_[hi, lo], np.r_[np.full(m, 1 / g.h[c]), np.full(m, -1 / g.h[c])]))
            W.append(np.full(m, g.vol))
            rowoff += m
        plus, dp, minus, dm = self.scalar_neighbors(2)
        m = cells.size
        rows = np.arange(m) + rowoff
        f3 = self.vlay.face_index(2)
        hi = f3[:, :, 1:].ravel()
        lo = f3[:, :, :-1].ravel()
        Vr.append((np.r_[rows, rows], np.r_[hi, lo], np.r_[np.full(m, 1 / g.hz), np.full(m, -1 / g.hz)]))
        dist = dp + dm
        Sr.append((np.r_[rows, rows], np.r_[plus, minus], np.r_[1.0 / dist, -1.0 / dist]))
        W.append(np.full(m, g.vol))
        nrow = rowoff + m
        V = _rows_matrix(*[np.concatenate([x[i] for x in Vr]) for i in range(3)], (nrow, self.nU))
        S = _rows_matrix(*[np.concatenate([x[i] for x in Sr]) for i in range(3)], (nrow, self.nT))
        return (V.T @ sp.diags(np.concatenate(W)) @ S).tocsr()

    @cached_property
    def buoyancy_parts(self):
        """(E, e) with <f(theta), v> = Pr * (b * e.v + R * v^T E theta)."""
        g = self.grid
        f3 = self.vlay.face_index(2)
        cells = self.slay.cell_index()
        e = np.zeros(self.nU)
        e[f3.ravel()] = self.face_mass[f3.ravel()]
        inner = f3[:, :, 1:-1].ravel()
        R = [inner, inner, f3[:, :, 0].ravel(), f3[:, :, -1].ravel()]
        C = [cells[:, :, 1:].ravel(), cells[:, :, :-1].ravel(),
             self.slay.bottom_index().ravel(), self.slay.top_index().ravel()]
        V = [0.5 * e[inner], 0.5 * e[inner], e[f3[:, :, 0].ravel()], e[f3[:, :, -1].ravel()]]
        E = _rows_matrix(np.concatenate(R), np.concatenate(C), np.concatenate(V), (self.nU, self.nT))
        return E, e

    @cached_property
    def robin_mass(self):
        """Top-surface mass on the top nodes (multiplied by B in the heat equation)."""
        d = np.zeros(self.nT)
        d[self.slay.top] = self.grid.hx * self.grid.hy
        return sp.diags(d).tocsr()

    @cached_property
    def lateral_region(self):
        return region(self.grid, "lateral")

    @cached_property
    def gamma0_region(self):
        return region(self.grid, "gamma0")

    @cached_property
    def neumann_load(self):
        """Map lateral-face flux values to the heat-equation load on the adjacent cells."""
        g = self.grid
        reg = self.lateral_region
        table = g.boundary_faces
        cells = self.slay.cell_index()
        rows = np.empty(reg.size, dtype=np.int64)
        names = reg.wall_names()
        loc = table.local[reg.faces]
        for wall in ("x0", "x1", "y0", "y1"):
            sel = np.array([nm == wall for nm in names])
            a, side = WALL_AXIS[wall]
            layer = np.take(cells, -1 if side else 0, axis=a)
            rows[sel] = layer[loc[sel, 0], loc[sel, 1]]
        return _rows_matrix(rows, np.arange(reg.size), reg.area, (self.nT, reg.size))

    def velocity_data_map(self, reg: BoundaryRegion):
        """Sparse map from (n_faces, 3) values on a subset of Gamma_0 (C-order flat) to velocity dofs.

        Normal components go to the normal boundary faces; tangential
        components are averaged onto the wall nodes, with zero beyond the
        ends of each wall.
        """
        g = self.grid
        table = g.boundary_faces
        loc = table.local[reg.faces]
        names = reg.wall_names()
        R, C, V = [], [], []
        for wall in ("x0", "x1", "y0", "y1", "bottom"):
            sel = np.flatnonzero(np.array([nm == wall for nm in names]))
            if sel.size == 0:
                continue
            a, _ = WALL_AXIS[wall]
            t = tangential_axes(wall)
            ij = loc[sel]
            nf = self.vlay.normal_face_index(wall)
            R.append(nf[ij[:, 0], ij[:, 1]]); C.append(3 * sel + a); V.append(np.ones(sel.size))
            for k, c in enumerate(t):
                nodes = self.vlay.wall_index(wall, c)
                for shift in (0, 1):
                    pos = ij.copy()
                    pos[:, k] += shift
                    R.append(nodes[pos[:, 0], pos[:, 1]]); C.append(3 * sel + c)
                    V.append(np.full(sel.size, 0.5))
        return _rows_matrix(np.concatenate(R), np.concatenate(C), np.concatenate(V), (self.nU, 3 * reg.size))


# -- form evaluation on fields ---------------------------------------------

def _same_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise ValueError("fields live on different grids")
    return g


def form_a(u: VelocityField, v: VelocityField) -> float:
    g = _same_grid(u, v)
    ws = FormWorkspace.for_grid(g)
    return float(v.to_vector() @ (ws.stiffness @ u.to_vector()))


def form_a1(s: ScalarField, w: ScalarField) -> float:
    g = _same_grid(s, w)
    ws = FormWorkspace.for_grid(g)
    return float(w.to_vector() @ (ws.scalar_stiffness @ s.to_vector()))


def form_c(u: VelocityField, v: VelocityField, z: VelocityField, skew=True) -> float:
    g = _same_grid(u, v, z)
    ws = FormWorkspace.for_grid(g)
    T = ws.advection_skew if skew else ws.advection
    return float(z.to_vector() @ T.apply(u.to_vector(), v.to_vector()))


def form_c1(u: VelocityField, s: ScalarField, w: ScalarField, skew=True) -> float:
    g = _same_grid(u, s, w)
    ws = FormWorkspace.for_grid(g)
    T = ws.scalar_advection_skew if skew else ws.scalar_advection
    return float(w.to_vector() @ T.apply(u.to_vector(), s.to_vector()))


def form_b1(s: ScalarField, v: VelocityField) -> float:
    g = _same_grid(s, v)
    ws = FormWorkspace.for_grid(g)
    return float(v.to_vector() @ (ws.b1_matrix @ s.to_vector()))


def buoyancy(theta: ScalarField, v: VelocityField, p) -> float:
    g = _same_grid(theta, v)
    ws = FormWorkspace.for_grid(g)
    E, e = ws.buoyancy_parts
    x = v.to_vector()
    return float(p.Pr * (p.b * (e @ x) + p.R * (x @ (E @ theta.to_vector()))))


def x0_violation(v: VelocityField) -> float:
    """Largest violation of v = 0 on Gamma_0, v3 = 0 on the top and discrete div v = 0.

    The divergence part is scaled by the grid spacing so that all parts
    compare field values.
    """
    from .grid import divergence

    g = v.grid
    lay = g.velocity_layout
    x = v.to_vector()
    bnd = float(np.abs(x[lay.constrained]).max())
    div = float(np.abs(divergence(v)).max()) * min(g.h)
    return max(bnd, div)


def trace_identity_residual(s: ScalarField, v: VelocityField, tol=1e-10) -> float:
    """|surface integral of grad_tau s . v  -  b1(s, v)| for v in the discrete X_0."""
    g = _same_grid(s, v)
    scale = max(v.max_abs(), 1.0)
    viol = x0_violation(v)
    if viol > tol * scale:
        raise ValueError(f"v violates the X_0 constraints (max violation {viol:.3e})")
    ws = FormWorkspace.for_grid(g)
    x = v.to_vector()
    t = s.to_vector()
    return float(abs(x @ (ws.trace_lhs @ t) - x @ (ws.b1_matrix @ t)))
