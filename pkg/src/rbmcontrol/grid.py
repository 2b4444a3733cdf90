"""Staggered box grid, field containers, boundary bookkeeping and discrete norms.

Layout
------
Cells are indexed (i, j, k).  Velocity component ``c`` lives on the faces
normal to axis ``c``: its array has ``n[c] + 1`` entries along ``c`` and
``n[a]`` along the other axes.  Tangential velocity components also carry
"wall nodes" on the five walls of Gamma_0 (x0, x1, y0, y1, bottom).  A wall
node sits on the wall, half a cell from the adjacent face, and stores the
boundary value of that component.  The free top surface has no wall nodes.

Temperature-like scalars live at cell centres, plus nodes on the top surface
and on the bottom wall (again half a cell away from the adjacent cell).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

LATERAL = ("x0", "x1", "y0", "y1")
WALLS = LATERAL + ("bottom",)
# wall -> (normal axis, side); side 0 is the low end of the axis
WALL_AXIS = {"x0": (0, 0), "x1": (0, 1), "y0": (1, 0), "y1": (1, 1),
             "bottom": (2, 0), "top": (2, 1)}
WALL_BLOCKS = tuple((w, c) for w in WALLS for c in range(3) if c != WALL_AXIS[w][0])


def tangential_axes(wall):
    a = WALL_AXIS[wall][0]
    return tuple(t for t in range(3) if t != a)


@dataclass(frozen=True)
class BoxGrid:
    nx: int
    ny: int
    nz: int
    l: float = 1.0
    L: float = 1.0

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 4:
            raise ValueError("at least 4 cells per axis are required")
        if not (self.l > 0 and self.L > 0):
            raise ValueError("extents must be positive")

    @property
    def n(self):
        return (self.nx, self.ny, self.nz)

    @property
    def ext(self):
        return (self.l, self.L, 1.0)

    @property
    def h(self):
        return (self.l / self.nx, self.L / self.ny, 1.0 / self.nz)

    hx = property(lambda self: self.h[0])
    hy = property(lambda self: self.h[1])
    hz = property(lambda self: self.h[2])

    @property
    def vol(self):
        hx, hy, hz = self.h
        return hx * hy * hz

    @property
    def volume(self):
        return self.l * self.L

    @property
    def cell_shape(self):
        return self.n

    def face_shape(self, c):
        s = list(self.n)
        s[c] += 1
        return tuple(s)

    def wall_node_shape(self, wall, c):
        return tuple(self.n[t] + (1 if t == c else 0) for t in tangential_axes(wall))

    def wall_face_shape(self, wall):
        return tuple(self.n[t] for t in tangential_axes(wall))

    def wall_face_area(self, wall):
        t0, t1 = tangential_axes(wall)
        return self.h[t0] * self.h[t1]

    # -- coordinates -------------------------------------------------------
    def _axis_coords(self, axis, nodal):
        h = self.h[axis]
        if nodal:
            return np.arange(self.n[axis] + 1) * h
        return (np.arange(self.n[axis]) + 0.5) * h

    def cell_centers(self):
        return np.meshgrid(*(self._axis_coords(a, False) for a in range(3)), indexing="ij")

    def face_centers(self, c):
        return np.meshgrid(*(self._axis_coords(a, a == c) for a in range(3)), indexing="ij")

    def wall_node_coords(self, wall, c):
        a, side = WALL_AXIS[wall]
        axes = [self._axis_coords(t, t == c) for t in range(3)]
        axes[a] = np.array([self.ext[a] * side])
        X = np.meshgrid(*axes, indexing="ij")
        return [x.squeeze(axis=a) for x in X]

    def wall_face_coords(self, wall):
        a, side = WALL_AXIS[wall]
        axes = [self._axis_coords(t, False) for t in range(3)]
        axes[a] = np.array([self.ext[a] * side])
        X = np.meshgrid(*axes, indexing="ij")
        return [x.squeeze(axis=a) for x in X]

    # -- flat dof layouts --------------------------------------------------
    @cached_property
    def velocity_layout(self):
        return VelocityLayout(self)

    @cached_property
    def scalar_layout(self):
        return ScalarLayout(self)

    @cached_property
    def boundary_faces(self):
        return BoundaryFaceTable(self)


class VelocityLayout:
    """Offsets of faces and wall nodes inside the flat velocity vector."""

    def __init__(self, grid: BoxGrid):
        self.grid = grid
        off = 0
        self.face_slices = []
        for c in range(3):
            size = int(np.prod(grid.face_shape(c)))
            self.face_slices.append(slice(off, off + size))
            off += size
        self.n_faces = off
        self.wall_slices = {}
        for wc in WALL_BLOCKS:
            size = int(np.prod(grid.wall_node_shape(*wc)))
            self.wall_slices[wc] = slice(off, off + size)
            off += size
        self.size = off

    def face_index(self, c):
        s = self.face_slices[c]
        return np.arange(s.start, s.stop).reshape(self.grid.face_shape(c))

    def wall_index(self, wall, c):
        s = self.wall_slices[(wall, c)]
        return np.arange(s.start, s.stop).reshape(self.grid.wall_node_shape(wall, c))

    @cached_property
    def face_fraction(self):
        """Control-volume fraction of every face (1/2 on boundary faces, 0 on wall nodes)."""
        frac = np.zeros(self.size)
        for c in range(3):
            f = np.ones(self.grid.face_shape(c))
            sl = [slice(None)] * 3
            sl[c] = 0
            f[tuple(sl)] = 0.5
            sl[c] = -1
            f[tuple(sl)] = 0.5
            frac[self.face_slices[c]] = f.ravel()
        return frac

    @cached_property
    def constrained(self):
        """Boolean mask of Dirichlet dofs: normal boundary faces and all wall nodes."""
        mask = np.zeros(self.size, dtype=bool)
        for c in range(3):
            idx = self.face_index(c)
            sl = [slice(None)] * 3
            sl[c] = 0
            mask[idx[tuple(sl)].ravel()] = True
            sl[c] = -1
            mask[idx[tuple(sl)].ravel()] = True
        mask[self.n_faces:] = True
        return mask

    def normal_face_index(self, wall):
        a, side = WALL_AXIS[wall]
        idx = self.face_index(a)
        sl = [slice(None)] * 3
        sl[a] = -1 if side else 0
        return idx[tuple(sl)]


class ScalarLayout:
    """Flat scalar vector: cells, then top-surface nodes, then bottom-wall nodes."""

    def __init__(self, grid: BoxGrid):
        self.grid = grid
        nc = grid.nx * grid.ny * grid.nz
        ns = grid.nx * grid.ny
        self.cells = slice(0, nc)
        self.top = slice(nc, nc + ns)
        self.bottom = slice(nc + ns, nc + 2 * ns)
        self.size = nc + 2 * ns
        self.n_cells = nc

    def cell_index(self):
        return np.arange(self.n_cells).reshape(self.grid.n)

    def top_index(self):
        return np.arange(self.top.start, self.top.stop).reshape(self.grid.nx, self.grid.ny)

    def bottom_index(self):
        return np.arange(self.bottom.start, self.bottom.stop).reshape(self.grid.nx, self.grid.ny)

    @cached_property
    def constrained(self):
        mask = np.zeros(self.size, dtype=bool)
        mask[self.bottom] = True
        return mask


# -- fields ----------------------------------------------------------------

def _check_shape(arr, shape, what):
    arr = np.asarray(arr, dtype=float)
    if arr.shape != tuple(shape):
        raise ValueError(f"{what}: expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def _adjacent_layer(arr, wall, c):
    a, side = WALL_AXIS[wall]
    return np.take(arr, -1 if side else 0, axis=a)


class VelocityField:
    """MAC velocity plus the tangential wall-node values on Gamma_0.

    Wall values default to copies of the adjacent face layer, which makes
    the wall contributions to gradients vanish (a natural boundary).
    """

    def __init__(self, grid: BoxGrid, u1, u2, u3, walls=None):
        self.grid = grid
        self.u = [_check_shape(u, grid.face_shape(c), f"u{c + 1}") for c, u in enumerate((u1, u2, u3))]
        self.walls = {}
        walls = walls or {}
        for wall, c in WALL_BLOCKS:
            if (wall, c) in walls:
                self.walls[(wall, c)] = _check_shape(walls[(wall, c)], grid.wall_node_shape(wall, c),
                                                     f"wall {wall} component {c + 1}")
            else:
                self.walls[(wall, c)] = _adjacent_layer(self.u[c], wall, c).copy()

    u1 = property(lambda self: self.u[0])
    u2 = property(lambda self: self.u[1])
    u3 = property(lambda self: self.u[2])

    @classmethod
    def zeros(cls, grid):
        z = [np.zeros(grid.face_shape(c)) for c in range(3)]
        walls = {wc: np.zeros(grid.wall_node_shape(*wc)) for wc in WALL_BLOCKS}
        return cls(grid, *z, walls=walls)

    @classmethod
    def from_function(cls, grid, f):
        """Sample ``f(x, y, z) -> (f1, f2, f3)`` on faces and wall nodes."""
        comps = []
        for c in range(3):
            X = grid.face_centers(c)
            comps.append(np.broadcast_to(f(*X)[c], X[0].shape).astype(float))
        walls = {}
        for wall, c in WALL_BLOCKS:
            X = grid.wall_node_coords(wall, c)
            walls[(wall, c)] = np.broadcast_to(f(*X)[c], X[0].shape).astype(float)
        return cls(grid, *comps, walls=walls)

    @classmethod
    def from_vector(cls, grid, vec):
        lay = grid.velocity_layout
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (lay.size,):
            raise ValueError("velocity vector has the wrong length")
        comps = [vec[lay.face_slices[c]].reshape(grid.face_shape(c)) for c in range(3)]
        walls = {wc: vec[lay.wall_slices[wc]].reshape(grid.wall_node_shape(*wc)) for wc in WALL_BLOCKS}
        return cls(grid, *comps, walls=walls)

    def to_vector(self):
        lay = self.grid.velocity_layout
        out = np.empty(lay.size)
        for c in range(3):
            out[lay.face_slices[c]] = self.u[c].ravel()
        for wc in WALL_BLOCKS:
            out[lay.wall_slices[wc]] = self.walls[wc].ravel()
        return out

    def cell_centered(self):
        """Velocity averaged to cell centres, shape (nx, ny, nz, 3)."""
        u1, u2, u3 = self.u
        return np.stack([0.5 * (u1[1:] + u1[:-1]), 0.5 * (u2[:, 1:] + u2[:, :-1]),
                         0.5 * (u3[:, :, 1:] + u3[:, :, :-1])], axis=-1)

    def max_abs(self):
        return max(float(np.abs(u).max()) for u in self.u)


class ScalarField:
    """Cell-centred scalar with optional top-surface and bottom-wall traces."""

    def __init__(self, grid: BoxGrid, cells, top=None, bottom=None):
        self.grid = grid
        self.cells = _check_shape(cells, grid.n, "cells")
        surf = (grid.nx, grid.ny)
        self.top = self.cells[:, :, -1].copy() if top is None else _check_shape(top, surf, "top")
        self.bottom = self.cells[:, :, 0].copy() if bottom is None else _check_shape(bottom, surf, "bottom")

    @classmethod
    def zeros(cls, grid):
        s = (grid.nx, grid.ny)
        return cls(grid, np.zeros(grid.n), np.zeros(s), np.zeros(s))

    @classmethod
    def from_function(cls, grid, f):
        X = grid.cell_centers()
        cells = np.broadcast_to(f(*X), X[0].shape).astype(float)
        x, y = X[0][:, :, 0], X[1][:, :, 0]
        top = np.broadcast_to(f(x, y, np.ones_like(x)), x.shape).astype(float)
        bottom = np.broadcast_to(f(x, y, np.zeros_like(x)), x.shape).astype(float)
        return cls(grid, cells, top, bottom)

    @classmethod
    def from_vector(cls, grid, vec):
        lay = grid.scalar_layout
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (lay.size,):
            raise ValueError("scalar vector has the wrong length")
        s = (grid.nx, grid.ny)
        return cls(grid, vec[lay.cells].reshape(grid.n), vec[lay.top].reshape(s), vec[lay.bottom].reshape(s))

    def to_vector(self):
        return np.concatenate([self.cells.ravel(), self.top.ravel(), self.bottom.ravel()])


# -- boundary regions --------------------------------------------------------

class BoundaryFaceTable:
    """All boundary faces of the box in the order x0, x1, y0, y1, bottom, top."""

    ORDER = WALLS + ("top",)

    def __init__(self, grid: BoxGrid):
        self.grid = grid
        wall_id, local, cents, areas, normals = [], [], [], [], []
        self.wall_range = {}
        off = 0
        for wi, wall in enumerate(self.ORDER):
            shape = grid.wall_face_shape(wall)
            cnt = shape[0] * shape[1]
            self.wall_range[wall] = slice(off, off + cnt)
            off += cnt
            X = grid.wall_face_coords(wall)
            cents.append(np.stack([x.ravel() for x in X], axis=1))
            areas.append(np.full(cnt, grid.wall_face_area(wall)))
            a, side = WALL_AXIS[wall]
            nrm = np.zeros((cnt, 3))
            nrm[:, a] = 1.0 if side else -1.0
            normals.append(nrm)
            wall_id.append(np.full(cnt, wi))
            ii, jj = np.unravel_index(np.arange(cnt), shape)
            local.append(np.stack([ii, jj], axis=1))
        self.wall_id = np.concatenate(wall_id)
        self.local = np.concatenate(local)
        self.centroid = np.concatenate(cents)
        self.area = np.concatenate(areas)
        self.normal = np.concatenate(normals)
        self.size = off

    def indices(self, walls):
        return np.concatenate([np.arange(self.wall_range[w].start, self.wall_range[w].stop) for w in walls])


@dataclass(frozen=True, eq=False)
class BoundaryRegion:
    grid: BoxGrid
    tag: str
    faces: np.ndarray  # indices into grid.boundary_faces

    def __post_init__(self):
        if len(self.faces) == 0:
            raise ValueError(f"boundary region {self.tag} is empty")

    @property
    def size(self):
        return len(self.faces)

    @property
    def centroid(self):
        return self.grid.boundary_faces.centroid[self.faces]

    @property
    def area(self):
        return self.grid.boundary_faces.area[self.faces]

    @property
    def normal(self):
        return self.grid.boundary_faces.normal[self.faces]

    @property
    def measure(self):
        return float(self.area.sum())

    def wall_names(self):
        t = self.grid.boundary_faces
        return [BoundaryFaceTable.ORDER[i] for i in t.wall_id[self.faces]]


def region(grid: BoxGrid, tag: str) -> BoundaryRegion:
    table = grid.boundary_faces
    walls = {"top": ("top",), "bottom": ("bottom",), "lateral": LATERAL,
             "gamma0": LATERAL + ("bottom",)}
    if tag not in walls:
        raise ValueError(f"unknown boundary region {tag!r}")
    return BoundaryRegion(grid, tag, table.indices(walls[tag]))


def control_partition(grid: BoxGrid, mask=None):
    """Split Gamma_0 into (Gamma_0^1, Gamma_0^2) by a boolean mask over Gamma_0 faces.

    The default mask selects the lateral walls for Gamma_0^1.
    """
    g0 = region(grid, "gamma0")
    if mask is None:
        mask = np.isin(g0.faces, region(grid, "lateral").faces)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != g0.faces.shape:
        raise ValueError("partition mask must have one entry per Gamma_0 face")
    parts = []
    for tag, m in (("gamma01", mask), ("gamma02", ~mask)):
        parts.append(BoundaryRegion(grid, tag, g0.faces[m]) if m.any() else None)
    if parts[0] is None:
        raise ValueError("Gamma_0^1 is empty")
    return parts[0], parts[1]


class BoundaryField:
    """Scalar or 3-vector values on the faces of one region.

    ``normal_zero`` marks vector fields whose normal component is
    constrained to vanish on lateral faces (the velocity-control space).
    """

    def __init__(self, region: BoundaryRegion, values, normal_zero=False):
        values = np.array(values, dtype=float)
        if values.shape not in ((region.size,), (region.size, 3)):
            raise ValueError(f"boundary values must have shape ({region.size},) or ({region.size}, 3)")
        self.region = region
        self.values = values
        self.normal_zero = normal_zero

    @property
    def is_vector(self):
        return self.values.ndim == 2

    @classmethod
    def zeros(cls, region, vector=False, normal_zero=False):
        shape = (region.size, 3) if vector else (region.size,)
        return cls(region, np.zeros(shape), normal_zero)

    def copy(self, values=None):
        return BoundaryField(self.region, self.values.copy() if values is None else values, self.normal_zero)

    def normal_component(self):
        return np.einsum("ij,ij->i", self.values, self.region.normal)

    def constraint_violation(self):
        """Largest violation of the zero-normal and zero-flux constraints."""
        if not self.is_vector:
            return 0.0
        vn = self.normal_component()
        lateral = self.region.normal[:, 2] == 0
        out = float(np.abs(vn[lateral]).max()) if lateral.any() else 0.0
        out = max(out, abs(float(np.sum(vn * self.region.area))))
        return out


# -- difference operators ----------------------------------------------------

def divergence(v: VelocityField) -> np.ndarray:
    g = v.grid
    hx, hy, hz = g.h
    u1, u2, u3 = v.u
    return (u1[1:] - u1[:-1]) / hx + (u2[:, 1:] - u2[:, :-1]) / hy + (u3[:, :, 1:] - u3[:, :, :-1]) / hz


def gradient(q: np.ndarray, grid: BoxGrid) -> VelocityField:
    """Face gradient of a cell array; zero on boundary faces (interior-supported)."""
    q = _check_shape(q, grid.n, "cells")
    comps = []
    for c in range(3):
        out = np.zeros(grid.face_shape(c))
        sl = [slice(None)] * 3
        sl[c] = slice(1, -1)
        out[tuple(sl)] = np.diff(q, axis=c) / grid.h[c]
        comps.append(out)
    walls = {wc: np.zeros(grid.wall_node_shape(*wc)) for wc in WALL_BLOCKS}
    return VelocityField(grid, *comps, walls=walls)


def _staggered_difference(v: VelocityField, c, d):
    """Differences of component c along axis d at the staggered positions.

    Returns (values, valid) with n[d] + 1 positions along d.  End positions
    use the wall nodes at half spacing; the top end along z has no node and
    is marked invalid.
    """
    g = v.grid
    u = np.moveaxis(v.u[c], d, 0)
    h = g.h[d]
    shape = (u.shape[0] + 1,) + u.shape[1:]
    out = np.zeros(shape)
    valid = np.ones(shape, dtype=bool)
    out[1:-1] = (u[1:] - u[:-1]) / h
    lo = {0: "x0", 1: "y0", 2: "bottom"}[d]
    out[0] = (u[0] - _wall_in_axis_order(v, lo, c, d)) / (0.5 * h)
    if d == 2:
        valid[-1] = False
    else:
        hi = {0: "x1", 1: "y1"}[d]
        out[-1] = (_wall_in_axis_order(v, hi, c, d) - u[-1]) / (0.5 * h)
    return np.moveaxis(out, 0, d), np.moveaxis(valid, 0, d)


def _wall_in_axis_order(v, wall, c, d):
    # wall node arrays are stored over the tangential axes in increasing order,
    # which is also the order left after moving axis d to the front
    return v.walls[(wall, c)]


CURL_AXES = ((0, 1, 2), (1, 2, 0), (2, 0, 1))


def curl(v: VelocityField):
    """Edge curl (w1, w2, w3); top-surface edges are excluded.

    w_a = d_p u_q - d_q u_p is located on edges parallel to axis a.
    """
    out = []
    for a, p, q in CURL_AXES:
        dpq, vq = _staggered_difference(v, q, p)
        dqp, vp = _staggered_difference(v, p, q)
        w = dpq - dqp
        valid = vq & vp
        if a != 2:
            w = w[:, :, :-1]
            valid = valid[:, :, :-1]
        assert valid.all()
        out.append(w)
    return tuple(out)


def interior_edges(w, axis):
    """Strip the boundary layers of an edge array (keeps edges off every wall)."""
    sl = [slice(None)] * 3
    for t in range(3):
        if t == axis:
            continue
        sl[t] = slice(1, -1) if t != 2 else slice(1, None)
    return w[tuple(sl)]


# -- norms -------------------------------------------------------------------

def l2_norm(f) -> float:
    if isinstance(f, VelocityField):
        lay = f.grid.velocity_layout
        w = lay.face_fraction * f.grid.vol
        return float(np.sqrt(np.sum(w * f.to_vector() ** 2)))
    return float(np.sqrt(f.grid.vol * np.sum(f.cells ** 2)))


def h1_seminorm(f) -> float:
    from .forms import FormWorkspace

    ws = FormWorkspace.for_grid(f.grid)
    if isinstance(f, VelocityField):
        x = f.to_vector()
        return float(np.sqrt(max(x @ (ws.stiffness @ x), 0.0)))
    x = f.to_vector()
    return float(np.sqrt(max(x @ (ws.scalar_stiffness @ x), 0.0)))


def h1_norm(f) -> float:
    return float(np.hypot(l2_norm(f), h1_seminorm(f)))


def gram_matrix(centroids, areas, mode="gagliardo", chunk=1024):
    """Gram matrix of the discrete H^{1/2} norm on a set of faces.

    |v|^2 = sum_i w_i v_i^2 + sum_{i != j} w_i w_j (v_i - v_j)^2 / |x_i - x_j|^3
    """
    x = np.asarray(centroids, dtype=float)
    w = np.asarray(areas, dtype=float)
    n = len(w)
    if n == 0:
        raise ValueError("empty region")
    if mode == "l2":
        return np.diag(w)
    if mode != "gagliardo":
        raise ValueError(f"unknown norm mode {mode!r}")
    G = np.empty((n, n))
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        d = np.linalg.norm(x[s:e, None, :] - x[None, :, :], axis=-1)
        with np.errstate(divide="ignore"):
            K = w[s:e, None] * w[None, :] / d ** 3
        K[np.arange(e - s), np.arange(s, e)] = 0.0
        G[s:e] = -2.0 * K
    rowsum = -G.sum(axis=1)
    G[np.diag_indices(n)] = w + rowsum
    return 0.5 * (G + G.T)


_GRAM_CACHE: dict = {}


def h12_gram(reg: BoundaryRegion, mode="gagliardo"):
    key = (reg.grid, reg.tag, reg.faces.tobytes(), mode)
    G = _GRAM_CACHE.get(key)
    if G is None:
        G = gram_matrix(reg.centroid, reg.area, mode)
        G.setflags(write=False)
        _GRAM_CACHE[key] = G
    return G


def h12_norm(bf: BoundaryField, mode="gagliardo") -> float:
    G = h12_gram(bf.region, mode)
    v = bf.values
    if v.ndim == 1:
        return float(np.sqrt(max(v @ G @ v, 0.0)))
    return float(np.sqrt(max(np.einsum("ic,ij,jc->", v, G, v), 0.0)))
