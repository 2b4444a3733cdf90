"""Adjoint system, boundary multipliers and the linearized state.

The adjoint is the exact transpose of the discrete Jacobian used by the
Newton solver, so reduced gradients are exact for the discrete problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .controls import ControlTriple
from .grid import BoundaryField, BoxGrid, ScalarField, VelocityField, h1_norm, region
from .linalg import SolverCache, pin_column
from .params import CostWeights, NondimParams
from .state_solver import Discretization, StateSolution, _complement


@dataclass
class Targets:
    u_d: VelocityField
    theta_d: ScalarField

    def __post_init__(self):
        if self.u_d.grid != self.theta_d.grid:
            raise ValueError("targets live on different grids")

    @property
    def grid(self):
        return self.u_d.grid

    @classmethod
    def zero(cls, grid: BoxGrid):
        return cls(VelocityField.zeros(grid), ScalarField.zeros(grid))

    @classmethod
    def from_state(cls, state: StateSolution):
        return cls(state.u, state.theta)


@dataclass
class AdjointState:
    lambda1: VelocityField
    pi: ScalarField
    lambda2: ScalarField
    lambda3: BoundaryField  # on Gamma_0, per unit area
    lambda4: BoundaryField  # on the bottom, per unit area
    vector: np.ndarray = field(repr=False, default=None)  # free-row multipliers
    trace: np.ndarray = field(repr=False, default=None)  # constrained-dof multipliers


def _disc_for(grid, gamma01=None):
    if gamma01 is None:
        gamma01 = region(grid, "lateral")
    return Discretization.get(grid, gamma01, _complement(grid, gamma01))


def _state_vector(disc, state):
    if state.x is not None and state.x.shape == (disc.nX,):
        return state.x
    return disc.pack(state.u.to_vector(), state.p.cells.ravel(), state.theta.to_vector())


def cost_gradient_state(disc, state, targets: Targets, w: CostWeights):
    """Derivative of the tracking part of the cost with respect to the stacked unknowns."""
    if targets.grid != disc.grid:
        raise ValueError("targets do not match the grid")
    ws = disc.ws
    x = _state_vector(disc, state)
    U, _, _, T = disc.unpack(x)
    q = np.zeros(disc.nX)
    qU = np.zeros(disc.nU)
    if w.gamma1:
        qU += w.gamma1 * (ws.vorticity_form @ U)
    if w.gamma2:
        qU += w.gamma2 * ws.face_mass * (U - targets.u_d.to_vector())
    q[:disc.nU] = qU
    if w.gamma3:
        q[disc.oT:] = w.gamma3 * ws.cell_mass * (T - targets.theta_d.to_vector())
    return q


def adjoint_operator(disc, x, p):
    """Transpose of the free-row Jacobian assembled block by block from the operator transposes."""
    U, _, _, T = disc.unpack(x)
    pin = pin_column(disc.nC, disc.grid.vol)
    JUU_T = p.Pr * disc.A.T + disc.Csk.matrix_u(U).T + disc.Csk.matrix_w(U).T
    JTU_T = disc.C1sk.matrix_w(T).T
    JUT_T = (-p.Pr * p.R * disc.E + p.Pr * p.M * disc.Mg).T
    JTT_T = disc.temperature_matrix(U, p).T
    full = sp.bmat([[JUU_T, -disc.D.T, None, JTU_T],
                    [-p.Pr * disc.D, None, pin, None],
                    [None, pin.T, None, None],
                    [JUT_T, None, None, JTT_T]], format="csr")
    return full[disc.xf][:, disc.xf]


def transpose_identity_residual(state: StateSolution, p: NondimParams, seed=0, trials=5):
    """max |<J x, y> - <x, J_adj y>| / (|J x||y|) over random free-dof vectors."""
    disc = _disc_for(state.u.grid)
    x = _state_vector(disc, state)
    Jff, _ = disc.split(disc.jacobian(x, p))
    Jadj = adjoint_operator(disc, x, p)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        a = rng.standard_normal(Jff.shape[0])
        b = rng.standard_normal(Jff.shape[0])
        Ja = Jff @ a
        lhs, rhs = Ja @ b, a @ (Jadj @ b)
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(Ja) * np.linalg.norm(b)))
    return worst


def solve_adjoint(state: StateSolution, targets: Targets, p: NondimParams, w: CostWeights,
                  cache: SolverCache | None = None, gamma01=None) -> AdjointState:
    """Multipliers of the discrete state equations for the tracking part of the cost."""
    grid = state.u.grid
    disc = _disc_for(grid, gamma01)
    cache = cache or state.cache or SolverCache()
    x = _state_vector(disc, state)
    q = cost_gradient_state(disc, state, targets, w)
    Jff, Jfc = disc.split(disc.jacobian(x, p))
    qf = q[disc.xf]
    if np.any(qf):
        lam = cache.get("jacobian").solve(Jff, qf, trans=True)
    else:
        lam = np.zeros_like(qf)
    if not np.all(np.isfinite(lam)):
        raise FloatingPointError("adjoint solve produced non-finite values")
    trace = q[disc.xc] - Jfc.T @ lam
    return _package(disc, lam, trace)


def _package(disc, lam, trace):
    grid = disc.grid
    full = np.zeros(disc.nX)
    full[disc.xf] = lam
    tr = np.zeros(disc.nX)
    tr[disc.xc] = trace
    U, P, _, T = disc.unpack(full)
    Utr, _, _, Ttr = disc.unpack(tr)
    g0 = region(grid, "gamma0")
    B0 = disc.ws.velocity_data_map(g0)
    lam3 = (B0.T @ Utr).reshape(g0.size, 3) / g0.area[:, None]
    bottom = region(grid, "bottom")
    lam4 = Ttr[disc.tc] / bottom.area
    return AdjointState(VelocityField.from_vector(grid, U),
                        ScalarField(grid, (P - P.mean()).reshape(grid.n)),
                        ScalarField.from_vector(grid, T),
                        BoundaryField(g0, lam3), BoundaryField(bottom, lam4),
                        lam, trace)


def boundary_sensitivities(adj: AdjointState, controls: ControlTriple, disc=None):
    """Dual (coefficient-space) derivatives of the tracking cost w.r.t. (g, phi1, phi2)."""
    disc = disc or Discretization.for_controls(controls)
    tr = np.zeros(disc.nX)
    tr[disc.xc] = adj.trace
    Utr, _, _, Ttr = disc.unpack(tr)
    dg = (disc.Bg.T @ Utr).reshape(controls.g.values.shape)
    full = np.zeros(disc.nX)
    full[disc.xf] = adj.vector
    _, _, _, Tl = disc.unpack(full)
    dphi1 = disc.N.T @ Tl
    dphi2 = Ttr[disc.tc].copy()
    return dg, dphi1, dphi2


def linearized_state(state: StateSolution, r: BoundaryField, rho: BoundaryField, tau: BoundaryField,
                     p: NondimParams, cache: SolverCache | None = None):
    """Derivative of the state in the control direction (r, rho, tau)."""
    grid = state.u.grid
    disc = _disc_for(grid, r.region)
    cache = cache or state.cache or SolverCache()
    x = _state_vector(disc, state)
    dX = np.zeros(disc.nX)
    dX[:disc.nU] = disc.velocity_data(r.values)
    dX[disc.oT + disc.tc] = tau.values
    Jff, Jfc = disc.split(disc.jacobian(x, p))
    forcing = np.zeros(disc.nX)
    forcing[disc.oT:] = disc.N @ rho.values
    rhs = -(Jfc @ dX[disc.xc]) + forcing[disc.xf]
    if np.any(rhs):
        dX[disc.xf] = cache.get("jacobian").solve(Jff, rhs)
    U, _, _, T = disc.unpack(dX)
    return VelocityField.from_vector(grid, U), ScalarField.from_vector(grid, T)


def beta0_formula(Pr, M, R, u_norm, theta_norm, C_ref):
    return min(Pr - C_ref * (Pr * (M + R) + u_norm + theta_norm ** 2), 0.5 - C_ref * Pr * (R + M))


def regular_point_beta0(state: StateSolution, p: NondimParams, C_ref: float) -> float:
    """Regular-point constant from the state's H1 norms and the supplied generic constant."""
    if not C_ref > 0:
        raise ValueError("C_ref must be positive")
    return beta0_formula(p.Pr, p.M, p.R, h1_norm(state.u), h1_norm(state.theta), C_ref)
