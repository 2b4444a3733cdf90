"""Cost functional, reduced gradient, projections and the projected-gradient loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .adjoint_solver import (AdjointState, Targets, boundary_sensitivities, linearized_state,
                             solve_adjoint)
from .controls import ConstraintSet, ControlTriple, GConstraint
from .grid import BoundaryField, h1_norm, h12_gram, l2_norm
from .linalg import LinearSolveError
from .params import CostWeights, NondimParams
from .state_solver import (Discretization, SolverDivergence, SolverOptions, StateSolution,
                           picard_solve)


@dataclass
class CostBreakdown:
    vorticity_term: float
    velocity_tracking: float
    temperature_tracking: float
    g_norm_term: float
    phi1_norm_term: float
    phi2_norm_term: float
    total: float

    def to_json(self):
        return {k: float(v) for k, v in self.__dict__.items()}


@dataclass
class OptimalityReport:
    vi_residual_g: float = math.nan
    vi_residual_phi1: float = math.nan
    vi_residual_phi2: float = math.nan
    cost_history: list = field(default_factory=list)
    step_history: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)  # (res_g, res_phi1, res_phi2) per iterate
    second_order_min_quotient: float | None = None
    multiplier_bound_lhs: float = math.nan
    multiplier_bound_rhs: float = math.nan
    iterations: int = 0
    converged: bool = False
    message: str = ""

    @property
    def vi_residuals(self):
        return (self.vi_residual_g, self.vi_residual_phi1, self.vi_residual_phi2)

    def to_json(self):
        return {
            "vi_residual_g": self.vi_residual_g,
            "vi_residual_phi1": self.vi_residual_phi1,
            "vi_residual_phi2": self.vi_residual_phi2,
            "cost_history": list(self.cost_history),
            "step_history": [list(t) for t in self.step_history],
            "second_order_min_quotient": self.second_order_min_quotient,
            "multiplier_bound_lhs": self.multiplier_bound_lhs,
            "multiplier_bound_rhs": self.multiplier_bound_rhs,
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
        }

    def history_rows(self):
        """Rows (iter, J, step_g, step_phi1, step_phi2, res_g, res_phi1, res_phi2) per accepted iterate."""
        rows = []
        for k, J in enumerate(self.cost_history):
            steps = self.step_history[k - 1] if k > 0 else (0.0,) * 3
            res = self.residual_history[k] if k < len(self.residual_history) else (math.nan,) * 3
            rows.append((k, J, *steps, *res))
        return rows


@dataclass
class OptimizerOptions:
    tol: float = 1e-6
    max_iters: int = 200
    armijo_c1: float = 1e-4
    max_backtracks: int = 30
    initial_step: float = 1.0
    step_rule: str = "short"  # "long", "short" or "alternate" Barzilai-Borwein steps
    seed: int = 0
    norm_mode: str = "gagliardo"


# -- control space -----------------------------------------------------------

class ControlSpace:
    """Gram inner products, Riesz maps and projections for one control layout."""

    def __init__(self, controls: ControlTriple, mode="gagliardo"):
        self.mode = mode
        self.gcon = GConstraint(controls.g.region, mode)
        self.G = (self.gcon.G, h12_gram(controls.phi1.region, mode), h12_gram(controls.phi2.region, mode))
        self._chol = (None, cho_factor(self.G[1]), cho_factor(self.G[2]))

    def inner(self, k, a, b):
        G = self.G[k]
        if a.ndim == 2:
            return float(np.einsum("ic,ij,jc->", a, G, b))
        return float(a @ G @ b)

    def norm(self, k, a):
        return math.sqrt(max(self.inner(k, a, a), 0.0))

    def riesz(self, k, dual):
        if k == 0:
            return self.gcon.riesz(dual)
        return cho_solve(self._chol[k], dual)

    def project(self, k, cs: ConstraintSet, v, sweeps=50):
        return project_values(cs, v, self.G[k], self.gcon if k == 0 else None, sweeps)


def _ball(cs, v, G):
    c = np.zeros_like(v) if cs.center is None else np.broadcast_to(np.asarray(cs.center, float), v.shape)
    d = v - c
    n2 = float(np.einsum("ic,ij,jc->", d, G, d)) if d.ndim == 2 else float(d @ G @ d)
    n = math.sqrt(max(n2, 0.0))
    if n <= cs.radius:
        return v
    return c + d * (cs.radius / n)


def _box(cs, v):
    lo = -np.inf if cs.lo is None else cs.lo
    hi = np.inf if cs.hi is None else cs.hi
    return np.clip(v, lo, hi)


def _feasible(cs, v, G, sub, tol=1e-12):
    scale = 1.0 + float(np.abs(v).max(initial=0.0))
    if cs.has_box and not np.array_equal(_box(cs, v), v):
        return False
    if cs.has_ball and not np.allclose(_ball(cs, v, G), v, rtol=0, atol=tol * scale):
        return False
    if sub is not None and not np.allclose(sub.apply(v), v, rtol=0, atol=tol * scale):
        return False
    return True


def project_values(cs: ConstraintSet, v, G, sub=None, sweeps=50):
    """Box clamp, radial ball scaling, and (for g) the admissible-subspace projection.

    A single set is projected exactly.  Intersections are handled by
    alternating projections, at most ``sweeps`` rounds, ending on the
    component applied last (the subspace for g, else the ball).
    """
    v = np.array(v, dtype=float)
    ops = []
    if cs.has_box:
        ops.append(lambda x: _box(cs, x))
    if cs.has_ball:
        ops.append(lambda x: _ball(cs, x, G))
    if sub is not None:
        ops.append(sub.apply)
    if not ops:
        return v
    if len(ops) == 1:
        return ops[0](v)
    for _ in range(sweeps):
        for op in ops:
            v = op(v)
        if _feasible(cs, v, G, sub):
            break
    return v


def project(cs: ConstraintSet, candidate: BoundaryField, mode="gagliardo") -> BoundaryField:
    """Projection of one boundary control onto its constraint set."""
    G = h12_gram(candidate.region, mode)
    sub = GConstraint(candidate.region, mode) if candidate.is_vector else None
    return candidate.copy(project_values(cs, candidate.values, G, sub))


# -- cost and gradient -------------------------------------------------------

def cost(state: StateSolution, controls: ControlTriple, targets: Targets, w: CostWeights,
         mode="gagliardo") -> CostBreakdown:
    disc = Discretization.for_controls(controls)
    ws = disc.ws
    U = state.u.to_vector()
    T = state.theta.to_vector()
    dU = U - targets.u_d.to_vector()
    dT = T - targets.theta_d.to_vector()
    parts = [
        0.5 * w.gamma1 * float(U @ (ws.vorticity_form @ U)),
        0.5 * w.gamma2 * float(np.sum(ws.face_mass * dU ** 2)),
        0.5 * w.gamma3 * float(np.sum(ws.cell_mass * dT ** 2)),
    ]
    for gamma, f in zip(w.regularization, controls.fields):
        G = h12_gram(f.region, mode)
        v = f.values
        q = float(np.einsum("ic,ij,jc->", v, G, v)) if v.ndim == 2 else float(v @ G @ v)
        parts.append(0.5 * gamma * q)
    parts = [max(x, 0.0) for x in parts]
    return CostBreakdown(*parts, total=float(sum(parts)))


def reduced_dual_gradient(controls: ControlTriple, adjoint: AdjointState, w: CostWeights, space: ControlSpace):
    """Coefficient-space derivative of the reduced cost."""
    dg, d1, d2 = boundary_sensitivities(adjoint, controls)
    g, phi1, phi2 = controls.arrays()
    G = space.G
    return (w.gamma4 * (G[0] @ g) + dg, w.gamma5 * (G[1] @ phi1) + d1, w.gamma6 * (G[2] @ phi2) + d2)


def reduced_gradient(controls: ControlTriple, adjoint: AdjointState, w: CostWeights,
                     space: ControlSpace | None = None):
    """Riesz representers (G_g, G_phi1, G_phi2) of the reduced-cost derivative."""
    space = space or ControlSpace(controls)
    dual = reduced_dual_gradient(controls, adjoint, w, space)
    return tuple(space.riesz(k, d) for k, d in enumerate(dual))


def stationarity(controls: ControlTriple, grad, space: ControlSpace):
    """|c - P(c - G)| in the Gram norm, per control."""
    out = []
    for k, (c, gk) in enumerate(zip(controls.arrays(), grad)):
        pc = space.project(k, controls.sets[k], c - gk)
        out.append(space.norm(k, c - pc))
    return tuple(out)


def _check_feasible(controls: ControlTriple, space: ControlSpace):
    for k, c in enumerate(controls.arrays()):
        p = space.project(k, controls.sets[k], c)
        if space.norm(k, p - c) > 1e-9 * (1.0 + space.norm(k, c)):
            raise ValueError(f"initial control {('g', 'phi1', 'phi2')[k]} is not feasible")


def projected_gradient(initial: ControlTriple, p: NondimParams, targets: Targets, w: CostWeights,
                       opts: OptimizerOptions | None = None, solver_opts: SolverOptions | None = None,
                       u0=None, callback=None):
    """Projected gradient with Barzilai-Borwein trial steps and Armijo backtracking."""
    opts = opts or OptimizerOptions()
    solver_opts = solver_opts or SolverOptions()
    w.check()
    if w.mode == "i" and not all(cs.bounded for cs in initial.sets):
        raise ValueError("mode (i) needs bounded constraint sets")
    space = ControlSpace(initial, opts.norm_mode)
    _check_feasible(initial, space)
    report = OptimalityReport()

    c = initial
    state, srep = picard_solve(c, u0, p, solver_opts)
    if not srep.converged:
        raise SolverDivergence(f"state solve at the initial control failed: {srep.message}")
    J = cost(state, c, targets, w, opts.norm_mode).total
    # one Barzilai-Borwein step per control: the three blocks have very
    # different curvature, and a shared step is throttled by the stiffest one
    steps = [opts.initial_step] * 3
    prev = None  # (controls arrays, gradient) of the previous accepted iterate
    adj = None
    for it in range(opts.max_iters + 1):
        adj = solve_adjoint(state, targets, p, w, cache=state.cache, gamma01=c.g.region)
        grad = reduced_gradient(c, adj, w, space)
        res = stationarity(c, grad, space)
        report.cost_history.append(J)
        report.residual_history.append(res)
        report.iterations = it
        if callback is not None:
            callback(it, J, res)
        if max(res) < opts.tol:
            report.converged = True
            break
        if it == opts.max_iters:
            report.message = "iteration budget exhausted"
            break
        if prev is not None:
            for k, (a, b, ga, gb) in enumerate(zip(c.arrays(), prev[0], grad, prev[1])):
                ss = space.inner(k, a - b, a - b)
                sy = space.inner(k, a - b, ga - gb)
                yy = space.inner(k, ga - gb, ga - gb)
                if ss > 0 and sy > 0:
                    short = opts.step_rule == "short" or (opts.step_rule == "alternate" and it % 2)
                    steps[k] = sy / yy if short else ss / sy
        accepted = False
        for _ in range(opts.max_backtracks):
            trial_vals = [space.project(k, c.sets[k], a - steps[k] * gk) for k, (a, gk) in
                          enumerate(zip(c.arrays(), grad))]
            trial = c.with_values(*trial_vals)
            slope = sum(space.inner(k, gk, t - a) for k, (gk, t, a) in
                        enumerate(zip(grad, trial_vals, c.arrays())))
            try:
                tstate, trep = picard_solve(trial, u0, p, solver_opts, initial=state)
                ok = trep.converged
            except (SolverDivergence, LinearSolveError):
                ok = False
            if ok:
                Jt = cost(tstate, trial, targets, w, opts.norm_mode).total
                if Jt <= J + opts.armijo_c1 * slope:
                    accepted = True
                    break
            steps = [0.5 * t for t in steps]
        if not accepted:
            report.message = "line search failed after the maximum number of backtracks"
            break
        prev = (c.arrays(), grad)
        report.step_history.append(tuple(steps))
        c, state, J = trial, tstate, Jt
    report.vi_residual_g, report.vi_residual_phi1, report.vi_residual_phi2 = report.residual_history[-1]
    return c, state, adj, report


# -- optimality diagnostics ---------------------------------------------------

def vi_check(controls: ControlTriple, grad, space: ControlSpace, samples=100, seed=0, tol=1e-6, spread=1.0):
    """Worst slack of <G, c - c_opt> + tol |c - c_opt| over random feasible c, per control.

    Nonnegative values mean the discrete variational inequality holds.
    """
    rng = np.random.default_rng(seed)
    out = []
    for k, (chat, gk) in enumerate(zip(controls.arrays(), grad)):
        cs = controls.sets[k]
        worst = math.inf
        for _ in range(samples):
            cand = _random_feasible(cs, chat, rng, spread, space, k)
            d = cand - chat
            worst = min(worst, space.inner(k, gk, d) + tol * space.norm(k, d))
        out.append(worst)
    return tuple(out)


def _random_feasible(cs, chat, rng, spread, space, k):
    if cs.lo is not None and cs.hi is not None:
        v = rng.uniform(cs.lo, cs.hi, size=chat.shape)
    else:
        v = chat + spread * rng.standard_normal(chat.shape)
    return space.project(k, cs, v)


@dataclass
class SecondOrderResult:
    min_quotient: float
    quotients: list
    control_shares: list

    @property
    def control_share_bound(self):
        return min(self.control_shares)


def second_order_quotient(state: StateSolution, adjoint: AdjointState, p: NondimParams, w: CostWeights,
                          controls: ControlTriple, samples=32, seed=0, mode="gagliardo") -> SecondOrderResult:
    """Minimum over random kernel directions of L_zz[t, t] / |t|^2."""
    disc = Discretization.for_controls(controls)
    ws = disc.ws
    space = ControlSpace(controls, mode)
    rng = np.random.default_rng(seed)
    lam = np.zeros(disc.nX)
    if adjoint.vector is not None:
        lam[disc.xf] = adjoint.vector
    lamU, _, _, lamT = disc.unpack(lam)
    qs, shares = [], []
    for _ in range(samples):
        r = space.gcon.apply(rng.standard_normal(controls.g.values.shape))
        rho = rng.standard_normal(controls.phi1.values.shape)
        tau = rng.standard_normal(controls.phi2.values.shape)
        h1, h2 = linearized_state(state, controls.g.copy(r), controls.phi1.copy(rho), controls.phi2.copy(tau), p)
        H1, H2 = h1.to_vector(), h2.to_vector()
        ctrl = [space.inner(0, r, r), space.inner(1, rho, rho), space.inner(2, tau, tau)]
        L = (w.gamma1 * H1 @ (ws.vorticity_form @ H1) + w.gamma2 * np.sum(ws.face_mass * H1 ** 2)
             + w.gamma3 * np.sum(ws.cell_mass * H2 ** 2)
             + w.gamma4 * ctrl[0] + w.gamma5 * ctrl[1] + w.gamma6 * ctrl[2]
             - 2.0 * lamU @ disc.Csk.apply(H1, H1) - 2.0 * lamT @ disc.C1sk.apply(H1, H2))
        total = h1_norm(h1) ** 2 + h1_norm(h2) ** 2 + sum(ctrl)
        qs.append(float(L / total))
        shares.append(float(sum(ctrl) / total))
    return SecondOrderResult(min(qs), qs, shares)


def multiplier_bound_check(state: StateSolution, adjoint: AdjointState, targets: Targets, p: NondimParams,
                           w: CostWeights, beta0: float, C1_ref: float):
    """(|lambda1|_H1^2 + |lambda2|_H1^2, C1_ref / beta0 * M) and the implied constant."""
    if not beta0 > 0:
        raise ValueError("beta0 must be positive")
    lhs = h1_norm(adjoint.lambda1) ** 2 + h1_norm(adjoint.lambda2) ** 2
    m = state_size_measure(state, targets, p, w)
    rhs = C1_ref / beta0 * m
    implied = lhs * beta0 / m if m > 0 else (0.0 if lhs == 0 else math.inf)
    return lhs, rhs, implied


def state_size_measure(state, targets, p, w):
    du = state.u.to_vector() - targets.u_d.to_vector()
    dt = state.theta.cells - targets.theta_d.cells
    g = state.u.grid
    du_l2 = l2_norm(type(state.u).from_vector(g, du))
    dt_l2 = math.sqrt(g.vol * float(np.sum(dt ** 2)))
    return (w.gamma1 ** 2 / p.Pr * h1_norm(state.u) ** 2 + w.gamma2 ** 2 / p.Pr * du_l2 ** 2
            + w.gamma3 ** 2 * dt_l2 ** 2)


@dataclass
class UniquenessDiagnostics:
    S1: float
    S2: float
    H0: float
    H1: float
    I: float  # noqa: E741


def optimum_uniqueness_diagnostics(p: NondimParams, data_norms1, data_norms2, u0_norm, beta0, M1, M2,
                                   C_ref) -> UniquenessDiagnostics:
    """Size quantities for comparing two optimal controls.

    ``data_norms_i`` are the H^{1/2} norms (g, phi1, phi2) of control i and
    ``M_i`` the state-size measures at the corresponding states.
    """
    if not beta0 > 0:
        raise ValueError("beta0 must be positive")
    S1 = C_ref * (u0_norm + sum(data_norms1))
    S2 = C_ref * (u0_norm + sum(data_norms2))
    H0 = C_ref * (p.Pr + S1 + S2 + p.B + 1.0) * (1.0 + p.Pr * (p.R + p.M)) / p.Pr
    H1 = C_ref * (S1 + S2 + p.B + 1.0 + S2 * H0)
    I = C_ref * max((H0 + 1.0) ** 2, (H0 + 1.0) * (H1 + 1.0)) * beta0 ** -0.5 * (math.sqrt(M1) + math.sqrt(M2))  # noqa: E741
    return UniquenessDiagnostics(S1, S2, H0, H1, I)
