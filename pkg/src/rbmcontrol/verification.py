"""Discrete identity suite run by ``rbmcontrol verify``.

Exact identities are checked to a round-off tolerance; the surface-trace
identity holds up to O(h^2), so its check is the residual ratio under one
refinement.  The ``corrupt`` hook swaps in a deliberately wrong stencil
so that failure reporting can be exercised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forms import FormWorkspace, trace_identity_residual
from .grid import (WALL_BLOCKS, BoxGrid, ScalarField, VelocityField, curl, divergence, gradient,
                   interior_edges)

CHECKS = ("advection_skew", "scalar_advection_skew", "trace_identity", "summation_by_parts", "curl_grad")


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.value) and self.value <= self.tol)

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tol:.1e})"


def random_velocity(grid: BoxGrid, rng) -> VelocityField:
    comps = [rng.standard_normal(grid.face_shape(c)) for c in range(3)]
    walls = {wc: rng.standard_normal(grid.wall_node_shape(*wc)) for wc in WALL_BLOCKS}
    return VelocityField(grid, *comps, walls=walls)


def random_scalar(grid: BoxGrid, rng) -> ScalarField:
    s = (grid.nx, grid.ny)
    return ScalarField(grid, rng.standard_normal(grid.n), rng.standard_normal(s), rng.standard_normal(s))


def potential_velocity(grid: BoxGrid, f, k) -> VelocityField:
    """v = curl(0, A, 0) with A = f(x, y) k(z) sampled on the y-parallel edges.

    That is v = (-f k', 0, d_x f k).  The curl is taken discretely, so
    div v = 0 exactly.  f must vanish with its gradient on the lateral
    walls and k(0) = k'(0) = k(1) = 0; v then lies in the discrete X_0 with
    zero wall-node values and a nonzero tangential trace on the top.
    """
    xn = np.arange(grid.nx + 1) * grid.hx
    yc = (np.arange(grid.ny) + 0.5) * grid.hy
    zn = np.arange(grid.nz + 1) * grid.hz
    X, Y = np.meshgrid(xn, yc, indexing="ij")
    A = f(X, Y)[:, :, None] * k(zn)
    v1 = -np.diff(A, axis=2) / grid.hz
    v3 = np.diff(A, axis=0) / grid.hx
    walls = {wc: np.zeros(grid.wall_node_shape(*wc)) for wc in WALL_BLOCKS}
    return VelocityField(grid, v1, np.zeros(grid.face_shape(1)), v3, walls=walls)


def manufactured_trace_pair(grid: BoxGrid):
    """Smooth (s, v) pair for the surface-trace identity with both sides nonzero."""
    l, L = grid.l, grid.L

    def f(x, y):
        return 16.0 * (x * (l - x) * y * (L - y)) ** 2 / (l * L) ** 4

    v = potential_velocity(grid, f, lambda z: z ** 2 * (1 - z))
    s = ScalarField.from_function(grid, lambda x, y, z: x ** 2 * z + np.cos(y) * z ** 2)
    return s, v


def trace_identity_study(sizes=(8, 16, 32)):
    """Residuals and successive ratios of the trace identity on the manufactured pair."""
    res = []
    for n in sizes:
        s, v = manufactured_trace_pair(BoxGrid(n, n, n))
        res.append(trace_identity_residual(s, v))
    ratios = [a / b if b > 0 else np.inf for a, b in zip(res, res[1:])]
    return res, ratios


def _skew_check(grid, trials, seed, scalar, corrupt):
    ws = FormWorkspace.for_grid(grid)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        u = random_velocity(grid, rng).to_vector()
        if scalar:
            T = ws.scalar_advection if corrupt else ws.scalar_advection_skew
            s = random_scalar(grid, rng).to_vector()
        else:
            T = ws.advection if corrupt else ws.advection_skew
            s = random_velocity(grid, rng).to_vector()
        out = T.apply(u, s)
        scale = np.linalg.norm(out) * np.linalg.norm(s)
        worst = max(worst, abs(s @ out) / scale if scale else 0.0)
    return worst


def _trace_gap(grid, corrupt):
    s, v = manufactured_trace_pair(grid)
    ws = FormWorkspace.for_grid(grid)
    x, t = v.to_vector(), s.to_vector()
    # the unextrapolated surface operator is only first-order accurate
    lhs_op = ws.marangoni if corrupt else ws.trace_lhs
    return abs(x @ (lhs_op @ t) - x @ (ws.b1_matrix @ t))


def _trace_check(grid, corrupt):
    """Distance of the residual ratio under one refinement from the second-order value 4."""
    fine = BoxGrid(2 * grid.nx, 2 * grid.ny, 2 * grid.nz, grid.l, grid.L)
    ratio = _trace_gap(grid, corrupt) / _trace_gap(fine, corrupt)
    return abs(ratio - 4.0)


def _sbp_check(grid, seed, corrupt):
    """sum vol q div v = -sum_faces vol v . grad q for v with zero normal boundary values."""
    rng = np.random.default_rng(seed)
    v = random_velocity(grid, rng)
    for c in range(3):
        sl = [slice(None)] * 3
        sl[c] = [0, -1]
        v.u[c][tuple(sl)] = 0.0
    q = rng.standard_normal(grid.n)
    gq = gradient(q, grid)
    if corrupt:
        gq.u[0][1] *= 1.01
    lhs = grid.vol * np.sum(q * divergence(v))
    rhs = -grid.vol * sum(np.sum(v.u[c] * gq.u[c]) for c in range(3))
    return abs(lhs - rhs) / (abs(lhs) + abs(rhs))


def _curl_grad_check(grid, seed, corrupt):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(grid.n)
    gq = gradient(q, grid)
    if corrupt:
        gq.u[0][grid.nx // 2, grid.ny // 2, grid.nz // 2] += 1.0
    w = curl(gq)
    worst = max(float(np.abs(interior_edges(wa, a)).max()) for a, wa in enumerate(w))
    return worst / max(gq.max_abs(), 1e-300)


def run_identity_suite(grid: BoxGrid, trials=100, seed=0, corrupt: str | None = None, tol=1e-12):
    """Run every identity check on ``grid``; ``corrupt`` names a check to sabotage."""
    if corrupt is not None and corrupt not in CHECKS:
        raise ValueError(f"unknown check {corrupt!r}; choose from {', '.join(CHECKS)}")
    values = {
        "advection_skew": _skew_check(grid, trials, seed, False, corrupt == "advection_skew"),
        "scalar_advection_skew": _skew_check(grid, trials, seed, True, corrupt == "scalar_advection_skew"),
        "trace_identity": _trace_check(grid, corrupt == "trace_identity"),
        "summation_by_parts": _sbp_check(grid, seed, corrupt == "summation_by_parts"),
        "curl_grad": _curl_grad_check(grid, seed, corrupt == "curl_grad"),
    }
    return [CheckResult(name, values[name], 1.0 if name == "trace_identity" else tol) for name in CHECKS]
