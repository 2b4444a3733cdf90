"""Boundary controls, their linear constraints and convex constraint sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .grid import BoundaryField, BoundaryRegion, BoxGrid, control_partition, h12_gram, region


@dataclass(frozen=True)
class ConstraintSet:
    """Box {lo <= v <= hi} and/or ball {|v - center|_{1/2} <= radius}."""

    lo: float | None = None
    hi: float | None = None
    radius: float | None = None
    center: np.ndarray | None = None

    def __post_init__(self):
        if self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise ValueError("infeasible box: lo > hi")
        if self.radius is not None and not self.radius > 0:
            raise ValueError("ball radius must be positive")

    @property
    def has_box(self):
        return self.lo is not None or self.hi is not None

    @property
    def has_ball(self):
        return self.radius is not None

    @property
    def bounded(self):
        return (self.lo is not None and self.hi is not None) or self.has_ball


UNCONSTRAINED = ConstraintSet()


@dataclass
class ControlTriple:
    g: BoundaryField
    phi1: BoundaryField
    phi2: BoundaryField
    sets: tuple = field(default=(UNCONSTRAINED, UNCONSTRAINED, UNCONSTRAINED))

    def __post_init__(self):
        if not self.g.is_vector:
            raise ValueError("g must be a vector boundary field")
        if self.phi1.is_vector or self.phi2.is_vector:
            raise ValueError("phi1 and phi2 must be scalar boundary fields")
        if self.phi1.region.tag != "lateral":
            raise ValueError("phi1 lives on the lateral walls")
        if self.phi2.region.tag != "bottom":
            raise ValueError("phi2 lives on the bottom wall")
        viol = self.g.constraint_violation()
        if viol > 1e-10 * max(1.0, float(np.abs(self.g.values).max())):
            raise ValueError(f"g violates the zero normal-trace/zero-flux constraints ({viol:.3e})")

    @property
    def grid(self) -> BoxGrid:
        return self.g.region.grid

    @property
    def fields(self):
        return (self.g, self.phi1, self.phi2)

    def arrays(self):
        return tuple(f.values for f in self.fields)

    def with_values(self, g=None, phi1=None, phi2=None):
        return ControlTriple(self.g.copy(g) if g is not None else self.g.copy(),
                             self.phi1.copy(phi1) if phi1 is not None else self.phi1.copy(),
                             self.phi2.copy(phi2) if phi2 is not None else self.phi2.copy(),
                             self.sets)

    def scaled(self, s):
        return self.with_values(s * self.g.values, s * self.phi1.values, s * self.phi2.values)


def zero_controls(grid: BoxGrid, gamma01: BoundaryRegion | None = None, theta_c=0.0, sets=None):
    """Controls g = 0, phi1 = 0, phi2 = theta_c (the basic-state data for theta_c != 0)."""
    if gamma01 is None:
        gamma01, _ = control_partition(grid)
    g = BoundaryField.zeros(gamma01, vector=True, normal_zero=True)
    phi1 = BoundaryField.zeros(region(grid, "lateral"))
    bottom = region(grid, "bottom")
    phi2 = BoundaryField(bottom, np.full(bottom.size, float(theta_c)))
    return ControlTriple(g, phi1, phi2, sets or (UNCONSTRAINED,) * 3)


class GConstraint:
    """The admissible subspace for g and its Gram-metric operations.

    Lateral faces carry zero normal component; the normal (z) component on
    bottom faces of Gamma_0^1 has zero net flux.  Both the Riesz map and
    the projection are orthogonal in the Gram inner product, applied per
    velocity component (the Gram matrix acts componentwise).
    """

    def __init__(self, reg: BoundaryRegion, mode="gagliardo"):
        self.region = reg
        self.G = h12_gram(reg, mode)
        n = reg.normal
        lateral = n[:, 2] == 0
        normal_axis = np.argmax(np.abs(n), axis=1)
        self.parts = []
        for c in range(3):
            fixed = lateral & (normal_axis == c)
            free = np.flatnonzero(~fixed)
            fixed = np.flatnonzero(fixed)
            chol = cho_factor(self.G[np.ix_(free, free)])
            flux = None
            if c == 2 and (~lateral).any():
                a = np.where(lateral[free], 0.0, reg.area[free] * n[free, 2])
                Ga = cho_solve(chol, a)
                flux = (a, Ga, float(a @ Ga))
            self.parts.append((free, fixed, chol, flux))

    def _flux_fix(self, vf, flux):
        if flux is None:
            return vf
        a, Ga, den = flux
        return vf - (a @ vf) / den * Ga

    def riesz(self, dual):
        """Representer r in the subspace with <r, v>_G = dual . v for all admissible v."""
        dual = np.asarray(dual, dtype=float)
        r = np.zeros_like(dual)
        for c, (free, _, chol, flux) in enumerate(self.parts):
            r[free, c] = self._flux_fix(cho_solve(chol, dual[free, c]), flux)
        return r

    def apply(self, values):
        """Gram-orthogonal projection onto the admissible subspace."""
        w = np.asarray(values, dtype=float)
        v = np.zeros_like(w)
        for c, (free, fixed, chol, flux) in enumerate(self.parts):
            vf = w[free, c].copy()
            if fixed.size:
                vf += cho_solve(chol, self.G[np.ix_(free, fixed)] @ w[fixed, c])
            v[free, c] = self._flux_fix(vf, flux)
        return v
