"""Physical and dimensionless parameters of the convection problem."""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass(frozen=True)
class PhysicalParams:
    rho0: float
    mu: float
    K_cond: float
    cp: float
    alpha: float
    gamma_sigma: float
    g_mag: float
    h_exch: float
    d: float
    l1: float
    L1: float
    theta_c: float
    theta_a: float

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("theta_c", "theta_a"):
                continue
            v = getattr(self, f.name)
            if not v > 0:
                raise ValueError(f"{f.name} must be strictly positive, got {v}")
        if self.theta_c < self.theta_a:
            raise ValueError("theta_c < theta_a: the layer must be heated from below")


@dataclass(frozen=True)
class NondimParams:
    Pr: float
    R: float
    b: float
    M: float
    B: float
    l: float = 1.0
    L: float = 1.0
    theta_c_nd: float = 1.0

    def __post_init__(self):
        if not self.Pr > 0:
            raise ValueError("Pr must be positive")
        if not self.B > 0:
            raise ValueError("B must be positive")
        if not (self.l > 0 and self.L > 0):
            raise ValueError("horizontal extents must be positive")
        if self.R < 0 or self.M < 0:
            raise ValueError("R and M must be nonnegative")

    def replace(self, **kw) -> "NondimParams":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return NondimParams(**vals)


@dataclass(frozen=True)
class CostWeights:
    """Weights of the six cost terms.

    The constructor accepts any nonnegative weights so that degenerate
    cases can be evaluated; ``check()`` enforces the admissibility rules
    used before an optimization run.
    """

    gamma1: float = 0.0
    gamma2: float = 0.0
    gamma3: float = 0.0
    gamma4: float = 0.0
    gamma5: float = 0.0
    gamma6: float = 0.0
    mode: str = "ii"

    def __post_init__(self):
        for f in fields(self):
            if f.name == "mode":
                continue
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")
        if self.mode not in ("i", "ii"):
            raise ValueError("mode must be 'i' or 'ii'")

    @property
    def tracking(self):
        return (self.gamma1, self.gamma2, self.gamma3)

    @property
    def regularization(self):
        return (self.gamma4, self.gamma5, self.gamma6)

    def check(self):
        if max(self.tracking) == 0:
            raise ValueError("gamma1, gamma2, gamma3 are all zero")
        if self.mode == "ii" and min(self.regularization) <= 0:
            raise ValueError("mode (ii) requires gamma4, gamma5, gamma6 > 0")
        return self


def nondimensionalize(p: PhysicalParams) -> NondimParams:
    kappa = p.K_cond / (p.rho0 * p.cp)
    nu = p.mu / p.rho0
    if not (kappa > 0 and nu > 0):
        raise ValueError("diffusivities must be positive")
    theta_u = p.theta_c - p.theta_a
    d3 = p.d ** 3
    return NondimParams(
        Pr=nu / kappa,
        R=p.g_mag * p.alpha * theta_u * d3 / (kappa * nu),
        b=-p.g_mag * d3 / (kappa * nu),
        M=p.gamma_sigma * theta_u * p.d / (p.rho0 * nu * kappa),
        B=p.h_exch * p.d / p.K_cond,
        l=p.l1 / p.d,
        L=p.L1 / p.d,
        theta_c_nd=1.0,
    )
