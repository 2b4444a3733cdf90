"""Scenario configuration files (TOML) and their translation into solver objects.

Reference of every section and key, with defaults:

[grid]        nx, ny, nz (12), l, L (1.0)
[params]      Pr (10), R (0.1), b (-1), M (0.1), B (1), theta_c (1)
[physical]    rho0, mu, K_cond, cp, alpha, gamma_sigma, g_mag, h_exch, d, l1, L1,
              theta_c, theta_a; replaces [params] (and sets l, L) when present
[weights]     gamma1..gamma6 (1, 1, 1, 0.01, 0.01, 0.01), mode ("ii")
[controls]    initial ("basic" | "zero"), perturbation (0.0), gamma01 (lateral walls),
              g_lo, g_hi, g_radius, phi1_lo, phi1_hi, phi1_radius, phi2_lo, phi2_hi, phi2_radius
[targets]     kind ("basic_state" | "zero" | "file"), file (state CSV, for kind = "file")
[solver]      tol, max_iters, damping, residual_tol, linear_tol, newton
[optimizer]   tol (1e-6), max_iters (200), seed (0), step_rule ("short"), c1 (1e-4), backtracks (30)
[diagnostics] uniqueness_C_ref, beta0_C_ref, C1_ref (1.0), second_order_samples (32),
              vi_samples (100)
[sweep]       axis ("R"), values ([0, 1, 2])
[output]      dir ("out")

Relative file paths are resolved against the config file's directory.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .controls import UNCONSTRAINED, ConstraintSet, ControlTriple
from .grid import LATERAL, WALLS, BoxGrid, control_partition, region
from .params import CostWeights, NondimParams, PhysicalParams, nondimensionalize
from .state_solver import SolverOptions, basic_state, basic_state_controls


class ConfigError(ValueError):
    """Malformed or inconsistent scenario configuration (exit code 1)."""


SECTIONS = {
    "grid": {"nx", "ny", "nz", "l", "L"},
    "params": {"Pr", "R", "b", "M", "B", "theta_c"},
    "physical": {"rho0", "mu", "K_cond", "cp", "alpha", "gamma_sigma", "g_mag", "h_exch", "d", "l1", "L1",
                 "theta_c", "theta_a"},
    "weights": {"gamma1", "gamma2", "gamma3", "gamma4", "gamma5", "gamma6", "mode"},
    "controls": {"initial", "perturbation", "gamma01"} | {f"{c}_{k}" for c in ("g", "phi1", "phi2")
                                                         for k in ("lo", "hi", "radius")},
    "targets": {"kind", "file"},
    "solver": {"tol", "max_iters", "damping", "residual_tol", "linear_tol", "newton"},
    "optimizer": {"tol", "max_iters", "seed", "step_rule", "c1", "backtracks"},
    "diagnostics": {"uniqueness_C_ref", "beta0_C_ref", "C1_ref", "second_order_samples", "vi_samples"},
    "sweep": {"axis", "values"},
    "output": {"dir"},
}
SWEEP_AXES = ("Pr", "R", "M", "B")


@dataclass
class ScenarioConfig:
    grid: BoxGrid
    params: NondimParams
    weights: CostWeights
    initial: str = "basic"
    perturbation: float = 0.0
    gamma01_walls: tuple = LATERAL
    sets: tuple = (UNCONSTRAINED, UNCONSTRAINED, UNCONSTRAINED)
    targets_kind: str = "basic_state"
    targets_file: Path | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    opt_tol: float = 1e-6
    opt_max_iters: int = 200
    seed: int = 0
    step_rule: str = "short"
    armijo_c1: float = 1e-4
    max_backtracks: int = 30
    uniqueness_C_ref: float = 1.0
    beta0_C_ref: float = 1.0
    C1_ref: float = 1.0
    second_order_samples: int = 32
    vi_samples: int = 100
    sweep_axis: str = "R"
    sweep_values: tuple = (0.0, 1.0, 2.0)
    out_dir: Path = Path("out")
    text: str = ""

    # -- derived objects ---------------------------------------------------
    def gamma01(self):
        g0 = region(self.grid, "gamma0")
        mask = np.isin(np.array(g0.wall_names()), self.gamma01_walls)
        return control_partition(self.grid, mask)[0]

    def initial_controls(self, seed=None) -> ControlTriple:
        """Initial controls, with a seeded feasible perturbation when ``perturbation`` > 0."""
        from .optimizer import ControlSpace

        c = basic_state_controls(self.params, self.grid, self.gamma01(), self.sets)
        if self.initial == "zero":
            c = c.with_values(phi2=np.zeros_like(c.phi2.values))
        if self.perturbation > 0:
            rng = np.random.default_rng(self.seed if seed is None else seed)
            space = ControlSpace(c)
            a = self.perturbation
            dg = space.gcon.apply(a * rng.standard_normal(c.g.values.shape))
            d1 = a * rng.standard_normal(c.phi1.values.shape)
            d2 = a * rng.standard_normal(c.phi2.values.shape)
            c = c.with_values(c.g.values + dg, c.phi1.values + d1, c.phi2.values + d2)
        return c

    def targets(self):
        from .adjoint_solver import Targets
        from .io import read_state_csv

        if self.targets_kind == "zero":
            return Targets.zero(self.grid)
        if self.targets_kind == "file":
            return Targets(*read_state_csv(self.targets_file, self.grid))
        return Targets.from_state(basic_state(self.params, self.grid))

    def optimizer_options(self):
        from .optimizer import OptimizerOptions

        return OptimizerOptions(tol=self.opt_tol, max_iters=self.opt_max_iters, armijo_c1=self.armijo_c1,
                                max_backtracks=self.max_backtracks, seed=self.seed, step_rule=self.step_rule)


def _num(sec, key, default, name, kind=float, positive=False, nonneg=False):
    v = sec.get(key, default)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"[{name}] {key} must be an integer, got {v!r}")
    elif isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"[{name}] {key} must be a number, got {v!r}")
    v = kind(v)
    if positive and not v > 0:
        raise ConfigError(f"[{name}] {key} must be positive, got {v}")
    if nonneg and v < 0:
        raise ConfigError(f"[{name}] {key} must be nonnegative, got {v}")
    return v


def _opt_num(sec, key, name):
    return None if key not in sec else _num(sec, key, None, name)


def _sets(sec):
    out = []
    for c in ("g", "phi1", "phi2"):
        try:
            out.append(ConstraintSet(_opt_num(sec, f"{c}_lo", "controls"), _opt_num(sec, f"{c}_hi", "controls"),
                                     _opt_num(sec, f"{c}_radius", "controls")))
        except ValueError as exc:
            raise ConfigError(f"[controls] {c}: {exc}") from None
    return tuple(out)


def parse_config(text: str, base_dir: Path | str = ".") -> ScenarioConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from None
    base_dir = Path(base_dir)
    for name, sec in raw.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        extra = set(sec) - SECTIONS[name]
        if extra:
            raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(extra))}")
    sec = {name: raw.get(name, {}) for name in SECTIONS}

    g = sec["grid"]
    l, L = _num(g, "l", 1.0, "grid", positive=True), _num(g, "L", 1.0, "grid", positive=True)
    try:
        if raw.get("physical"):
            if raw.get("params"):
                raise ConfigError("give either [params] or [physical], not both")
            ph = sec["physical"]
            missing = SECTIONS["physical"] - set(ph)
            if missing:
                raise ConfigError(f"[physical] missing keys: {', '.join(sorted(missing))}")
            params = nondimensionalize(PhysicalParams(**{k: _num(ph, k, None, "physical") for k in ph}))
            l, L = params.l, params.L
        else:
            pr = sec["params"]
            params = NondimParams(Pr=_num(pr, "Pr", 10.0, "params"), R=_num(pr, "R", 0.1, "params"),
                                  b=_num(pr, "b", -1.0, "params"), M=_num(pr, "M", 0.1, "params"),
                                  B=_num(pr, "B", 1.0, "params"), l=l, L=L,
                                  theta_c_nd=_num(pr, "theta_c", 1.0, "params"))
        grid = BoxGrid(_num(g, "nx", 12, "grid", int), _num(g, "ny", 12, "grid", int),
                       _num(g, "nz", 12, "grid", int), l, L)
        w = sec["weights"]
        defaults = (1.0, 1.0, 1.0, 1e-2, 1e-2, 1e-2)
        weights = CostWeights(*(_num(w, f"gamma{k + 1}", defaults[k], "weights") for k in range(6)),
                              mode=str(w.get("mode", "ii")))
        weights.check()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    c = sec["controls"]
    initial = c.get("initial", "basic")
    if initial not in ("basic", "zero"):
        raise ConfigError(f"[controls] initial must be 'basic' or 'zero', got {initial!r}")
    walls = tuple(c.get("gamma01", LATERAL))
    bad = [x for x in walls if x not in WALLS]
    if bad or not walls:
        raise ConfigError(f"[controls] gamma01 must be a nonempty subset of {list(WALLS)}, got {list(walls)}")
    sets = _sets(c)
    if weights.mode == "i" and not all(s.bounded for s in sets):
        raise ConfigError("mode 'i' needs bounded constraint sets for g, phi1 and phi2")

    t = sec["targets"]
    kind = t.get("kind", "basic_state")
    if kind not in ("basic_state", "zero", "file"):
        raise ConfigError(f"[targets] kind must be basic_state, zero or file, got {kind!r}")
    tfile = None
    if kind == "file":
        if "file" not in t:
            raise ConfigError("[targets] kind = 'file' needs a file key")
        tfile = (base_dir / t["file"]).resolve()
        if not tfile.is_file():
            raise ConfigError(f"[targets] file not found: {tfile}")

    s = sec["solver"]
    d = SolverOptions()
    damping = _num(s, "damping", d.damping, "solver", positive=True)
    if damping > 1:
        raise ConfigError("[solver] damping must be in (0, 1]")
    solver = SolverOptions(tol=_num(s, "tol", d.tol, "solver", positive=True),
                           max_iters=_num(s, "max_iters", d.max_iters, "solver", int, positive=True),
                           damping=damping,
                           residual_tol=_num(s, "residual_tol", d.residual_tol, "solver", positive=True),
                           linear_tol=_num(s, "linear_tol", d.linear_tol, "solver", positive=True),
                           newton=bool(s.get("newton", d.newton)))

    o = sec["optimizer"]
    step_rule = o.get("step_rule", "short")
    if step_rule not in ("short", "long", "alternate"):
        raise ConfigError(f"[optimizer] step_rule must be short, long or alternate, got {step_rule!r}")
    seed = _num(o, "seed", 0, "optimizer", int, nonneg=True)

    dg = sec["diagnostics"]
    sw = sec["sweep"]
    axis = sw.get("axis", "R")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"[sweep] axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = sw.get("values", [0.0, 1.0, 2.0])
    if not isinstance(values, list):
        raise ConfigError("[sweep] values must be a list")

    return ScenarioConfig(
        grid=grid, params=params, weights=weights, initial=initial,
        perturbation=_num(c, "perturbation", 0.0, "controls", nonneg=True),
        gamma01_walls=walls, sets=sets, targets_kind=kind, targets_file=tfile, solver=solver,
        opt_tol=_num(o, "tol", 1e-6, "optimizer", positive=True),
        opt_max_iters=_num(o, "max_iters", 200, "optimizer", int, nonneg=True),
        seed=seed, step_rule=step_rule,
        armijo_c1=_num(o, "c1", 1e-4, "optimizer", positive=True),
        max_backtracks=_num(o, "backtracks", 30, "optimizer", int, positive=True),
        uniqueness_C_ref=_num(dg, "uniqueness_C_ref", 1.0, "diagnostics", positive=True),
        beta0_C_ref=_num(dg, "beta0_C_ref", 1.0, "diagnostics", positive=True),
        C1_ref=_num(dg, "C1_ref", 1.0, "diagnostics", positive=True),
        second_order_samples=_num(dg, "second_order_samples", 32, "diagnostics", int, positive=True),
        vi_samples=_num(dg, "vi_samples", 100, "diagnostics", int, positive=True),
        sweep_axis=axis, sweep_values=tuple(_num({"v": v}, "v", None, "sweep") for v in values),
        out_dir=base_dir / sec["output"].get("dir", "out"),
        text=text,
    )


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent)
