"""The master field U(x, m0) = u(x, 0) and its verifiable structure.

Evaluating the field at a measure is one equilibrium solve; results are
cached by the byte content of the initial density, so repeated queries are
bit-identical, and the most recent solution seeds warm starts.  The flat
derivative of U in the measure is never materialized: the residual checks
only need the directional derivative along the equilibrium drift, which two
extra solves from transported measures provide.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .measure import DiscreteMeasure, GridSpec, pushforward, wasserstein
from .model import ModelSpec
from .solver import (
    MfgSolution,
    SolverDidNotConverge,
    SolverOptions,
    godunov_hamiltonian,
    solve_mfg,
)


class KinkAtProbe(RuntimeError):
    """Raised when a pointwise residual is requested at a semiconcavity kink."""


@dataclass(frozen=True)
class FieldSlice:
    """t = 0 slice of an equilibrium: values and interface gradients."""

    u0: np.ndarray
    du0: np.ndarray  # gradient at interface i+1/2

    @property
    def grad_centered(self) -> np.ndarray:
        return 0.5 * (self.du0 + np.roll(self.du0, 1))

    def second_differences(self, dx: float) -> np.ndarray:
        return (np.roll(self.u0, -1) - 2 * self.u0 + np.roll(self.u0, 1)) / dx**2


@dataclass
class FieldSample:
    measure: DiscreteMeasure
    slice: FieldSlice


class MasterField:
    """Sampled map (x, m0) -> U(x, m0) backed by the equilibrium solver."""

    def __init__(self, model: ModelSpec, opts: SolverOptions, use_warm_start: bool = True):
        self.model = model
        self.grid: GridSpec = model.grid
        self.opts = opts
        self.use_warm_start = use_warm_start
        self.samples: list[FieldSample] = []
        self._cache: dict[bytes, FieldSlice] = {}
        self._last_solution: MfgSolution | None = None
        self.n_solves = 0

    def _key(self, m0: DiscreteMeasure) -> bytes:
        return hashlib.sha256(m0.density.tobytes()).digest()

    def evaluate(self, m0: DiscreteMeasure) -> FieldSlice:
        """U(., m0) and its gradient; raises if the equilibrium is not reached."""
        if m0.grid != self.grid:
            raise ValueError("measure grid does not match the field grid")
        key = self._key(m0)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        warm = self._last_solution if self.use_warm_start else None
        sol = solve_mfg(self.model, m0, self.opts, warm=warm)
        self.n_solves += 1
        if not sol.converged:
            raise SolverDidNotConverge(sol.residual_log)
        sl = FieldSlice(u0=sol.u[0].copy(), du0=sol.interface_gradients(0))
        self._cache[key] = sl
        self._last_solution = sol
        self.samples.append(FieldSample(measure=m0, slice=sl))
        return sl

    def solution(self, m0: DiscreteMeasure) -> MfgSolution:
        """Full equilibrium (uncached beyond the warm start)."""
        warm = self._last_solution if self.use_warm_start else None
        sol = solve_mfg(self.model, m0, self.opts, warm=warm)
        self.n_solves += 1
        if not sol.converged:
            raise SolverDidNotConverge(sol.residual_log)
        self._last_solution = sol
        return sol

    def values(self, m0: DiscreteMeasure) -> np.ndarray:
        return self.evaluate(m0).u0

    def with_constant(self, c_of_m) -> "ConstantShiftedField":
        return ConstantShiftedField(self, c_of_m)


class ConstantShiftedField:
    """View U + c(m) of a base field; shares the base cache and solver."""

    def __init__(self, base: MasterField, c_of_m):
        self.base = base
        self.c_of_m = c_of_m

    @property
    def model(self) -> ModelSpec:
        return self.base.model

    @property
    def grid(self) -> GridSpec:
        return self.base.grid

    @property
    def opts(self) -> SolverOptions:
        return self.base.opts

    @property
    def samples(self):
        return self.base.samples

    def evaluate(self, m0: DiscreteMeasure) -> FieldSlice:
        sl = self.base.evaluate(m0)
        return FieldSlice(u0=sl.u0 + float(self.c_of_m(m0)), du0=sl.du0)

    def values(self, m0: DiscreteMeasure) -> np.ndarray:
        return self.evaluate(m0).u0


# ---------------------------------------------------------------------------
# Regularity estimates
# ---------------------------------------------------------------------------


@dataclass
class SpaceRegularityReport:
    lipschitz: float
    semiconcavity: float
    per_sample_lipschitz: np.ndarray
    per_sample_semiconcavity: np.ndarray
    uniform: bool


def estimate_space_regularity(
    field: MasterField, uniformity_factor: float = 2.0, zero_floor: float = 1e-9
) -> SpaceRegularityReport:
    """Lipschitz and semiconcavity constants of U in x over the stored samples."""
    if len(field.samples) < 5:
        raise ValueError("need at least 5 stored samples")
    dx = field.grid.dx
    lip = np.array([float(np.max(np.abs(s.slice.du0))) for s in field.samples])
    semi = np.array(
        [float(np.max(s.slice.second_differences(dx))) for s in field.samples]
    )

    def is_uniform(values: np.ndarray) -> bool:
        top = values.max()
        return top <= zero_floor or top <= uniformity_factor * max(
            float(np.median(values)), zero_floor
        )

    return SpaceRegularityReport(
        lipschitz=float(lip.max()),
        semiconcavity=float(semi.max()),
        per_sample_lipschitz=lip,
        per_sample_semiconcavity=semi,
        uniform=bool(is_uniform(lip) and is_uniform(semi)),
    )


@dataclass
class ModulusReport:
    d1_values: np.ndarray
    delta_u_values: np.ndarray
    fitted_constant: float
    exponent: float
    log_log_slope: float
    bound_holds: bool


def measure_pair(
    grid: GridSpec, seed: int, displacement_size: float, roughness: float = 0.7
) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    """Base measure and a transported variant at distance ~ displacement_size."""
    from .measure import random_measure

    rng = np.random.default_rng(seed)
    base = random_measure(grid, seed=seed, roughness=roughness)
    phase = rng.uniform(0.0, 1.0)
    disp = displacement_size * np.sin(2 * np.pi * (grid.centers + phase))
    return base, pushforward(base, disp)


def estimate_measure_modulus(
    field: MasterField,
    pair_count: int = 20,
    seed: int = 0,
    d1_range: tuple[float, float] = (2.0**-8, 2.0**-3),
    exponent: float = 1.0 / 3.0,
) -> ModulusReport:
    """One-sided Hoelder bound ||U(., m) - U(., m')||_oo <= C d1(m, m')^exponent.

    The fitted C is the largest observed ratio, so the bound holds for every
    pair by construction; the log-log slope is reported as evidence that the
    modulus exponent is conservative (slopes above it are expected for
    smooth couplings).
    """
    if pair_count < 10:
        raise ValueError("need pair_count >= 10")
    sizes = np.geomspace(d1_range[0], d1_range[1], pair_count)
    d1s, dus = [], []
    for j, size in enumerate(sizes):
        a, b = measure_pair(field.grid, seed + j, float(size))
        d1 = wasserstein(1, a, b)
        if d1 <= 0:
            continue
        du = float(np.max(np.abs(field.values(a) - field.values(b))))
        d1s.append(d1)
        dus.append(du)
    d1s = np.array(d1s)
    dus = np.array(dus)
    positive = dus > 0
    c_fit = float(np.max(dus / d1s**exponent)) if positive.any() else 0.0
    if positive.sum() >= 2:
        slope = float(np.polyfit(np.log(d1s[positive]), np.log(dus[positive]), 1)[0])
    else:
        slope = np.inf
    return ModulusReport(
        d1_values=d1s,
        delta_u_values=dus,
        fitted_constant=c_fit,
        exponent=exponent,
        log_log_slope=slope,
        bound_holds=bool(np.all(dus <= c_fit * d1s**exponent + 1e-15)),
    )


# ---------------------------------------------------------------------------
# Master-equation residuals via transport directional derivatives
# ---------------------------------------------------------------------------


def kink_mask(u0: np.ndarray, dx: float, factor: float = 10.0) -> np.ndarray:
    """True where |second difference| exceeds `factor` times its grid median."""
    d2 = np.abs((np.roll(u0, -1) - 2 * u0 + np.roll(u0, 1)) / dx**2)
    return d2 > factor * max(float(np.median(d2)), 1e-12)


def smooth_probe_indices(
    field: MasterField, m0: DiscreteMeasure, count: int = 10, factor: float = 10.0
) -> np.ndarray:
    """Evenly spread cell indices where the value slice passes the kink test."""
    sl = field.evaluate(m0)
    ok = np.flatnonzero(~kink_mask(sl.u0, field.grid.dx, factor))
    if len(ok) == 0:
        raise KinkAtProbe("no smooth probe available on this slice")
    pick = np.unique(np.linspace(0, len(ok) - 1, count).astype(int))
    return ok[pick]


def _equilibrium_drift(field: MasterField, sl: FieldSlice) -> np.ndarray:
    """b(y) = D_pH(D_xU(y, m), y) with centered gradients.

    The residual probes sit at smooth cells, where the centered stencil is
    second order; the one-sided Godunov selection would add an O(dx) bias to
    the directional derivative that does not cancel in the symmetric
    difference.
    """
    return field.model.hamiltonian.d_p(sl.grad_centered, field.grid.centers)


def _directional_slices(field, m0, s):
    """Field slices at (id +- s b)#m0 for the transport directional derivative."""
    sl = field.evaluate(m0)
    drift = _equilibrium_drift(field.base if isinstance(field, ConstantShiftedField) else field, sl)
    plus = field.evaluate(pushforward(m0, s * drift))
    minus = field.evaluate(pushforward(m0, -s * drift))
    return sl, plus, minus


def residual_me1(
    field: MasterField, m0: DiscreteMeasure, probe: int, s: float | None = None
) -> float:
    """Residual of the value-form master equation at a smooth probe cell.

    residual = U + H(D_xU, x) + d/ds U(x, (id + s b)#m0)|_0 - F(x, m0), with
    the measure derivative realized by a symmetric transport difference and
    s tied to sqrt(solver tolerance).
    """
    grid = field.grid
    if s is None:
        s = float(np.sqrt(field.opts.tol_fp))
    sl, plus, minus = _directional_slices(field, m0, s)
    if kink_mask(sl.u0, grid.dx)[probe]:
        raise KinkAtProbe(f"probe cell {probe} sits on a semiconcavity kink")
    x = grid.centers[probe]
    w = sl.grad_centered[probe]
    h_val = float(field.model.hamiltonian.value(w, x))
    transport = (plus.u0[probe] - minus.u0[probe]) / (2.0 * s)
    f_val = float(field.model.coupling.eval(np.array([x]), m0)[0])
    return float(sl.u0[probe] + h_val + transport - f_val)


def residual_me3(
    field: MasterField, m0: DiscreteMeasure, probe: int, s: float | None = None
) -> float:
    """Residual of the gradient-form master equation at a smooth probe cell.

    Checks W + D_pH(W, x) W_x + D_xH(W, x) + d/ds W(x, (id + s b)#m0)|_0
    = F_x(x, m0) with W = D_xU, independently of the value form.
    """
    grid = field.grid
    if s is None:
        s = float(np.sqrt(field.opts.tol_fp))
    sl, plus, minus = _directional_slices(field, m0, s)
    if kink_mask(sl.u0, grid.dx)[probe]:
        raise KinkAtProbe(f"probe cell {probe} sits on a semiconcavity kink")
    x = grid.centers[probe]
    w = sl.grad_centered[probe]
    w_x = float(sl.second_differences(grid.dx)[probe])
    ham = field.model.hamiltonian
    transport = (plus.grad_centered[probe] - minus.grad_centered[probe]) / (2.0 * s)
    fx_val = float(field.model.coupling.d_x(np.array([x]), m0)[0])
    return float(
        w + float(ham.d_p(w, x)) * w_x + float(ham.d_x(w, x)) + transport - fx_val
    )


# ---------------------------------------------------------------------------
# One-sided Lipschitz (semiconcavity) structure of W = D_xU
# ---------------------------------------------------------------------------


def one_sided_lipschitz_constant(w: np.ndarray, grid: GridSpec):
    """Smallest C with (W(x)-W(y)) (x-y) <= C |x-y|^2 on all grid pairs.

    Distances are geodesic on the circle.  Returns (C, witness_pair).
    """
    x = grid.centers
    dxs = x[:, None] - x[None, :]
    dxs = dxs - np.round(dxs)  # wrap to [-1/2, 1/2)
    dw = w[:, None] - w[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(np.abs(dxs) > 0, dw * dxs / dxs**2, -np.inf)
    i, j = np.unravel_index(np.argmax(ratio), ratio.shape)
    return float(ratio[i, j]), (int(i), int(j))


@dataclass
class GradientStructureReport:
    one_sided_constants: np.ndarray
    worst_constant: float
    witness: tuple
    uniform: bool
    irrotational_note: str = "vacuous in one dimension"


def check_gradient_structure(
    field: MasterField, uniformity_factor: float = 2.0
) -> GradientStructureReport:
    """One-sided Lipschitz bound on W = D_xU over the stored samples."""
    if not field.samples:
        raise ValueError("field has no stored samples")
    consts = []
    witness = None
    for sample in field.samples:
        c, pair = one_sided_lipschitz_constant(sample.slice.grad_centered, field.grid)
        consts.append(c)
        if witness is None or c >= max(consts):
            witness = pair
    consts = np.array(consts)
    top = float(consts.max())
    uniform = top <= uniformity_factor * max(float(np.median(consts)), 1e-9)
    return GradientStructureReport(
        one_sided_constants=consts,
        worst_constant=top,
        witness=witness,
        uniform=bool(uniform),
    )
