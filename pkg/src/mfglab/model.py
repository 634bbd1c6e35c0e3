"""Hamiltonians, couplings, and audits of the standing structural assumptions.

All evaluators are pure, vectorized over numpy arrays, and re-entrant, so a
model instance can be shared freely between concurrent solver runs.  The
built-in zoo provides quadratic-in-momentum Hamiltonians with smooth periodic
drift/potential terms, a convolution coupling that is Lasry-Lions monotone by
construction (kernel = autocorrelation of a bump), and a sign-flipped variant
for negative controls.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .measure import DiscreteMeasure, GridSpec, mollify, random_measure

Array = np.ndarray


@dataclass(frozen=True)
class HamiltonianSpec:
    """H(p, x) with analytic derivatives; convex in p.

    `argmin_p(x)` returns the momentum minimizing H(., x); numerical schemes
    use it to evaluate Godunov fluxes exactly for convex Hamiltonians.  When
    H has the quadratic form p^2/2 + b(x) p + c(x), `quad_drift`/`quad_pot`
    expose b and c so the time-stepping kernels can take a compiled path.
    """

    value: Callable[[Array, Array], Array]
    d_p: Callable[[Array, Array], Array]
    d_x: Callable[[Array, Array], Array]
    d_pp: Callable[[Array, Array], Array]
    d_px: Callable[[Array, Array], Array]
    argmin_p: Callable[[Array], Array]
    label: str = "hamiltonian"
    quad_drift: Callable[[Array], Array] | None = None
    quad_pot: Callable[[Array], Array] | None = None

    @property
    def is_quadratic(self) -> bool:
        return self.quad_drift is not None and self.quad_pot is not None

    def shift(self, z: float) -> "HamiltonianSpec":
        """Position-translated variant H(p, x + z); exact delegation."""
        if z == 0.0:
            return self
        base = self
        return HamiltonianSpec(
            value=lambda p, x: base.value(p, x + z),
            d_p=lambda p, x: base.d_p(p, x + z),
            d_x=lambda p, x: base.d_x(p, x + z),
            d_pp=lambda p, x: base.d_pp(p, x + z),
            d_px=lambda p, x: base.d_px(p, x + z),
            argmin_p=lambda x: base.argmin_p(x + z),
            label=f"{base.label}|x+{z:g}",
            quad_drift=None if base.quad_drift is None else (lambda x: base.quad_drift(x + z)),
            quad_pot=None if base.quad_pot is None else (lambda x: base.quad_pot(x + z)),
        )


def quadratic_hamiltonian(
    drift_amp: float = 0.0, potential_amp: float = 0.0, label: str | None = None
) -> HamiltonianSpec:
    """H(p, x) = p^2/2 + b(x) p + c(x) with b, c smooth and 1-periodic."""
    two_pi = 2.0 * np.pi

    def b(x):
        return drift_amp * np.sin(two_pi * x)

    def bp(x):
        return drift_amp * two_pi * np.cos(two_pi * x)

    def c(x):
        return potential_amp * np.cos(two_pi * x)

    def cp(x):
        return -potential_amp * two_pi * np.sin(two_pi * x)

    return HamiltonianSpec(
        value=lambda p, x: 0.5 * p * p + b(x) * p + c(x),
        d_p=lambda p, x: p + b(x),
        d_x=lambda p, x: bp(x) * p + cp(x),
        d_pp=lambda p, x: np.ones_like(np.asarray(p, dtype=float) + np.asarray(x, dtype=float)),
        d_px=lambda p, x: bp(x) + 0.0 * np.asarray(p, dtype=float),
        argmin_p=lambda x: -b(x),
        label=label or f"quadratic(b={drift_amp:g},c={potential_amp:g})",
        quad_drift=b,
        quad_pot=c,
    )


# ---------------------------------------------------------------------------
# Couplings
# ---------------------------------------------------------------------------


def _wrapped_gaussian(r: Array, sigma: float, images: int = 6) -> Array:
    acc = np.zeros_like(np.asarray(r, dtype=float))
    for k in range(-images, images + 1):
        acc += np.exp(-((r + k) ** 2) / (2.0 * sigma**2))
    return acc / (sigma * np.sqrt(2.0 * np.pi))


def _wrapped_gaussian_deriv(r: Array, sigma: float, images: int = 6) -> Array:
    acc = np.zeros_like(np.asarray(r, dtype=float))
    for k in range(-images, images + 1):
        acc += -(r + k) / sigma**2 * np.exp(-((r + k) ** 2) / (2.0 * sigma**2))
    return acc / (sigma * np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class CouplingSpec:
    """Coupling F(x, m) with its spatial gradient and declared constants.

    kind is one of 'convolution', 'local-smooth', 'custom'.  alpha_f is the
    strong-monotonicity constant claimed for the coupling (0 means no claim);
    c0 bounds |F| and |DF| on probability measures.
    """

    kind: str
    alpha_f: float
    c0: float
    grid: GridSpec
    label: str
    _eval: Callable[[Array, Array], Array] = field(repr=False)
    _d_x: Callable[[Array, Array], Array] = field(repr=False)
    _grid_eval: Callable[[Array], Array] = field(repr=False)
    _grid_d_x: Callable[[Array], Array] = field(repr=False)
    _shifted: Callable[[float], "CouplingSpec"] = field(repr=False, default=None)
    _rebuild: Callable[[GridSpec], "CouplingSpec"] = field(repr=False, default=None)
    _path_eval: Callable[[Array], Array] = field(repr=False, default=None)

    def eval(self, x: Array, m: DiscreteMeasure) -> Array:
        return self._eval(np.asarray(x, dtype=float), m.masses)

    def d_x(self, x: Array, m: DiscreteMeasure) -> Array:
        return self._d_x(np.asarray(x, dtype=float), m.masses)

    def values_on_grid(self, masses: Array) -> Array:
        """F at all cell centers (fast path used inside time loops)."""
        return self._grid_eval(masses)

    def path_values(self, masses_path: Array) -> Array:
        """F at all centers for every time slice of a (T+1, n) mass path."""
        if self._path_eval is not None:
            return self._path_eval(masses_path)
        out = np.empty_like(masses_path)
        for k in range(masses_path.shape[0]):
            out[k] = self._grid_eval(masses_path[k])
        return out

    def gradient_on_grid(self, masses: Array) -> Array:
        return self._grid_d_x(masses)

    def shift(self, z: float) -> "CouplingSpec":
        """Variant F(x + z, (id + z)#m); identity for translation-covariant kinds."""
        if z == 0.0 or self._shifted is None:
            return self
        return self._shifted(z)

    def on_grid(self, grid: GridSpec) -> "CouplingSpec":
        if grid == self.grid or self._rebuild is None:
            return self
        return self._rebuild(grid)


def convolution_coupling(
    grid: GridSpec, width: float = 0.08, scale: float = 0.6, sign: float = 1.0
) -> CouplingSpec:
    """F(x, m) = sign * scale * (psi * m)(x) with psi a positive-definite bump.

    psi is the autocorrelation of a wrapped Gaussian, so the kernel matrix on
    the grid is circulant with nonnegative spectrum and the coupling is
    Lasry-Lions monotone (for sign=+1) by construction.  alpha_f comes from
    the kernel's discrete spectrum: the strong monotonicity inequality holds
    with alpha_f = 1 / (dx * max_{k != 0} psi_hat_k).
    """
    sigma = width * np.sqrt(2.0)  # autocorrelation of a width-`width` Gaussian

    def psi(r):
        return sign * scale * _wrapped_gaussian(r, sigma)

    def psi_prime(r):
        return sign * scale * _wrapped_gaussian_deriv(r, sigma)

    centers = grid.centers
    kernel = psi(centers[:, None] - centers[None, :])
    kernel_dx = psi_prime(centers[:, None] - centers[None, :])
    spectrum = np.fft.rfft(kernel[0] if sign > 0 else -kernel[0]).real
    alpha_f = 1.0 / (grid.dx * float(np.max(spectrum[1:])))
    fine = np.linspace(0.0, 1.0, 4096, endpoint=False)
    c0 = float(max(np.max(np.abs(psi(fine))), np.max(np.abs(psi_prime(fine)))))

    def eval_at(x, masses):
        return psi(x[..., None] - centers) @ masses

    def d_x_at(x, masses):
        return psi_prime(x[..., None] - centers) @ masses

    from ._kernels import kernel_path

    spec = CouplingSpec(
        kind="convolution" if sign > 0 else "custom",
        alpha_f=alpha_f,
        c0=c0,
        grid=grid,
        label=f"{'+' if sign > 0 else '-'}conv(w={width:g},s={scale:g})",
        _eval=eval_at,
        _d_x=d_x_at,
        _grid_eval=lambda masses: kernel @ masses,
        _grid_d_x=lambda masses: kernel_dx @ masses,
        _shifted=None,  # convolution against a shifted measure at shifted x cancels
        _rebuild=lambda g: convolution_coupling(g, width=width, scale=scale, sign=sign),
        _path_eval=lambda masses_path: kernel_path(kernel, masses_path),
    )
    return spec


def constant_coupling(grid: GridSpec, value: float) -> CouplingSpec:
    n = grid.n_cells

    def eval_at(x, masses):
        return np.full(np.shape(x), value, dtype=float)

    zero = lambda x, masses: np.zeros(np.shape(x), dtype=float)
    return CouplingSpec(
        kind="custom",
        alpha_f=0.0,
        c0=abs(value),
        grid=grid,
        label=f"const({value:g})",
        _eval=eval_at,
        _d_x=zero,
        _grid_eval=lambda masses: np.full(n, value, dtype=float),
        _grid_d_x=lambda masses: np.zeros(n),
        _shifted=None,
        _rebuild=lambda g: constant_coupling(g, value),
    )


def m_independent_coupling(
    grid: GridSpec, f0: Callable[[Array], Array], df0: Callable[[Array], Array]
) -> CouplingSpec:
    """F(x, m) = f0(x); useful for decoupled reference solutions."""
    centers = grid.centers
    vals = f0(centers)
    grads = df0(centers)
    fine = np.linspace(0.0, 1.0, 4096, endpoint=False)
    c0 = float(max(np.max(np.abs(f0(fine))), np.max(np.abs(df0(fine)))))

    def make(g: GridSpec, shift: float = 0.0) -> CouplingSpec:
        if shift != 0.0:
            return m_independent_coupling(g, lambda x: f0(x + shift), lambda x: df0(x + shift))
        return m_independent_coupling(g, f0, df0)

    return CouplingSpec(
        kind="custom",
        alpha_f=0.0,
        c0=c0,
        grid=grid,
        label="m-independent",
        _eval=lambda x, masses: f0(x),
        _d_x=lambda x, masses: df0(x),
        _grid_eval=lambda masses: vals,
        _grid_d_x=lambda masses: grads,
        _shifted=lambda z: make(grid, z),
        _rebuild=lambda g: make(g),
    )


def local_smooth_coupling(
    grid: GridSpec, gain: float = 0.3, eta: float = 0.1
) -> CouplingSpec:
    """F(x, m) = gain * (mollified density of m at x); smooth in m, local in x."""

    def smooth_density(masses):
        m = DiscreteMeasure(grid, masses / grid.dx)
        return mollify(m, eta).density

    centers = grid.centers

    def eval_at(x, masses):
        dens = smooth_density(masses)
        idx = np.minimum((np.asarray(x) % 1.0 * grid.n_cells).astype(int), grid.n_cells - 1)
        return gain * dens[idx]

    def d_x_at(x, masses):
        dens = smooth_density(masses)
        grad = (np.roll(dens, -1) - np.roll(dens, 1)) / (2 * grid.dx)
        idx = np.minimum((np.asarray(x) % 1.0 * grid.n_cells).astype(int), grid.n_cells - 1)
        return gain * grad[idx]

    return CouplingSpec(
        kind="local-smooth",
        alpha_f=0.0,
        c0=gain / eta,  # crude bound: mollified density <= 1/eta-ish on P(T)
        grid=grid,
        label=f"local(gain={gain:g},eta={eta:g})",
        _eval=eval_at,
        _d_x=d_x_at,
        _grid_eval=lambda masses: gain * smooth_density(masses),
        _grid_d_x=lambda masses: gain
        * (np.roll(smooth_density(masses), -1) - np.roll(smooth_density(masses), 1))
        / (2 * grid.dx),
        _shifted=None,  # mollification commutes with rotations
        _rebuild=lambda g: local_smooth_coupling(g, gain=gain, eta=eta),
    )


@dataclass(frozen=True)
class ModelSpec:
    """Hamiltonian + coupling pair with the constants used by the audits."""

    hamiltonian: HamiltonianSpec
    coupling: CouplingSpec
    lam: float = 1.0
    label: str = "model"

    @property
    def grid(self) -> GridSpec:
        return self.coupling.grid

    def on_grid(self, grid: GridSpec) -> "ModelSpec":
        return replace(self, coupling=self.coupling.on_grid(grid))

    def shift(self, z: float) -> "ModelSpec":
        if z == 0.0:
            return self
        return replace(
            self,
            hamiltonian=self.hamiltonian.shift(z),
            coupling=self.coupling.shift(z),
            label=f"{self.label}|x+{z:g}",
        )

    def sup_h_at_zero(self) -> float:
        fine = np.linspace(0.0, 1.0, 2048, endpoint=False)
        return float(np.max(np.abs(self.hamiltonian.value(np.zeros_like(fine), fine))))


# Built-in zoo -------------------------------------------------------------


def zoo_monotone(
    grid: GridSpec,
    kernel_width: float = 0.18,
    kernel_scale: float = 0.25,
    drift_amp: float = 0.2,
    potential_amp: float = 0.15,
) -> ModelSpec:
    return ModelSpec(
        hamiltonian=quadratic_hamiltonian(drift_amp, potential_amp),
        coupling=convolution_coupling(grid, kernel_width, kernel_scale, sign=1.0),
        label="zoo-monotone",
    )


def zoo_nonmonotone(
    grid: GridSpec,
    kernel_width: float = 0.12,
    kernel_scale: float = 1.0,
    drift_amp: float = 0.2,
    potential_amp: float = 0.15,
) -> ModelSpec:
    """Sign-flipped coupling: deliberately violates Lasry-Lions monotonicity."""
    return ModelSpec(
        hamiltonian=quadratic_hamiltonian(drift_amp, potential_amp),
        coupling=convolution_coupling(grid, kernel_width, kernel_scale, sign=-1.0),
        label="zoo-nonmonotone",
    )


def zoo_uncoupled(grid: GridSpec, constant: float = 0.0) -> ModelSpec:
    return ModelSpec(
        hamiltonian=quadratic_hamiltonian(0.0, 0.0),
        coupling=constant_coupling(grid, constant),
        label=f"zoo-uncoupled({constant:g})",
    )


def zoo_translation_invariant(
    grid: GridSpec, kernel_width: float = 0.18, kernel_scale: float = 0.25
) -> ModelSpec:
    """x-independent Hamiltonian + convolution coupling: common noise acts
    purely through the moving frame."""
    return ModelSpec(
        hamiltonian=quadratic_hamiltonian(0.0, 0.0),
        coupling=convolution_coupling(grid, kernel_width, kernel_scale, sign=1.0),
        label="zoo-translation-invariant",
    )


# ---------------------------------------------------------------------------
# Assumption audits
# ---------------------------------------------------------------------------


@dataclass
class AssumptionReport:
    name: str
    passed: bool
    margin: float
    witness: object
    samples: int
    details: dict

    def __post_init__(self):
        if not self.passed and self.witness is None:
            raise ValueError("failed audit must carry a witness")


def audit_convexity(
    h: HamiltonianSpec, samples: int = 200, radius: float = 5.0, seed: int = 0
) -> AssumptionReport:
    """Secant convexity of p -> H(p, x) plus the uniform C_R bound on |p| <= R."""
    if samples < 1 or radius <= 0:
        raise ValueError("need samples >= 1 and radius > 0")
    rng = np.random.default_rng(seed)
    p = rng.uniform(-radius, radius, samples)
    q = rng.uniform(-radius, radius, samples)
    x = rng.uniform(0.0, 1.0, samples)
    t = rng.uniform(0.0, 1.0, samples)
    secant = t * h.value(p, x) + (1 - t) * h.value(q, x) - h.value(t * p + (1 - t) * q, x)
    if not np.all(np.isfinite(secant)):
        raise ValueError("Hamiltonian returned non-finite values; model is ill-posed")
    i = int(np.argmin(secant))
    margin = float(secant[i])
    pgrid, xgrid = np.meshgrid(
        np.linspace(-radius, radius, 201), np.linspace(0.0, 1.0, 128), indexing="ij"
    )
    bound = np.abs(h.value(pgrid, xgrid)) + np.abs(h.d_p(pgrid, xgrid))
    bound = bound + np.abs(h.d_pp(pgrid, xgrid)) + np.abs(h.d_px(pgrid, xgrid))
    if not np.all(np.isfinite(bound)):
        raise ValueError("Hamiltonian derivative returned non-finite values")
    passed = margin >= -1e-12
    return AssumptionReport(
        name="convexity",
        passed=passed,
        margin=margin,
        witness=None if passed else {"p": float(p[i]), "q": float(q[i]), "x": float(x[i]), "t": float(t[i])},
        samples=samples,
        details={"C_R": float(bound.max()), "radius": radius},
    )


def audit_strong_monotonicity(
    f: CouplingSpec, pairs: int = 40, grid: GridSpec | None = None, seed: int = 0, tol: float = 1e-10
) -> AssumptionReport:
    """Check <F(m1)-F(m2), m1-m2> >= alpha_f * ||F(m1)-F(m2)||_{L^2}^2 on random pairs.

    Also records the minimal raw pairing over distinct pairs (the strict
    monotonicity margin: zero pairing should force m1 = m2).
    """
    if pairs < 1:
        raise ValueError("need pairs >= 1")
    grid = grid or f.grid
    worst = np.inf
    worst_pair = None
    sm2 = np.inf
    for k in range(pairs):
        m1 = random_measure(grid, seed=seed + 2 * k, roughness=0.8)
        m2 = random_measure(grid, seed=seed + 2 * k + 1, roughness=0.8)
        delta_f = f.values_on_grid(m1.masses) - f.values_on_grid(m2.masses)
        if not np.all(np.isfinite(delta_f)):
            raise ValueError("coupling returned non-finite values")
        lhs = float(delta_f @ (m1.masses - m2.masses))
        rhs = f.alpha_f * float(grid.dx * np.sum(delta_f**2))
        if lhs - rhs < worst:
            worst = lhs - rhs
            worst_pair = (m1, m2)
        sm2 = min(sm2, lhs)
    passed = worst >= -tol
    return AssumptionReport(
        name="strong-monotonicity",
        passed=passed,
        margin=float(worst),
        witness=None if passed else worst_pair,
        samples=pairs,
        details={"alpha_f": f.alpha_f, "sm2_margin": float(sm2)},
    )


def audit_semiconcavity_generator(
    h: HamiltonianSpec, lam: float = 1.0, samples: int = 400, radius: float = 5.0, seed: int = 0
) -> AssumptionReport:
    """Lower bound in the semiconcavity-generating inequality.

    Samples lam*(D_pH.p - H) + D_ppH q^2 + 2 D_pxH z q + D_xxH z^2 with
    |z| = 1 and reports C0 = max(0, -min).  D_xx is differenced from the
    analytic D_x (the zoo is C^2, so the distributional reading is moot).
    """
    rng = np.random.default_rng(seed)
    p = rng.uniform(-radius, radius, samples)
    q = rng.uniform(-radius, radius, samples)
    x = rng.uniform(0.0, 1.0, samples)
    z = rng.choice([-1.0, 1.0], samples)
    step = 1e-5
    d_xx = (h.d_x(p, x + step) - h.d_x(p, x - step)) / (2 * step)
    expr = (
        lam * (h.d_p(p, x) * p - h.value(p, x))
        + h.d_pp(p, x) * q**2
        + 2.0 * h.d_px(p, x) * z * q
        + d_xx * z**2
    )
    if not np.all(np.isfinite(expr)):
        raise ValueError("non-finite value in semiconcavity audit")
    low = float(expr.min())
    return AssumptionReport(
        name="semiconcavity-generator",
        passed=True,
        margin=low,
        witness=None,
        samples=samples,
        details={"C0": max(0.0, -low), "lambda": lam},
    )


def audit_model(model: ModelSpec, seed: int = 0) -> list[AssumptionReport]:
    """Run the standing-assumption audits on a model instance."""
    return [
        audit_convexity(model.hamiltonian, seed=seed),
        audit_strong_monotonicity(model.coupling, grid=model.grid, seed=seed),
        audit_semiconcavity_generator(model.hamiltonian, lam=model.lam, seed=seed),
    ]


def derivative_consistency(
    h: HamiltonianSpec, points: int = 1000, step: float = 1e-4, seed: int = 0
) -> dict:
    """Max relative error of analytic first derivatives vs central differences."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(-3.0, 3.0, points)
    x = rng.uniform(0.0, 1.0, points)
    fd_p = (h.value(p + step, x) - h.value(p - step, x)) / (2 * step)
    fd_x = (h.value(p, x + step) - h.value(p, x - step)) / (2 * step)
    scale_p = np.maximum(np.abs(h.d_p(p, x)), 1.0)
    scale_x = np.maximum(np.abs(h.d_x(p, x)), 1.0)
    return {
        "d_p": float(np.max(np.abs(fd_p - h.d_p(p, x)) / scale_p)),
        "d_x": float(np.max(np.abs(fd_x - h.d_x(p, x)) / scale_x)),
    }
