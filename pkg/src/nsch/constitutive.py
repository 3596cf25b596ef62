"""Constitutive laws of the two-phase power-law model and sampling validators.

Everything here is a pure function of its inputs.  Scalar laws accept numpy
arrays and broadcast; tensor laws take symmetric 2x2 matrices with the two
matrix indices in the trailing axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

KAPPA = 1e-8  # regularization of |M|^(p-2) for p < 2

# max_t t * (1 - smoothstep(t)); sets how far a blended law overshoots its plateau
BLEND_OVERSHOOT = 0.2730320979


def smoothstep(t):
    """Quintic smoothstep 6t^5 - 15t^4 + 10t^3, clipped to [0, 1]."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def smoothstep_d1(t):
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, 30.0 * t * t * (1.0 - t) ** 2, 0.0)


def smoothstep_d2(t):
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t), 0.0)


def _blend(s, lo, hi, width, slope):
    """C^2 extension of the affine map lo + slope*(s+1) beyond [-1, 1].

    Inside [-1, 1] the map is exact; over a zone of ``width`` it is blended by a
    quintic smoothstep into the constants ``lo`` (below) and ``hi`` (above).
    Returns value, first and second derivative.
    """
    s0 = np.asarray(s, dtype=float)
    s = np.atleast_1d(s0)
    lin = lo + slope * (s + 1.0)
    val = lin.copy()
    d1 = np.full_like(s, slope)
    d2 = np.zeros_like(s)

    up = s > 1.0
    if np.any(up):
        t = (s[up] - 1.0) / width
        g, g1, g2 = smoothstep(t), smoothstep_d1(t) / width, smoothstep_d2(t) / width**2
        diff = lin[up] - hi
        val[up] = hi + (1.0 - g) * diff
        d1[up] = (1.0 - g) * slope - g1 * diff
        d2[up] = -g2 * diff - 2.0 * g1 * slope

    down = s < -1.0
    if np.any(down):
        t = (-1.0 - s[down]) / width
        g, g1, g2 = smoothstep(t), -smoothstep_d1(t) / width, smoothstep_d2(t) / width**2
        diff = lin[down] - lo
        val[down] = lo + (1.0 - g) * diff
        d1[down] = (1.0 - g) * slope - g1 * diff
        d2[down] = -g2 * diff - 2.0 * g1 * slope
    if s0.ndim == 0:
        return val[0], d1[0], d2[0]
    return val, d1, d2


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class FluidParams:
    p: float = 2.0
    nu1: float = 1.0
    nu2: float = 1.0
    rho1_tilde: float = 1.0
    rho2_tilde: float = 1.0
    eps0: float = 1.0
    m: float = 1.0
    alpha: float = 1.0
    blend_width: float = 0.1
    omega: float | None = None
    C1: float | None = None

    def __post_init__(self):
        if not self.p > 1.0:
            raise ValueError(f"power-law exponent p must satisfy p > 1, got p={self.p}")
        for name in ("nu1", "nu2", "rho1_tilde", "rho2_tilde", "eps0", "m", "blend_width"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.nu_min <= 0.0:
            raise ValueError("blend_width too large: blended viscosity is not positive")
        if self.density_law().lower_bound <= 0.0:
            raise ValueError("blend_width too large: blended density is not positive")
        # (omega, C1) default to the constants the regularized power law provably meets
        if self.omega is None:
            object.__setattr__(self, "omega", 2.0 * self.nu_min * 2.0 ** (min(self.p - 2.0, 0.0) / 2.0))
        if self.C1 is None:
            object.__setattr__(self, "C1", self.omega * KAPPA**self.p)

    @property
    def nu_min(self):
        spread = abs(self.nu2 - self.nu1) / 2.0
        return min(self.nu1, self.nu2) - spread * BLEND_OVERSHOOT * self.blend_width

    @property
    def nu_max(self):
        spread = abs(self.nu2 - self.nu1) / 2.0
        return max(self.nu1, self.nu2) + spread * BLEND_OVERSHOOT * self.blend_width

    def density_law(self) -> DensityLaw:
        return DensityLaw(self.rho1_tilde, self.rho2_tilde, self.blend_width)

    def potential(self) -> PotentialSpec:
        return PotentialSpec(alpha=self.alpha)

    @property
    def matched_density(self) -> bool:
        return self.rho1_tilde == self.rho2_tilde


# ---------------------------------------------------------------------------
# free energy


@dataclass(frozen=True)
class PotentialSpec:
    """Homogeneous free energy f with the splitting f = f0 - alpha s^2 / 2.

    ``kind="double_well"`` is (s^2 - 1)^2 / 4.  ``kind="user_table"`` takes
    ascending polynomial coefficients of f in ``coefficients``.
    """

    kind: str = "double_well"
    alpha: float = 1.0
    coefficients: tuple = ()
    _poly: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "double_well":
            coeffs = (0.25, 0.0, -0.5, 0.0, 0.25)
        elif self.kind == "user_table":
            if len(self.coefficients) == 0:
                raise ValueError("user_table potential needs polynomial coefficients")
            coeffs = tuple(float(c) for c in self.coefficients)
        else:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        f = Polynomial(coeffs)
        object.__setattr__(self, "_poly", (f, f.deriv(1), f.deriv(2), f.deriv(3)))

    def f(self, s):
        return self._poly[0](s)

    def df(self, s):
        return self._poly[1](s)

    def d2f(self, s):
        return self._poly[2](s)

    def d3f(self, s):
        return self._poly[3](s)

    def df0(self, s):
        """Derivative of the convex part f0 = f + alpha s^2/2."""
        return self._poly[1](s) + self.alpha * np.asarray(s)

    def d2f0(self, s):
        return self._poly[2](s) + self.alpha


def free_energy(s, spec: PotentialSpec = PotentialSpec()):
    return spec.f(s)


def free_energy_derivs(s, spec: PotentialSpec = PotentialSpec()):
    """Return (f', f'', f''') at ``s``."""
    return spec.df(s), spec.d2f(s), spec.d3f(s)


# ---------------------------------------------------------------------------
# density


@dataclass(frozen=True)
class DensityLaw:
    rho1_tilde: float = 1.0
    rho2_tilde: float = 1.0
    blend_width: float = 0.1

    @property
    def slope(self):
        return (self.rho2_tilde - self.rho1_tilde) / 2.0

    @property
    def lower_bound(self):
        """Sharp lower bound of the blended law (the blend overshoots its plateau)."""
        return min(self.rho1_tilde, self.rho2_tilde) - abs(self.slope) * self.blend_width * BLEND_OVERSHOOT

    def evaluate(self, phi):
        return _blend(phi, self.rho1_tilde, self.rho2_tilde, self.blend_width, self.slope)


def density(phi, law: DensityLaw):
    return law.evaluate(phi)[0]


def density_deriv(phi, law: DensityLaw):
    return law.evaluate(phi)[1]


def density_deriv2(phi, law: DensityLaw):
    return law.evaluate(phi)[2]


# ---------------------------------------------------------------------------
# viscous stress


def clamp(s, width=0.1):
    """C^2 clamp of s to (roughly) [-1, 1]; identity on [-1, 1]."""
    return _blend(s, -1.0, 1.0, width, 1.0)[0]


def viscosity(s, params: FluidParams):
    chi = clamp(s, params.blend_width)
    return 0.5 * params.nu1 * (1.0 - chi) + 0.5 * params.nu2 * (1.0 + chi)


def stress_coefficient(s, mnorm2, params: FluidParams):
    """2 nu(s) |M|^(p-2) given |M|^2, so that S = coefficient * M."""
    nu = viscosity(s, params)
    if params.p == 2.0:
        return 2.0 * nu * np.ones_like(np.asarray(mnorm2, dtype=float))
    mnorm2 = np.asarray(mnorm2, dtype=float)
    if params.p < 2.0:
        return 2.0 * nu * (mnorm2 + KAPPA**2) ** ((params.p - 2.0) / 2.0)
    return 2.0 * nu * mnorm2 ** ((params.p - 2.0) / 2.0)


def stress(s, M, params: FluidParams, atol=1e-12):
    """Power-law viscous stress 2 nu(s) |M|^(p-2) M for symmetric M (..., 2, 2)."""
    M = np.asarray(M, dtype=float)
    if M.shape[-2:] != (2, 2):
        raise ValueError(f"expected trailing shape (2, 2), got {M.shape}")
    asym = np.abs(M[..., 0, 1] - M[..., 1, 0])
    if np.any(asym > atol * (1.0 + np.abs(M).max())):
        raise ValueError("stress() requires a symmetric tensor argument")
    mnorm2 = np.einsum("...ij,...ij->...", M, M)
    coef = stress_coefficient(s, mnorm2, params)
    return coef[..., None, None] * M


# ---------------------------------------------------------------------------
# diffusive mass flux and density source on a grid


def flux_J(phi, mu, params: FluidParams, grid):
    """J = -m rho'(phi) grad(mu) on the velocity faces."""
    grid.check_scalar(phi)
    grid.check_scalar(mu)
    law = params.density_law()
    drho = grid.cell_to_face(density_deriv(phi, law))
    return -params.m * drho * grid.grad(mu)


def source_R(phi, mu, params: FluidParams, grid):
    """R = -m rho''(phi) grad(phi) . grad(mu) at cell centres (zero where |phi| <= 1)."""
    grid.check_scalar(phi)
    grid.check_scalar(mu)
    law = params.density_law()
    d2 = density_deriv2(phi, law)
    out = np.zeros(grid.ncells)
    active = d2.ravel() != 0.0
    if np.any(active):
        prod = grid.face_to_cell_dot(grid.grad(phi), grid.grad(mu))
        out[active] = -params.m * d2.ravel()[active] * prod[active]
    return out.reshape(grid.shape)


# ---------------------------------------------------------------------------
# validators


@dataclass
class ValidationReport:
    name: str
    passed: bool
    values: dict
    failure: dict | None = None

    def as_table(self):
        lines = [f"{self.name}: {'PASS' if self.passed else 'FAIL'}"]
        for k, v in self.values.items():
            lines.append(f"  {k:<28s} {v}")
        if self.failure:
            lines.append(f"  violating sample: {self.failure}")
        return "\n".join(lines)

    def as_keyvalue(self):
        lines = [f"{self.name}.passed = {str(self.passed).lower()}"]
        lines += [f"{self.name}.{k} = {v!r}" for k, v in self.values.items()]
        if self.failure:
            lines += [f"{self.name}.failure.{k} = {v!r}" for k, v in self.failure.items()]
        return "\n".join(lines)


def _check_samples(samples):
    if samples < 1000:
        raise ValueError("validators need at least 1000 samples")


def validate_A1(spec: PotentialSpec, range_=(-10.0, 10.0), samples=10_000) -> ValidationReport:
    _check_samples(samples)
    s = np.linspace(range_[0], range_[1], samples)
    d2 = spec.d2f(s)
    d3 = spec.d3f(s)
    growth = np.abs(d3) / (np.abs(s) + 1.0)
    C = float(growth.max())
    values = {
        "alpha": spec.alpha,
        "min_f2": float(d2.min()),
        "min_f0_2": float((d2 + spec.alpha).min()),
        "C": C,
        "range": tuple(range_),
    }
    bad = np.flatnonzero(d2 < -spec.alpha)
    failure = None
    if bad.size:
        i = bad[0]
        failure = {"s": float(s[i]), "f2": float(d2[i]), "requirement": "f'' >= -alpha"}
    return ValidationReport("A1", failure is None, values, failure)


def _random_sym(rng, n):
    a = rng.standard_normal((n, 2, 2))
    scale = 10.0 ** rng.uniform(-3, 2, size=n)
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    return a * scale[:, None, None]


def validate_A2(params: FluidParams, sample_count=10_000, seed=0, s_range=(-3.0, 3.0)) -> ValidationReport:
    _check_samples(sample_count)
    rng = np.random.default_rng(seed)
    M1 = _random_sym(rng, sample_count)
    M2 = _random_sym(rng, sample_count)
    s1 = rng.uniform(*s_range, size=sample_count)
    s2 = rng.uniform(*s_range, size=sample_count)
    p = params.p

    def fro(A):
        return np.sqrt(np.einsum("...ij,...ij->...", A, A))

    S11 = stress(s1, M1, params)
    S21 = stress(s2, M1, params)
    S12 = stress(s1, M2, params)
    n1 = fro(M1)

    growth = float((fro(S11) / (n1 ** (p - 1.0) + 1.0)).max())
    ds = np.abs(s1 - s2)
    ok = ds > 1e-12
    lip = float((fro(S11 - S21)[ok] / (ds[ok] * (n1[ok] ** (p - 1.0) + 1.0))).max())

    coer = np.einsum("...ij,...ij->...", S11, M1) - (params.omega * n1**p - params.C1)
    dM = M1 - M2
    mono = np.einsum("...ij,...ij->...", S11 - S12, dM)
    mono_tol = 1e-12 * (fro(S11) + fro(S12)) * fro(dM)

    values = {
        "p": p,
        "omega": params.omega,
        "C1": params.C1,
        "growth_C": growth,
        "lipschitz_C": lip,
        "min_coercivity_margin": float(coer.min()),
        "min_monotonicity": float(mono.min()),
        "samples": sample_count,
    }
    failure = None
    if np.any(coer < -1e-12 * (1.0 + params.omega * n1**p)):
        i = int(np.argmin(coer))
        failure = {"check": "coercivity", "s": float(s1[i]), "M": M1[i].tolist(), "margin": float(coer[i])}
    elif np.any(mono < -mono_tol):
        i = int(np.argmin(mono + mono_tol))
        failure = {"check": "monotonicity", "s": float(s1[i]), "M1": M1[i].tolist(), "M2": M2[i].tolist()}
    return ValidationReport("A2", failure is None, values, failure)


def validate_A3(law: DensityLaw, range_=(-5.0, 5.0), samples=10_000) -> ValidationReport:
    _check_samples(samples)
    s = np.linspace(range_[0], range_[1], samples)
    rho, d1, d2 = law.evaluate(s)
    values = {
        "min_rho": float(rho.min()),
        "max_rho": float(rho.max()),
        "max_abs_rho1": float(np.abs(d1).max()),
        "max_abs_rho2": float(np.abs(d2).max()),
        "lower_bound": law.lower_bound,
    }
    failure = None
    if rho.min() <= 0.0:
        i = int(np.argmin(rho))
        failure = {"phi": float(s[i]), "rho": float(rho[i]), "requirement": "rho > 0"}
    elif not np.all(np.isfinite(np.stack([rho, d1, d2]))):
        failure = {"requirement": "rho, rho', rho'' bounded"}
    return ValidationReport("A3", failure is None, values, failure)
