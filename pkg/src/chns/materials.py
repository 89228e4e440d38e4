"""Constitutive functions: Flory-Huggins bulk potential, wall potential,
mobility, shear rate and the phase-blended Carreau-Yasuda viscosity.

All functions accept scalars or numpy arrays and are pure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import NamedTuple

import numpy as np

from .errors import ConfigError

CHI_SEGREGATING = math.log(3.0) / 6.0
BISECTION_EPS = 1e-9


@dataclass(frozen=True)
class FloryHugginsParams:
    """``alpha=None`` selects the largest admissible cutoff, ``alpha = phi_star``."""

    chi: float
    N1: float = 15.0
    N2: float = 15.0
    alpha: float | None = None

    def __post_init__(self):
        if not (self.N1 > 0 and self.N2 > 0):
            raise ConfigError(f"chain lengths must be positive, got N1={self.N1}, N2={self.N2}")
        if not math.isfinite(self.chi):
            raise ConfigError(f"chi must be finite, got {self.chi}")
        if self.alpha is not None:
            lo, _ = fh_minima(self)
            if not (0.0 < self.alpha <= lo + 1e-15):
                raise ConfigError(f"cutoff alpha must lie in (0, {lo}], got {self.alpha}")

    @property
    def chi_crit(self) -> float:
        # f_FH''(1/2) = 2/N1 + 2/N2 - 2 chi
        return 1.0 / self.N1 + 1.0 / self.N2

    @property
    def phi_star(self) -> float:
        return fh_minima(self)[0]

    @property
    def cutoff(self) -> float:
        return self.phi_star if self.alpha is None else float(self.alpha)


@lru_cache(maxsize=64)
def _minima(chi: float, N1: float, N2: float) -> tuple[float, float]:
    if N1 != N2:
        raise ConfigError("minimizer search assumes symmetric chain lengths N1 == N2")
    N = N1
    if chi <= 2.0 / N:
        return 0.5, 0.5
    # With s = 1 - 2 phi, f_FH'(phi) = s * (chi - (2/N) artanh(s)/s); the bracket
    # is monotone in s, positive at s -> 0 and negative near s -> 1.
    def bracket(s):
        return chi - (2.0 / N) * math.atanh(s) / s

    lo, hi = 1e-300, 1.0 - 2.0 * BISECTION_EPS
    if bracket(hi) > 0:
        raise ArithmeticError(f"no interior minimum of f_FH above phi={BISECTION_EPS} for chi={chi}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if bracket(mid) > 0:
            lo = mid
        else:
            hi = mid
    s = 0.5 * (lo + hi)
    phi = 0.5 * (1.0 - s)
    return phi, 1.0 - phi


def fh_minima(params: FloryHugginsParams) -> tuple[float, float]:
    """Smallest and largest minimizer of f_FH on [0, 1]."""
    return _minima(float(params.chi), float(params.N1), float(params.N2))


def flory_huggins(phi, params: FloryHugginsParams):
    """f_FH and its first two derivatives; valid for 0 < phi < 1."""
    phi = np.asarray(phi, dtype=float)
    q = 1.0 - phi
    chi, N1, N2 = params.chi, params.N1, params.N2
    f = phi * np.log(phi) / N1 + q * np.log(q) / N2 + chi * phi * q
    df = (np.log(phi) + 1.0) / N1 - (np.log(q) + 1.0) / N2 + chi * (1.0 - 2.0 * phi)
    d2f = 1.0 / (N1 * phi) + 1.0 / (N2 * q) - 2.0 * chi
    return f, df, d2f


def taylor_extension(phi, anchor: float, params: FloryHugginsParams):
    """Second-order Taylor polynomial of f_FH about ``anchor`` and its derivatives."""
    phi = np.asarray(phi, dtype=float)
    f0, f1, f2 = (float(v) for v in flory_huggins(anchor, params))
    d = phi - anchor
    return f0 + f1 * d + 0.5 * f2 * d * d, f1 + f2 * d, np.full_like(d, f2)


class FValues(NamedTuple):
    f: np.ndarray
    df: np.ndarray
    d2f: np.ndarray
    dvex: np.ndarray
    d2vex: np.ndarray
    dcav: np.ndarray
    d2cav: np.ndarray


def potential_f(phi, params: FloryHugginsParams) -> FValues:
    """Cut-off Flory-Huggins potential, globally C^2, with its convex/concave split.

    The concave part is ``chi * phi * (1 - phi)``; the convex part is the rest.
    """
    phi = np.asarray(phi, dtype=float)
    a = params.cutoff
    b = 1.0 - a
    inner = np.clip(phi, a, b)
    fc, dfc, d2fc = flory_huggins(inner, params)
    fl, dfl, d2fl = taylor_extension(phi, a, params)
    fr, dfr, d2fr = taylor_extension(phi, b, params)
    left, right = phi < a, phi > b
    f = np.where(left, fl, np.where(right, fr, fc))
    df = np.where(left, dfl, np.where(right, dfr, dfc))
    d2f = np.where(left, d2fl, np.where(right, d2fr, d2fc))
    chi = params.chi
    dcav = chi * (1.0 - 2.0 * phi)
    d2cav = np.full_like(phi, -2.0 * chi)
    return FValues(f, df, d2f, df - dcav, d2f - d2cav, dcav, d2cav)


def f_cav(phi, params: FloryHugginsParams):
    phi = np.asarray(phi, dtype=float)
    return params.chi * phi * (1.0 - phi)


def potential_g(phi, params: FloryHugginsParams):
    """Quadratic wall potential centred at the lower well; entirely convex."""
    phi = np.asarray(phi, dtype=float)
    ps = params.phi_star
    fv = potential_f(ps, params)
    c0, c2 = float(fv.f), float(fv.d2f)
    d = phi - ps
    return c0 + 0.5 * c2 * d * d, c2 * d, np.full_like(d, c2)


def mobility(phi):
    phi = np.asarray(phi, dtype=float)
    return phi * phi * (1.0 - phi) ** 2 / 16.0


def shear_rate(grad_u):
    """sqrt(2 D:D) for velocity gradients of shape ``(..., 2, 2)``."""
    g = np.asarray(grad_u, dtype=float)
    D = 0.5 * (g + np.swapaxes(g, -1, -2))
    return np.sqrt(2.0 * np.einsum("...ij,...ij->...", D, D))


@dataclass(frozen=True)
class CarreauYasudaFit:
    label: str
    eta0: float
    eta_inf: float
    a1: float
    a2: float
    a3: float

    def __post_init__(self):
        if not (self.eta0 > self.eta_inf > 0):
            raise ConfigError(f"fit {self.label}: need eta0 > eta_inf > 0")
        if not (self.a1 < 0 and self.a2 > 0 and self.a3 > 0):
            raise ConfigError(f"fit {self.label}: need a1 < 0, a2 > 0, a3 > 0")

    def __call__(self, rate):
        return carreau_yasuda(self, rate)


def carreau_yasuda(fit: CarreauYasudaFit, rate):
    rate = np.asarray(rate, dtype=float)
    if np.any(rate < 0):
        raise ValueError("shear rate must be nonnegative")
    bracket = (1.0 + (fit.a2 * rate) ** fit.a3) ** fit.a1
    return fit.eta_inf + (fit.eta0 - fit.eta_inf) * bracket


BREAKPOINTS = (0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0)
PREFACTOR = 1.0 / 3375.0


@dataclass(frozen=True)
class ViscosityModel:
    fits: tuple
    breakpoints: tuple = BREAKPOINTS
    prefactor: float = PREFACTOR
    convention: str = "conventional"
    source: str = field(default="", compare=False)

    def __post_init__(self):
        if len(self.fits) != len(self.breakpoints):
            raise ConfigError(f"need {len(self.breakpoints)} fits, got {len(self.fits)}")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ConfigError("viscosity breakpoints must be strictly increasing")
        if self.convention != "conventional":
            raise ConfigError(
                "only the 'conventional' Carreau-Yasuda sign, eta_inf + (eta0 - eta_inf)[...]^a1, "
                "keeps the viscosity positive for the shipped fits"
            )

    def __call__(self, rate, phi):
        return viscosity(self, rate, phi)

    @property
    def bounds(self) -> tuple[float, float]:
        lo = min(f.eta_inf for f in self.fits)
        hi = max(f.eta0 for f in self.fits)
        return lo * self.prefactor, hi * self.prefactor


def viscosity(model: ViscosityModel, rate, phi):
    """Piecewise-linear blend in phi of the fitted curves, constant outside [0, 1]."""
    rate = np.asarray(rate, dtype=float)
    phi = np.asarray(phi, dtype=float)
    rate, phi = np.broadcast_arrays(rate, phi)
    bp = np.asarray(model.breakpoints)
    out = np.zeros(rate.shape)
    for i, fit in enumerate(model.fits):
        hat = np.interp(phi, bp, np.eye(len(bp))[i])
        if np.any(hat):
            out = out + hat * carreau_yasuda(fit, rate)
    return model.prefactor * out


def load_viscosity_model(path=None) -> ViscosityModel:
    """Read ``label eta0 eta_inf a1 a2 a3`` records; ``key = value`` header lines."""
    if path is None:
        text = resources.files("chns").joinpath("data/viscosity_params.txt").read_text()
        source = "builtin:viscosity_params.txt"
    else:
        with open(path) as fh:
            text = fh.read()
        source = str(path)
    meta, fits = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ConfigError(f"{source}:{lineno}: expected 6 columns, got {len(parts)}")
        try:
            fits.append(CarreauYasudaFit(parts[0], *map(float, parts[1:])))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc
    kwargs = {}
    if "convention" in meta:
        kwargs["convention"] = meta["convention"]
    if "prefactor" in meta:
        num, _, den = meta["prefactor"].partition("/")
        kwargs["prefactor"] = float(num) / float(den) if den else float(num)
    return ViscosityModel(tuple(fits), source=source, **kwargs)


@dataclass(frozen=True)
class MaterialModel:
    """Everything constitutive that a time step needs, frozen after construction."""

    fh: FloryHugginsParams
    visc: ViscosityModel

    def f(self, phi) -> FValues:
        return potential_f(phi, self.fh)

    def f_value(self, phi):
        return potential_f(phi, self.fh).f

    def g(self, phi):
        return potential_g(phi, self.fh)

    def mobility(self, phi):
        return mobility(phi)

    def viscosity(self, rate, phi):
        return viscosity(self.visc, rate, phi)
