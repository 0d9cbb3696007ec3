"""
Physical parameters and potentials for dipwell.
Dimensionless knobs of the dipolar triple-well Gross-Pitaevskii problem and
pointwise evaluation of the trap, contact and dipolar terms shared by the
grid and variational solvers.

Lengths are in units of the well spacing l, energies in hbar^2/(m l^2) and
times in m l^2/hbar.
"""
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
import scipy.constants as const

POLARIZATION_OPTIONS = ["z", "x"]  # z: repulsive side-by-side, x: attractive head-to-tail
AXIS_INDEX = {"x": 0, "y": 1, "z": 2}

# 52Cr: mass 52 u, magnetic moment 6 Bohr magnetons
CHROMIUM52_MASS_U = 52.0
CHROMIUM52_MOMENT_BOHR = 6.0
CHROMIUM52_SCATTERING_LENGTH_M = 5.8e-9  # background value, tunable via Feshbach resonance


@dataclass(frozen=True)
class TrapParams:
    """Gaussian triple-well trap, all wells identical and aligned along x."""
    v0: float = 80.0
    wx: float = 0.5
    wy: float = 4.0
    wz: float = 0.5
    centers: Tuple[float, ...] = (-1.0, 0.0, 1.0)

    def __post_init__(self):
        if not self.v0 > 0:
            raise ValueError(f"trap depth v0 must be positive, got {self.v0}")
        for name in ("wx", "wy", "wz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"trap width {name} must be positive, got {getattr(self, name)}")
        if len(self.centers) == 0:
            raise ValueError("trap needs at least one well center")
        object.__setattr__(self, "centers", tuple(float(c) for c in self.centers))

    @property
    def widths(self) -> np.ndarray:
        return np.array([self.wx, self.wy, self.wz])

    def harmonic_frequencies(self) -> np.ndarray:
        """
        Local harmonic frequencies of a single well.

        Expanding -v0 exp(-2 x^2/w^2) to second order gives omega^2 = 4 v0 / w^2.
        Neighboring wells are ignored.
        """
        return np.sqrt(4.0 * self.v0) / self.widths

    def is_symmetric(self) -> bool:
        c = np.sort(np.asarray(self.centers))
        return bool(np.allclose(c, -c[::-1], atol=0.0, rtol=0.0))


@dataclass(frozen=True)
class PhysicalParams:
    """Scaled interaction strengths Na, Na_dd plus trap and dipole axis."""
    na: float = 0.0
    nadd: float = 0.0
    trap: TrapParams = field(default_factory=TrapParams)
    polarization: str = "z"

    def __post_init__(self):
        if self.nadd < 0:
            raise ValueError(f"dipole strength nadd must be >= 0, got {self.nadd}")
        if self.polarization not in POLARIZATION_OPTIONS:
            raise ValueError(
                f"polarization must be one of {POLARIZATION_OPTIONS}, got {self.polarization!r}"
            )

    @property
    def dipole_axis(self) -> np.ndarray:
        n = np.zeros(3)
        n[AXIS_INDEX[self.polarization]] = 1.0
        return n

    def with_na(self, na: float) -> "PhysicalParams":
        return replace(self, na=float(na))

    def with_nadd(self, nadd: float) -> "PhysicalParams":
        return replace(self, nadd=float(nadd))


@dataclass(frozen=True)
class UnitSystem:
    """Conversion between lab units and the scaled units of the solvers."""
    l_meters: float
    mass_kg: float

    def __post_init__(self):
        if not self.l_meters > 0:
            raise ValueError(f"well spacing must be positive, got {self.l_meters}")
        if not self.mass_kg > 0:
            raise ValueError(f"particle mass must be positive, got {self.mass_kg}")

    @classmethod
    def chromium52(cls, l_meters: float = 1.7e-6) -> "UnitSystem":
        return cls(l_meters=l_meters, mass_kg=CHROMIUM52_MASS_U * const.atomic_mass)

    @property
    def time_seconds(self) -> float:
        """Time unit m l^2 / hbar."""
        return self.mass_kg * self.l_meters ** 2 / const.hbar

    def time_to_seconds(self, t: float) -> float:
        return t * self.time_seconds

    def seconds_to_time(self, seconds: float) -> float:
        return seconds / self.time_seconds


@dataclass(frozen=True)
class RampSchedule:
    """Linear scattering-length ramp Na(t), constant dipole strength."""
    na_start: float
    na_end: float
    t_ramp: float
    nadd: float = 0.0

    def __post_init__(self):
        if not self.t_ramp > 0:
            raise ValueError(f"t_ramp must be positive, got {self.t_ramp}")
        if self.nadd < 0:
            raise ValueError(f"dipole strength nadd must be >= 0, got {self.nadd}")

    @classmethod
    def constant(cls, na: float, nadd: float) -> "RampSchedule":
        return cls(na_start=na, na_end=na, t_ramp=1.0, nadd=nadd)

    @property
    def is_constant(self) -> bool:
        return self.na_start == self.na_end

    def na_at(self, t: float) -> float:
        if t <= 0:
            return self.na_start
        if t >= self.t_ramp:
            return self.na_end
        return self.na_start + (self.na_end - self.na_start) * t / self.t_ramp


def trap_potential_xyz(x, y, z, trap: TrapParams):
    """
    Evaluate the triple-well potential on broadcastable coordinate arrays.

    Args:
        x, y, z: Coordinates (arrays broadcast against each other)
        trap: Trap parameters

    Returns:
        -v0 * sum_i exp(-2(x-q_i)^2/wx^2 - 2y^2/wy^2 - 2z^2/wz^2)
    """
    x = np.asarray(x, dtype=float)
    transverse = np.exp(-2.0 * np.asarray(y, dtype=float) ** 2 / trap.wy ** 2
                        - 2.0 * np.asarray(z, dtype=float) ** 2 / trap.wz ** 2)
    wells = sum(np.exp(-2.0 * (x - q) ** 2 / trap.wx ** 2) for q in trap.centers)
    return -trap.v0 * wells * transverse


def eval_trap_potential(r, trap: TrapParams):
    """Trap potential at position(s) r, last axis holding (x, y, z)."""
    r = np.asarray(r, dtype=float)
    return trap_potential_xyz(r[..., 0], r[..., 1], r[..., 2], trap)


def cutoff_factor(k, radius: float):
    """
    Factor turning the dipolar kernel into that of the interaction cut off at |r| = radius.

    1 + 3 cos(kR)/(kR)^2 - 3 sin(kR)/(kR)^3, evaluated by its series below kR = 0.1.
    """
    x = np.asarray(k, dtype=float) * radius
    small = x < 0.1
    xs = np.where(small, 1.0, x)
    direct = 1.0 + 3.0 * np.cos(xs) / xs ** 2 - 3.0 * np.sin(xs) / xs ** 3
    x2 = x * x
    series = x2 / 10.0 - x2 ** 2 / 280.0 + x2 ** 3 / 15120.0
    return np.where(small, series, direct)


def dipole_kernel_xyz(kx, ky, kz, polarization: str = "z", cutoff: float = 0.0):
    """
    Fourier transform of (1 - 3cos^2 theta)/r^3 on broadcastable k components.

    Returns (4 pi / 3)(3 (n.k)^2 / k^2 - 1), zero at k = 0. A positive cutoff
    drops the interaction beyond that distance, which keeps periodic images
    out of a box at least cutoff plus the cloud diameter wide.
    """
    kx, ky, kz = np.broadcast_arrays(np.asarray(kx, float), np.asarray(ky, float),
                                     np.asarray(kz, float))
    k2 = kx ** 2 + ky ** 2 + kz ** 2
    kn = (kx, ky, kz)[AXIS_INDEX[polarization]]
    safe = np.where(k2 > 0, k2, 1.0)
    kernel = (4.0 * np.pi / 3.0) * (3.0 * kn ** 2 / safe - 1.0)
    if cutoff > 0:
        kernel = kernel * cutoff_factor(np.sqrt(k2), cutoff)
    return np.where(k2 > 0, kernel, 0.0)


def dipole_kernel_k(k, polarization: str = "z", cutoff: float = 0.0):
    """Dipolar kernel for wavevector(s) k, last axis holding (kx, ky, kz)."""
    k = np.asarray(k, dtype=float)
    return dipole_kernel_xyz(k[..., 0], k[..., 1], k[..., 2], polarization, cutoff)


def contact_potential(density, na: float):
    """Contact mean-field potential 4 pi Na |psi|^2."""
    return 4.0 * np.pi * na * np.asarray(density)


def dipole_length(moment_bohr: float, mass_kg: float) -> float:
    """Dipolar length a_dd = mu0 mu^2 m / (12 pi hbar^2) in meters."""
    mu = moment_bohr * const.physical_constants["Bohr magneton"][0]
    return const.mu_0 * mu ** 2 * mass_kg / (12.0 * np.pi * const.hbar ** 2)


def convert_units(n_atoms, a_meters: float, add_meters: float, units: UnitSystem,
                  trap: TrapParams = None, polarization: str = "z"):
    """
    Convert lab quantities into scaled interaction strengths.

    Args:
        n_atoms: Particle number N
        a_meters: s-wave scattering length (may be negative)
        add_meters: dipolar length a_dd
        units: Unit system carrying the well spacing and mass

    Returns:
        Tuple of (PhysicalParams, time unit in seconds)
    """
    if n_atoms < 0:
        raise ValueError(f"particle number must be >= 0, got {n_atoms}")
    if add_meters < 0:
        raise ValueError(f"dipolar length must be >= 0, got {add_meters}")
    params = PhysicalParams(
        na=n_atoms * a_meters / units.l_meters,
        nadd=n_atoms * add_meters / units.l_meters,
        trap=trap if trap is not None else TrapParams(),
        polarization=polarization,
    )
    return params, units.time_seconds
