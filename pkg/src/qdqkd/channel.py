"""Single-mode fiber: loss, polarization rotation, PMD dephasing and drift."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .polarization import I2, apply_bilocal, is_unitary, su2_from_axis_angle

# group index of fused silica near 780 nm
GROUP_INDEX = 1.47
C_KM_PER_PS = 2.99792458e-7


@dataclass
class FiberParams:
    length_km: float = 0.0
    attenuation_db_per_km: float = 3.0
    rotation: np.ndarray = field(default_factory=lambda: I2.copy())
    dgd_ps_per_sqrt_km: float = 0.5
    drift_rad_per_s: float = 0.0
    pdl_db: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=complex)
        if self.length_km < 0 or self.attenuation_db_per_km < 0:
            raise ValueError("length and attenuation must be non-negative")
        if self.dgd_ps_per_sqrt_km < 0 or self.pdl_db < 0 or self.drift_rad_per_s < 0:
            raise ValueError("dgd, pdl and drift must be non-negative")
        if self.rotation.shape != (2, 2) or not is_unitary(self.rotation):
            raise ValueError("fiber rotation must be a 2x2 unitary")

    @property
    def transmission(self) -> float:
        return transmission(self.length_km, self.attenuation_db_per_km)

    @property
    def delay_ps(self) -> float:
        return self.length_km * GROUP_INDEX / C_KM_PER_PS

    def dgd_ps(self) -> float:
        return self.dgd_ps_per_sqrt_km * math.sqrt(self.length_km)

    def coherence_factor(self, t2_ps: float) -> float:
        return pmd_coherence_factor(self.length_km, self.dgd_ps_per_sqrt_km, t2_ps)

    def jones(self) -> np.ndarray:
        """Rotation followed by the optional polarization-dependent loss."""
        if self.pdl_db == 0:
            return self.rotation
        return np.diag([1.0, 10 ** (-self.pdl_db / 20.0)]) @ self.rotation


def transmission(length_km: float, attenuation_db_per_km: float) -> float:
    if length_km < 0 or attenuation_db_per_km < 0:
        raise ValueError("length and attenuation must be non-negative")
    return 10.0 ** (-attenuation_db_per_km * length_km / 10.0)


def pmd_coherence_factor(length_km: float, dgd_ps_per_sqrt_km: float, t2_ps: float) -> float:
    """Gaussian overlap of the two polarization-mode wave packets."""
    if t2_ps <= 0:
        raise ValueError("T2 must be positive")
    if length_km < 0 or dgd_ps_per_sqrt_km < 0:
        raise ValueError("length and dgd must be non-negative")
    dtau = dgd_ps_per_sqrt_km * math.sqrt(length_km)
    return math.exp(-0.5 * (dtau / t2_ps) ** 2)


def dephase(rho: np.ndarray, gamma: float) -> np.ndarray:
    """Scale the HH-VV coherences by ``gamma``."""
    out = np.array(rho, dtype=complex)
    out[0, 3] *= gamma
    out[3, 0] *= gamma
    return out


def apply_channel(rho: np.ndarray, fiber_a: FiberParams, fiber_b: FiberParams,
                  t2_ps: float | None = None, extra_b: np.ndarray | None = None) -> np.ndarray:
    """Propagate a pair state through both fibers.

    PMD dephasing acts in the emitter's eigenbasis, before the rotations.
    ``extra_b`` is an optional unitary on Bob's arm after the fiber
    (the polarization controller).
    """
    rho = np.asarray(rho, dtype=complex)
    if t2_ps is not None:
        gamma = fiber_a.coherence_factor(t2_ps) * fiber_b.coherence_factor(t2_ps)
        rho = dephase(rho, gamma)
    ub = fiber_b.jones() if extra_b is None else extra_b @ fiber_b.jones()
    out = apply_bilocal(rho, fiber_a.jones(), ub)
    return out / np.trace(out).real


def survival_sample(trans_a, trans_b, n: int, rng: np.random.Generator):
    """Independent Bernoulli loss per arm for ``n`` pairs."""
    for t in (trans_a, trans_b):
        if not 0.0 <= t <= 1.0:
            raise ValueError("transmissions must lie in [0, 1]")
    return rng.random(n) < trans_a, rng.random(n) < trans_b


def random_axis(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def drift_rotation(rotation: np.ndarray, dt_s: float, drift_rad_per_s: float,
                   rng: np.random.Generator) -> np.ndarray:
    """One step of an isotropic random walk on SU(2)."""
    if dt_s < 0:
        raise ValueError("dt must be non-negative")
    if dt_s == 0 or drift_rad_per_s == 0:
        return np.array(rotation, dtype=complex)
    angle = rng.normal(0.0, drift_rad_per_s * dt_s)
    step = su2_from_axis_angle(random_axis(rng), angle)
    return step @ np.asarray(rotation, dtype=complex)
