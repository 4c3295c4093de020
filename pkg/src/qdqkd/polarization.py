"""Two-qubit polarization states, waveplates and the quantum-dot pair model.

Basis ordering for two-photon states is ``(HH, HV, VH, VV)`` with the first
factor being Alice's photon (X) and the second Bob's (XX). Energies are in
neV and times in ns throughout the state model.
"""
from __future__ import annotations

import math
from typing import Literal

import numpy as np

HBAR_NEV_NS = 658.2119569

H = np.array([1.0, 0.0], dtype=complex)
V = np.array([0.0, 1.0], dtype=complex)
D = np.array([1.0, 1.0], dtype=complex) / math.sqrt(2.0)
A = np.array([1.0, -1.0], dtype=complex) / math.sqrt(2.0)
R = np.array([1.0, 1.0j], dtype=complex) / math.sqrt(2.0)
L = np.array([1.0, -1.0j], dtype=complex) / math.sqrt(2.0)

STATES = {"H": H, "V": V, "D": D, "A": A, "R": R, "L": L}
I2 = np.eye(2, dtype=complex)
I4 = np.eye(4, dtype=complex)

# channel codes shared with the detection and sync modules
CHANNELS = ("H", "V", "D", "A")
ORTHOGONAL = (("H", "V"), ("V", "H"), ("D", "A"), ("A", "D"))
COLINEAR = (("H", "H"), ("V", "V"), ("D", "D"), ("A", "A"))

Setting = Literal["H", "V", "D", "A", "R", "L"]


def jones(label: str) -> np.ndarray:
    """Unit Jones vector for one of H, V, D, A, R, L."""
    try:
        return STATES[label].copy()
    except KeyError:
        raise ValueError(f"unknown polarization {label!r}") from None


def normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=complex)
    n = np.linalg.norm(vec)
    if n == 0:
        raise ValueError("cannot normalize a zero vector")
    return vec / n


def ket(a: str, b: str) -> np.ndarray:
    """Product state ``|a>_A |b>_B``."""
    return np.kron(jones(a), jones(b))


def dm(psi: np.ndarray) -> np.ndarray:
    """Density matrix of a pure state."""
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def is_unitary(u: np.ndarray, tol: float = 1e-10) -> bool:
    u = np.asarray(u)
    return bool(np.allclose(u.conj().T @ u, np.eye(u.shape[0]), atol=tol)
                and abs(abs(np.linalg.det(u)) - 1.0) < tol)


def check_density_matrix(rho: np.ndarray, tol: float = 1e-9) -> None:
    """Raise ``ValueError`` unless ``rho`` is a valid 4x4 density matrix."""
    rho = np.asarray(rho)
    if rho.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {rho.shape}")
    if not np.allclose(rho, rho.conj().T, atol=1e-10):
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > 1e-10:
        raise ValueError("density matrix trace differs from 1")
    if np.linalg.eigvalsh(rho).min() < -tol:
        raise ValueError("density matrix has negative eigenvalues")


def equal_up_to_phase(u: np.ndarray, v: np.ndarray, tol: float = 1e-9) -> bool:
    """True when ``u = exp(i*phi) v`` for some phase."""
    return phase_distance(u, v) < tol


def phase_distance(u: np.ndarray, v: np.ndarray) -> float:
    """``min_phi ||u - exp(i*phi) v||`` (Frobenius)."""
    u = np.asarray(u, dtype=complex)
    v = np.asarray(v, dtype=complex)
    overlap = np.vdot(v, u)
    phase = overlap / abs(overlap) if abs(overlap) > 0 else 1.0
    return float(np.linalg.norm(u - phase * v))


# --- states -----------------------------------------------------------------

def bell_phi_plus() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 1.0], dtype=complex) / math.sqrt(2.0)


def psi_t(s_nev: float, t_ns: float) -> np.ndarray:
    """Pair state after the exciton dwelt ``t_ns`` with splitting ``s_nev``."""
    if s_nev < 0 or t_ns < 0:
        raise ValueError("splitting and dwell time must be non-negative")
    phase = -s_nev * t_ns / HBAR_NEV_NS
    return np.array([1.0, 0.0, 0.0, np.exp(1j * phase)], dtype=complex) / math.sqrt(2.0)


def source_coherence(s_nev: float, t1x_ns: float) -> complex:
    """Lifetime-averaged phase factor ``E[exp(-i S t / hbar)]``.

    For an exponential dwell-time distribution this is ``1/(1 + i S T1/hbar)``.
    """
    if t1x_ns <= 0:
        raise ValueError("exciton lifetime must be positive")
    if s_nev < 0:
        raise ValueError("splitting must be non-negative")
    return 1.0 / (1.0 + 1j * s_nev * t1x_ns / HBAR_NEV_NS)


def rho_source(s_nev: float, t1x_ns: float) -> np.ndarray:
    """Time-integrated pair state without any time filtering."""
    c = source_coherence(s_nev, t1x_ns)
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = rho[3, 3] = 0.5
    rho[3, 0] = c / 2.0
    rho[0, 3] = np.conj(c) / 2.0
    return rho


def kappa_from_g2(g2x: float, g2xx: float) -> float:
    """Single-photon purity factor from the two autocorrelation values."""
    for name, val in (("g2x", g2x), ("g2xx", g2xx)):
        if not 0.0 <= val <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {val}")
    return 1.0 - 0.5 * (g2x + g2xx)


def mix_with_white_noise(rho: np.ndarray, kappa: float) -> np.ndarray:
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    return kappa * np.asarray(rho, dtype=complex) + (1.0 - kappa) * I4 / 4.0


def model_state(s_nev: float, t1x_ns: float, g2x: float, g2xx: float) -> np.ndarray:
    """Source state including the multi-photon/background admixture."""
    return mix_with_white_noise(rho_source(s_nev, t1x_ns), kappa_from_g2(g2x, g2xx))


# --- functionals ------------------------------------------------------------

def fidelity(rho: np.ndarray, target: np.ndarray | None = None) -> float:
    """``<target|rho|target>``, clamped to [0, 1]."""
    target = bell_phi_plus() if target is None else np.asarray(target, dtype=complex)
    f = float(np.real(np.vdot(target, np.asarray(rho) @ target)))
    if f < -1e-9 or f > 1 + 1e-9:
        raise ValueError(f"fidelity {f} outside [0, 1]; invalid inputs")
    return min(1.0, max(0.0, f))


def coincidence_probability(rho: np.ndarray, setting_a: str, setting_b: str) -> float:
    """Joint projection ``<ab|rho|ab>``."""
    k = ket(setting_a, setting_b)
    p = float(np.real(np.vdot(k, np.asarray(rho) @ k)))
    return min(1.0, max(0.0, p))


def qber_from_rho(rho: np.ndarray) -> float:
    """Mean of the four orthogonal-setting projections.

    This normalisation counts each error projection against all four basis
    combinations; the disagreement rate inside a sifted key is twice this
    value (see :func:`sifted_error_rate`).
    """
    return 0.25 * sum(coincidence_probability(rho, a, b) for a, b in ORTHOGONAL)


def sifted_error_rate(rho: np.ndarray) -> float:
    """Fraction of same-basis outcomes that disagree, averaged over + and x."""
    return 2.0 * qber_from_rho(rho)


# --- unitaries --------------------------------------------------------------

def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]], dtype=complex)


def waveplate_unitary(kind: Literal["quarter", "half"], angle: float) -> np.ndarray:
    """Retarder with its fast axis at ``angle`` from horizontal."""
    if not math.isfinite(angle):
        raise ValueError("angle must be finite")
    if kind == "quarter":
        m = np.diag([1.0, 1.0j])
    elif kind == "half":
        m = np.diag([1.0, -1.0]).astype(complex)
    else:
        raise ValueError(f"unknown waveplate kind {kind!r}")
    return rotation(-angle) @ m @ rotation(angle)


def pc_unitary(theta) -> np.ndarray:
    """Quarter-half-quarter controller; light meets ``theta[0]`` first."""
    t1, t2, t3 = (float(x) for x in theta)
    return (waveplate_unitary("quarter", t3) @ waveplate_unitary("half", t2)
            @ waveplate_unitary("quarter", t1))


def apply_bilocal(rho: np.ndarray, ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
    w = np.kron(ua, ub)
    return w @ np.asarray(rho, dtype=complex) @ w.conj().T


def random_unitary(rng: np.random.Generator) -> np.ndarray:
    """Haar-random 2x2 unitary."""
    z = (rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))) / math.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def su2_from_axis_angle(axis, angle: float) -> np.ndarray:
    """``exp(-i angle/2 n.sigma)`` for a unit Bloch axis ``n``."""
    nx, ny, nz = axis
    c, s = math.cos(angle / 2.0), math.sin(angle / 2.0)
    return np.array([[c - 1j * s * nz, -1j * s * nx - s * ny],
                     [-1j * s * nx + s * ny, c + 1j * s * nz]], dtype=complex)
