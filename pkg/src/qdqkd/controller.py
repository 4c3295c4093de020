"""Three-waveplate polarization controller and its downhill-simplex search.

The controller sits in Bob's arm after the fiber. Its quality is judged by
the loss

    L(theta) = sum_O P(O) + sum_C (1/2 - P(C))

over the orthogonal settings O = {HV, VH, DA, AD} and colinear settings
C = {HH, VV, DD, AA}, where each P is the probability of that outcome
given the basis pair. ``L = 0`` exactly for a perfectly aligned maximally
entangled pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.stats import qmc

from .polarization import COLINEAR, ORTHOGONAL, apply_bilocal, ket, pc_unitary

TWO_PI = 2.0 * math.pi
SETTINGS = ORTHOGONAL + COLINEAR
_KETS = np.array([ket(a, b) for a, b in SETTINGS])  # (8, 4)


class MaxEvalsExceeded(Exception):
    """Evaluation budget exhausted before the simplex converged."""

    def __init__(self, x: np.ndarray, fun: float, evals: int):
        super().__init__(f"max_evals reached after {evals} evaluations (best f={fun:.3g})")
        self.x = x
        self.fun = fun
        self.evals = evals


class NotConverged(Exception):
    """No start reached the acceptance threshold."""

    def __init__(self, message: str, best: "ControllerResult | None" = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class PcAngles:
    """QWP, HWP, QWP angles in rad, canonicalized to [0, 2pi)."""

    theta: tuple

    def __post_init__(self):
        t = tuple(float(x) for x in self.theta)
        if len(t) != 3 or not all(math.isfinite(x) for x in t):
            raise ValueError("controller angles must be three finite numbers")
        object.__setattr__(self, "theta", tuple(x % TWO_PI for x in t))

    def as_array(self) -> np.ndarray:
        return np.array(self.theta)

    def unitary(self) -> np.ndarray:
        return pc_unitary(self.theta)


@dataclass(frozen=True)
class SimplexOptions:
    initial_step: float = 0.5
    tol_f: float = 1e-12
    tol_x: float = 1e-9
    max_evals: int = 2000
    restarts: int = 0

    def __post_init__(self):
        if self.initial_step <= 0 or self.tol_f <= 0 or self.tol_x <= 0:
            raise ValueError("step and tolerances must be positive")
        if self.max_evals < 1 or self.restarts < 0:
            raise ValueError("max_evals must be >= 1 and restarts >= 0")


class SimplexResult(NamedTuple):
    x: np.ndarray
    fun: float
    evals: int


# --- loss -------------------------------------------------------------------

def loss_from_probabilities(p) -> float:
    p = np.asarray(p, dtype=float)
    if p.shape != (8,):
        raise ValueError("expected 8 probabilities (4 orthogonal, 4 colinear)")
    return float(p[:4].sum() + (0.5 - p[4:]).sum())


def loss_L(stats_provider: Callable, theta) -> float:
    """Loss at ``theta`` from the provider's eight setting probabilities."""
    return loss_from_probabilities(stats_provider(theta))


def sifted_qber_from_probabilities(p) -> float:
    """Disagreement fraction of the sifted key, averaged over both bases."""
    p = np.asarray(p, dtype=float)
    return float(0.5 * p[:4].sum())


def corrected_state(rho: np.ndarray, fiber_a: np.ndarray, fiber_b: np.ndarray, theta) -> np.ndarray:
    return apply_bilocal(rho, fiber_a, pc_unitary(theta) @ fiber_b)


def setting_probabilities(rho: np.ndarray) -> np.ndarray:
    """``<ab|rho|ab>`` for the eight settings, orthogonal first."""
    return np.real(np.einsum("ki,ij,kj->k", _KETS.conj(), rho, _KETS))


class ExactProvider:
    """Noiseless setting probabilities of the corrected state."""

    def __init__(self, rho: np.ndarray, fiber_a: np.ndarray, fiber_b: np.ndarray):
        self.rho = np.asarray(rho, dtype=complex)
        self.fiber_a = np.asarray(fiber_a, dtype=complex)
        self.fiber_b = np.asarray(fiber_b, dtype=complex)
        self.calls = 0

    def state(self, theta) -> np.ndarray:
        out = corrected_state(self.rho, self.fiber_a, self.fiber_b, theta)
        return out / np.trace(out).real

    def __call__(self, theta) -> np.ndarray:
        self.calls += 1
        return setting_probabilities(self.state(theta))


class SampledProvider(ExactProvider):
    """Setting probabilities estimated from ``n_samples`` detected pairs.

    Each pair picks its two bases uniformly; only same-basis pairs inform
    the estimate, as in the running system. Each returned value is a
    relative frequency within its basis pair.
    """

    def __init__(self, rho, fiber_a, fiber_b, n_samples: int, rng: np.random.Generator):
        super().__init__(rho, fiber_a, fiber_b)
        if n_samples < 1:
            raise ValueError("n_samples must be positive")
        self.n_samples = int(n_samples)
        self.rng = rng

    def with_budget(self, n_samples: int) -> "SampledProvider":
        return SampledProvider(self.rho, self.fiber_a, self.fiber_b, n_samples, self.rng)

    def __call__(self, theta) -> np.ndarray:
        self.calls += 1
        p = setting_probabilities(self.state(theta))
        # per basis (Z, X): outcome order (same0, same1, cross01, cross10)
        out = np.zeros(8)
        n_zz, n_xx, _ = self.rng.multinomial(self.n_samples, [0.25, 0.25, 0.5])
        for n, (o1, o2, c1, c2) in ((n_zz, (0, 1, 4, 5)), (n_xx, (2, 3, 6, 7))):
            probs = np.clip(p[[c1, c2, o1, o2]], 0.0, None)
            probs = probs / probs.sum()
            if n == 0:
                out[[c1, c2, o1, o2]] = np.nan
                continue
            counts = self.rng.multinomial(n, probs)
            out[[c1, c2, o1, o2]] = counts / n
        return np.nan_to_num(out, nan=0.5)


# --- simplex ----------------------------------------------------------------

def _simplex_run(f, x0: np.ndarray, f0: float, step: float, opts: SimplexOptions, evals: int):
    n = x0.size
    pts = [x0.copy()]
    vals = [f0]
    for i in range(n):
        if evals >= opts.max_evals:
            raise _Budget(pts, vals, evals)
        x = x0.copy()
        x[i] += step
        pts.append(x)
        vals.append(float(f(x)))
        evals += 1
    pts = np.array(pts)
    vals = np.array(vals)
    while True:
        order = np.argsort(vals, kind="stable")
        pts, vals = pts[order], vals[order]
        if (vals[-1] - vals[0] <= opts.tol_f
                or np.max(np.abs(pts[1:] - pts[0])) <= opts.tol_x):
            return pts[0], float(vals[0]), evals
        if evals >= opts.max_evals:
            raise _Budget(pts, vals, evals)
        centroid = pts[:-1].mean(axis=0)
        xr = centroid + (centroid - pts[-1])
        fr = float(f(xr))
        evals += 1
        if fr < vals[0]:
            xe = centroid + 2.0 * (centroid - pts[-1])
            fe = float(f(xe))
            evals += 1
            pts[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < vals[-2]:
            pts[-1], vals[-1] = xr, fr
            continue
        if fr < vals[-1]:
            xc = centroid + 0.5 * (xr - centroid)
        else:
            xc = centroid + 0.5 * (pts[-1] - centroid)
        fc = float(f(xc))
        evals += 1
        if fc < min(fr, vals[-1]):
            pts[-1], vals[-1] = xc, fc
            continue
        # shrink toward the best vertex
        for i in range(1, n + 1):
            if evals >= opts.max_evals:
                raise _Budget(pts, vals, evals)
            pts[i] = pts[0] + 0.5 * (pts[i] - pts[0])
            vals[i] = float(f(pts[i]))
            evals += 1


class _Budget(Exception):
    def __init__(self, pts, vals, evals):
        k = int(np.argmin(vals))
        self.x, self.fun, self.evals = np.array(pts[k]), float(vals[k]), evals


def nelder_mead(f: Callable, x0, opts: SimplexOptions | None = None) -> SimplexResult:
    """Downhill simplex minimisation of ``f`` from ``x0``.

    Reflection 1, expansion 2, contraction 1/2, shrink 1/2. A run stops
    when the vertex values spread by at most ``tol_f`` or the vertices lie
    within ``tol_x`` of the best one. With ``restarts > 0`` the simplex is
    rebuilt around the best point with a perturbed step. The returned point
    is never worse than ``x0``.

    Raises
    ------
    MaxEvalsExceeded
        When the budget runs out; carries the best point found.
    """
    opts = opts or SimplexOptions()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    f0 = float(f(x0))
    evals = 1
    best_x, best_f = x0, f0
    rng = np.random.default_rng(0)
    step = opts.initial_step
    for attempt in range(opts.restarts + 1):
        if attempt:
            # fresh value: a noisy objective must not anchor on a lucky draw
            if evals >= opts.max_evals:
                raise MaxEvalsExceeded(best_x, best_f, evals)
            best_f = float(f(best_x))
            evals += 1
            step = opts.initial_step * float(rng.uniform(0.5, 1.5))
        try:
            best_x, best_f, evals = _simplex_run(f, best_x, best_f, step, opts, evals)
        except _Budget as exc:
            if exc.fun <= best_f:
                best_x, best_f = exc.x, exc.fun
            raise MaxEvalsExceeded(best_x, best_f, exc.evals) from None
    return SimplexResult(best_x, best_f, evals)


def quadratic_polish(f: Callable, x, radius: float = 0.15, n_points: int = 32,
                     rounds: int = 3, seed: int = 0, max_radius: float = 1.0) -> tuple[np.ndarray, int]:
    """Refine a noisy minimum with least-squares quadratic fits.

    Each round samples ``f`` on a Sobol design around ``x``, fits a full
    quadratic and moves to its stationary point when the fitted Hessian is
    positive definite and the step stays inside the sampled box. The first
    design is a cube of half-width ``radius``. Later designs are boxes in the
    fitted Hessian's eigenbasis whose half-widths give every axis the same
    expected rise of ``f``: stiff axes shrink by half per round while weakly
    curved axes widen (up to ``max_radius``), so a shallow valley is not
    lost under the evaluation noise.
    Returns the final point and the number of evaluations used.
    """
    x = np.asarray(x, dtype=float).copy()
    d = x.size
    iu = np.triu_indices(d)
    m = max(1, math.ceil(math.log2(n_points)))
    axes = np.eye(d)
    half = np.full(d, float(radius))
    evals = 0
    for r in range(rounds):
        unit = qmc.Sobol(d=d, scramble=True, seed=seed + r).random_base2(m)[:n_points] * 2 - 1
        design = np.vstack([np.zeros(d), (unit * half) @ axes.T])
        y = np.array([float(f(x + u)) for u in design])
        evals += design.shape[0]
        quad = design[:, iu[0]] * design[:, iu[1]]
        feats = np.hstack([np.ones((design.shape[0], 1)), design, quad])
        coef, *_ = np.linalg.lstsq(feats, y, rcond=None)
        g = coef[1:d + 1]
        hess = np.zeros((d, d))
        hess[iu] = coef[d + 1:]
        hess = hess + hess.T  # diagonal doubled: d2/dx2 of c*x^2 is 2c
        lam, vec = np.linalg.eigh(hess)
        if np.all(lam > 0):
            step = -np.linalg.solve(hess, g)
            if np.all(np.abs(axes.T @ step) <= half):
                x = x + step
        curv = np.abs(lam)
        if curv.max() <= 0:
            half = half / 2.0
            continue
        stiff = half.min() / 2.0
        rise = 0.5 * curv.max() * stiff ** 2
        axes = vec
        half = np.clip(np.sqrt(2.0 * rise / np.maximum(curv, 1e-300)), stiff, max_radius)
    return x, evals


# --- controller -------------------------------------------------------------

@dataclass
class ControllerResult:
    angles: PcAngles
    loss: float
    qber: float
    qber_stderr: float
    evals: int
    starts: int


def sobol_starts(n: int, seed: int = 0) -> np.ndarray:
    """``n`` spread starting points in [0, pi)^3 (waveplate angles have period pi)."""
    if n <= 0:
        return np.empty((0, 3))
    m = max(1, math.ceil(math.log2(n)))
    pts = qmc.Sobol(d=3, scramble=True, seed=seed).random_base2(m)[:n]
    return math.pi * pts


def _verify(provider, theta, verify_budget: int | None):
    prov = provider.with_budget(verify_budget) if verify_budget and hasattr(provider, "with_budget") else provider
    p = prov(theta)
    q = sifted_qber_from_probabilities(p)
    n_sifted = getattr(prov, "n_samples", 0) / 2.0
    stderr = math.sqrt(max(q * (1 - q), 0.0) / n_sifted) if n_sifted else 0.0
    return loss_from_probabilities(p), q, stderr


def optimize_controller(provider: Callable, opts: SimplexOptions | None = None, x0=None,
                        threshold: float = 0.03, restarts: int = 3, seed: int = 0,
                        verify_factor: int = 10, target_loss: float | None = None,
                        polish: bool = True, exhaustive: bool = True) -> ControllerResult:
    """Search controller angles that bring the sifted QBER below ``threshold``.

    A supplied ``x0`` is checked first and kept if it already passes. Then
    ``restarts`` Sobol-spread starts are tried. After each simplex run on a
    sampled provider the minimum is refined by :func:`quadratic_polish`
    (``polish``), and the incumbent is re-measured with ``verify_factor``
    times the provider's sample budget. With ``exhaustive`` every start is
    run and the best re-measured loss wins; otherwise the first passing
    start is taken.

    Raises
    ------
    NotConverged
        No start passed; the best attempt is attached.
    """
    opts = opts or SimplexOptions(initial_step=0.6, tol_f=1e-10, tol_x=1e-3, max_evals=600)
    n_budget = getattr(provider, "n_samples", None)
    verify_budget = verify_factor * n_budget if n_budget else None
    total = 0
    best: ControllerResult | None = None

    def accept(res: ControllerResult) -> bool:
        ok = res.qber <= threshold
        return ok and (target_loss is None or res.loss <= target_loss)

    starts = list(sobol_starts(restarts, seed))
    if x0 is not None:
        x0 = np.asarray(PcAngles(tuple(np.asarray(x0, dtype=float))).theta)
        loss, q, se = _verify(provider, x0, verify_budget)
        total += 1
        best = ControllerResult(PcAngles(tuple(x0)), loss, q, se, total, 0)
        if accept(best):
            return best
        starts.insert(0, x0)
    for i, start in enumerate(starts, 1):
        try:
            x, _, evals = nelder_mead(lambda th: loss_L(provider, th), start, opts)
        except MaxEvalsExceeded as exc:
            x, evals = exc.x, exc.evals
        total += evals
        if polish and n_budget:
            x, extra = quadratic_polish(lambda th: loss_L(provider, th), x, seed=seed + i)
            total += extra
        loss, q, se = _verify(provider, x, verify_budget)
        total += 1
        res = ControllerResult(PcAngles(tuple(x)), loss, q, se, total, i)
        if best is None or res.loss < best.loss:
            best = res
        if accept(res) and not exhaustive:
            break
    if best is not None and accept(best):
        best.evals = total
        return best
    raise NotConverged(f"no controller setting reached QBER <= {threshold} "
                       f"after {len(starts)} starts", best)
