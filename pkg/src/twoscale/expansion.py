"""Matched asymptotic expansion of the two-scale transition matrix.

The outer terms ``Phi_k(t)`` solve ``Phi_k A = Phi_{k-1}' - Phi_{k-1} B`` and
are pinned by ``Phi_k 1 = 0`` through the group-inverse particular solution.
The boundary-layer terms ``Psi_k(t0, tau)`` live on stretched time
``tau = (t - t0)/eps`` and decay exponentially in ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .chain_core import (
    TimeVaryingGenerator,
    group_inverse_stack,
    stationary_vector,
)
from .errors import NoDecay, SolvabilityViolation

LAYER_FLOOR = 1e-12
TAU_CAP = 200.0
LAYER_STEP = 0.01
SOLVABILITY_TOL = 1e-8


def _as_times(t):
    t_arr = np.asarray(t, dtype=float)
    return np.atleast_1d(t_arr).ravel(), t_arr.ndim == 0


def build_phi0(A: TimeVaryingGenerator) -> Callable:
    """``Phi_0(t) = 1 nu(t)``; every row is the quasi-stationary vector."""
    m = A.dimension

    def phi0(t):
        ts, scalar = _as_times(t)
        nu = stationary_vector(A(ts))
        out = np.broadcast_to(nu[:, None, :], (ts.size, m, m)).copy()
        return out[0] if scalar else out

    return phi0


def _nu_and_sharp(A, ts):
    qs = A(ts)
    nus = stationary_vector(qs)
    return nus, group_inverse_stack(qs, nus)


def _fd_derivative(f, ts, h):
    return (-f(ts + 2 * h) + 8 * f(ts + h) - 8 * f(ts - h) + f(ts - 2 * h)) / (12 * h)


def build_phi_k(k: int, A: TimeVaryingGenerator, B: TimeVaryingGenerator, prior: list,
                horizon: float = 1.0) -> Callable:
    """Outer term ``Phi_k = (Phi_{k-1}' - Phi_{k-1} B) A#``.

    ``prior`` holds the evaluators ``Phi_0 .. Phi_{k-1}``. For ``k = 1`` the
    derivative of ``Phi_0`` is analytic (``1 nu'``); for ``k >= 2`` it is a
    fourth-order central difference with step ``1e-4 * horizon``.
    """
    if k < 1 or len(prior) < k:
        raise ValueError(f"need Phi_0..Phi_{k - 1} to build Phi_{k}")
    prev = prior[k - 1]
    h = 1e-4 * horizon

    def forcing(ts):
        if k == 1:
            nus, sharp = _nu_and_sharp(A, ts)
            dnu = -np.einsum("ki,kij,kjl->kl", nus, A.derivative(ts, 1), sharp)
            d_prev = np.broadcast_to(dnu[:, None, :], sharp.shape)
            prev_vals = np.broadcast_to(nus[:, None, :], sharp.shape)
        else:
            _, sharp = _nu_and_sharp(A, ts)
            d_prev = _fd_derivative(lambda s: np.asarray(prev(s)), ts, h)
            prev_vals = prev(ts)
        return d_prev - prev_vals @ B(ts), sharp

    def phi_k(t):
        ts, scalar = _as_times(t)
        rhs, sharp = forcing(ts)
        bad = np.abs(rhs.sum(axis=2)).max()
        if bad > SOLVABILITY_TOL:
            raise SolvabilityViolation(f"forcing row sums reach {bad:.3e} for Phi_{k}")
        out = rhs @ sharp
        return out[0] if scalar else out

    phi_k.forcing = lambda t: forcing(_as_times(t)[0])[0]
    return phi_k


def build_psi0(A: TimeVaryingGenerator, t0: float) -> Callable:
    """``Psi_0(t0, tau) = (I - 1 nu(t0)) exp(A(t0) tau)``."""
    a0 = A(t0)
    proj = np.eye(A.dimension) - np.outer(np.ones(A.dimension), stationary_vector(a0))

    def psi0(tau):
        taus, scalar = _as_times(tau)
        out = proj @ expm(taus[:, None, None] * a0)
        return out[0] if scalar else out

    return psi0


def choose_tau_max(A: TimeVaryingGenerator, t0: float, floor: float = LAYER_FLOOR,
                   cap: float = TAU_CAP, step: float = 0.1) -> float:
    """Smallest grid ``tau`` with ``||Psi_0(t0, tau)||_inf < floor``, capped."""
    a0 = A(t0)
    proj = np.eye(A.dimension) - np.outer(np.ones(A.dimension), stationary_vector(a0))
    e_step = expm(step * a0)
    cur = proj.copy()
    tau = 0.0
    while tau < cap:
        if np.abs(cur).sum(axis=1).max() < floor:
            return tau
        cur = cur @ e_step
        tau += step
    return cap


def _layer_forcing_mats(A, B, t0, n):
    """``(dA^{(i+1)}(t0)/(i+1)!, dB^{(i)}(t0)/i!)`` for ``i = 0 .. n-1``."""
    da = [A.derivative(t0, i + 1) / math.factorial(i + 1) for i in range(n)]
    db = [B.derivative(t0, i) / math.factorial(i) for i in range(n)]
    return da, db


def _rk4_layers(a0, psi0_at, da, db, init, tau_max, h):
    """Integrate ``Psi_1..Psi_n`` jointly with classical RK4 on a uniform grid.

    ``psi0_at(taus)`` gives the closed-form ``Psi_0`` at arbitrary points.
    Returns ``(taus, values, slopes)`` with values/slopes of shape ``(N+1, n, m, m)``.
    """
    n = init.shape[0]
    steps = int(round(tau_max / h))
    taus = h * np.arange(steps + 1)
    half = h / 2 * np.arange(2 * steps + 1)
    psi0_half = psi0_at(half)

    def rhs(idx2, state):
        tau = idx2 * h / 2
        p0 = psi0_half[idx2]
        out = state @ a0
        for k in range(1, n + 1):
            acc = out[k - 1]
            for i in range(k):
                lower = p0 if k - i - 1 == 0 else state[k - i - 2]
                acc += lower @ (tau ** (i + 1) * da[i] + tau**i * db[i])
        return out

    values = np.empty((steps + 1,) + init.shape)
    slopes = np.empty_like(values)
    state = init.copy()
    for j in range(steps):
        values[j] = state
        k1 = rhs(2 * j, state)
        slopes[j] = k1
        k2 = rhs(2 * j + 1, state + h / 2 * k1)
        k3 = rhs(2 * j + 1, state + h / 2 * k2)
        k4 = rhs(2 * j + 2, state + h * k3)
        state = state + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    values[steps] = state
    slopes[steps] = rhs(2 * steps, state)
    return taus, values, slopes


def _hermite(taus, values, slopes, tau):
    """Cubic Hermite interpolation on a uniform grid; zero beyond the grid."""
    h = taus[1] - taus[0]
    out = np.zeros((tau.size,) + values.shape[1:])
    inside = (tau >= 0) & (tau <= taus[-1])
    if not np.any(inside):
        return out
    x = tau[inside] / h
    j = np.minimum(np.floor(x).astype(int), taus.size - 2)
    s = (x - j)[:, None, None, None] if values.ndim == 4 else (x - j)[:, None, None]
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    out[inside] = (h00 * values[j] + h10 * h * slopes[j] + h01 * values[j + 1] + h11 * h * slopes[j + 1])
    return out


@dataclass
class ExpansionSet:
    """Outer and boundary-layer terms of order ``0..order`` anchored at ``t0``."""

    fast: TimeVaryingGenerator
    slow: TimeVaryingGenerator
    order: int
    t0: float
    horizon: float
    tau_max: float
    phi: list
    psi0: Callable
    tau_grid: np.ndarray | None = None
    layer_values: np.ndarray | None = None  # (N+1, order, m, m) for Psi_1..Psi_order
    layer_slopes: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.fast.dimension

    def phi_at(self, k: int, t):
        return self.phi[k](t)

    def psi_at(self, k: int, tau):
        taus, scalar = _as_times(tau)
        if k == 0:
            out = self.psi0(np.minimum(taus, self.tau_max))
            out[taus > self.tau_max] = 0.0
        else:
            if k > self.order:
                raise ValueError(f"expansion only has order {self.order}")
            out = _hermite(self.tau_grid, self.layer_values[:, k - 1], self.layer_slopes[:, k - 1], taus)
        return out[0] if scalar else out

    def evaluate(self, t, epsilon: float):
        """Order-``n`` approximation of ``P_eps(t0, t)``."""
        ts, scalar = _as_times(t)
        if np.any(ts < self.t0 - 1e-12):
            raise ValueError("expansion is only defined for t >= t0")
        taus = (ts - self.t0) / epsilon
        out = np.zeros((ts.size, self.dimension, self.dimension))
        for k in range(self.order + 1):
            out += epsilon**k * (self.phi[k](ts) + self.psi_at(k, taus))
        return out[0] if scalar else out

    def to_json(self, t_grid, tau_stride: int = 10) -> dict:
        t_grid = np.asarray(t_grid, dtype=float)
        doc = {
            "order": self.order,
            "t0": self.t0,
            "tau_max": self.tau_max,
            "residuals": self.diagnostics,
            "t": t_grid.tolist(),
            "phi": [np.asarray(self.phi[k](t_grid)).tolist() for k in range(self.order + 1)],
        }
        if self.tau_grid is not None:
            taus = self.tau_grid[::tau_stride]
        else:
            taus = np.arange(0.0, self.tau_max + 1e-12, LAYER_STEP * tau_stride)
        doc["tau"] = taus.tolist()
        doc["psi"] = [self.psi_at(k, taus).tolist() for k in range(self.order + 1)]
        return doc


def build_psi_k(A, B, phi: list, t0: float, tau_max: float, order: int, step: float = LAYER_STEP,
                tol: float = 1e-8):
    """Layer terms ``Psi_1..Psi_order`` on a uniform ``tau`` grid.

    Solved jointly by RK4; the step is halved until grid doubling changes the
    solution by less than ``tol``. Returns ``(taus, values, slopes, change)``.
    """
    m = A.dimension
    a0 = A(t0)
    psi0 = build_psi0(A, t0)
    da, db = _layer_forcing_mats(A, B, t0, order)
    init = np.stack([-np.asarray(phi[k](t0)) for k in range(1, order + 1)])
    taus, vals, slopes = _rk4_layers(a0, psi0, da, db, init, tau_max, step)
    while True:
        t2, v2, s2 = _rk4_layers(a0, psi0, da, db, init, tau_max, step / 2)
        change = float(np.abs(v2[::2] - vals).max())
        if change < tol or step < 1e-4:
            return t2, v2, s2, change
        step /= 2
        taus, vals, slopes = t2, v2, s2


def build_expansion(A: TimeVaryingGenerator, B: TimeVaryingGenerator, t0: float, order: int = 1,
                    horizon: float = 1.0, tau_max: float | None = None) -> ExpansionSet:
    """Construct every term of the order-``order`` expansion anchored at ``t0``."""
    if order < 0:
        raise ValueError("order must be >= 0")
    phi = [build_phi0(A)]
    for k in range(1, order + 1):
        phi.append(build_phi_k(k, A, B, phi, horizon))
    if tau_max is None:
        tau_max = choose_tau_max(A, t0)
    tau_max = max(LAYER_STEP, math.ceil(tau_max / LAYER_STEP - 1e-9) * LAYER_STEP)
    diagnostics = {"finite_difference_phi_orders": list(range(2, order + 1))}
    exp = ExpansionSet(A, B, order, float(t0), float(horizon), tau_max, phi, build_psi0(A, t0),
                       diagnostics=diagnostics)
    if order >= 1:
        while True:
            taus, vals, slopes, change = build_psi_k(A, B, phi, t0, exp.tau_max, order)
            tail = float(np.abs(vals[-1]).sum(axis=-1).max())
            if tail < 1e-10 or exp.tau_max >= TAU_CAP:
                break
            exp.tau_max = min(TAU_CAP, math.ceil(1.5 * exp.tau_max))
        if tail > 1e-6:
            raise NoDecay(f"layer tail norm {tail:.3e} at tau_max={exp.tau_max}")
        exp.tau_grid, exp.layer_values, exp.layer_slopes = taus, vals, slopes
        diagnostics["grid_doubling_change"] = change
        diagnostics["layer_tail_norm"] = tail
    return exp


def expansion_eval(expansion: ExpansionSet, t0: float, t, epsilon: float):
    """``sum_k eps^k [Phi_k(t) + Psi_k(t0, (t - t0)/eps)]``."""
    if abs(t0 - expansion.t0) > 1e-12:
        raise ValueError(f"expansion is anchored at t0={expansion.t0}, not {t0}")
    return expansion.evaluate(t, epsilon)


def phi_residual(expansion: ExpansionSet, k: int, ts) -> float:
    """``max ||Phi_k(t) A(t) - forcing(t)||_inf`` over ``ts``."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    lhs = expansion.phi[k](ts) @ expansion.fast(ts)
    rhs = expansion.phi[k].forcing(ts)
    return float(np.abs(lhs - rhs).max())


def layer_ode_residual(expansion: ExpansionSet, k: int) -> float:
    """Simpson-rule consistency of the stored layer grid with its ODE.

    Compares each increment ``Psi(tau_{j+1}) - Psi(tau_j)`` (divided by the
    step) with the Simpson average of the right-hand side at both ends and
    the interpolated midpoint.
    """
    if k == 0:
        return 0.0
    taus = expansion.tau_grid
    h = taus[1] - taus[0]
    vals = expansion.layer_values
    slopes = expansion.layer_slopes
    a0 = expansion.fast(expansion.t0)
    da, db = _layer_forcing_mats(expansion.fast, expansion.slow, expansion.t0, k)
    mids = taus[:-1] + h / 2
    mid_states = _hermite(taus, vals, slopes, mids)

    def lower(j, tau):
        if j == 0:
            return expansion.psi0(tau)
        return mid_states[:, j - 1]

    f_mid = mid_states[:, k - 1] @ a0
    for i in range(k):
        forcing = mids[:, None, None] ** (i + 1) * da[i] + mids[:, None, None] ** i * db[i]
        f_mid = f_mid + lower(k - i - 1, mids) @ forcing
    inc = (vals[1:, k - 1] - vals[:-1, k - 1]) / h
    simpson = (slopes[:-1, k - 1] + 4 * f_mid + slopes[1:, k - 1]) / 6
    return float(np.abs(inc - simpson).max())


def fit_layer_decay(expansion: ExpansionSet, k: int = 0, tau_min: float = 1.0):
    """Least-squares fit of ``log ||Psi_k(tau)||_inf`` on ``[tau_min, tau_max]``.

    Returns ``(rate, prefactor)`` for ``||Psi_k|| ~ prefactor * exp(-rate tau)``;
    an identically zero term gives ``(inf, 0.0)``.
    """
    taus = np.arange(tau_min, expansion.tau_max + 1e-9, 0.05)
    norms = np.abs(expansion.psi_at(k, taus)).sum(axis=-1).max(axis=-1)
    if not np.any(norms > 1e-300):
        return math.inf, 0.0
    keep = norms > 1e-300
    slope, intercept = np.polyfit(taus[keep], np.log(norms[keep]), 1)
    if slope >= 0:
        raise NoDecay(f"Psi_{k} does not decay (fitted log-slope {slope:.3g})")
    return float(-slope), float(np.exp(intercept))
