"""Limit variance of scaled occupation measures and the path decomposition.

For weights ``F`` the limit diffusion has variance rate

    sigma^2(s) = sum_ij f_i f_j [nu_i(s) D_ij(s) + nu_j(s) D_ji(s)],

with ``D(s) = integral_0^inf Psi_0(s, tau) d tau = -A#(s)``. In matrix form
this is ``-2 (nu o F) A# F``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .chain_core import (
    TimeVaryingGenerator,
    TwoScaleModel,
    forward_solve,
    group_inverse_stack,
    stationary_vector,
)
from .errors import NoDecay

CLAMP_TOL = 1e-10
HARD_NEGATIVE = 1e-8


def _clamp_variance(value, scale):
    value = np.asarray(value, dtype=float)
    if np.any(value < -HARD_NEGATIVE * scale):
        raise ArithmeticError(
            f"variance rate {value.min():.3e} is negative beyond round-off; group inverse is broken"
        )
    return np.where(value < 0, 0.0, value)


def sigma_squared(A: TimeVaryingGenerator, F, s):
    """Closed-form variance rate ``-2 (nu o F) A#(s) F``; vectorized over ``s``.

    The value is invariant under ``F -> F + c`` because ``A# 1 = 0`` and
    ``nu A# = 0``; ``F`` is shifted by ``F[0]`` so constant weights give 0.
    """
    F = np.asarray(F, dtype=float)
    F = F - F[0]
    s_arr = np.asarray(s, dtype=float)
    ss = np.atleast_1d(s_arr).ravel()
    qs = A(ss)
    nus = stationary_vector(qs)
    sharp = group_inverse_stack(qs, nus)
    raw = -2.0 * np.einsum("ki,kij,j->k", nus * F, sharp, F)
    out = _clamp_variance(raw, max(1.0, float(np.abs(F).max()) ** 2))
    return float(out[0]) if s_arr.ndim == 0 else out.reshape(s_arr.shape)


def sigma_squared_quadrature_oracle(A: TimeVaryingGenerator, F, s: float, tau_max: float | None = None,
                                    step: float = 0.005) -> float:
    """Variance rate from a literal quadrature of the ``psi_0`` integrals.

    ``Psi_0(s, tau) = (I - 1 nu) exp(A(s) tau)`` is tabulated by repeated
    multiplication with ``exp(A(s) h)`` and each entry is integrated over
    ``[0, tau_max]`` with composite Simpson. Shares no code with the
    group-inverse route beyond the stationary vector.
    """
    F = np.asarray(F, dtype=float)
    q = A(s)
    m = q.shape[0]
    nu = stationary_vector(q)
    proj = np.eye(m) - np.outer(np.ones(m), nu)
    e_step = expm(step * q)
    if tau_max is None:
        tau_max = 0.0
        cur = proj.copy()
        while np.abs(cur).sum(axis=1).max() >= 1e-12:
            cur = cur @ e_step
            tau_max += step
            if tau_max > 1e4:
                raise NoDecay("Psi_0 did not fall below 1e-12 by tau = 1e4")
    n = int(np.ceil(tau_max / step))
    n += n % 2
    vals = np.empty((n + 1, m, m))
    vals[0] = proj
    for j in range(n):
        vals[j + 1] = vals[j] @ e_step
    if np.abs(vals[-1]).sum(axis=1).max() > 1e-10:
        raise NoDecay(f"||Psi_0(tau_max)|| = {np.abs(vals[-1]).sum(axis=1).max():.3e}")
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    integral = step / 3.0 * np.tensordot(w, vals, axes=1)
    total = 0.0
    for i in range(m):
        for j in range(m):
            total += F[i] * F[j] * (nu[i] * integral[i, j] + nu[j] * integral[j, i])
    return float(_clamp_variance(total, max(1.0, float(np.abs(F).max()) ** 2)))


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-9, max_depth: int = 40) -> float:
    """Adaptive Simpson quadrature with Richardson correction."""
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15 * tol:
            return left + right + (left + right - whole) / 15.0
        return (recurse(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + recurse(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    if b == a:
        return 0.0
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


@dataclass(frozen=True)
class VarianceProfile:
    """``sigma^2`` on a grid together with its running integral."""

    fast: TimeVaryingGenerator
    weights: np.ndarray
    grid: np.ndarray
    sigma2: np.ndarray
    cumulative: np.ndarray

    def rate(self, s):
        return sigma_squared(self.fast, self.weights, s)

    def cumulative_at(self, t: float, tol: float = 1e-9) -> float:
        return adaptive_simpson(lambda s: sigma_squared(self.fast, self.weights, s), 0.0, float(t), tol)

    def to_dict(self, oracle_deviation: float | None = None, clamp_count: int = 0) -> dict:
        return {
            "s": self.grid.tolist(),
            "sigma2": self.sigma2.tolist(),
            "cumulative": self.cumulative.tolist(),
            "oracle_deviation": oracle_deviation,
            "clamp_count": clamp_count,
        }


def variance_profile(A: TimeVaryingGenerator, F, grid, tol: float = 1e-9) -> VarianceProfile:
    """Evaluate ``sigma^2`` on ``grid`` and its integral from 0 by adaptive Simpson."""
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0) or grid[0] < 0:
        raise ValueError("grid must be increasing and start at or after 0")
    F = np.asarray(F, dtype=float)
    rate = lambda s: sigma_squared(A, F, s)
    knots = np.concatenate([[0.0], grid])
    pieces = [adaptive_simpson(rate, a, b, tol / max(len(grid), 1)) for a, b in zip(knots[:-1], knots[1:])]
    cumulative = np.maximum.accumulate(np.maximum(np.cumsum(pieces), 0.0))
    return VarianceProfile(A, F, grid, np.asarray(rate(grid)), cumulative)


def _gauss_panels(a: float, b: float, fine_until: float, fine_width: float, coarse_width: float, order: int = 5):
    """Gauss-Legendre nodes/weights on panels that are narrow near ``a``."""
    x, w = np.polynomial.legendre.leggauss(order)
    edges = [a]
    cut = min(b, a + fine_until)
    n_fine = max(1, int(np.ceil((cut - a) / fine_width)))
    edges.extend(np.linspace(a, cut, n_fine + 1)[1:])
    if b > cut:
        n_coarse = max(1, int(np.ceil((b - cut) / coarse_width)))
        edges.extend(np.linspace(cut, b, n_coarse + 1)[1:])
    edges = np.asarray(edges)
    lo, hi = edges[:-1], edges[1:]
    nodes = (0.5 * (hi - lo)[:, None] * x + 0.5 * (hi + lo)[:, None]).ravel()
    weights = (0.5 * (hi - lo)[:, None] * w).ravel()
    return nodes, weights, edges


def initial_layer_bias(model: TwoScaleModel, initial_state: int, F, t):
    """``X_eps(t) = integral_0^t e_x0 (P_eps(0, s) - Phi_0(s)) F ds``.

    Uses the exact forward solver (not the expansion) so checks that compare
    the two stay independent. Panels have width ``eps/10`` over the first
    ``40 eps`` of the interval. Vectorized over ``t``.
    """
    F = np.asarray(F, dtype=float)
    F = F - F[0]  # rows of P - Phi_0 sum to zero, so the shift is exact
    t_arr = np.asarray(t, dtype=float)
    ts = np.atleast_1d(t_arr).ravel()
    t_end = float(ts.max())
    out = np.zeros(ts.size)
    if t_end > 0:
        eps = model.epsilon
        knots = np.unique(np.concatenate([[0.0], ts]))
        all_nodes, all_w, owner = [], [], []
        for idx, (a, b) in enumerate(zip(knots[:-1], knots[1:])):
            nodes, weights, _ = _gauss_panels(a, b, max(0.0, 40 * eps - a), eps / 10, max(eps, (b - a) / 200))
            all_nodes.append(nodes)
            all_w.append(weights)
            owner.append(np.full(nodes.size, idx))
        nodes = np.concatenate(all_nodes)
        weights = np.concatenate(all_w)
        owner = np.concatenate(owner)
        p0 = np.zeros(model.dimension)
        p0[initial_state] = 1.0
        order = np.argsort(nodes, kind="stable")
        probs = np.empty((nodes.size, model.dimension))
        probs[order] = forward_solve(model, p0, nodes[order])
        nus = stationary_vector(model.fast(nodes))
        integrand = (probs - nus) @ F
        pieces = np.bincount(owner, weights=weights * integrand, minlength=knots.size - 1)
        cum = np.concatenate([[0.0], np.cumsum(pieces)])
        out = cum[np.searchsorted(knots, ts)]
    return float(out[0]) if t_arr.ndim == 0 else out.reshape(t_arr.shape)


def martingale_component(path, F, model: TwoScaleModel, grid, nu=None):
    """``M~_eps(t) = z_eps(t) - X_eps(t)`` on ``grid`` for one simulated path."""
    from .simulator import OccupationSpec, occupation  # local: simulator imports this module's users

    grid = np.asarray(grid, dtype=float)
    if nu is None:
        nu = lambda s: stationary_vector(model.fast(s))
    z = occupation(path, OccupationSpec(np.asarray(F, dtype=float), grid), nu)
    return z - initial_layer_bias(model, path.initial_state, F, grid)


def exact_second_moment(model: TwoScaleModel, p0, F, rtol: float = 1e-10) -> float:
    """``E[z_eps(T)^2]`` from deterministic ODEs, for checking Monte Carlo.

    With ``g(s) = F - nu(s) F`` and ``h(s) = integral_s^T P(s, u) g(u) du``,
    ``h`` solves ``-h' = g + G_eps h`` backwards from ``h(T) = 0`` and
    ``E z^2 = 2 integral_0^T sum_i p_i(s) g_i(s) h_i(s) ds``. Solved with an
    implicit Runge-Kutta method, independently of the exponential integrator.
    """
    F = np.asarray(F, dtype=float)
    m = model.dimension
    T = model.horizon

    def centered(s):
        return F - stationary_vector(model.fast(s)) @ F

    def backward(s, h):
        return -(centered(s) + model.rates(s) @ h)

    sol_h = solve_ivp(backward, (T, 0.0), np.zeros(m), method="Radau", rtol=rtol, atol=rtol * 1e-2,
                      dense_output=True)

    def forward(s, y):
        p = y[:m]
        return np.concatenate([p @ model.rates(s), [2.0 * np.dot(p * centered(s), sol_h.sol(s))]])

    y0 = np.concatenate([np.asarray(p0, dtype=float), [0.0]])
    sol = solve_ivp(forward, (0.0, T), y0, method="Radau", rtol=rtol, atol=rtol * 1e-2)
    return float(sol.y[-1, -1])


def exact_mean(model: TwoScaleModel, p0, F, rtol: float = 1e-10) -> float:
    """``E[z_eps(T)] = integral_0^T (p(s) - nu(s)) F ds`` by an implicit ODE solve."""
    F = np.asarray(F, dtype=float)
    m = model.dimension

    def rhs(s, y):
        p = y[:m]
        nu = stationary_vector(model.fast(s))
        return np.concatenate([p @ model.rates(s), [np.dot(p - nu, F)]])

    y0 = np.concatenate([np.asarray(p0, dtype=float), [0.0]])
    sol = solve_ivp(rhs, (0.0, model.horizon), y0, method="Radau", rtol=rtol, atol=rtol * 1e-2)
    return float(sol.y[-1, -1])


def limit_variance(A: TimeVaryingGenerator, F, T: float, tol: float = 1e-10) -> float:
    """``integral_0^T sigma^2(s) ds``."""
    return adaptive_simpson(lambda s: sigma_squared(A, F, s), 0.0, float(T), tol)


__all__ = [
    "sigma_squared",
    "sigma_squared_quadrature_oracle",
    "variance_profile",
    "VarianceProfile",
    "initial_layer_bias",
    "martingale_component",
    "exact_second_moment",
    "exact_mean",
    "limit_variance",
    "adaptive_simpson",
]
