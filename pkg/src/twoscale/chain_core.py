"""Generators, quasi-stationary distributions, group inverses and exact solvers.

States are indexed ``0 .. m0-1`` throughout. Probability vectors are rows and
transition matrices act by right multiplication, ``p(t) = p(t0) P(t0, t)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import NegativeSolution, RankDeficient, SingularSystem, StepUnderflow

ROW_SUM_RTOL = 1e-12
NU_RESIDUAL_TOL = 1e-10
NU_NEGATIVE_TOL = 1e-8
CONDITION_LIMIT = 1e12
MIN_STEP = 1e-14


# ---------------------------------------------------------------------------
# generators


class TimeVaryingGenerator:
    """A time-indexed rate matrix ``t -> Q(t)`` with derivative access.

    Subclasses implement :meth:`_eval` and :meth:`_deriv`. Both accept a
    1-d array of times and return an array of shape ``(len(t), m0, m0)``.
    """

    dimension: int
    smoothness: int
    analytic_derivatives: bool = True

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        out = self._eval(np.atleast_1d(t_arr).ravel())
        return out[0] if t_arr.ndim == 0 else out.reshape(t_arr.shape + out.shape[1:])

    def derivative(self, t, order: int = 1):
        """``d^order Q / dt^order`` evaluated at ``t`` (scalar or array)."""
        if order == 0:
            return self(t)
        t_arr = np.asarray(t, dtype=float)
        out = self._deriv(np.atleast_1d(t_arr).ravel(), order)
        return out[0] if t_arr.ndim == 0 else out.reshape(t_arr.shape + out.shape[1:])

    def _eval(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _deriv(self, t: np.ndarray, order: int) -> np.ndarray:
        raise NotImplementedError


class PolynomialGenerator(TimeVaryingGenerator):
    """``Q(t) = sum_k C_k t^k`` with matrix coefficients ``C_k``.

    This is the in-memory form of the generator JSON file, where each term
    ``{"coeff": M, "time_poly": [c0, c1, ...]}`` contributes ``M * (c0 + c1 t + ...)``.
    Derivatives are exact.
    """

    def __init__(self, coeffs):
        coeffs = np.array(coeffs, dtype=float)
        if coeffs.ndim == 2:
            coeffs = coeffs[None]
        if coeffs.ndim != 3 or coeffs.shape[1] != coeffs.shape[2]:
            raise ValueError(f"expected coefficient stack (d+1, m, m), got {coeffs.shape}")
        # trailing all-zero coefficients only cost time
        while coeffs.shape[0] > 1 and not np.any(coeffs[-1]):
            coeffs = coeffs[:-1]
        self.coeffs = coeffs
        self.coeffs.setflags(write=False)
        self.dimension = coeffs.shape[1]
        self.smoothness = 10**6

    @classmethod
    def constant(cls, q) -> "PolynomialGenerator":
        return cls(np.asarray(q, dtype=float)[None])

    @classmethod
    def zero(cls, m0: int) -> "PolynomialGenerator":
        return cls(np.zeros((1, m0, m0)))

    @classmethod
    def from_terms(cls, m0: int, terms: Sequence[dict]) -> "PolynomialGenerator":
        degree = max([len(term["time_poly"]) for term in terms], default=1)
        coeffs = np.zeros((max(degree, 1), m0, m0))
        for term in terms:
            mat = np.asarray(term["coeff"], dtype=float)
            if mat.shape != (m0, m0):
                raise ValueError(f"term matrix has shape {mat.shape}, expected {(m0, m0)}")
            for k, c in enumerate(term["time_poly"]):
                coeffs[k] += float(c) * mat
        return cls(coeffs)

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0] - 1

    def _eval(self, t):
        out = np.broadcast_to(self.coeffs[-1], (t.size,) + self.coeffs.shape[1:]).copy()
        for c in self.coeffs[-2::-1]:
            out *= t[:, None, None]
            out += c
        return out

    def _deriv(self, t, order):
        d = self.degree
        if order > d:
            return np.zeros((t.size, self.dimension, self.dimension))
        k = np.arange(order, d + 1)
        falling = np.array([math.perm(int(j), order) for j in k], dtype=float)
        return PolynomialGenerator(self.coeffs[order:] * falling[:, None, None])._eval(t)

    def to_json(self) -> dict:
        m0 = self.dimension
        terms = []
        for k, c in enumerate(self.coeffs):
            if np.any(c):
                poly = [0.0] * k + [1.0]
                terms.append({"coeff": c.tolist(), "time_poly": poly})
        if not terms:
            terms.append({"coeff": np.zeros((m0, m0)).tolist(), "time_poly": [1.0]})
        return {"m0": m0, "terms": terms}

    def __add__(self, other):
        if not isinstance(other, PolynomialGenerator):
            return NotImplemented
        d = max(self.coeffs.shape[0], other.coeffs.shape[0])
        out = np.zeros((d, self.dimension, self.dimension))
        out[: self.coeffs.shape[0]] += self.coeffs
        out[: other.coeffs.shape[0]] += other.coeffs
        return PolynomialGenerator(out)

    def scaled(self, factor: float) -> "PolynomialGenerator":
        return PolynomialGenerator(self.coeffs * factor)

    def __reduce__(self):
        return (PolynomialGenerator, (np.array(self.coeffs),))


class CallableGenerator(TimeVaryingGenerator):
    """Generator given by a Python callable ``t -> Q(t)``.

    ``derivatives[j-1]`` is the j-th derivative evaluator. Missing orders
    fall back to central differences with ``h = 1e-5 * max(1, |t|)``; the
    ``analytic_derivatives`` flag records whether that ever happens so
    reports can say so.
    """

    def __init__(self, func: Callable, dimension: int, derivatives: Sequence[Callable] = (),
                 smoothness: int = 2):
        self.func = func
        self.dimension = int(dimension)
        self.derivatives = tuple(derivatives)
        self.smoothness = smoothness
        self.analytic_derivatives = len(self.derivatives) >= smoothness

    def _eval(self, t):
        return np.stack([np.asarray(self.func(float(s)), dtype=float) for s in t])

    def _deriv(self, t, order):
        if order <= len(self.derivatives):
            fn = self.derivatives[order - 1]
            return np.stack([np.asarray(fn(float(s)), dtype=float) for s in t])
        return np.stack([_central_difference(self._eval, float(s), order) for s in t])


def _central_difference(f, t: float, order: int) -> np.ndarray:
    h = 1e-5 * max(1.0, abs(t))
    if order == 1:
        v = f(np.array([t - h, t + h]))
        return (v[1] - v[0]) / (2 * h)
    # nested differences; accuracy degrades with order
    h = 1e-3 * max(1.0, abs(t))
    lo = _central_difference(f, t - h, order - 1)
    hi = _central_difference(f, t + h, order - 1)
    return (hi - lo) / (2 * h)


def load_generator(source) -> PolynomialGenerator:
    """Read a generator from a JSON file path or an already parsed dict."""
    if isinstance(source, (str, Path)):
        source = json.loads(Path(source).read_text())
    m0 = int(source["m0"])
    return PolynomialGenerator.from_terms(m0, source["terms"])


# ---------------------------------------------------------------------------
# two-scale model


@dataclass(frozen=True)
class TwoScaleModel:
    """Generator ``A(t)/epsilon + B(t)`` on ``[0, horizon]``."""

    fast: TimeVaryingGenerator
    slow: TimeVaryingGenerator
    epsilon: float
    horizon: float = 1.0

    def __post_init__(self):
        if self.fast.dimension != self.slow.dimension:
            raise ValueError("fast and slow generators must have the same dimension")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    @property
    def dimension(self) -> int:
        return self.fast.dimension

    def rates(self, t):
        """Full generator ``G_eps(t)``; vectorized over ``t``."""
        return self.fast(t) / self.epsilon + self.slow(t)

    def with_epsilon(self, epsilon: float) -> "TwoScaleModel":
        return replace(self, epsilon=float(epsilon))


def load_model(source, epsilon: float = 1.0) -> TwoScaleModel:
    """Model file: ``{"fast": <generator>, "slow": <generator>, "T": float}``.

    ``slow`` may be omitted (zero generator) and ``epsilon`` may be stored
    in the file, in which case it overrides the argument.
    """
    if isinstance(source, (str, Path)):
        source = json.loads(Path(source).read_text())
    fast = load_generator(source["fast"])
    slow = load_generator(source["slow"]) if "slow" in source else PolynomialGenerator.zero(fast.dimension)
    return TwoScaleModel(fast, slow, float(source.get("epsilon", epsilon)), float(source.get("T", 1.0)))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    kind: str  # "row_sum" | "negative_rate" | "derivative_mismatch" | "non_finite"
    t: float
    i: int
    j: int
    value: float


@dataclass
class ValidationReport:
    probe_times: list
    violations: list = field(default_factory=list)
    finite_difference_derivatives: bool = False

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "valid": self.ok,
            "n_probes": len(self.probe_times),
            "finite_difference_derivatives": self.finite_difference_derivatives,
            "violations": [vars(v) for v in self.violations],
        }


def validate_generator(g: TimeVaryingGenerator, probe_times, check_derivatives: bool = True) -> ValidationReport:
    """Check sign, row-sum and derivative-consistency invariants at ``probe_times``.

    Never raises on an invalid generator; every violation is listed in the
    returned report.
    """
    probe_times = [float(t) for t in np.atleast_1d(probe_times)]
    if not probe_times:
        raise ValueError("probe_times must be nonempty")
    report = ValidationReport(probe_times, finite_difference_derivatives=not g.analytic_derivatives)
    mats = g(np.asarray(probe_times))
    for t, q in zip(probe_times, mats):
        if not np.all(np.isfinite(q)):
            i, j = np.argwhere(~np.isfinite(q))[0]
            report.violations.append(Violation("non_finite", t, int(i), int(j), float(q[i, j])))
            continue
        scale = max(np.abs(q).sum(axis=1).max(), 1.0)
        off = q - np.diag(np.diag(q))
        for i, j in np.argwhere(off < 0):
            report.violations.append(Violation("negative_rate", t, int(i), int(j), float(q[i, j])))
        sums = q.sum(axis=1)
        for i in np.flatnonzero(np.abs(sums) > ROW_SUM_RTOL * scale):
            report.violations.append(Violation("row_sum", t, int(i), -1, float(sums[i])))
    if check_derivatives and g.smoothness >= 1:
        derivs = g.derivative(np.asarray(probe_times), 1)
        for t, d, q in zip(probe_times, derivs, mats):
            h = 1e-5 * max(1.0, abs(t))
            fd = (g(t + h) - g(t - h)) / (2 * h)
            tol = 1e-5 * max(np.abs(d).max(), np.abs(q).max(), 1e-300)
            err = np.abs(d - fd)
            if err.max() > tol:
                i, j = np.unravel_index(np.argmax(err), err.shape)
                report.violations.append(Violation("derivative_mismatch", t, int(i), int(j), float(err[i, j])))
    return report


# ---------------------------------------------------------------------------
# quasi-stationary distribution


def stationary_vector(q) -> np.ndarray:
    """Solve ``nu [1 : Q] = [1 : 0]`` in the least-squares sense.

    Accepts a single matrix or a stack ``(K, m, m)``.
    """
    q = np.asarray(q, dtype=float)
    single = q.ndim == 2
    qs = q[None] if single else q
    k, m, _ = qs.shape
    ranks = np.linalg.matrix_rank(qs)
    if np.any(ranks < m - 1):
        raise RankDeficient(f"generator rank {int(ranks.min())} < m0 - 1 = {m - 1}; not weakly irreducible")
    # transposed augmented system: [1 : Q]^T nu^T = e_0
    aug_t = np.concatenate([np.ones((k, 1, m)), np.swapaxes(qs, 1, 2)], axis=1)
    rhs = np.zeros((k, m + 1))
    rhs[:, 0] = 1.0
    qmat, rmat = np.linalg.qr(aug_t)
    nu = np.linalg.solve(rmat, np.einsum("kji,kj->ki", qmat, rhs)[..., None])[..., 0]
    if np.any(nu < -NU_NEGATIVE_TOL):
        raise NegativeSolution(f"stationary solve produced entry {nu.min():.3e}")
    nu = np.clip(nu, 0.0, None)
    nu /= nu.sum(axis=1, keepdims=True)
    scale = np.maximum(np.abs(qs).max(axis=(1, 2)), 1.0)
    resid = np.abs(np.einsum("ki,kij->kj", nu, qs)).max(axis=1)
    if np.any(resid > NU_RESIDUAL_TOL * scale):
        raise RankDeficient(f"stationary residual {resid.max():.3e} exceeds tolerance")
    return nu[0] if single else nu


def quasi_stationary(g: TimeVaryingGenerator, t) -> np.ndarray:
    """Quasi-stationary distribution ``nu(t)`` of the frozen generator ``g(t)``.

    Vectorized: an array of times gives an array of shape ``(len(t), m0)``.
    """
    return stationary_vector(g(t))


# ---------------------------------------------------------------------------
# group inverse


@dataclass(frozen=True)
class GroupInverseBundle:
    matrix: np.ndarray
    nu: np.ndarray
    projector: np.ndarray  # I - 1 nu

    @property
    def deviation(self) -> np.ndarray:
        """``integral_0^inf (exp(Q tau) - 1 nu) d tau``, which equals ``-A#``."""
        return -self.matrix

    def residuals(self, q) -> dict:
        q = np.asarray(q, dtype=float)
        a = self.matrix
        return {
            "A A# - (I - 1nu)": float(np.abs(q @ a - self.projector).max()),
            "A# A - (I - 1nu)": float(np.abs(a @ q - self.projector).max()),
            "A# 1": float(np.abs(a.sum(axis=1)).max()),
            "nu A#": float(np.abs(self.nu @ a).max()),
        }


def group_inverse(q, nu=None) -> GroupInverseBundle:
    """Group inverse via the fundamental matrix: ``A# = 1 nu - (1 nu - Q)^{-1}``."""
    q = np.asarray(q, dtype=float)
    m = q.shape[0]
    if nu is None:
        nu = stationary_vector(q)
    nu = np.asarray(nu, dtype=float)
    one_nu = np.outer(np.ones(m), nu)
    fundamental = one_nu - q
    cond = np.linalg.cond(fundamental)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularSystem(f"condition number of (1 nu - Q) is {cond:.3e}")
    a_sharp = one_nu - np.linalg.inv(fundamental)
    return GroupInverseBundle(a_sharp, nu, np.eye(m) - one_nu)


def group_inverse_stack(qs, nus) -> np.ndarray:
    """Vectorized ``A#`` for a stack of generators with known ``nu``."""
    qs = np.asarray(qs, dtype=float)
    one_nu = np.broadcast_to(nus[:, None, :], qs.shape)
    fundamental = one_nu - qs
    cond = np.linalg.cond(fundamental)
    if np.any(~np.isfinite(cond)) or np.any(cond > CONDITION_LIMIT):
        raise SingularSystem(f"condition number of (1 nu - Q) up to {np.max(cond):.3e}")
    return one_nu - np.linalg.inv(fundamental)


def nu_derivative(g: TimeVaryingGenerator, t: float) -> np.ndarray:
    """``d nu / dt = -nu(t) Q'(t) Q#(t)``, from differentiating ``nu Q = 0``."""
    q = g(t)
    nu = stationary_vector(q)
    bundle = group_inverse(q, nu)
    return -nu @ g.derivative(t, 1) @ bundle.matrix


def spectral_gap(q) -> float:
    """Minus the largest real part among the nonzero eigenvalues of ``q``."""
    ev = np.linalg.eigvals(np.asarray(q, dtype=float))
    ev = ev[np.argsort(-ev.real)]
    return float(-ev[1].real)


# ---------------------------------------------------------------------------
# forward equation / transition matrices


def _step_propagators(model: TwoScaleModel, left: np.ndarray, h: np.ndarray, method: str) -> np.ndarray:
    """One exponential-integrator step per interval ``[left, left + h]``."""
    if method == "midpoint":
        omega = h[:, None, None] * model.rates(left + h / 2)
    elif method == "magnus4":
        c = math.sqrt(3.0) / 6.0
        g1 = model.rates(left + (0.5 - c) * h)
        g2 = model.rates(left + (0.5 + c) * h)
        comm = g1 @ g2 - g2 @ g1
        hh = h[:, None, None]
        omega = 0.5 * hh * (g1 + g2) + (math.sqrt(3.0) / 12.0) * hh**2 * comm
    else:
        raise ValueError(f"unknown method {method!r}")
    return expm(omega)


def _propagate(model, start: np.ndarray, t0: float, times: np.ndarray, h_max: float, method: str) -> np.ndarray:
    """``start @ P(t0, t)`` for each ``t`` in ``times`` (sorted, >= t0)."""
    knots = np.concatenate([[t0], times])
    widths = np.diff(knots)
    counts = np.where(widths > 0, np.ceil(widths / h_max - 1e-12).astype(int), 0)
    counts = np.maximum(counts, (widths > 0).astype(int))
    lefts, steps = [], []
    for a, w, n in zip(knots[:-1], widths, counts):
        if n:
            hs = np.full(n, w / n)
            lefts.append(a + hs * np.arange(n))
            steps.append(hs)
    out = np.empty((times.size,) + start.shape)
    if not lefts:
        out[:] = start
        return out
    props = _step_propagators(model, np.concatenate(lefts), np.concatenate(steps), method)
    cur = start.copy()
    pos = 0
    for idx, n in enumerate(counts):
        for k in range(pos, pos + n):
            cur = cur @ props[k]
        pos += n
        out[idx] = cur
    return out


def _refine(model, start, t0, times, tol, method, h0=None):
    if times.size and (np.any(np.diff(times) < 0) or times[0] < t0):
        raise ValueError("output times must be increasing and >= t0")
    span = max(float(times[-1]) - t0, 0.0) if times.size else 0.0
    if span == 0.0:
        return np.broadcast_to(start, (times.size,) + start.shape).copy()
    h = h0 or min(model.epsilon / 10.0, model.horizon / 1000.0)
    coarse = _propagate(model, start, t0, times, h, method)
    while True:
        h /= 2.0
        if h < MIN_STEP:
            raise StepUnderflow(f"step {h:.3e} below {MIN_STEP}; use the asymptotic expansion instead")
        fine = _propagate(model, start, t0, times, h, method)
        if np.abs(fine - coarse).max() < tol:
            return fine
        coarse = fine


def forward_solve(model: TwoScaleModel, p0, grid, tol: float = 1e-9, method: str = "magnus4") -> np.ndarray:
    """Distribution ``p_eps(t)`` at each grid point, starting from ``p0`` at time 0.

    Steps are ``h <= min(eps/10, T/1000)``, halved until two successive
    solutions agree to ``tol`` in sup norm.
    """
    p0 = np.asarray(p0, dtype=float)
    grid = np.asarray(grid, dtype=float)
    out = _refine(model, p0, 0.0, grid, tol, method)
    out = np.clip(out, 0.0, None)
    return out / out.sum(axis=-1, keepdims=True)


def transition_matrices(model: TwoScaleModel, t0: float, times, tol: float = 1e-9,
                        method: str = "magnus4") -> np.ndarray:
    """``P_eps(t0, t)`` for every ``t`` in ``times`` using one propagation sweep."""
    times = np.asarray(times, dtype=float)
    return _refine(model, np.eye(model.dimension), float(t0), times, tol, method)


def transition_matrix(model: TwoScaleModel, t0: float, t: float, tol: float = 1e-9,
                      method: str = "magnus4") -> np.ndarray:
    """Transition matrix ``P_eps(t0, t)``."""
    if not 0 <= t0 <= t:
        raise ValueError(f"need 0 <= t0 <= t, got t0={t0}, t={t}")
    return transition_matrices(model, t0, [t], tol, method)[0]
