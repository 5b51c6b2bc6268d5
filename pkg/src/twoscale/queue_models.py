"""Finite-capacity time-varying birth-death queue (``M_t/M_t/1/m0``).

Queue length ``j`` in ``0..m0`` is state index ``j``. Arrivals occur at rate
``lambda(t) * lambda_j`` (``j < m0``) and services at ``mu(t) * mu_j``
(``j >= 1``), where ``lambda(t)``, ``mu(t)`` are positive modulations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.stats import norm

from .chain_core import CallableGenerator, PolynomialGenerator, TimeVaryingGenerator, TwoScaleModel
from .diffusion_limit import adaptive_simpson, sigma_squared


@dataclass(frozen=True)
class QueueModel:
    """Rates of the birth-death queue.

    ``lambda_mod``/``mu_mod`` are polynomial coefficient sequences in ``t``
    (lowest order first) or callables. ``slow`` is the slow generator on the
    ``m0 + 1`` states; ``None`` means zero.
    """

    capacity: int
    lambda_base: Sequence[float]
    mu_base: Sequence[float]
    lambda_mod: object = (1.0,)
    mu_mod: object = (1.0,)
    horizon: float = 1.0
    slow: TimeVaryingGenerator | None = None
    probe_grid: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        lam = np.asarray(self.lambda_base, dtype=float)
        mu = np.asarray(self.mu_base, dtype=float)
        if lam.shape != (self.capacity,) or mu.shape != (self.capacity,):
            raise ValueError(f"need {self.capacity} arrival and {self.capacity} service base rates")
        if np.any(lam <= 0) or np.any(mu <= 0):
            raise ValueError("base rates must be strictly positive")
        object.__setattr__(self, "lambda_base", lam)
        object.__setattr__(self, "mu_base", mu)
        if self.probe_grid is None:
            object.__setattr__(self, "probe_grid", np.linspace(0.0, self.horizon, 1001))
        lo = min(np.min(self.modulation("lambda", self.probe_grid)), np.min(self.modulation("mu", self.probe_grid)))
        if lo <= 1e-9:
            raise ValueError(f"modulation drops to {lo:.3e} on [0, T]; must stay positive")

    @property
    def n_states(self) -> int:
        return self.capacity + 1

    def modulation(self, which: str, t):
        mod = self.lambda_mod if which == "lambda" else self.mu_mod
        t = np.asarray(t, dtype=float)
        if callable(mod):
            return np.vectorize(mod, otypes=[float])(t)
        return P.polyval(t, np.asarray(mod, dtype=float))

    @classmethod
    def from_json(cls, source) -> "QueueModel":
        if isinstance(source, (str, Path)):
            source = json.loads(Path(source).read_text())
        return cls(
            capacity=int(source["m0"]),
            lambda_base=source["lambda_base"],
            mu_base=source["mu_base"],
            lambda_mod=tuple(source.get("lambda_mod_poly", [1.0])),
            mu_mod=tuple(source.get("mu_mod_poly", [1.0])),
            horizon=float(source.get("T", 1.0)),
        )

    def to_json(self) -> dict:
        if callable(self.lambda_mod) or callable(self.mu_mod):
            raise TypeError("only polynomial modulations can be serialized")
        return {
            "m0": self.capacity,
            "lambda_base": self.lambda_base.tolist(),
            "mu_base": self.mu_base.tolist(),
            "lambda_mod_poly": list(self.lambda_mod),
            "mu_mod_poly": list(self.mu_mod),
            "T": self.horizon,
        }


def _birth_death_pattern(q: QueueModel):
    n = q.n_states
    births = np.zeros((n, n))
    deaths = np.zeros((n, n))
    for j in range(q.capacity):
        births[j, j + 1] = q.lambda_base[j]
        births[j, j] = -q.lambda_base[j]
        deaths[j + 1, j] = q.mu_base[j]
        deaths[j + 1, j + 1] = -q.mu_base[j]
    return births, deaths


def build_generator(q: QueueModel) -> TimeVaryingGenerator:
    """Tridiagonal queue generator ``lambda(t) Births + mu(t) Deaths``.

    Polynomial modulations give an exact :class:`PolynomialGenerator`;
    callables give a :class:`CallableGenerator` with finite-difference
    derivatives.
    """
    births, deaths = _birth_death_pattern(q)
    if not callable(q.lambda_mod) and not callable(q.mu_mod):
        lam = np.asarray(q.lambda_mod, dtype=float)
        mu = np.asarray(q.mu_mod, dtype=float)
        d = max(lam.size, mu.size)
        coeffs = np.zeros((d,) + births.shape)
        coeffs[: lam.size] += lam[:, None, None] * births
        coeffs[: mu.size] += mu[:, None, None] * deaths
        return PolynomialGenerator(coeffs)
    return CallableGenerator(
        lambda t: q.modulation("lambda", t) * births + q.modulation("mu", t) * deaths,
        q.n_states,
    )


def queue_two_scale_model(q: QueueModel, epsilon: float) -> TwoScaleModel:
    slow = q.slow if q.slow is not None else PolynomialGenerator.zero(q.n_states)
    return TwoScaleModel(build_generator(q), slow, epsilon, q.horizon)


def queue_nu_closed_form(q: QueueModel, t):
    """``nu_j(t) ~ (lambda(t)/mu(t))^j prod_{k<j} lambda_k / mu_{k+1}``, normalized.

    Computed in log space so long queues do not overflow. Vectorized over ``t``.
    """
    t_arr = np.asarray(t, dtype=float)
    ts = np.atleast_1d(t_arr).ravel()
    rho = q.modulation("lambda", ts) / q.modulation("mu", ts)
    j = np.arange(q.n_states)
    log_prod = np.concatenate([[0.0], np.cumsum(np.log(q.lambda_base) - np.log(q.mu_base))])
    logw = j[None, :] * np.log(rho)[:, None] + log_prod[None, :]
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    nu = w / w.sum(axis=1, keepdims=True)
    return nu[0] if t_arr.ndim == 0 else nu.reshape(t_arr.shape + (q.n_states,))


def queue_occupation_band(q: QueueModel, state: int, epsilon: float, t: float, level: float = 0.95,
                          tol: float = 1e-10):
    """Gaussian band for the time spent in ``state`` during ``[0, t]``.

    Center ``integral_0^t nu_state``; half-width
    ``z_level * sqrt(eps * integral_0^t sigma~^2)`` with ``z_level`` the
    two-sided standard normal quantile and ``sigma~^2`` the variance rate for
    the indicator weights ``e_state``.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if t <= 0:
        return 0.0, 0.0
    A = build_generator(q)
    e = np.zeros(q.n_states)
    e[state] = 1.0
    center = adaptive_simpson(lambda s: float(queue_nu_closed_form(q, s)[state]), 0.0, t, tol)
    var = adaptive_simpson(lambda s: sigma_squared(A, e, s), 0.0, t, tol)
    z = norm.ppf(0.5 + level / 2)
    return center, float(z * np.sqrt(epsilon * var))
