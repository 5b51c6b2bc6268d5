"""Exact simulation of the two-scale chain and its occupation measures.

Paths are drawn by thinning against a constant dominating rate ``Lambda``:
candidate epochs form a Poisson process of rate ``Lambda`` on ``[0, T]``
and at a candidate time ``s`` in state ``i`` the chain moves to ``j != i``
with probability ``g_ij(s) / Lambda``.

Random streams: replication ``r`` of a run with base seed ``b`` uses
``Philox(SeedSequence(b, spawn_key=(r,)))``. Philox is counter based, so
streams with distinct keys do not overlap and results are identical on
every platform and for every degree of parallelism.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .chain_core import TwoScaleModel, stationary_vector
from .errors import RateBoundExceeded

RNG_NAME = "numpy.random.Philox(SeedSequence(base_seed, spawn_key=(replication,)))"
QUANTILE_LEVELS = (0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99)
_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)


def make_rng(seed) -> np.random.Generator:
    """``seed`` is an int or a ``(base_seed, replication)`` pair."""
    if isinstance(seed, tuple):
        base, rep = seed
        ss = np.random.SeedSequence(int(base), spawn_key=(int(rep),))
    else:
        ss = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(ss))


def rate_bound(model: TwoScaleModel, n_grid: int = 10_000, safety: float = 1.05) -> float:
    """``1.05 * max_t max_i |g_ii(t)|`` from a uniform scan of ``[0, T]``."""
    ts = np.linspace(0.0, model.horizon, n_grid)
    peak = 0.0
    for chunk in np.array_split(ts, max(1, n_grid // 1000)):
        diag = np.diagonal(model.rates(chunk), axis1=1, axis2=2)
        peak = max(peak, float(np.abs(diag).max()))
    return safety * peak


@dataclass(frozen=True)
class PathRecord:
    """One trajectory: the state is ``states[k]`` on ``[jump_times[k-1], jump_times[k])``.

    ``states[0]`` is the initial state and ``jump_times`` has one entry fewer
    than ``states``.
    """

    states: np.ndarray
    jump_times: np.ndarray
    horizon: float
    epsilon: float
    seed: object = None

    @property
    def initial_state(self) -> int:
        return int(self.states[0])

    def state_at(self, t):
        idx = np.searchsorted(self.jump_times, np.asarray(t, dtype=float), side="right")
        return self.states[idx]

    def sojourns(self):
        """``(start, end, state)`` arrays covering ``[0, horizon]``."""
        starts = np.concatenate([[0.0], self.jump_times])
        ends = np.concatenate([self.jump_times, [self.horizon]])
        return starts, ends, self.states

    def occupation_integral(self, values, grid) -> np.ndarray:
        """``integral_0^t values[state(s)] ds`` at each grid point."""
        values = np.asarray(values, dtype=float)
        grid = np.asarray(grid, dtype=float)
        starts, ends, states = self.sojourns()
        cum = np.concatenate([[0.0], np.cumsum(values[states] * (ends - starts))])
        idx = np.searchsorted(starts, grid, side="right") - 1
        idx = np.clip(idx, 0, states.size - 1)
        return cum[idx] + values[states[idx]] * (grid - starts[idx])


def _walk(model: TwoScaleModel, x0: int, rng: np.random.Generator, lam: float):
    T = model.horizon
    if lam <= 0.0:
        return np.array([x0]), np.empty(0)
    n = rng.poisson(lam * T)
    cand = np.sort(rng.uniform(0.0, T, n))
    u = rng.uniform(size=n)
    if n == 0:
        return np.array([x0]), np.empty(0)
    g = model.rates(cand)
    diag = -np.diagonal(g, axis1=1, axis2=2)
    if np.any(diag > lam):
        k, i = np.unravel_index(int(np.argmax(diag)), diag.shape)
        raise RateBoundExceeded(f"exit rate {diag[k, i]:.6g} of state {i} at t={cand[k]:.6g} "
                                f"exceeds bound {lam:.6g}")
    m = model.dimension
    kernel = g / lam + np.eye(m)
    cum = np.cumsum(kernel, axis=2)
    cum[:, :, -1] = np.inf
    # next state for every (candidate, current state)
    nxt = (cum <= u[:, None, None]).sum(axis=2).tolist()
    state = x0
    states = [x0]
    times = []
    for k in range(n):
        new = nxt[k][state]
        if new != state:
            state = new
            states.append(new)
            times.append(cand[k])
    return np.array(states), np.array(times)


def sample_path(model: TwoScaleModel, x0: int, seed, lam: float | None = None) -> PathRecord:
    """Draw one exact trajectory on ``[0, T]`` started in state ``x0``."""
    if not 0 <= x0 < model.dimension:
        raise ValueError(f"initial state {x0} outside 0..{model.dimension - 1}")
    if lam is None:
        lam = rate_bound(model)
    states, times = _walk(model, int(x0), make_rng(seed), lam)
    return PathRecord(states, times, model.horizon, model.epsilon, seed)


@dataclass(frozen=True)
class OccupationSpec:
    weights: np.ndarray
    grid: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        g = np.asarray(self.grid, dtype=float)
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if g.ndim != 1 or np.any(np.diff(g) <= 0) or (g.size and g[0] < 0):
            raise ValueError("grid must be strictly increasing and nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "grid", g)


def occupation(path: PathRecord, spec: OccupationSpec, nu) -> np.ndarray:
    """Centered occupation ``z_eps(t)`` on ``spec.grid``.

    Each sojourn contributes ``f(state) * length`` minus the integral of
    ``nu(s) F`` over it, taken with 5-point Gauss-Legendre (midpoint rule for
    sojourns shorter than 1e-12). ``nu`` maps an array of times to an array
    of distributions.
    """
    # z is unchanged by a constant shift of F; shifting makes constant F give exactly 0
    F = spec.weights - spec.weights[0]
    grid = spec.grid
    cuts = np.union1d(path.jump_times, grid)
    cuts = cuts[(cuts > 0) & (cuts <= path.horizon)]
    lo = np.concatenate([[0.0], cuts[:-1]])
    hi = cuts
    width = hi - lo
    mids = 0.5 * (hi + lo)
    nodes = (mids[:, None] + 0.5 * width[:, None] * _GL_X).ravel()
    nu_f = (np.asarray(nu(nodes)) @ F).reshape(lo.size, _GL_X.size)
    centering = 0.5 * width * (nu_f @ _GL_W)
    short = width < 1e-12
    if np.any(short):
        centering[short] = width[short] * (np.asarray(nu(mids[short])) @ F)
    own = F[path.state_at(lo)] * width
    cum = np.concatenate([[0.0], np.cumsum(own - centering)])
    return cum[np.searchsorted(np.concatenate([[0.0], hi]), grid)]


def scaled_occupation(z, epsilon: float) -> np.ndarray:
    """``xi_eps = z_eps / sqrt(eps)``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return np.asarray(z, dtype=float) / np.sqrt(epsilon)


def centering_integral(model: TwoScaleModel, F, grid, panels: int = 200) -> np.ndarray:
    """``integral_0^t nu(s) F ds`` on ``grid`` by composite Gauss-Legendre."""
    grid = np.asarray(grid, dtype=float)
    edges = np.union1d(np.linspace(0.0, model.horizon, panels + 1), grid)
    lo, hi = edges[:-1], edges[1:]
    nodes = (0.5 * (hi + lo)[:, None] + 0.5 * (hi - lo)[:, None] * _GL_X).ravel()
    vals = (stationary_vector(model.fast(nodes)) @ np.asarray(F, dtype=float)).reshape(lo.size, -1)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (hi - lo) * (vals @ _GL_W))])
    return cum[np.searchsorted(edges, grid)]


@dataclass
class MonteCarloSummary:
    n: int
    epsilon: float
    terminal: np.ndarray  # xi_eps(T) per replication
    base_seed: int
    rate_bound: float
    initial_state: object
    mean: float = field(init=False)
    mean_se: float = field(init=False)
    second_moment: float = field(init=False)
    second_moment_se: float = field(init=False)
    quantile_levels: tuple = QUANTILE_LEVELS
    quantiles: np.ndarray = field(init=False)
    trajectories: np.ndarray | None = None  # (N, len(grid)) when requested
    jump_counts: np.ndarray | None = None
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.terminal, dtype=float)
        n = x.size
        self.mean = float(x.mean())
        self.second_moment = float(np.mean(x**2))
        if n > 1:
            self.mean_se = float(x.std(ddof=1) / np.sqrt(n))
            self.second_moment_se = float((x**2).std(ddof=1) / np.sqrt(n))
        else:
            self.mean_se = self.second_moment_se = float("nan")
        self.quantiles = np.quantile(x, self.quantile_levels)

    def to_dict(self, include_samples: bool = False) -> dict:
        doc = {
            "n": self.n,
            "epsilon": self.epsilon,
            "base_seed": self.base_seed,
            "rng": RNG_NAME,
            "rate_bound": self.rate_bound,
            "initial_state": self.initial_state,
            "mean": self.mean,
            "mean_se": self.mean_se,
            "second_moment": self.second_moment,
            "second_moment_se": self.second_moment_se,
            "quantile_levels": list(self.quantile_levels),
            "quantiles": self.quantiles.tolist(),
            "timings": self.timings,
        }
        if include_samples:
            doc["terminal"] = np.asarray(self.terminal).tolist()
        return doc


def _replicate_block(model, F, grid, centering, x0, base_seed, reps, lam, nu0):
    traj = np.empty((len(reps), grid.size))
    jumps = np.empty(len(reps), dtype=np.int64)
    for row, r in enumerate(reps):
        rng = make_rng((base_seed, r))
        start = int(rng.choice(nu0.size, p=nu0)) if x0 == "stationary" else int(x0)
        states, times = _walk(model, start, rng, lam)
        path = PathRecord(states, times, model.horizon, model.epsilon, (base_seed, r))
        traj[row] = path.occupation_integral(F, grid) - centering
        jumps[row] = times.size
    return traj, jumps


def monte_carlo(model: TwoScaleModel, spec: OccupationSpec, x0, n: int, base_seed: int,
                threads: int = 1, keep_trajectories: bool = False) -> MonteCarloSummary:
    """Replicate paths and summarize ``xi_eps(T)``.

    ``x0`` is a state index or ``"stationary"`` (initial state drawn from
    ``nu(0)`` with the replication's own stream). Replications are split
    into contiguous blocks over ``threads`` workers and reassembled in index
    order, so the summary does not depend on ``threads``.
    """
    if n < 1:
        raise ValueError("need at least one replication")
    started = time.perf_counter()
    F = spec.weights - spec.weights[0]
    grid = spec.grid
    if grid.size == 0 or abs(grid[-1] - model.horizon) > 1e-12:
        grid = np.append(grid[grid < model.horizon], model.horizon)
    lam = rate_bound(model)
    centering = centering_integral(model, F, grid)
    nu0 = stationary_vector(model.fast(0.0))
    blocks = np.array_split(np.arange(n), max(1, int(threads)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            parts = list(pool.map(
                lambda reps: _replicate_block(model, F, grid, centering, x0, base_seed, reps, lam, nu0),
                blocks,
            ))
    else:
        parts = [_replicate_block(model, F, grid, centering, x0, base_seed, reps, lam, nu0) for reps in blocks]
    z = np.concatenate([p[0] for p in parts])
    jumps = np.concatenate([p[1] for p in parts])
    xi = scaled_occupation(z, model.epsilon)
    summary = MonteCarloSummary(
        n=n,
        epsilon=model.epsilon,
        terminal=xi[:, -1],
        base_seed=int(base_seed),
        rate_bound=lam,
        initial_state=x0 if x0 == "stationary" else int(x0),
        trajectories=xi if keep_trajectories else None,
        jump_counts=jumps,
    )
    summary.timings = {"wall_seconds": time.perf_counter() - started, "threads": int(threads)}
    return summary


def write_paths_csv(paths, fh) -> None:
    """CSV path dump with columns ``rep, jump_index, time, state``.

    Row ``jump_index = 0`` carries the initial state at time 0.
    """
    fh.write("rep,jump_index,time,state\n")
    for rep, path in enumerate(paths):
        fh.write(f"{rep},0,{0.0!r},{int(path.states[0])}\n")
        for k, (t, s) in enumerate(zip(path.jump_times, path.states[1:]), start=1):
            fh.write(f"{rep},{k},{float(t)!r},{int(s)}\n")
