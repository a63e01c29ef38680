"""Fixed-step one-step integrators and a high-accuracy reference solver.

Fixed-step schemes integrate on a grid that subdivides each observation
interval into equal sub-steps, retaining every internal state (the backward
gradient sweep revisits all of them). The reference solver wraps an adaptive
embedded Dormand-Prince 5(4) pair and is used for data generation and for
measuring trajectory errors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigurationError, NumericalDomainError
from .models import OdeModel, builtin

_GRID_RTOL = 1e-8  # tolerance for "dt divides the interval" checks


@dataclass(frozen=True)
class Tableau:
    """Butcher coefficients of an explicit Runge-Kutta scheme."""

    a: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]
    c: tuple[float, ...]

    def __post_init__(self):
        s = len(self.b)
        if len(self.c) != s or len(self.a) != s or any(len(row) != s for row in self.a):
            raise ConfigurationError("inconsistent tableau dimensions")
        for i in range(s):
            if any(self.a[i][j] != 0.0 for j in range(i, s)):
                raise ConfigurationError("tableau must be strictly lower triangular (explicit)")
            if abs(self.c[i] - sum(self.a[i])) > 1e-12:
                raise ConfigurationError(f"row-sum condition violated in stage {i}")

    @property
    def stages(self) -> int:
        return len(self.b)


@dataclass(frozen=True)
class Scheme:
    """A named one-step method: an explicit RK tableau or the leapfrog pair."""

    name: str
    order: int
    tableau: Tableau | None = None  # None for the partitioned leapfrog scheme

    @property
    def partitioned(self) -> bool:
        return self.tableau is None


SCHEMES: dict[str, Scheme] = {
    "euler": Scheme("euler", 1, Tableau(((0.0,),), (1.0,), (0.0,))),
    "midpoint": Scheme(
        "midpoint", 2, Tableau(((0.0, 0.0), (0.5, 0.0)), (0.0, 1.0), (0.0, 0.5))
    ),
    "heun": Scheme(
        "heun", 2, Tableau(((0.0, 0.0), (1.0, 0.0)), (0.5, 0.5), (0.0, 1.0))
    ),
    "rk4": Scheme(
        "rk4",
        4,
        Tableau(
            (
                (0.0, 0.0, 0.0, 0.0),
                (0.5, 0.0, 0.0, 0.0),
                (0.0, 0.5, 0.0, 0.0),
                (0.0, 0.0, 1.0, 0.0),
            ),
            (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0),
            (0.0, 0.5, 0.5, 1.0),
        ),
    ),
    "stormer_verlet": Scheme("stormer_verlet", 2, None),
}

_ALIASES = {"explicit_euler": "euler", "rk": "rk4", "verlet": "stormer_verlet"}


def get_scheme(scheme: str | Scheme) -> Scheme:
    if isinstance(scheme, Scheme):
        return scheme
    key = _ALIASES.get(scheme, scheme)
    try:
        return SCHEMES[key]
    except KeyError:
        raise ConfigurationError(
            f"unknown scheme '{scheme}'; available: {sorted(SCHEMES)}"
        ) from None


def step(scheme: str | Scheme, model: OdeModel, state, params, t: float, dt: float) -> np.ndarray:
    """Apply one step of the scheme: (t, x) -> x(t + dt)."""
    scheme = get_scheme(scheme)
    if dt <= 0.0:
        raise ConfigurationError(f"step size must be positive, got {dt}")
    x = np.asarray(state, dtype=float)
    if scheme.partitioned:
        return _verlet_step(model, x, params, dt)
    return _rk_step(scheme.tableau, model, x, params, t, dt)


def _rk_step(tab: Tableau, model: OdeModel, x, params, t, dt) -> np.ndarray:
    rhs = model.rhs
    a, b, c = tab.a, tab.b, tab.c
    k = [rhs(x, params, t)]
    for i in range(1, tab.stages):
        xi = x.copy()
        for j in range(i):
            aij = a[i][j]
            if aij != 0.0:
                xi += (dt * aij) * k[j]
        k.append(rhs(xi, params, t + c[i] * dt))
    out = x.copy()
    for i in range(tab.stages):
        bi = b[i]
        if bi != 0.0:
            out += (dt * bi) * k[i]
    return out


def _verlet_step(model: OdeModel, x, params, dt) -> np.ndarray:
    if model.partition is None:
        raise ConfigurationError(
            f"stormer_verlet needs a (q, p) partitioned model; '{model.name}' is not"
        )
    part = model.partition
    d = model.state_dim // 2
    q, p = x[:d], x[d:]
    q_half = q + (0.5 * dt) * p
    p_new = p - dt * part.force(q_half, params)
    q_new = q_half + (0.5 * dt) * p_new
    return np.concatenate([q_new, p_new])


@dataclass(frozen=True)
class TimeGrid:
    """Observation times plus the internal sub-step grid between them.

    ``node_times`` covers [0, t_K] including every sub-step;
    ``obs_index[k]`` is the node holding observation k. When the first
    observation time is positive, a lead-in segment from the time origin 0 is
    integrated with the same internal step size.
    """

    obs_times: np.ndarray
    node_times: np.ndarray
    obs_index: np.ndarray

    @property
    def n_obs(self) -> int:
        return len(self.obs_times)

    @property
    def n_nodes(self) -> int:
        return len(self.node_times)

    @staticmethod
    def build(obs_times, n_sub: int | None = None, dt: float | None = None) -> "TimeGrid":
        """Build a grid from either sub-steps per interval or an explicit dt.

        With ``n_sub``, each observation interval is split into n_sub equal
        steps. With ``dt``, every segment length must be an integer multiple
        of dt. Exactly one of the two must be given.
        """
        obs = np.asarray(obs_times, dtype=float)
        if obs.ndim != 1 or len(obs) < 1:
            raise ConfigurationError("observation times must be a non-empty 1-d array")
        if np.any(np.diff(obs) <= 0.0):
            raise ConfigurationError("observation times must be strictly increasing")
        if obs[0] < 0.0:
            raise ConfigurationError("observation times must be nonnegative")
        if (n_sub is None) == (dt is None):
            raise ConfigurationError("specify exactly one of n_sub or dt")

        segments: list[tuple[float, float]] = []
        if obs[0] > 0.0:
            segments.append((0.0, obs[0]))
        segments.extend(zip(obs[:-1], obs[1:]))

        counts: list[int] = []
        if n_sub is not None:
            if n_sub < 1:
                raise ConfigurationError(f"n_sub must be >= 1, got {n_sub}")
            if len(obs) > 1:
                ref_dt = (obs[1] - obs[0]) / n_sub if obs[0] > 0.0 else None
            else:
                ref_dt = obs[0] / n_sub if obs[0] > 0.0 else None
            for lo, hi in segments:
                if lo == 0.0 and obs[0] > 0.0 and len(obs) > 1:
                    # lead-in reuses the first interval's step size
                    counts.append(_divide(hi - lo, ref_dt))
                else:
                    counts.append(n_sub)
        else:
            if dt <= 0.0:
                raise ConfigurationError(f"dt must be positive, got {dt}")
            for lo, hi in segments:
                counts.append(_divide(hi - lo, dt))

        if segments:
            nodes = [np.array([segments[0][0]])]
            for (lo, hi), n in zip(segments, counts):
                nodes.append(np.linspace(lo, hi, n + 1)[1:])
            node_times = np.concatenate(nodes)
        else:  # single observation at t = 0
            node_times = obs.copy()

        obs_index = np.searchsorted(node_times, obs)
        # guard against round-off in searchsorted: observation times are segment
        # endpoints and appear exactly in node_times
        for k, tk in enumerate(obs):
            i = min(obs_index[k], len(node_times) - 1)
            if node_times[i] != tk:
                i = int(np.argmin(np.abs(node_times - tk)))
            obs_index[k] = i
        return TimeGrid(obs_times=obs, node_times=node_times, obs_index=obs_index)

    @staticmethod
    def uniform(h: float, n_obs: int, dt: float, start: float = 0.0) -> "TimeGrid":
        """Evenly spaced observations start, start+h, ... with internal step dt."""
        if h <= 0.0 or n_obs < 1:
            raise ConfigurationError("need h > 0 and at least one observation")
        obs = start + h * np.arange(n_obs)
        return TimeGrid.build(obs, dt=dt)


def _divide(length: float, dt: float) -> int:
    n = int(round(length / dt))
    if n < 1 or abs(n * dt - length) > _GRID_RTOL * max(length, dt):
        raise ConfigurationError(
            f"segment of length {length} is not an integer multiple of dt={dt}"
        )
    return n


@dataclass(frozen=True)
class NumericalSolution:
    """States at every internal node of a fixed-step integration."""

    model: OdeModel
    params: np.ndarray
    scheme: Scheme
    grid: TimeGrid
    states: np.ndarray  # (n_nodes, state_dim)

    @property
    def obs_states(self) -> np.ndarray:
        """States at the observation nodes (rows of shape state_dim)."""
        return self.states[self.grid.obs_index]

    @property
    def obs_states_base(self) -> np.ndarray:
        """Observation-node states restricted to the un-augmented block."""
        return self.states[self.grid.obs_index][:, : self.model.base_dim]


def integrate(model: OdeModel, params, grid: TimeGrid, scheme: str | Scheme) -> NumericalSolution:
    """Integrate from the model's initial state over the full node grid.

    Every internal state is retained. Raises NumericalDomainError with the
    failing node index if the trajectory leaves the numerical domain.
    """
    scheme = get_scheme(scheme)
    params = model.check_params(params)
    times = grid.node_times
    n = len(times)
    states = np.empty((n, model.state_dim))
    x = model.initial_state(params)
    states[0] = x
    try:
        if scheme.partitioned:
            for i in range(n - 1):
                x = _verlet_step(model, x, params, times[i + 1] - times[i])
                states[i + 1] = x
        else:
            tab = scheme.tableau
            for i in range(n - 1):
                x = _rk_step(tab, model, x, params, times[i], times[i + 1] - times[i])
                states[i + 1] = x
    except NumericalDomainError as err:
        raise NumericalDomainError(f"integration failed at node {i + 1}: {err}") from err
    if not np.isfinite(states).all():
        bad = int(np.argmin(np.isfinite(states).all(axis=1)))
        raise NumericalDomainError(f"integration produced non-finite state at node {bad}")
    return NumericalSolution(model=model, params=params, scheme=scheme, grid=grid, states=states)


def integrate_reference(model: OdeModel, params, times, rtol: float = 1e-12,
                        atol: float = 1e-12) -> np.ndarray:
    """High-accuracy states at the requested times via adaptive DP 5(4).

    Integration always starts from the model's initial state at t = 0.
    Returns an array of shape (len(times), state_dim).
    """
    if rtol <= 0.0 or atol <= 0.0:
        raise ConfigurationError("rtol and atol must be positive")
    params = model.check_params(params)
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise ConfigurationError("times must be a non-empty 1-d array")
    if np.any(np.diff(times) < 0.0) or times[0] < 0.0:
        raise ConfigurationError("times must be nondecreasing and nonnegative")
    x0 = model.initial_state(params)
    t_end = float(times[-1])
    if t_end == 0.0:
        return np.tile(x0, (len(times), 1))
    sol = solve_ivp(
        lambda t, x: model.rhs(x, params, t),
        (0.0, t_end),
        x0,
        method="RK45",
        t_eval=times,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise NumericalDomainError(
            f"reference solver failed for '{model.name}' (requested accuracy "
            f"rtol={rtol}, atol={atol}): {sol.message}"
        )
    return sol.y.T


def ho_step_matrix(scheme: str | Scheme, dt: float, h: float) -> np.ndarray:
    """One-observation-interval transition matrix of a scheme on the oscillator.

    The scheme's one-step map on the linear oscillator is a 2x2 matrix,
    recovered by stepping the identity's columns; the result is its (h/dt)-th
    power. h must be an integer multiple of dt.
    """
    if dt <= 0.0 or h <= 0.0:
        raise ConfigurationError("dt and h must be positive")
    n = int(round(h / dt))
    if n < 1 or abs(n * dt - h) > _GRID_RTOL * h:
        raise ConfigurationError(f"h={h} is not an integer multiple of dt={dt}")
    model = builtin("harmonic_oscillator")
    params = np.zeros(2)
    cols = [step(scheme, model, e, params, 0.0, dt) for e in (np.array([1.0, 0.0]), np.array([0.0, 1.0]))]
    m_one = np.column_stack(cols)
    return np.linalg.matrix_power(m_one, n)
