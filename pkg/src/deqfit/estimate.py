"""Parameter estimation: weighted least squares, IRLS, and data generation.

The estimator alternates two exact updates: the weight update (isotonic
regression of squared residuals, capped by the observation-noise bound) and a
weighted least-squares update of the ODE parameters solved by BFGS with
adjoint gradients. Both halves decrease the joint objective

    g(theta, w) = sum_{k,j} ( -log w_{k,j} + w_{k,j} r_{k,j}(theta)^2 ),

so the objective trace is nonincreasing by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .adjoint import wls_gradient
from .errors import ConfigurationError, NumericalDomainError
from .integrate import (NumericalSolution, Scheme, TimeGrid, get_scheme,
                        integrate, integrate_reference, step)
from .isotonic import WeightMatrix, update_weights
from .models import OdeModel, augment_with_parameters


# --- observations -------------------------------------------------------------


@dataclass(frozen=True)
class ObservationSet:
    """Noisy observations y_k = H x(t_k) + noise with diagonal noise variances.

    ``gamma_sq`` holds the true variances when known; ``gamma_sq_lower`` the
    lower bounds used as weight caps (defaults to ``gamma_sq``). With only
    lower bounds available the estimated error variance absorbs the
    unmodelled part of the noise and the leading weights estimate 1/gamma^2.
    """

    times: np.ndarray
    y: np.ndarray
    H: np.ndarray
    gamma_sq: np.ndarray
    gamma_sq_lower: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        y = np.asarray(self.y, dtype=float)
        h = np.asarray(self.H, dtype=float)
        gs = np.atleast_1d(np.asarray(self.gamma_sq, dtype=float))
        lower = self.gamma_sq_lower
        lower = gs.copy() if lower is None else np.atleast_1d(np.asarray(lower, dtype=float))
        if y.ndim == 1:
            y = y[:, None]
        j = y.shape[1]
        if times.ndim != 1 or len(times) != len(y):
            raise ConfigurationError("times and data lengths disagree")
        if np.any(np.diff(times) <= 0.0):
            raise ConfigurationError("observation times must be strictly increasing")
        if h.shape[0] != j:
            raise ConfigurationError(f"H has {h.shape[0]} rows for {j} observed components")
        if np.linalg.matrix_rank(h) < j:
            raise ConfigurationError("observation matrix H must have full row rank")
        if gs.shape != (j,) or lower.shape != (j,):
            raise ConfigurationError("noise variance vectors must have one entry per component")
        if np.any(lower <= 0.0) or np.any(lower > gs):
            raise ConfigurationError("need 0 < gamma_sq_lower <= gamma_sq componentwise")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "H", h)
        object.__setattr__(self, "gamma_sq", gs)
        object.__setattr__(self, "gamma_sq_lower", lower)

    @property
    def n_obs(self) -> int:
        return len(self.times)

    @property
    def n_components(self) -> int:
        return self.y.shape[1]

    @property
    def caps(self) -> np.ndarray:
        """Weight caps 1 / gamma_sq_lower."""
        return 1.0 / self.gamma_sq_lower


def residuals(data: ObservationSet, solution: NumericalSolution) -> np.ndarray:
    """r_{k,j} = y_{k,j} - H_j x_k for every observation."""
    if solution.grid.n_obs != data.n_obs:
        raise ConfigurationError("solution grid does not cover the observation set")
    if data.H.shape[1] != solution.model.base_dim:
        raise ConfigurationError("observation matrix does not match the model state")
    return data.y - solution.obs_states_base @ data.H.T


def objective_g(resid, weights) -> float:
    """Joint objective sum(-log w + w r^2); equals -2 log L up to a constant."""
    w = np.asarray(getattr(weights, "w", weights), dtype=float)
    r = np.asarray(resid, dtype=float)
    if w.shape != r.shape:
        raise ConfigurationError(f"weights {w.shape} / residuals {r.shape} mismatch")
    if np.any(w <= 0.0):
        raise NumericalDomainError("objective undefined for nonpositive weights")
    return float(np.sum(-np.log(w) + w * r * r))


# --- inner weighted least-squares solver ---------------------------------------


@dataclass
class FitOptions:
    """Inner BFGS solver settings.

    ``gtol`` is relative to max(1, initial gradient infinity-norm); the line
    search backtracks from a unit step with the Armijo condition, treating
    non-finite objective values as failures to shrink away from, and the BFGS
    update is skipped when the curvature condition fails.
    """

    gtol: float = 1e-8
    max_iter: int = 400
    step_tol: float = 1e-12
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 60
    curvature_eps: float = 1e-10


@dataclass
class InnerDiagnostics:
    iterations: int
    n_evals: int
    grad_norm: float
    objective: float
    termination: str  # gtol | step | maxiter | linesearch

    @property
    def converged(self) -> bool:
        return self.termination in ("gtol", "step")


def _minimize_bfgs(fval: Callable, fgrad: Callable, x0: np.ndarray, opts: FitOptions):
    """BFGS with inverse-Hessian update and backtracking Armijo line search.

    Returns (best_x, best_f, InnerDiagnostics). ``fval`` may return +inf
    outside the numerical domain; accepted points are always finite.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fgrad(x)
    if not np.isfinite(f):
        raise NumericalDomainError("objective not finite at the starting point")
    n = len(x)
    gtol_abs = opts.gtol * max(1.0, float(np.max(np.abs(g))) if n else 0.0)
    hinv = np.eye(n)
    best_x, best_f = x.copy(), f
    n_evals = 1
    termination = "maxiter"
    iterations = 0
    first_scale = True

    for it in range(opts.max_iter):
        iterations = it
        gnorm = float(np.max(np.abs(g))) if n else 0.0
        if gnorm <= gtol_abs:
            termination = "gtol"
            break
        d = -(hinv @ g)
        dg = float(d @ g)
        if dg >= 0.0:  # stale curvature produced a non-descent direction
            hinv = np.eye(n)
            d = -g
            dg = -float(g @ g)
        t = 1.0
        if it == 0:
            dn = float(np.linalg.norm(d))
            if dn > 1.0:
                t = 1.0 / dn
        saw_finite = False
        accepted = False
        xk = x
        fk = f
        for _ in range(opts.max_backtracks):
            xk = x + t * d
            fk = fval(xk)
            n_evals += 1
            if np.isfinite(fk):
                saw_finite = True
                if fk <= f + opts.armijo_c1 * t * dg:
                    accepted = True
                    break
            t *= opts.backtrack
        if not accepted:
            if not saw_finite:
                raise NumericalDomainError(
                    "line search found no finite objective value in any step"
                )
            termination = "linesearch"
            break
        fk, gk = fgrad(xk)
        n_evals += 1
        s = xk - x
        yv = gk - g
        x, f, g = xk, fk, gk
        if f < best_f:
            best_f, best_x = f, x.copy()
        sy = float(s @ yv)
        if sy > opts.curvature_eps * float(np.linalg.norm(s)) * float(np.linalg.norm(yv)):
            if first_scale:
                hinv *= sy / float(yv @ yv)
                first_scale = False
            hy = hinv @ yv
            yhy = float(yv @ hy)
            hinv += np.outer(s, s) * ((sy + yhy) / (sy * sy))
            cross = np.outer(hy, s)
            hinv -= (cross + cross.T) / sy
        # else: curvature condition failed; keep the previous inverse Hessian
        if float(np.linalg.norm(s)) <= opts.step_tol * (1.0 + float(np.linalg.norm(x))):
            termination = "step"
            break
        iterations = it + 1

    gnorm = float(np.max(np.abs(g))) if n else 0.0
    return best_x, best_f, InnerDiagnostics(
        iterations=iterations, n_evals=n_evals, grad_norm=gnorm,
        objective=best_f, termination=termination,
    )


class _WlsEvaluator:
    """Weighted SSE and its adjoint gradient, with a one-solution cache."""

    def __init__(self, aug_model: OdeModel, weights, data: ObservationSet,
                 scheme: Scheme, grid: TimeGrid):
        self.model = aug_model
        self.weights = weights
        self.w = np.asarray(getattr(weights, "w", weights), dtype=float)
        self.data = data
        self.scheme = scheme
        self.grid = grid
        self._cache: tuple[np.ndarray, NumericalSolution, float] | None = None

    def _evaluate(self, theta: np.ndarray) -> tuple[NumericalSolution, float]:
        sol = integrate(self.model, theta, self.grid, self.scheme)
        r = self.data.y - sol.obs_states_base @ self.data.H.T
        f = float(np.sum(self.w * r * r))
        self._cache = (theta.copy(), sol, f)
        return sol, f

    def value(self, theta: np.ndarray) -> float:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                _, f = self._evaluate(theta)
        except NumericalDomainError:
            return math.inf
        return f if np.isfinite(f) else math.inf

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        if self._cache is not None and np.array_equal(self._cache[0], theta):
            _, sol, f = self._cache
        else:
            sol, f = self._evaluate(theta)
        grad = wls_gradient(self.model, theta, self.w, self.data, sol)
        return f, grad


def _augmented(model: OdeModel) -> OdeModel:
    return augment_with_parameters(model) if model.sys_param_idx else model


def wls_fit(model: OdeModel, theta0, weights, data: ObservationSet, scheme,
            grid: TimeGrid, opts: FitOptions | None = None,
            fixed: dict[int, float] | None = None) -> np.ndarray:
    """Minimize the weighted residual objective over theta.

    Quasi-Newton (BFGS) with exact adjoint gradients; returns the best theta
    found. ``fixed`` pins coordinates (used by profile likelihood): pinned
    entries are excluded from the search space and their gradient entries are
    discarded.
    """
    theta, _, _ = _wls_fit_full(model, theta0, weights, data, scheme, grid, opts, fixed)
    return theta


def _wls_fit_full(model, theta0, weights, data, scheme, grid, opts=None, fixed=None):
    opts = opts or FitOptions()
    scheme = get_scheme(scheme)
    aug = _augmented(model)
    theta0 = aug.check_params(theta0)
    ev = _WlsEvaluator(aug, weights, data, scheme, grid)

    if fixed:
        theta0 = theta0.copy()
        for i, v in fixed.items():
            if not 0 <= i < len(theta0):
                raise ConfigurationError(f"fixed index {i} out of range")
            theta0[i] = v
        free = np.array([i for i in range(len(theta0)) if i not in fixed], dtype=int)
        template = theta0.copy()

        def embed(z):
            full = template.copy()
            full[free] = z
            return full

        fval = lambda z: ev.value(embed(z))

        def fgrad(z):
            f, gfull = ev.value_and_grad(embed(z))
            return f, gfull[free]

        z_best, f_best, diag = _minimize_bfgs(fval, fgrad, theta0[free], opts)
        return embed(z_best), f_best, diag

    x_best, f_best, diag = _minimize_bfgs(ev.value, ev.value_and_grad, theta0, opts)
    return x_best, f_best, diag


def qml_fit(model: OdeModel, theta0, data: ObservationSet, scheme, grid: TimeGrid,
            opts: FitOptions | None = None,
            fixed: dict[int, float] | None = None) -> np.ndarray:
    """Conventional baseline: weighted least squares with w pinned at 1/gamma^2."""
    weights = WeightMatrix(
        w=np.tile(1.0 / data.gamma_sq, (data.n_obs, 1)), caps=data.caps
    )
    return wls_fit(model, theta0, weights, data, scheme, grid, opts, fixed)


# --- IRLS drivers ---------------------------------------------------------------


@dataclass
class FitResult:
    """Outcome of an IRLS run: estimate, weights, traces, diagnostics."""

    theta_hat: np.ndarray
    weights: WeightMatrix
    sigma_sq_hat: np.ndarray
    objective_trace: np.ndarray
    theta_trace: list
    inner: list
    converged: bool
    n_iterations: int

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1])


DEFAULT_IRLS_ITERATIONS = 20


def irls(model: OdeModel, theta0, data: ObservationSet, scheme, grid: TimeGrid,
         L: int | None = None, opts: FitOptions | None = None, *,
         weight_update: str = "pava", n_samples: int = 100, seed: int = 0,
         stop_tol: float | None = None,
         fixed: dict[int, float] | None = None) -> FitResult:
    """Iteratively reweighted least squares.

    Each iteration first updates the weights from the current residuals
    (isotonic regression capped at 1/gamma_lower^2), then updates theta by a
    warm-started weighted least-squares fit. With ``L`` given, exactly L
    iterations run; with ``L=None`` up to 20 run with an early exit when the
    relative objective change drops below 1e-10. ``L=0`` performs a single
    weight update and returns theta0 unchanged.

    ``weight_update`` selects "pava" (default), "pinned" (weights held at the
    caps) or "probabilistic" (variance from an ensemble of per-step-perturbed
    integrations; no monotonicity constraint).
    """
    if L is not None and L < 0:
        raise ConfigurationError(f"L must be nonnegative, got {L}")
    if weight_update not in ("pava", "pinned", "probabilistic"):
        raise ConfigurationError(f"unknown weight update '{weight_update}'")
    opts = opts or FitOptions()
    scheme = get_scheme(scheme)
    aug = _augmented(model)
    theta = aug.check_params(theta0).copy()
    if fixed:
        for i, v in fixed.items():
            theta[i] = v
    n_iter = DEFAULT_IRLS_ITERATIONS if L is None else L
    early_tol = (1e-10 if L is None else None) if stop_tol is None else stop_tol
    caps = data.caps

    def weights_at(theta_now, iteration):
        if weight_update == "pinned":
            return WeightMatrix.constant(caps, data.n_obs)
        sol_now = integrate(aug, theta_now, grid, scheme)
        r = residuals(data, sol_now)
        if weight_update == "pava":
            return update_weights(r * r, caps)
        sig = probabilistic_weight_estimate(
            model, theta_now, scheme, grid, data.H,
            n_samples=n_samples, seed=seed, stream_labels=("irls_prob", iteration),
        )
        w = np.minimum(1.0 / (data.gamma_sq_lower + sig), caps)
        return WeightMatrix(w=w, caps=caps, require_monotone=False)

    def g_at(theta_now, wmat):
        sol_now = integrate(aug, theta_now, grid, scheme)
        return objective_g(residuals(data, sol_now), wmat)

    objective_trace: list[float] = []
    theta_trace: list[np.ndarray] = [theta.copy()]
    inner: list[InnerDiagnostics] = []
    weights = weights_at(theta, 0)
    objective_trace.append(g_at(theta, weights))
    converged = False

    for l in range(1, n_iter + 1):
        if l > 1:
            weights = weights_at(theta, l - 1)
        theta, _, diag = _wls_fit_full(model, theta, weights, data, scheme, grid, opts, fixed)
        inner.append(diag)
        theta_trace.append(theta.copy())
        objective_trace.append(g_at(theta, weights))
        if early_tol is not None and l >= 2:
            prev, cur = objective_trace[-2], objective_trace[-1]
            if abs(prev - cur) <= early_tol * max(1.0, abs(cur)):
                converged = True
                break

    sigma = weights.sigma_sq
    return FitResult(
        theta_hat=theta,
        weights=weights,
        sigma_sq_hat=sigma,
        objective_trace=np.asarray(objective_trace),
        theta_trace=theta_trace,
        inner=inner,
        converged=converged or (early_tol is None),
        n_iterations=len(inner),
    )


# --- probabilistic-solver weight alternative -------------------------------------


def probabilistic_weight_estimate(model: OdeModel, params, scheme, grid: TimeGrid,
                                  H, n_samples: int = 100, seed: int = 0,
                                  stream_labels: tuple = ()) -> np.ndarray:
    """Discretization-error variances from an ensemble of randomized solves.

    Each sample integrates the plain (un-augmented) model adding, after every
    step, a Gaussian perturbation whose componentwise standard deviation is
    the step-halving local-error estimate at the current state. The returned
    sigma_sq[k, j] is the ensemble variance of H_j x_k at the observation
    nodes; no monotonicity in k is imposed.
    """
    if n_samples < 2:
        raise ConfigurationError(f"need at least 2 samples, got {n_samples}")
    scheme = get_scheme(scheme)
    params = model.check_params(params)
    h = np.asarray(H, dtype=float)
    times = grid.node_times
    n_nodes = len(times)
    obs_idx = grid.obs_index
    samples = np.empty((n_samples, grid.n_obs, h.shape[0]))
    for s in range(n_samples):
        gen = rngmod.stream(seed, *stream_labels, "sample", s)
        x = model.initial_state(params)
        states = np.empty((n_nodes, model.state_dim))
        states[0] = x
        with np.errstate(over="ignore", invalid="ignore"):
            for n in range(n_nodes - 1):
                t = times[n]
                dt = times[n + 1] - t
                full = step(scheme, model, x, params, t, dt)
                half = step(scheme, model, x, params, t, 0.5 * dt)
                half = step(scheme, model, half, params, t + 0.5 * dt, 0.5 * dt)
                local_err = np.abs(full - half)
                x = full + local_err * gen.standard_normal(model.state_dim)
                states[n + 1] = x
        samples[s] = states[obs_idx] @ h.T
    sigma_sq = np.var(samples, axis=0, ddof=1)
    # a diverged sample must not zero out the weights through an inf variance
    sigma_sq[~np.isfinite(sigma_sq)] = 1e300
    return sigma_sq


# --- synthetic data ---------------------------------------------------------------


@dataclass(frozen=True)
class DataGenConfig:
    """Protocol for generating synthetic observations from a reference solve."""

    model: OdeModel
    theta_true: np.ndarray
    obs_times: np.ndarray
    obs_components: tuple[int, ...]
    gamma_sq: np.ndarray
    seed: int = 0
    gamma_sq_lower: np.ndarray | None = None
    rtol: float = 1e-12
    atol: float = 1e-12
    add_noise: bool = True

    def observation_matrix(self) -> np.ndarray:
        m = self.model.state_dim
        comps = tuple(self.obs_components)
        if any(not 0 <= c < m for c in comps):
            raise ConfigurationError(f"observed components {comps} out of range for dim {m}")
        return np.eye(m)[list(comps), :]


def generate_data(cfg: DataGenConfig) -> tuple[ObservationSet, np.ndarray]:
    """Reference-solve the model at the true parameters and add Gaussian noise.

    Returns the observation set and the noise-free reference states at the
    observation times (the recorded truth). Deterministic in cfg.seed.
    """
    h = cfg.observation_matrix()
    truth = integrate_reference(cfg.model, cfg.theta_true, cfg.obs_times,
                                rtol=cfg.rtol, atol=cfg.atol)
    y = truth @ h.T
    gs = np.atleast_1d(np.asarray(cfg.gamma_sq, dtype=float))
    if cfg.add_noise:
        gen = rngmod.stream(cfg.seed, "data")
        y = y + np.sqrt(gs) * gen.standard_normal(y.shape)
    data = ObservationSet(times=np.asarray(cfg.obs_times, dtype=float), y=y, H=h,
                          gamma_sq=gs, gamma_sq_lower=cfg.gamma_sq_lower)
    return data, truth


def trajectory_error(model: OdeModel, theta_hat, theta_true, interval,
                     n_points: int = 10_000, rtol: float = 1e-12,
                     atol: float = 1e-12) -> float:
    """Integrated squared trajectory distance between two parameter vectors.

    Trapezoidal approximation of the integral over ``interval`` of
    ||x(t; theta_hat) - x(t; theta_true)||^2, both trajectories taken from
    the adaptive reference solver.
    """
    a, b = float(interval[0]), float(interval[1])
    if b <= a:
        raise ConfigurationError(f"need b > a, got [{a}, {b}]")
    if n_points < 2:
        raise ConfigurationError("need at least two quadrature points")
    ts = np.linspace(a, b, n_points)
    x_hat = integrate_reference(model, theta_hat, ts, rtol=rtol, atol=atol)
    x_true = integrate_reference(model, theta_true, ts, rtol=rtol, atol=atol)
    diff = x_hat - x_true
    return float(np.trapezoid(np.sum(diff * diff, axis=1), ts))


# --- problem bundle (shared by inference and the command-line tools) ---------------


@dataclass
class FitProblem:
    """A complete estimation problem: model, data, discretization and method."""

    model: OdeModel
    data: ObservationSet
    scheme: Scheme
    grid: TimeGrid
    theta0: np.ndarray
    method: str = "irls"  # irls | conventional | irls_prob
    L: int | None = None
    opts: FitOptions = field(default_factory=FitOptions)
    n_samples: int = 100
    seed: int = 0

    def fit(self) -> FitResult:
        if self.method == "conventional":
            caps = self.data.caps
            weights = WeightMatrix(
                w=np.tile(1.0 / self.data.gamma_sq, (self.data.n_obs, 1)), caps=caps
            )
            theta, f, diag = _wls_fit_full(
                self.model, self.theta0, weights, self.data, self.scheme, self.grid, self.opts
            )
            aug = _augmented(self.model)
            sol = integrate(aug, theta, self.grid, self.scheme)
            g_final = objective_g(residuals(self.data, sol), weights)
            return FitResult(
                theta_hat=theta, weights=weights, sigma_sq_hat=weights.sigma_sq,
                objective_trace=np.asarray([g_final]), theta_trace=[np.asarray(self.theta0), theta],
                inner=[diag], converged=diag.converged, n_iterations=1,
            )
        update = "probabilistic" if self.method == "irls_prob" else "pava"
        return irls(self.model, self.theta0, self.data, self.scheme, self.grid,
                    L=self.L, opts=self.opts, weight_update=update,
                    n_samples=self.n_samples, seed=self.seed)

    def profile_objective(self, index: int, value: float,
                          warm_theta: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        """Minimized joint objective with theta[index] pinned at value."""
        start = np.asarray(self.theta0 if warm_theta is None else warm_theta, dtype=float).copy()
        start[index] = value
        if self.method == "conventional":
            caps = self.data.caps
            weights = WeightMatrix(
                w=np.tile(1.0 / self.data.gamma_sq, (self.data.n_obs, 1)), caps=caps
            )
            theta, _, _ = _wls_fit_full(
                self.model, start, weights, self.data, self.scheme, self.grid,
                self.opts, fixed={index: value},
            )
            aug = _augmented(self.model)
            sol = integrate(aug, theta, self.grid, self.scheme)
            return objective_g(residuals(self.data, sol), weights), theta
        res = irls(self.model, start, self.data, self.scheme, self.grid,
                   L=self.L, opts=self.opts, fixed={index: value})
        return res.objective, res.theta_hat
