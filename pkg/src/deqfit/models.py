"""ODE model definitions.

A model bundles the right-hand side f(x, theta, t), its analytic state
Jacobian, and the parameter layout: which entries of theta set initial-state
coordinates and which are system parameters entering f. System parameters can
be folded into the state ("parameter augmentation") so that gradient code only
ever has to differentiate with respect to initial conditions.

All builtins are autonomous; the time argument is threaded through anyway so
non-autonomous models can be registered through the same interface.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, NumericalDomainError

RhsFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
JacFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]

KEPLER_RADIUS_FLOOR = 1e-12


@dataclass(frozen=True)
class HamiltonianPartition:
    """Separable (q, p) structure: dq/dt = p, dp/dt = -force(q).

    Required by the leapfrog (Stormer-Verlet) integrator. `force` maps
    (q, params) -> R^d and `force_jac` is its q-Jacobian.
    """

    force: Callable[[np.ndarray, np.ndarray], np.ndarray]
    force_jac: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OdeModel:
    """An ODE model dx/dt = f(x, theta, t) with declared parameter layout.

    Parameters are a flat vector theta of length ``param_dim``. Entries listed
    in ``init_param_idx`` are copied into the initial state at the matching
    coordinates in ``init_state_idx``; entries in ``sys_param_idx`` enter the
    right-hand side. ``sys_jac`` is the Jacobian of f with respect to the
    system-parameter subvector and is required for adjoint gradients whenever
    system parameters exist.

    Instances are immutable; all evaluation methods are pure.
    """

    name: str
    state_dim: int
    param_names: tuple[str, ...]
    rhs: RhsFn
    jac: JacFn
    init_param_idx: tuple[int, ...]
    init_state_idx: tuple[int, ...]
    sys_param_idx: tuple[int, ...] = ()
    sys_jac: JacFn | None = None
    fixed_init: tuple[float, ...] | None = None
    partition: HamiltonianPartition | None = None
    base: "OdeModel | None" = None
    # optional fused (df/dx)^T v implementation; avoids assembling the Jacobian
    jtv_fn: Callable[[np.ndarray, np.ndarray, float, np.ndarray], np.ndarray] | None = None

    @property
    def param_dim(self) -> int:
        return len(self.param_names)

    @property
    def base_dim(self) -> int:
        """State dimension of the un-augmented model (observations act on it)."""
        return self.base.state_dim if self.base is not None else self.state_dim

    def check_params(self, params: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.param_dim,):
            raise ConfigurationError(
                f"model '{self.name}' expects {self.param_dim} parameters, "
                f"got shape {params.shape}"
            )
        return params

    def initial_state(self, params: np.ndarray) -> np.ndarray:
        """Initial state x(0; theta); depends only on the initial-state entries."""
        params = self.check_params(params)
        if self.fixed_init is not None:
            x0 = np.array(self.fixed_init, dtype=float)
        else:
            x0 = np.zeros(self.state_dim)
        if self.init_param_idx:
            x0[list(self.init_state_idx)] = params[list(self.init_param_idx)]
        return x0

    def jac_t_vec(self, x: np.ndarray, params: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
        """Jacobian-transpose-vector product (df/dx)^T v."""
        if self.jtv_fn is not None:
            return self.jtv_fn(x, params, t, v)
        return self.jac(x, params, t).T @ v


def eval_rhs(model: OdeModel, state, params, t: float = 0.0) -> np.ndarray:
    """Evaluate f(x, theta, t), rejecting non-finite output.

    Raises NumericalDomainError identifying the first offending component.
    """
    state = np.asarray(state, dtype=float)
    params = model.check_params(params)
    if state.shape != (model.state_dim,):
        raise ConfigurationError(
            f"model '{model.name}' expects state of dim {model.state_dim}, got {state.shape}"
        )
    out = model.rhs(state, params, t)
    bad = ~np.isfinite(out)
    if bad.any():
        raise NumericalDomainError(
            f"rhs of '{model.name}' non-finite in component {int(np.argmax(bad))} "
            f"at t={t}, state={state.tolist()}"
        )
    return out


def eval_state_jacobian(model: OdeModel, state, params, t: float = 0.0) -> np.ndarray:
    """Evaluate the analytic state Jacobian df/dx, rejecting non-finite output."""
    state = np.asarray(state, dtype=float)
    params = model.check_params(params)
    out = model.jac(state, params, t)
    bad = ~np.isfinite(out)
    if bad.any():
        i, j = np.unravel_index(int(np.argmax(bad)), out.shape)
        raise NumericalDomainError(
            f"jacobian of '{model.name}' non-finite at entry ({i},{j}) at t={t}"
        )
    return out


def augment_with_parameters(model: OdeModel) -> OdeModel:
    """Fold system parameters into the state as constant components.

    Returns a model with state z = (x, u), u constant in time at the system
    parameter values, whose x-block trajectory reproduces the original model
    step-for-step for any fixed-step scheme. All parameters of the augmented
    model set initial-state coordinates, so the adjoint costate at t=0 carries
    the full parameter gradient. Models without system parameters pass
    through unchanged.
    """
    if not model.sys_param_idx:
        return model
    if model.sys_jac is None:
        raise ConfigurationError(
            f"model '{model.name}' has system parameters but no sys_jac; "
            "an analytic parameter Jacobian is required for augmentation"
        )
    m = model.state_dim
    n_sys = len(model.sys_param_idx)
    sys_idx = list(model.sys_param_idx)
    base_rhs, base_jac, base_sys_jac = model.rhs, model.jac, model.sys_jac

    def rhs_aug(z, params, t):
        p = np.array(params, dtype=float)
        p[sys_idx] = z[m:]
        out = np.zeros(m + n_sys)
        out[:m] = base_rhs(z[:m], p, t)
        return out

    def jac_aug(z, params, t):
        p = np.array(params, dtype=float)
        p[sys_idx] = z[m:]
        out = np.zeros((m + n_sys, m + n_sys))
        out[:m, :m] = base_jac(z[:m], p, t)
        out[:m, m:] = base_sys_jac(z[:m], p, t)
        return out

    def jac_t_vec_aug(z, params, t, v):
        p = np.array(params, dtype=float)
        p[sys_idx] = z[m:]
        vx = v[:m]
        out = np.empty(m + n_sys)
        out[:m] = base_jac(z[:m], p, t).T @ vx
        out[m:] = base_sys_jac(z[:m], p, t).T @ vx
        return out

    fixed = tuple(model.fixed_init) if model.fixed_init is not None else (0.0,) * m
    return OdeModel(
        name=model.name + "+params",
        state_dim=m + n_sys,
        param_names=model.param_names,
        rhs=rhs_aug,
        jac=jac_aug,
        init_param_idx=model.init_param_idx + model.sys_param_idx,
        init_state_idx=model.init_state_idx + tuple(range(m, m + n_sys)),
        sys_param_idx=(),
        sys_jac=None,
        fixed_init=fixed + (0.0,) * n_sys,
        partition=None,
        base=model,
        jtv_fn=jac_t_vec_aug,
    )


# --- builtin benchmark systems ----------------------------------------------


def _lorenz() -> OdeModel:
    def rhs(x, p, t):
        s, r, b = p[3], p[4], p[5]
        return np.array([
            s * (x[1] - x[0]),
            x[0] * (r - x[2]) - x[1],
            x[0] * x[1] - b * x[2],
        ])

    def jac(x, p, t):
        s, r, b = p[3], p[4], p[5]
        return np.array([
            [-s, s, 0.0],
            [r - x[2], -1.0, -x[0]],
            [x[1], x[0], -b],
        ])

    def sys_jac(x, p, t):
        return np.array([
            [x[1] - x[0], 0.0, 0.0],
            [0.0, x[0], 0.0],
            [0.0, 0.0, -x[2]],
        ])

    return OdeModel(
        name="lorenz",
        state_dim=3,
        param_names=("x1_0", "x2_0", "x3_0", "sigma", "rho", "beta"),
        rhs=rhs,
        jac=jac,
        init_param_idx=(0, 1, 2),
        init_state_idx=(0, 1, 2),
        sys_param_idx=(3, 4, 5),
        sys_jac=sys_jac,
    )


def _fitzhugh_nagumo() -> OdeModel:
    def rhs(x, p, t):
        a, b, c = p
        v, r = x
        return np.array([
            c * (v - v**3 / 3.0 + r),
            -(v - a + b * r) / c,
        ])

    def jac(x, p, t):
        a, b, c = p
        v = x[0]
        return np.array([
            [c * (1.0 - v * v), c],
            [-1.0 / c, -b / c],
        ])

    def sys_jac(x, p, t):
        a, b, c = p
        v, r = x
        return np.array([
            [0.0, 0.0, v - v**3 / 3.0 + r],
            [1.0 / c, -r / c, (v - a + b * r) / (c * c)],
        ])

    return OdeModel(
        name="fitzhugh_nagumo",
        state_dim=2,
        param_names=("a", "b", "c"),
        rhs=rhs,
        jac=jac,
        init_param_idx=(),
        init_state_idx=(),
        sys_param_idx=(0, 1, 2),
        sys_jac=sys_jac,
        fixed_init=(-1.0, -1.0),
    )


def _kepler_force(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    r2 = q[0] * q[0] + q[1] * q[1]
    r = np.sqrt(r2)
    if r < KEPLER_RADIUS_FLOOR:
        # fail fast rather than return inf; line searches probe wild states
        raise NumericalDomainError(
            f"kepler gravitational force singular: |q|={r:.3e} (components 2,3 of rhs)"
        )
    return q / (r2 * r)


def _kepler_force_jac(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    r2 = q[0] * q[0] + q[1] * q[1]
    r = np.sqrt(r2)
    if r < KEPLER_RADIUS_FLOOR:
        raise NumericalDomainError(
            f"kepler gravitational force singular: |q|={r:.3e} (components 2,3 of rhs)"
        )
    r3 = r2 * r
    r5 = r3 * r2
    return np.eye(2) / r3 - 3.0 * np.outer(q, q) / r5


def _kepler() -> OdeModel:
    def rhs(x, p, t):
        q = x[:2]
        f = _kepler_force(q, p)
        return np.array([x[2], x[3], -f[0], -f[1]])

    def jac(x, p, t):
        g = _kepler_force_jac(x[:2], p)
        out = np.zeros((4, 4))
        out[0, 2] = 1.0
        out[1, 3] = 1.0
        out[2:, :2] = -g
        return out

    return OdeModel(
        name="kepler",
        state_dim=4,
        param_names=("q1_0", "q2_0", "p1_0", "p2_0"),
        rhs=rhs,
        jac=jac,
        init_param_idx=(0, 1, 2, 3),
        init_state_idx=(0, 1, 2, 3),
        partition=HamiltonianPartition(force=_kepler_force, force_jac=_kepler_force_jac),
    )


def _harmonic_oscillator() -> OdeModel:
    def rhs(x, p, t):
        return np.array([x[1], -x[0]])

    def jac(x, p, t):
        return np.array([[0.0, 1.0], [-1.0, 0.0]])

    return OdeModel(
        name="harmonic_oscillator",
        state_dim=2,
        param_names=("x1_0", "x2_0"),
        rhs=rhs,
        jac=jac,
        init_param_idx=(0, 1),
        init_state_idx=(0, 1),
        partition=HamiltonianPartition(
            force=lambda q, p: q.copy(),
            force_jac=lambda q, p: np.eye(1),
        ),
    )


_BUILTINS: dict[str, Callable[[], OdeModel]] = {
    "lorenz": _lorenz,
    "fitzhugh_nagumo": _fitzhugh_nagumo,
    "kepler": _kepler,
    "harmonic_oscillator": _harmonic_oscillator,
}

TRUE_PARAMS: dict[str, tuple[float, ...]] = {
    "lorenz": (-10.0, -1.0, 40.0, 10.0, 28.0, 8.0 / 3.0),
    "fitzhugh_nagumo": (0.2, 0.2, 3.0),
    "kepler": (0.4, 0.0, 0.0, 2.0),
    "harmonic_oscillator": (1.0, 0.0),
}


def builtin(name: str) -> OdeModel:
    """Return one of the builtin benchmark models by name."""
    try:
        return _BUILTINS[name]()
    except KeyError:
        raise ConfigurationError(
            f"unknown model '{name}'; available: {sorted(_BUILTINS)}"
        ) from None


def kepler_energy(states: np.ndarray) -> np.ndarray:
    """Hamiltonian H = |p|^2 / 2 - 1 / |q| along a (N, 4) Kepler trajectory."""
    states = np.atleast_2d(states)
    q = states[:, :2]
    p = states[:, 2:]
    return 0.5 * np.sum(p * p, axis=1) - 1.0 / np.sqrt(np.sum(q * q, axis=1))
