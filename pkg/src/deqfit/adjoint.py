"""Exact gradients of weighted least-squares trajectory objectives.

The objective sums w_{k,j} * (y_{k,j} - H_j x_k)^2 over observations of a
fixed-step numerical trajectory. Its gradient with respect to the initial
state (and, after parameter augmentation, the system parameters) is computed
by a single backward sweep over the stored forward states: the costate is
stepped with the scheme paired to the forward tableau by the
quadratic-invariant-preserving (symplectic partitioned Runge-Kutta)
conditions, and the residual gradient is injected at each observation node.
The result equals the true gradient of the discrete objective up to round-off,
which the finite-difference oracle below verifies independently.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .integrate import NumericalSolution, Scheme, TimeGrid, get_scheme, integrate
from .models import OdeModel


@dataclass(frozen=True)
class BackwardTableau:
    """Coefficients (A, B, C) of the costate scheme paired to a forward tableau.

    The pairing is taken in the backward time direction (the direction the
    costate is actually integrated), where an explicit forward scheme appears
    with reversed stage order. With those reversed coefficients (a*, b*, c*),
    the pair satisfies b*_i = B_i, b*_i A_{ij} + B_j a*_{ji} = b*_i B_i and
    c*_i = C_i exactly, and A is strictly lower triangular, so the costate
    sweep is explicit.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray


@dataclass(frozen=True)
class VerletBackward:
    """Marker for the costate formula paired to the leapfrog scheme.

    The (q, p) costate pair (l_q, l_p) is advanced backward through each
    forward step by the exact transpose of the three leapfrog sub-steps; see
    ``_verlet_adjoint_step``.
    """


def reversed_tableau(tab) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coefficients of an RK scheme rewritten for the reversed time direction.

    a*_{ij} = b_{s+1-j} - a_{s+1-i, s+1-j}, b*_i = b_{s+1-i},
    c*_i = 1 - c_{s+1-i}.
    """
    a = np.asarray(tab.a, dtype=float)
    b = np.asarray(tab.b, dtype=float)
    c = np.asarray(tab.c, dtype=float)
    ar = (b[None, ::-1] - a[::-1, ::-1])
    br = b[::-1].copy()
    cr = 1.0 - c[::-1]
    return ar, br, cr


def backward_tableau(scheme: str | Scheme):
    """Costate scheme paired to a forward scheme.

    For RK schemes with all weights b_i nonzero this is
    A_{ij} = b*_j - b*_j a*_{ji} / b*_i, B = b*, C = c* in the reversed-time
    representation; the one-stage Euler tableau pairs with (A, B, C) =
    (0, 1, 1). Schemes with a zero weight (the explicit midpoint rule) admit
    no such pair and raise; their gradients use the transpose sweep instead.
    """
    scheme = get_scheme(scheme)
    if scheme.partitioned:
        return VerletBackward()
    b = np.asarray(scheme.tableau.b, dtype=float)
    if np.any(b == 0.0):
        raise ConfigurationError(
            f"scheme '{scheme.name}' has a zero stage weight; "
            "no paired costate tableau exists"
        )
    ar, br, cr = reversed_tableau(scheme.tableau)
    A = br[None, :] - br[None, :] * ar.T / br[:, None]
    # strictly lower triangular by construction for explicit forward schemes
    A[np.abs(A) < 1e-15] = 0.0
    return BackwardTableau(A=A, B=br, C=cr)


def _rk_forward_stages(tab, model, x, params, t, dt):
    """Recompute the stage states X_i of one forward step from its start state."""
    rhs = model.rhs
    a, c = tab.a, tab.c
    stages = [x]
    if tab.stages == 1:
        return stages
    k = [rhs(x, params, t)]
    for i in range(1, tab.stages):
        xi = x.copy()
        for j in range(i):
            aij = a[i][j]
            if aij != 0.0:
                xi += (dt * aij) * k[j]
        stages.append(xi)
        if i < tab.stages - 1:
            k.append(rhs(xi, params, t + c[i] * dt))
    return stages


def _rk_adjoint_step(model, params, tab, bwd: BackwardTableau, x, t, dt, lam):
    """Advance the costate backward across one forward RK step.

    ``x`` is the stored state at the start of the forward step; the forward
    stage states are recomputed from it (same floating-point operations as the
    forward pass), then the paired tableau is evaluated stage by stage. On the
    backward grid the costate equation reads d(lam)/d(tau) = +J^T lam, and
    stage i of the backward scheme sits at the forward stage s-i.
    """
    s = tab.stages
    stages = _rk_forward_stages(tab, model, x, params, t, dt)
    A, B, C = bwd.A, bwd.B, bwd.C
    c = tab.c
    lstar = []
    for i in range(s):
        lam_i = lam.copy()
        for j in range(i):
            aij = A[i, j]
            if aij != 0.0:
                lam_i += (dt * aij) * lstar[j]
        xi = stages[s - 1 - i]
        ti = t + c[s - 1 - i] * dt
        lstar.append(model.jac_t_vec(xi, params, ti, lam_i))
    out = lam.copy()
    for i in range(s):
        out += (dt * B[i]) * lstar[i]
    return out


def _rk_adjoint_step_transpose(model, params, tab, x, t, dt, lam):
    """Exact transpose of one forward RK step, valid for any explicit tableau.

    Used for schemes with zero stage weights, where no paired costate tableau
    exists. For schemes with nonzero weights this evaluates the same linear
    map as ``_rk_adjoint_step``.
    """
    s = tab.stages
    stages = _rk_forward_stages(tab, model, x, params, t, dt)
    a, b, c = tab.a, tab.b, tab.c
    lbar = [None] * s
    for i in range(s - 1, -1, -1):
        kbar = b[i] * lam
        for j in range(i + 1, s):
            aji = a[j][i]
            if aji != 0.0:
                kbar = kbar + aji * lbar[j]
        lbar[i] = model.jac_t_vec(stages[i], params, t + c[i] * dt, dt * kbar)
    out = lam.copy()
    for i in range(s):
        out += lbar[i]
    return out


def _verlet_adjoint_step(model, params, x, dt, lam):
    """Exact transpose of one leapfrog step on the (q, p) costate pair."""
    part = model.partition
    d = model.state_dim // 2
    q, p = x[:d], x[d:]
    lq, lp = lam[:d], lam[d:]
    q_half = q + (0.5 * dt) * p
    g = part.force_jac(q_half, params)
    nu = lp + (0.5 * dt) * lq
    lq_new = lq - dt * (g.T @ nu)
    lp_new = nu + (0.5 * dt) * lq_new
    return np.concatenate([lq_new, lp_new])


def _residual_gradients(model, weights_w, data_y, data_h, solution):
    """-2 H^T diag(w_k) (y_k - H x_k) for every observation k, in state space."""
    base = model.base_dim
    x_obs = solution.obs_states_base
    resid = data_y - x_obs @ data_h.T  # (K, J)
    grads = -2.0 * (weights_w * resid) @ data_h  # (K, base)
    return grads, resid


def wls_gradient(model: OdeModel, params, weights, data, solution: NumericalSolution,
                 scheme: str | Scheme | None = None) -> np.ndarray:
    """Gradient of the weighted residual objective via one backward sweep.

    ``solution`` must be the forward trajectory of ``model`` at ``params``
    (augmented beforehand if the model has system parameters). ``weights``
    may be a WeightMatrix or a raw (K, J) array. The sweep steps the costate
    with the paired backward scheme, injecting the residual gradient after
    completing the step to each observation node; the costate at the first
    node, read through the initial-state map, is the parameter gradient.
    """
    params = model.check_params(params)
    if model.sys_param_idx:
        raise ConfigurationError(
            "wls_gradient needs all parameters mapped to initial state; "
            "apply augment_with_parameters first"
        )
    if solution.model is not model and solution.model.name != model.name:
        raise ConfigurationError("solution was computed for a different model")
    if scheme is not None and get_scheme(scheme).name != solution.scheme.name:
        raise ConfigurationError(
            f"solution used scheme '{solution.scheme.name}', expected '{get_scheme(scheme).name}'"
        )
    if not np.array_equal(params, solution.params):
        raise ConfigurationError("solution was computed at different parameter values")

    w = np.asarray(getattr(weights, "w", weights), dtype=float)
    y = np.asarray(data.y, dtype=float)
    h = np.asarray(data.H, dtype=float)
    grid = solution.grid
    if w.shape != y.shape or len(y) != grid.n_obs:
        raise ConfigurationError("weights / data / grid dimensions disagree")

    inj, _ = _residual_gradients(model, w, y, h, solution)
    base = model.base_dim
    times = grid.node_times
    states = solution.states
    scheme_obj = solution.scheme

    obs_at_node = {int(n): k for k, n in enumerate(grid.obs_index)}
    lam = np.zeros(model.state_dim)
    last = grid.n_nodes - 1
    if last in obs_at_node:
        lam[:base] += inj[obs_at_node[last]]

    if scheme_obj.partitioned:
        stepper = lambda x, t, dt, lam: _verlet_adjoint_step(model, params, x, dt, lam)
    else:
        tab = scheme_obj.tableau
        try:
            bwd = backward_tableau(scheme_obj)
            stepper = lambda x, t, dt, lam: _rk_adjoint_step(model, params, tab, bwd, x, t, dt, lam)
        except ConfigurationError:
            stepper = lambda x, t, dt, lam: _rk_adjoint_step_transpose(model, params, tab, x, t, dt, lam)

    for n in range(last - 1, -1, -1):
        lam = stepper(states[n], times[n], times[n + 1] - times[n], lam)
        k = obs_at_node.get(n)
        if k is not None:
            lam[:base] += inj[k]

    grad = np.zeros(model.param_dim)
    grad[list(model.init_param_idx)] = lam[list(model.init_state_idx)]
    return grad


def wls_objective(model: OdeModel, params, weights, data, scheme, grid: TimeGrid) -> float:
    """The weighted residual objective itself, from a fresh forward integration."""
    sol = integrate(model, params, grid, scheme)
    w = np.asarray(getattr(weights, "w", weights), dtype=float)
    resid = data.y - sol.obs_states_base @ np.asarray(data.H).T
    return float(np.sum(w * resid * resid))


def fd_gradient(model: OdeModel, params, weights, data, scheme, grid: TimeGrid,
                step: float = 1e-6) -> np.ndarray:
    """Central finite differences of the weighted residual objective.

    One forward integration per perturbed coordinate; the step is relative to
    the coordinate's magnitude. Serves as the independent oracle for
    ``wls_gradient`` and never touches the adjoint machinery.
    """
    if step <= 0.0:
        raise ConfigurationError("fd step must be positive")
    params = np.asarray(params, dtype=float)
    grad = np.zeros(len(params))
    for i in range(len(params)):
        hi = step * max(1.0, abs(params[i]))
        up = params.copy()
        up[i] += hi
        dn = params.copy()
        dn[i] -= hi
        f_up = wls_objective(model, up, weights, data, scheme, grid)
        f_dn = wls_objective(model, dn, weights, data, scheme, grid)
        grad[i] = (f_up - f_dn) / (2.0 * hi)
    return grad
